#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <span>
#include <vector>

#include "bsr/errors.hpp"

namespace bsr::stats {

inline double mean(std::span<const double> x) {
  if (x.empty()) throw MalformedInput("mean of an empty sample");
  return std::accumulate(x.begin(), x.end(), 0.0) / static_cast<double>(x.size());
}

inline double variance(std::span<const double> x) {
  if (x.size() < 2) return 0.0;
  const double m = mean(x);
  double s = 0.0;
  for (double v : x) s += (v - m) * (v - m);
  return s / static_cast<double>(x.size() - 1);
}

inline double standard_error(std::span<const double> x) {
  return std::sqrt(variance(x) / static_cast<double>(x.size()));
}

inline double median(std::vector<double> x) {
  if (x.empty()) throw MalformedInput("median of an empty sample");
  std::sort(x.begin(), x.end());
  const auto n = x.size();
  return n % 2 ? x[n / 2] : 0.5 * (x[n / 2 - 1] + x[n / 2]);
}

// Lower empirical quantile: the ceil(q n)-th order statistic.
inline double quantile_sorted(std::span<const double> sorted, double q) {
  if (sorted.empty()) throw MalformedInput("quantile of an empty sample");
  const auto n = static_cast<double>(sorted.size());
  auto k = static_cast<std::size_t>(std::ceil(q * n));
  k = std::clamp<std::size_t>(k, 1, sorted.size());
  return sorted[k - 1];
}

struct QuantileInterval {
  double q = 0.0;
  double estimate = 0.0;
  double lower = 0.0;
  double upper = 0.0;
};

// Distribution-free interval from order statistics, using the normal
// approximation to Binomial(n, q) for the rank (z = 1.96 by default).
inline QuantileInterval quantile_interval(std::vector<double> x, double q, double z = 1.96) {
  std::sort(x.begin(), x.end());
  const auto n = static_cast<double>(x.size());
  const double spread = z * std::sqrt(n * q * (1 - q));
  auto rank = [&](double r) {
    const auto k = static_cast<long long>(std::ceil(r));
    return static_cast<std::size_t>(std::clamp<long long>(k, 1, static_cast<long long>(x.size())));
  };
  return {q, quantile_sorted(x, q), x[rank(n * q - spread) - 1], x[rank(n * q + spread + 1) - 1]};
}

struct LinearFit {
  double slope = 0.0;
  double intercept = 0.0;
  double slope_se = 0.0;
  std::size_t points = 0;
};

inline LinearFit least_squares(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size() || x.size() < 2) throw MalformedInput("least squares needs >= 2 paired points");
  const auto n = static_cast<double>(x.size());
  const double mx = mean(x), my = mean(y);
  double sxx = 0, sxy = 0;
  for (std::size_t k = 0; k < x.size(); ++k) {
    sxx += (x[k] - mx) * (x[k] - mx);
    sxy += (x[k] - mx) * (y[k] - my);
  }
  if (sxx == 0.0) throw NumericalError("least squares with constant abscissa");
  LinearFit f;
  f.slope = sxy / sxx;
  f.intercept = my - f.slope * mx;
  f.points = x.size();
  if (x.size() > 2) {
    double rss = 0;
    for (std::size_t k = 0; k < x.size(); ++k) {
      const double r = y[k] - f.intercept - f.slope * x[k];
      rss += r * r;
    }
    f.slope_se = std::sqrt(rss / (n - 2) / sxx);
  }
  return f;
}

}  // namespace bsr::stats
