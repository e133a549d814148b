#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <deque>
#include <limits>
#include <vector>

#include "bsr/errors.hpp"
#include "bsr/random.hpp"
#include "bsr/rgiva.hpp"
#include "bsr/spectral.hpp"
#include "bsr/stats.hpp"

namespace bsr {

enum class SizeBias { doob, rejection };

struct BiasDiagnostics {
  std::uint64_t proposals = 0;
  std::uint64_t cap_hits = 0;
  double cap = 4.0;

  double hit_rate() const { return proposals ? static_cast<double>(cap_hits) / static_cast<double>(proposals) : 0.0; }
  bool warning() const { return hit_rate() > 0.01; }
};

struct ProgenySample {
  double G = 0.0;
  std::vector<double> generations;  // volume per generation, generation 0 = root
  std::uint64_t nodes = 0;
  bool truncated = false;
};

// Branching process on [0,t] x W: a point x has Poisson children with
// intensity k_t(x,y) mu(dy), k_t(x,y) = int_0^t w_x w_y b. Marginally in the
// time variable u of the kernel integral the intensity is w_x(u) g(u) du with
//   g(u) = b(u) e^{L(u)} sum_i (K+i) A1_i(u),
// so children are drawn as: u ~ w_x g, then (type, birth) ~ a_i(s) e^{-L(s)}
// (K+i) on [0,u], then a path size-biased by W(u).
class BranchingProcess {
 public:
  BranchingProcess(const RateProfile& profile, double t, SizeBias bias = SizeBias::doob)
      : profile_(profile), field_(profile), growth_(profile_), t_(t), bias_(bias) {
    if (!(t > 0.0) || t > profile.horizon() + 1e-12) throw MalformedInput("branching horizon must lie in (0, T]");
    const auto n = profile.size();
    std::vector<double> g(n);
    for (int i = 0; i < profile.K; ++i) {
      std::vector<double> f(n);
      const auto& a = profile.a[static_cast<std::size_t>(i)];
      for (std::size_t k = 0; k < n; ++k) f[k] = a[k] * std::exp(-field_.L(profile.grid[k]));
      birth_.emplace_back(std::move(f), profile.h);
    }
    for (std::size_t k = 0; k < n; ++k) {
      const double u = profile.grid[k];
      double s = 0.0;
      for (int i = 0; i < profile.K; ++i) s += field_.seed(i) * birth_[static_cast<std::size_t>(i)](u);
      g[k] = profile.b[k] * std::exp(field_.L(u)) * s;
    }
    G_ = CumulativeDensity(std::move(g), profile.h);
  }

  BranchingProcess(const BranchingProcess&) = delete;
  BranchingProcess& operator=(const BranchingProcess&) = delete;

  double horizon() const { return t_; }
  const MomentField& field() const { return field_; }
  const GrowthSampler& growth() const { return growth_; }
  const BiasDiagnostics& diagnostics() const { return diag_; }

  double offspring_intensity(const ClusterTrajectory& x) const {
    double total = 0.0;
    for_each_piece(x, [&](double lo, double hi, double w) { total += w * G_.between(lo, hi); });
    return total;
  }

  ClusterTrajectory root(Rng& rng) const { return growth_.grow(profile_.K - 1, 0.0, t_, rng); }

  std::vector<ClusterTrajectory> sample_children(const ClusterTrajectory& x, Rng& rng) {
    std::vector<double> lo, hi, mass;
    double total = 0.0;
    for_each_piece(x, [&](double a, double b, double w) {
      const double m = w * G_.between(a, b);
      lo.push_back(a);
      hi.push_back(b);
      mass.push_back(m);
      total += m;
    });
    std::vector<ClusterTrajectory> kids;
    const auto count = poisson(rng, total);
    for (std::uint64_t c = 0; c < count; ++c) {
      double r = uniform01(rng) * total;
      std::size_t p = 0;
      while (p + 1 < mass.size() && r >= mass[p]) r -= mass[p++];
      const double u = G_.invert(G_(lo[p]) + uniform01(rng) * G_.between(lo[p], hi[p]));
      kids.push_back(child_at(u, rng));
    }
    return kids;
  }

  ProgenySample total_progeny(Rng& rng, double cap) {
    ProgenySample s;
    std::vector<ClusterTrajectory> frontier{root(rng)};
    while (!frontier.empty()) {
      double volume = 0.0;
      for (const auto& x : frontier) volume += static_cast<double>(x.size_at(t_));
      s.generations.push_back(volume);
      s.G += volume;
      s.nodes += frontier.size();
      if (s.G > cap) {
        s.truncated = true;
        break;
      }
      std::vector<ClusterTrajectory> next;
      for (const auto& x : frontier) {
        auto kids = sample_children(x, rng);
        for (auto& k : kids) next.push_back(std::move(k));
      }
      frontier.swap(next);
    }
    return s;
  }

  // Child conditioned on the kernel time u.
  ClusterTrajectory child_at(double u, Rng& rng) {
    const int K = profile_.K;
    std::vector<double> weight(static_cast<std::size_t>(K));
    double total = 0.0;
    for (int i = 0; i < K; ++i) {
      weight[static_cast<std::size_t>(i)] = field_.seed(i) * birth_[static_cast<std::size_t>(i)](u);
      total += weight[static_cast<std::size_t>(i)];
    }
    double r = uniform01(rng) * total;
    int type = 0;
    while (type + 1 < K && r >= weight[static_cast<std::size_t>(type)]) r -= weight[static_cast<std::size_t>(type++)];
    const auto& B = birth_[static_cast<std::size_t>(type)];
    const double s = B.invert(uniform01(rng) * B(u));
    if (bias_ == SizeBias::doob) return growth_.grow(type, s, t_, rng, u);
    // rejection against W(u) / (cap m(u)); the cap doubles on overflow
    const double m = field_.mean(type, s, u);
    for (;;) {
      auto y = growth_.grow(type, s, t_, rng);
      ++diag_.proposals;
      const double ratio = static_cast<double>(y.size_at(u)) / m;
      if (ratio > diag_.cap) {
        ++diag_.cap_hits;
        diag_.cap *= 2;
        continue;
      }
      if (uniform01(rng) * diag_.cap < ratio) return y;
    }
  }

 private:
  template <class F>
  void for_each_piece(const ClusterTrajectory& x, F&& f) const {
    if (x.birth >= t_) return;
    double a = x.birth;
    double w = x.seed;
    for (const auto& [tau, j] : x.jumps) {
      if (tau >= t_) break;
      f(a, tau, w);
      a = tau;
      w += j;
    }
    f(a, t_, w);
  }

  RateProfile profile_;
  MomentField field_;
  GrowthSampler growth_;
  double t_;
  SizeBias bias_;
  std::vector<CumulativeDensity> birth_;  // a_i e^{-L}
  CumulativeDensity G_;
  BiasDiagnostics diag_;
};

inline double default_progeny_cap(int K) { return 1e6 * (K + 1); }

// ---- estimators ------------------------------------------------------------

struct TailFit {
  double rate = 0.0;  // minus the slope of log P(G > m)
  double ci_low = 0.0, ci_high = 0.0;
  double m_low = 0.0, m_high = 0.0;
  std::size_t samples = 0;
  bool degenerate = false;
  bool inconclusive = false;
};

namespace detail {

inline double tail_slope(const std::vector<double>& sorted, double m_lo, double m_hi, std::size_t points) {
  const auto N = static_cast<double>(sorted.size());
  std::vector<double> x, y;
  for (std::size_t k = 0; k < points; ++k) {
    const double m = m_lo + (m_hi - m_lo) * static_cast<double>(k) / static_cast<double>(points - 1);
    const auto above = static_cast<double>(sorted.end() - std::upper_bound(sorted.begin(), sorted.end(), m));
    if (above <= 0) continue;
    x.push_back(m);
    y.push_back(std::log(above / N));
  }
  if (x.size() < 3) throw Inconclusive("too few tail points");
  return stats::least_squares(x, y).slope;
}

}  // namespace detail

// Exponential tail rate of the survival function on the window where it
// falls from 0.1 to 20/N (the deepest stretch with at least 20 exceedances).
inline TailFit tail_rate(std::vector<double> samples, std::uint64_t seed = 1, std::size_t bootstrap = 200) {
  TailFit fit;
  fit.samples = samples.size();
  std::sort(samples.begin(), samples.end());
  if (samples.front() == samples.back()) {
    fit.degenerate = true;
    fit.rate = INFINITY;
    return fit;
  }
  const auto N = samples.size();
  if (N < 1000) {
    fit.inconclusive = true;
    return fit;
  }
  auto window = [&](const std::vector<double>& s) {
    const double lo = stats::quantile_sorted(s, 0.9);
    const double hi = s[s.size() - 20];
    return std::pair{lo, hi};
  };
  const auto [lo, hi] = window(samples);
  fit.m_low = lo;
  fit.m_high = hi;
  if (!(hi > lo)) {
    fit.inconclusive = true;
    return fit;
  }
  fit.rate = -detail::tail_slope(samples, lo, hi, 40);
  Rng rng(seed);
  std::vector<double> rates, resample(N);
  for (std::size_t b = 0; b < bootstrap; ++b) {
    for (auto& v : resample) v = samples[uniform_index(rng, N)];
    std::sort(resample.begin(), resample.end());
    const auto [l, h] = window(resample);
    if (!(h > l)) continue;
    try {
      rates.push_back(-detail::tail_slope(resample, l, h, 40));
    } catch (const Inconclusive&) {
    }
  }
  if (rates.size() < bootstrap / 2) {
    fit.inconclusive = true;
    return fit;
  }
  std::sort(rates.begin(), rates.end());
  fit.ci_low = stats::quantile_sorted(rates, 0.025);
  fit.ci_high = stats::quantile_sorted(rates, 0.975);
  return fit;
}

struct GenerationRatio {
  double ratio = 0.0;
  double se = 0.0;
  std::vector<double> mean_volume;  // per generation
};

// Pooled ratio sum_{k=first+1}^{last} E G_k / sum_{k=first}^{last-1} E G_k.
inline GenerationRatio generation_ratio(const std::vector<ProgenySample>& samples, std::size_t first = 2,
                                        std::size_t last = 8) {
  GenerationRatio out;
  out.mean_volume.assign(last + 1, 0.0);
  std::vector<double> num, den;
  for (const auto& s : samples) {
    double x = 0, y = 0;
    for (std::size_t k = 0; k <= last && k < s.generations.size(); ++k) {
      out.mean_volume[k] += s.generations[k];
      if (k >= first && k < last) x += s.generations[k];
      if (k > first) y += s.generations[k];
    }
    den.push_back(x);
    num.push_back(y);
  }
  for (auto& m : out.mean_volume) m /= static_cast<double>(samples.size());
  const double X = stats::mean(den), Y = stats::mean(num);
  if (X <= 0.0) throw Inconclusive("no mass in the fitted generations");
  out.ratio = Y / X;
  std::vector<double> resid(num.size());
  for (std::size_t k = 0; k < num.size(); ++k) resid[k] = num[k] - out.ratio * den[k];
  out.se = stats::standard_error(resid) / X;
  return out;
}

// Independent estimate of Lambda(x): (1/n) sum over a sampled cloud of the
// pair integrals, whose expectation is int k_t(x,y) mu(dy).
inline double cloud_offspring_estimate(const ClusterTrajectory& x, const RateProfile& profile, double n,
                                       double t, Rng& rng) {
  const auto cloud = sample_cloud(profile, n, t, rng);
  const CumulativeDensity B(profile.b, profile.h);
  double total = 0.0;
  for (const auto& y : cloud.clusters) total += pair_kernel_integral(x, y, B, t);
  return total / n;
}

}  // namespace bsr
