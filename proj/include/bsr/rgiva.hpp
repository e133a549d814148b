#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <span>
#include <vector>

#include "bsr/errors.hpp"
#include "bsr/graphsim.hpp"
#include "bsr/hydro.hpp"
#include "bsr/random.hpp"

namespace bsr {

// Cumulative integral of a piecewise-linear density given on a uniform grid,
// with exact evaluation and inversion inside each cell.
class CumulativeDensity {
 public:
  CumulativeDensity() = default;
  CumulativeDensity(std::vector<double> values, double h) : f_(std::move(values)), h_(h) {
    F_.assign(f_.size(), 0.0);
    for (std::size_t k = 1; k < f_.size(); ++k) F_[k] = F_[k - 1] + 0.5 * h_ * (f_[k - 1] + f_[k]);
  }

  double h() const { return h_; }
  double end() const { return h_ * static_cast<double>(f_.size() - 1); }
  double density(double u) const { return RateProfile::interpolate(f_, h_, u); }

  double operator()(double u) const {
    if (u <= 0.0) return 0.0;
    if (u >= end()) return F_.back();
    auto k = static_cast<std::size_t>(u / h_);
    if (k >= f_.size() - 1) k = f_.size() - 2;
    const double x = u - h_ * static_cast<double>(k);
    return F_[k] + f_[k] * x + 0.5 * (f_[k + 1] - f_[k]) / h_ * x * x;
  }

  double between(double lo, double hi) const { return (*this)(hi) - (*this)(lo); }

  // Smallest u with F(u) = target (target in [0, F(end)]).
  double invert(double target) const {
    if (target <= 0.0) return 0.0;
    if (target >= F_.back()) return end();
    const auto it = std::upper_bound(F_.begin(), F_.end(), target);
    const auto k = static_cast<std::size_t>(it - F_.begin()) - 1;
    const double r = target - F_[k];
    const double a = f_[k], slope = (f_[k + 1] - f_[k]) / h_;
    double x;
    if (std::abs(slope) * h_ < 1e-12 * std::max(a, 1e-300)) {
      x = a > 0 ? r / a : 0.0;
    } else {
      // 0.5 slope x^2 + a x - r = 0, stable root
      const double disc = std::max(0.0, a * a + 2 * slope * r);
      x = 2 * r / (a + std::sqrt(disc));
    }
    return h_ * static_cast<double>(k) + std::clamp(x, 0.0, h_);
  }

 private:
  std::vector<double> f_, F_;
  double h_ = 1.0;
};

struct ClusterTrajectory {
  double birth = 0.0;
  int type = 0;  // 0-based; seed = K + type + 1
  int seed = 2;
  std::vector<std::pair<double, int>> jumps;  // (time, jump size), increasing times

  std::uint64_t size_at(double u) const {
    if (u < birth) return 0;
    std::uint64_t w = static_cast<std::uint64_t>(seed);
    for (const auto& [tau, j] : jumps) {
      if (tau > u) break;
      w += static_cast<std::uint64_t>(j);
    }
    return w;
  }

  std::uint64_t final_size() const {
    std::uint64_t w = static_cast<std::uint64_t>(seed);
    for (const auto& jp : jumps) w += static_cast<std::uint64_t>(jp.second);
    return w;
  }
};

// Growth law shared by the cloud and the branching process.
class GrowthSampler {
 public:
  explicit GrowthSampler(const RateProfile& p) : p_(&p), K_(p.K) {
    for (std::size_t k = 0; k < p.size(); ++k) {
      double s = 0.0;
      for (const auto& row : p.c) s += row[k];
      cmax_ = std::max(cmax_, s);
    }
  }

  double cmax() const { return cmax_; }

  // Grows a cluster of seed w0 born at s up to time v: a jump of size j at
  // rate W c_j. On (s, bias_until] the rates are (W + j) c_j instead, the
  // Doob transform that size-biases the path by W(bias_until).
  ClusterTrajectory grow(int type, double s, double v, Rng& rng, double bias_until = -1.0) const {
    ClusterTrajectory x;
    x.birth = s;
    x.type = type;
    x.seed = K_ + type + 1;
    if (cmax_ <= 0.0) return x;
    double t = s;
    double w = x.seed;
    std::vector<double> rates(static_cast<std::size_t>(K_));
    while (true) {
      const bool biased = t < bias_until;
      const double bound = (w + (biased ? K_ : 0)) * cmax_;
      double next = t + exponential(rng, bound);
      if (biased && next > bias_until) {
        // the dominating rate changes at bias_until; restart from there (memoryless)
        t = bias_until;
        continue;
      }
      if (next > v) break;
      t = next;
      double total = 0.0;
      for (int j = 1; j <= K_; ++j) {
        const double r = (w + (biased ? j : 0)) * p_->c_at(j, t);
        rates[static_cast<std::size_t>(j - 1)] = r;
        total += r;
      }
      double u = uniform01(rng) * bound;
      if (u >= total) continue;
      int j = 1;
      while (j < K_ && u >= rates[static_cast<std::size_t>(j - 1)]) {
        u -= rates[static_cast<std::size_t>(j - 1)];
        ++j;
      }
      x.jumps.emplace_back(t, j);
      w += j;
    }
    return x;
  }

 private:
  const RateProfile* p_;
  int K_;
  double cmax_ = 0.0;
};

struct ClusterCloud {
  double n = 0.0;
  double v = 0.0;
  std::vector<ClusterTrajectory> clusters;

  std::uint64_t total_volume() const {
    std::uint64_t s = 0;
    for (const auto& c : clusters) s += c.size_at(v);
    return s;
  }
};

inline constexpr double max_expected_cloud = 1e8;

inline ClusterCloud sample_cloud(const RateProfile& profile, double n, double v, Rng& rng) {
  if (!(v >= 0.0) || v > profile.horizon() + 1e-12) throw MalformedInput("cloud horizon must lie in [0, T]");
  ClusterCloud cloud;
  cloud.n = n;
  cloud.v = v;
  std::vector<CumulativeDensity> births;
  double expected = 0.0;
  for (int i = 0; i < profile.K; ++i) {
    births.emplace_back(profile.a[static_cast<std::size_t>(i)], profile.h);
    expected += n * births.back()(v);
  }
  if (expected > max_expected_cloud) throw MalformedInput("expected cloud size above 1e8; reduce n");
  const GrowthSampler growth(profile);
  for (int i = 0; i < profile.K; ++i) {
    const auto& B = births[static_cast<std::size_t>(i)];
    const double mass = B(v);
    const auto count = poisson(rng, n * mass);
    std::vector<double> times(count);
    for (auto& s : times) s = B.invert(uniform01(rng) * mass);
    std::sort(times.begin(), times.end());
    for (double s : times) cloud.clusters.push_back(growth.grow(i, s, v, rng));
  }
  return cloud;
}

// ---- linking -----------------------------------------------------------------------

inline double pair_kernel_integral(const ClusterTrajectory& x, const ClusterTrajectory& y,
                                   const CumulativeDensity& B, double v) {
  double t = std::max(x.birth, y.birth);
  if (t >= v) return 0.0;
  double wx = static_cast<double>(x.size_at(t)), wy = static_cast<double>(y.size_at(t));
  auto ix = std::upper_bound(x.jumps.begin(), x.jumps.end(), std::pair{t, 1 << 30});
  auto iy = std::upper_bound(y.jumps.begin(), y.jumps.end(), std::pair{t, 1 << 30});
  double total = 0.0;
  while (t < v) {
    const double nx = ix != x.jumps.end() ? ix->first : INFINITY;
    const double ny = iy != y.jumps.end() ? iy->first : INFINITY;
    const double next = std::min({nx, ny, v});
    total += wx * wy * B.between(t, next);
    t = next;
    if (nx == next) wx += (ix++)->second;
    if (ny == next) wy += (iy++)->second;
  }
  return total;
}

struct LinkedComponents {
  std::vector<std::uint32_t> component;  // component label per cluster
  std::vector<std::uint64_t> volume;     // volume per label
  std::uint64_t largest = 0;

  std::uint64_t volume_of(std::size_t cluster) const { return volume[component[cluster]]; }
};

enum class LinkMethod { poisson_edges, pairwise };

inline constexpr std::size_t pairwise_guard = 30000;

namespace detail {

inline LinkedComponents label_components(DisjointForest& f, const ClusterCloud& cloud) {
  LinkedComponents out;
  const auto m = cloud.clusters.size();
  out.component.assign(m, 0);
  std::vector<std::int64_t> label(m, -1);
  for (std::size_t k = 0; k < m; ++k) {
    const auto r = f.find(static_cast<std::uint32_t>(k));
    if (label[r] < 0) {
      label[r] = static_cast<std::int64_t>(out.volume.size());
      out.volume.push_back(0);
    }
    out.component[k] = static_cast<std::uint32_t>(label[r]);
    out.volume[out.component[k]] += cloud.clusters[k].size_at(cloud.v);
  }
  for (auto v : out.volume) out.largest = std::max(out.largest, v);
  return out;
}

// Fenwick tree over nonnegative integer weights with weighted sampling.
class WeightTree {
 public:
  explicit WeightTree(std::size_t n) : t_(n + 1, 0) {
    for (top_ = 1; top_ * 2 <= n; top_ *= 2) {
    }
  }
  void add(std::size_t i, std::int64_t d) {
    total_ += d;
    for (++i; i < t_.size(); i += i & (~i + 1)) t_[i] += d;
  }
  std::int64_t total() const { return total_; }
  // index whose cumulative range contains r, 0 <= r < total
  std::size_t find(std::int64_t r) const {
    std::size_t pos = 0;
    for (std::size_t step = top_; step > 0; step >>= 1) {
      if (pos + step < t_.size() && t_[pos + step] <= r) {
        pos += step;
        r -= t_[pos];
      }
    }
    return pos;
  }

 private:
  std::vector<std::int64_t> t_;
  std::size_t top_ = 1;
  std::int64_t total_ = 0;
};

}  // namespace detail

// Links cluster pairs independently with probability 1 - exp(-(1/n) int_0^v w_x w_y b).
// poisson_edges realizes this exactly through the superposed Poisson edge
// process: between consecutive births/jumps the weights are constant, so a
// Poisson((sum w)^2 dB / 2n) number of ordered pairs is drawn with
// probabilities w_x w_y / (sum w)^2, and diagonal draws are discarded.
// pairwise evaluates every pair integral and draws one uniform per pair.
inline LinkedComponents link_clusters(const ClusterCloud& cloud, const RateProfile& profile, Rng& rng,
                                      LinkMethod method = LinkMethod::poisson_edges) {
  const auto m = cloud.clusters.size();
  const double v = cloud.v;
  if (m == 0) return {};
  DisjointForest forest(m, 1);
  const CumulativeDensity B(profile.b, profile.h);
  if (method == LinkMethod::pairwise) {
    if (m > pairwise_guard) throw MalformedInput("pairwise linking limited to 3e4 clusters; use a smaller n");
    for (std::size_t x = 0; x < m; ++x) {
      for (std::size_t y = x + 1; y < m; ++y) {
        const double I = pair_kernel_integral(cloud.clusters[x], cloud.clusters[y], B, v);
        const double u = uniform01(rng);
        if (I > 0.0 && u < -std::expm1(-I / cloud.n)) forest.unite(static_cast<std::uint32_t>(x), static_cast<std::uint32_t>(y));
      }
    }
    return detail::label_components(forest, cloud);
  }

  struct Change {
    double time;
    std::uint32_t cluster;
    int delta;
  };
  std::vector<Change> changes;
  for (std::size_t k = 0; k < m; ++k) {
    const auto& c = cloud.clusters[k];
    if (c.birth >= v) continue;
    changes.push_back({c.birth, static_cast<std::uint32_t>(k), c.seed});
    for (const auto& [tau, j] : c.jumps) {
      if (tau <= v) changes.push_back({tau, static_cast<std::uint32_t>(k), j});
    }
  }
  std::sort(changes.begin(), changes.end(), [](const Change& a, const Change& b) { return a.time < b.time; });
  detail::WeightTree weights(m);
  double t = changes.empty() ? v : changes.front().time;
  std::size_t next = 0;
  while (t < v) {
    while (next < changes.size() && changes[next].time <= t) {
      weights.add(changes[next].cluster, changes[next].delta);
      ++next;
    }
    const double until = next < changes.size() ? std::min(changes[next].time, v) : v;
    const double W = static_cast<double>(weights.total());
    const double mean = W * W * B.between(t, until) / (2 * cloud.n);
    const auto events = poisson(rng, mean);
    for (std::uint64_t e = 0; e < events; ++e) {
      const auto x = weights.find(static_cast<std::int64_t>(uniform_index(rng, static_cast<std::uint64_t>(weights.total()))));
      const auto y = weights.find(static_cast<std::int64_t>(uniform_index(rng, static_cast<std::uint64_t>(weights.total()))));
      if (x != y) forest.unite(static_cast<std::uint32_t>(x), static_cast<std::uint32_t>(y));
    }
    t = until;
  }
  return detail::label_components(forest, cloud);
}

// Shared-uniform variant for coupling tests: pair (x,y) uses the uniform
// derived from (seed, x, y), so the same uniforms drive different profiles.
inline LinkedComponents link_clusters_coupled(const ClusterCloud& cloud, const RateProfile& profile,
                                              std::uint64_t seed) {
  const auto m = cloud.clusters.size();
  if (m > pairwise_guard) throw MalformedInput("pairwise linking limited to 3e4 clusters; use a smaller n");
  DisjointForest forest(std::max<std::size_t>(m, 1), 1);
  const CumulativeDensity B(profile.b, profile.h);
  for (std::size_t x = 0; x < m; ++x) {
    for (std::size_t y = x + 1; y < m; ++y) {
      const double u = static_cast<double>(splitmix64(seed ^ splitmix64(x * 0x100000000ULL + y)) >> 11) * 0x1.0p-53;
      const double I = pair_kernel_integral(cloud.clusters[x], cloud.clusters[y], B, cloud.v);
      if (I > 0.0 && u < -std::expm1(-I / cloud.n)) forest.unite(static_cast<std::uint32_t>(x), static_cast<std::uint32_t>(y));
    }
  }
  if (m == 0) return {};
  return detail::label_components(forest, cloud);
}

struct RootComponent {
  std::uint64_t volume = 0;
  std::uint64_t root_size = 0;
  std::size_t cloud_size = 0;
};

// Palm version: one extra cluster born at time 0 with type K (seed 2K).
inline RootComponent conditioned_root_component(const RateProfile& profile, double n, double t, Rng& rng,
                                                LinkMethod method = LinkMethod::poisson_edges) {
  auto cloud = sample_cloud(profile, n, t, rng);
  const GrowthSampler growth(profile);
  cloud.clusters.insert(cloud.clusters.begin(), growth.grow(profile.K - 1, 0.0, t, rng));
  const auto linked = link_clusters(cloud, profile, rng, method);
  return {linked.volume_of(0), cloud.clusters[0].size_at(t), cloud.clusters.size()};
}

}  // namespace bsr
