#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "bsr/errors.hpp"
#include "bsr/hydro.hpp"
#include "bsr/random.hpp"
#include "bsr/rules.hpp"

namespace bsr {

// Union-find over n vertices (union by size, path halving) with incremental
// statistics: size histogram, vertex counts per capped class, sum of squared
// component sizes and the largest component.
class DisjointForest {
 public:
  DisjointForest(std::uint64_t n, int K) : n_(n), K_(K) {
    if (n < 1 || n > (std::uint64_t{1} << 31)) throw MalformedInput("n must lie in [1, 2^31]");
    parent_.resize(n);
    size_.assign(n, 1);
    for (std::uint32_t v = 0; v < n; ++v) parent_[v] = v;
    histogram_.assign(n + 1, 0);
    histogram_[1] = n;
    class_vertices_.assign(static_cast<std::size_t>(K) + 1, 0);
    class_vertices_[0] = n;
    sum_squares_ = n;
    components_ = n;
  }

  std::uint64_t n() const { return n_; }
  int K() const { return K_; }

  std::uint32_t find(std::uint32_t v) {
    while (parent_[v] != v) {
      parent_[v] = parent_[parent_[v]];
      v = parent_[v];
    }
    return v;
  }

  std::uint64_t component_size(std::uint32_t v) { return size_[find(v)]; }
  ComponentClass component_class(std::uint32_t v) { return classify(component_size(v), K_); }

  // Returns false (no change) when both vertices already share a component.
  bool unite(std::uint32_t a, std::uint32_t b) {
    a = find(a);
    b = find(b);
    if (a == b) return false;
    if (size_[a] < size_[b]) std::swap(a, b);
    const std::uint64_t sa = size_[a], sb = size_[b], s = sa + sb;
    parent_[b] = a;
    size_[a] = static_cast<std::uint32_t>(s);
    --histogram_[sa];
    --histogram_[sb];
    ++histogram_[s];
    class_vertices_[index_of(sa)] -= sa;
    class_vertices_[index_of(sb)] -= sb;
    class_vertices_[index_of(s)] += s;
    sum_squares_ += 2 * sa * sb;
    largest_ = std::max(largest_, s);
    --components_;
    return true;
  }

  std::uint64_t largest() const { return largest_; }
  std::uint64_t components() const { return components_; }
  std::uint64_t sum_squares() const { return sum_squares_; }
  const std::vector<std::uint64_t>& class_vertices() const { return class_vertices_; }
  const std::vector<std::uint64_t>& histogram() const { return histogram_; }

  double class_fraction(std::size_t index) const {
    return static_cast<double>(class_vertices_[index]) / static_cast<double>(n_);
  }

  // Full consistency scan (O(n)); used in tests and periodic spot checks.
  bool consistent() {
    std::uint64_t total = 0, roots = 0, biggest = 0;
    std::vector<std::uint64_t> by_class(class_vertices_.size(), 0);
    for (std::uint32_t v = 0; v < n_; ++v) {
      if (find(v) != v) continue;
      ++roots;
      total += size_[v];
      biggest = std::max<std::uint64_t>(biggest, size_[v]);
      by_class[index_of(size_[v])] += size_[v];
    }
    return total == n_ && roots == components_ && biggest == largest_ && by_class == class_vertices_;
  }

 private:
  std::size_t index_of(std::uint64_t s) const {
    return s <= static_cast<std::uint64_t>(K_) ? static_cast<std::size_t>(s - 1) : static_cast<std::size_t>(K_);
  }

  std::uint64_t n_;
  int K_;
  std::vector<std::uint32_t> parent_, size_;
  std::vector<std::uint64_t> histogram_, class_vertices_;
  std::uint64_t sum_squares_ = 0;
  std::uint64_t largest_ = 1;
  std::uint64_t components_ = 0;
};

struct ComponentCensus {
  double time = 0.0;
  std::uint64_t n = 0;
  std::vector<double> x;  // class fractions, index = ComponentClass::index
  std::uint64_t L1 = 0;
  double S2 = 0.0;
  std::uint64_t first_component = 0;  // size of the first BSR* component, 0 if none yet
  std::uint64_t events = 0;           // events consumed before the census
  std::vector<std::pair<std::uint64_t, std::uint64_t>> histogram;  // (size, count), optional

  double singleton_fraction() const { return x.front(); }
};

enum class SamplingMode { vertex_quadruples, edge_pairs };

struct EventOutcome {
  Quadruple classes;
  EdgeChoice choice = EdgeChoice::second;
  bool merged = false;
};

// One bounded-size-rule process on n vertices. Events are applied in order;
// the caller owns the notion of time.
class Simulator {
 public:
  Simulator(const RuleTable& rule, std::uint64_t n, SamplingMode mode = SamplingMode::vertex_quadruples)
      : rule_(rule), forest_(n, rule.K()), mode_(mode) {
    if (n < 4) throw MalformedInput("simulation needs n >= 4");
  }

  const RuleTable& rule() const { return rule_; }
  DisjointForest& forest() { return forest_; }
  std::uint64_t events() const { return events_; }

  EventOutcome apply(const std::array<std::uint32_t, 4>& v) {
    EventOutcome out;
    for (std::size_t p = 0; p < 4; ++p) out.classes[p] = forest_.component_class(v[p]);
    out.choice = decide(rule_, out.classes);
    const auto [a, b] = out.choice == EdgeChoice::first ? std::pair{v[0], v[1]} : std::pair{v[2], v[3]};
    out.merged = a != b && forest_.unite(a, b);
    if (out.merged && !first_root_ && forest_.component_size(a) > static_cast<std::uint64_t>(rule_.K())) {
      first_root_ = a;
    }
    ++events_;
    return out;
  }

  std::array<std::uint32_t, 4> draw(Rng& rng) const {
    const auto n = forest_.n();
    std::array<std::uint32_t, 4> v;
    if (mode_ == SamplingMode::vertex_quadruples) {
      for (auto& x : v) x = static_cast<std::uint32_t>(uniform_index(rng, n));
    } else {
      for (std::size_t e = 0; e < 2; ++e) {
        v[2 * e] = static_cast<std::uint32_t>(uniform_index(rng, n));
        do v[2 * e + 1] = static_cast<std::uint32_t>(uniform_index(rng, n));
        while (v[2 * e + 1] == v[2 * e]);
      }
    }
    return v;
  }

  EventOutcome step(Rng& rng) { return apply(draw(rng)); }

  std::uint64_t first_component_size() {
    return first_root_ ? forest_.component_size(*first_root_) : 0;
  }

  ComponentCensus census(double time, bool with_histogram = false) {
    ComponentCensus c;
    c.time = time;
    c.n = forest_.n();
    for (std::size_t i = 0; i < forest_.class_vertices().size(); ++i) c.x.push_back(forest_.class_fraction(i));
    c.L1 = forest_.largest();
    c.S2 = static_cast<double>(forest_.sum_squares()) / static_cast<double>(c.n);
    c.first_component = first_component_size();
    c.events = events_;
    if (with_histogram) {
      const auto& h = forest_.histogram();
      for (std::size_t s = 1; s < h.size(); ++s) {
        if (h[s] > 0) c.histogram.emplace_back(s, h[s]);
      }
    }
    return c;
  }

 private:
  RuleTable rule_;
  DisjointForest forest_;
  SamplingMode mode_;
  std::uint64_t events_ = 0;
  std::optional<std::uint32_t> first_root_;
};

// ---- rate audit bookkeeping ------------------------------------------------------

// Categories: a_i (new component of size K+i), c_i (class-i component joined
// to a BSR* vertex), b (edge with both endpoints in BSR*).
struct AuditCategory {
  std::string name;
  std::uint64_t count = 0;
  double predicted = 0.0;    // limit rates against empirical BSR* counts
  double compensator = 0.0;  // sum over events of the exact conditional probability
  double compensator_variance = 0.0;

  double ratio() const { return predicted > 0 ? static_cast<double>(count) / predicted : (count == 0 ? 1.0 : INFINITY); }
  double z() const {
    if (predicted <= 0) return count == 0 ? 0.0 : INFINITY;
    return (static_cast<double>(count) - predicted) / std::sqrt(predicted);
  }
  double compensator_z() const {
    if (compensator_variance <= 0) return count == 0 ? 0.0 : INFINITY;
    return (static_cast<double>(count) - compensator) / std::sqrt(compensator_variance);
  }
};

struct RateAudit {
  double v1 = 0.0, v2 = 0.0;
  std::vector<AuditCategory> categories;
  bool insufficient = false;  // some category below 100 events: widen the window
};

namespace detail {

// Tracks the categories during a run; the pair-intensity polynomials are
// evaluated only when the class fractions change.
class AuditTracker {
 public:
  AuditTracker(const RuleTable& rule, const RateProfile* profile, double v1, double v2)
      : K_(rule.K()), profile_(profile), v1_(v1), v2_(v2) {
    const auto model = build_rate_model(rule);
    for (int i = 1; i <= K_; ++i) {
      Polynomial a(K_ + 1);
      for (int i1 = 1; i1 <= K_; ++i1) {
        for (int i2 = i1; i2 <= K_; ++i2) {
          if (i1 + i2 == K_ + i) a += pair_intensity(rule, i1 - 1, i2 - 1);
        }
      }
      probability_.push_back(a.scaled(2));
      audit_.categories.push_back({"a_" + std::to_string(i)});
    }
    for (int i = 1; i <= K_; ++i) {
      probability_.push_back(model.f_omega[static_cast<std::size_t>(i - 1)].scaled(2));
      audit_.categories.push_back({"c_" + std::to_string(i)});
    }
    probability_.push_back(model.f_omega_omega.scaled(2));
    audit_.categories.push_back({"b"});
    audit_.v1 = v1;
    audit_.v2 = v2;
    p_.assign(probability_.size(), 0.0);
  }

  bool in_window(double t) const { return t > v1_ && t <= v2_; }

  // Event at time t (state before the event), with event-time spacing dt used
  // for the limit-rate integral of the interval that precedes it.
  void record(const EventOutcome& e, DisjointForest& f, double t, double dt, bool state_changed) {
    if (!in_window(t)) return;
    if (state_changed || !initialized_) refresh(f);
    initialized_ = true;
    const auto [p, q] = e.choice == EdgeChoice::first ? std::pair{e.classes[0], e.classes[1]}
                                                      : std::pair{e.classes[2], e.classes[3]};
    const int ip = p.index(K_), iq = q.index(K_);
    const std::size_t nb = static_cast<std::size_t>(K_);
    if (ip < K_ && iq < K_ && ip + iq + 2 > K_) audit_.categories[static_cast<std::size_t>(ip + iq + 2 - K_ - 1)].count++;
    if ((ip == K_) != (iq == K_)) audit_.categories[nb + static_cast<std::size_t>(std::min(ip, iq))].count++;
    if (ip == K_ && iq == K_) audit_.categories.back().count++;
    for (std::size_t k = 0; k < p_.size(); ++k) {
      audit_.categories[k].compensator += p_[k];
      audit_.categories[k].compensator_variance += p_[k] * (1 - p_[k]);
    }
    if (profile_) {
      const double n = static_cast<double>(f.n());
      const double big = static_cast<double>(f.class_vertices()[nb]);
      for (int i = 0; i < K_; ++i) {
        audit_.categories[static_cast<std::size_t>(i)].predicted += dt * n * profile_->a_at(i, t);
        audit_.categories[nb + static_cast<std::size_t>(i)].predicted += dt * big * profile_->c_at(i + 1, t);
      }
      audit_.categories.back().predicted += dt * profile_->b_at(t) * big * big / (2 * n);
    }
  }

  RateAudit finish() {
    for (const auto& c : audit_.categories) {
      if (c.count < 100) audit_.insufficient = true;
    }
    return audit_;
  }

 private:
  void refresh(DisjointForest& f) {
    std::vector<double> x(static_cast<std::size_t>(K_) + 1);
    for (std::size_t i = 0; i < x.size(); ++i) x[i] = f.class_fraction(i);
    for (std::size_t k = 0; k < p_.size(); ++k) p_[k] = probability_[k](x);
  }

  int K_;
  const RateProfile* profile_;
  double v1_, v2_;
  std::vector<Polynomial> probability_;
  std::vector<double> p_;
  bool initialized_ = false;
  RateAudit audit_;
};

}  // namespace detail

// ---- runs ------------------------------------------------------------------------

struct SimulationOptions {
  SamplingMode mode = SamplingMode::vertex_quadruples;
  bool exact_times = false;      // exponential inter-arrivals instead of k/N_ev labels
  bool histograms = false;
  double threshold = 0.0;        // record first time L1 >= threshold (0: off)
  const RateProfile* audit_profile = nullptr;
  std::optional<std::pair<double, double>> audit_window;
  std::uint64_t check_every = 0;  // full forest consistency scan period (0: off)
};

struct SimulationResult {
  std::string rule_name;
  std::string mode;
  std::uint64_t n = 0;
  std::uint64_t seed = 0;
  std::uint64_t events = 0;
  std::vector<ComponentCensus> censuses;
  double threshold_time = std::numeric_limits<double>::quiet_NaN();
  std::optional<RateAudit> audit;
};

namespace detail {

inline std::vector<double> sorted_checkpoints(std::vector<double> c, double t_max) {
  for (double t : c) {
    if (!(t >= 0.0 && t <= t_max)) throw MalformedInput("checkpoints must lie in [0, t_max]");
  }
  std::sort(c.begin(), c.end());
  return c;
}

}  // namespace detail

// Continuous time: quadruple events at total rate n/2. By default the event
// count is drawn as Poisson(n t_max / 2) and event k carries the label
// t_max k / N_ev; with exact_times the arrivals are simulated directly.
inline SimulationResult run_continuous(const RuleTable& rule, std::uint64_t n, double t_max,
                                       const std::vector<double>& checkpoints, std::uint64_t seed,
                                       const SimulationOptions& opt = {}) {
  if (!(t_max >= 0.0)) throw MalformedInput("t_max must be >= 0");
  if (static_cast<double>(n) * t_max > 4e12) throw MalformedInput("n * t_max too large");
  const auto cps = detail::sorted_checkpoints(checkpoints, t_max);
  Simulator sim(rule, n, opt.mode);
  Rng rng(seed);
  SimulationResult res;
  res.rule_name = rule.name();
  res.mode = "continuous";
  res.n = n;
  res.seed = seed;

  std::optional<detail::AuditTracker> audit;
  if (opt.audit_window) audit.emplace(rule, opt.audit_profile, opt.audit_window->first, opt.audit_window->second);

  const double rate = 0.5 * static_cast<double>(n);
  const std::uint64_t total = opt.exact_times ? 0 : poisson(rng, rate * t_max);
  const double spacing = total > 0 ? t_max / static_cast<double>(total) : 0.0;
  std::size_t next = 0;
  double t = 0.0;
  bool changed = true;
  for (std::uint64_t k = 1;; ++k) {
    double tk;
    if (opt.exact_times) {
      tk = t + exponential(rng, rate);
      if (tk > t_max) break;
    } else {
      if (k > total) break;
      tk = t_max * static_cast<double>(k) / static_cast<double>(total);
    }
    while (next < cps.size() && cps[next] < tk) res.censuses.push_back(sim.census(cps[next++], opt.histograms));
    const double dt = opt.exact_times ? tk - t : spacing;
    const auto v = sim.draw(rng);
    if (audit && audit->in_window(tk)) {
      // state before the event determines its conditional probabilities
      EventOutcome peek;
      for (std::size_t p = 0; p < 4; ++p) peek.classes[p] = sim.forest().component_class(v[p]);
      peek.choice = decide(rule, peek.classes);
      audit->record(peek, sim.forest(), tk, dt, changed);
    }
    const auto out = sim.apply(v);
    changed = out.merged;
    t = tk;
    if (opt.threshold > 0 && std::isnan(res.threshold_time) &&
        static_cast<double>(sim.forest().largest()) >= opt.threshold) {
      res.threshold_time = tk;
    }
    if (opt.check_every && sim.events() % opt.check_every == 0 && !sim.forest().consistent()) {
      throw NumericalError("forest invariants violated");
    }
  }
  while (next < cps.size()) res.censuses.push_back(sim.census(cps[next++], opt.histograms));
  res.events = sim.events();
  if (audit) res.audit = audit->finish();
  return res;
}

// Discrete time: step k happens at time 2k/n; a checkpoint t reports the state
// after floor(n t / 2) steps.
inline SimulationResult run_discrete(const RuleTable& rule, std::uint64_t n, std::uint64_t steps,
                                     const std::vector<double>& checkpoints, std::uint64_t seed,
                                     const SimulationOptions& opt = {}) {
  const double t_max = 2.0 * static_cast<double>(steps) / static_cast<double>(n);
  // a checkpoint is admissible when its step floor(n t / 2) has been simulated
  const auto cps = detail::sorted_checkpoints(checkpoints, t_max + 2.0 / static_cast<double>(n));
  Simulator sim(rule, n, opt.mode);
  Rng rng(seed);
  SimulationResult res;
  res.rule_name = rule.name();
  res.mode = "discrete";
  res.n = n;
  res.seed = seed;
  std::size_t next = 0;
  auto step_of = [&](double t) {
    return static_cast<std::uint64_t>(std::floor(0.5 * static_cast<double>(n) * t + 1e-9));
  };
  for (double t : cps) {
    if (step_of(t) > steps) throw MalformedInput("checkpoint beyond the last simulated step");
  }
  for (std::uint64_t k = 0;; ++k) {
    while (next < cps.size() && step_of(cps[next]) <= k) res.censuses.push_back(sim.census(cps[next++], opt.histograms));
    if (k == steps) break;
    sim.step(rng);
    if (opt.threshold > 0 && std::isnan(res.threshold_time) &&
        static_cast<double>(sim.forest().largest()) >= opt.threshold) {
      res.threshold_time = 2.0 * static_cast<double>(k + 1) / static_cast<double>(n);
    }
  }
  res.events = sim.events();
  return res;
}

// sup over checkpoints of max_i |x_{i,n}(u) - x_i(u)|.
inline double hydrodynamic_deviation(const RuleTable& rule, const OdeSolution& sol, std::uint64_t n,
                                     std::uint64_t seed, std::size_t checkpoints = 400) {
  std::vector<double> cps;
  for (std::size_t k = 0; k <= checkpoints; ++k) cps.push_back(sol.horizon * static_cast<double>(k) / static_cast<double>(checkpoints));
  SimulationOptions opt;
  opt.exact_times = true;
  const auto res = run_continuous(rule, n, sol.horizon, cps, seed, opt);
  double worst = 0.0;
  for (const auto& c : res.censuses) {
    const auto x = sol.state_at(c.time);
    for (std::size_t i = 0; i < x.size(); ++i) worst = std::max(worst, std::abs(c.x[i] - x[i]));
  }
  return worst;
}

inline RateAudit rate_audit(const RuleTable& rule, const RateProfile& profile, std::uint64_t n, double v1,
                            double v2, std::uint64_t seed) {
  if (!(v1 >= 0.0 && v2 > v1 && v2 <= profile.horizon())) throw MalformedInput("audit window must lie inside [0, T]");
  SimulationOptions opt;
  opt.exact_times = true;
  opt.audit_profile = &profile;
  opt.audit_window = std::pair{v1, v2};
  return *run_continuous(rule, n, v2, {}, seed, opt).audit;
}

// ---- serialization ---------------------------------------------------------------

inline std::string census_csv_header(int K) {
  std::string h = "time";
  for (int i = 1; i <= K; ++i) h += ",x" + std::to_string(i);
  return h + ",x_omega,L1,S2";
}

inline std::string census_csv_row(const ComponentCensus& c) {
  std::string row = std::to_string(c.time);
  char buf[64];
  for (double v : c.x) {
    std::snprintf(buf, sizeof buf, ",%.10g", v);
    row += buf;
  }
  std::snprintf(buf, sizeof buf, ",%llu,%.10g", static_cast<unsigned long long>(c.L1), c.S2);
  return row + buf;
}

inline nlohmann::json to_json(const RateAudit& a) {
  nlohmann::json cats = nlohmann::json::array();
  for (const auto& c : a.categories) {
    cats.push_back({{"name", c.name}, {"count", c.count}, {"predicted", c.predicted}, {"ratio", c.ratio()},
                    {"z", c.z()}, {"compensator", c.compensator}, {"compensator_z", c.compensator_z()}});
  }
  return {{"kind", "rate-audit"}, {"v1", a.v1}, {"v2", a.v2}, {"insufficient", a.insufficient}, {"categories", cats}};
}

}  // namespace bsr
