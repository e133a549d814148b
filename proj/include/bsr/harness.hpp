#pragma once

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <mutex>
#include <nlohmann/json.hpp>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "bsr/branching.hpp"
#include "bsr/errors.hpp"
#include "bsr/graphsim.hpp"
#include "bsr/hydro.hpp"
#include "bsr/random.hpp"
#include "bsr/rgiva.hpp"
#include "bsr/rules.hpp"
#include "bsr/spectral.hpp"
#include "bsr/stats.hpp"

namespace bsr::harness {

inline constexpr const char* version_tag = "bsrlab 0.1.0";

// ---- parallel trials -------------------------------------------------------------

using Clock = std::chrono::steady_clock;

inline unsigned default_threads() {
  const unsigned hw = std::thread::hardware_concurrency();
  return hw ? hw : 1;
}

// Runs body(state, i) for i in [0, count) on up to `threads` workers, each
// with its own state from make_state(). Indices are handed out in order, so
// when the deadline stops the run early the finished trials are exactly
// [0, returned). Results must be written to per-index slots.
template <class MakeState, class Body>
std::size_t parallel_trials(std::size_t count, unsigned threads, MakeState&& make_state, Body&& body,
                            std::optional<Clock::time_point> deadline = std::nullopt) {
  if (count == 0) return 0;
  threads = std::max(1u, std::min<unsigned>(threads ? threads : default_threads(), static_cast<unsigned>(count)));
  std::atomic<std::size_t> next{0};
  std::atomic<bool> stop{false};
  std::exception_ptr failure;
  std::mutex failure_mutex;
  auto worker = [&] {
    try {
      auto state = make_state();
      for (;;) {
        if (stop.load() || (deadline && Clock::now() > *deadline)) {
          stop = true;
          return;
        }
        const auto i = next.fetch_add(1);
        if (i >= count) return;
        body(state, i);
      }
    } catch (...) {
      std::lock_guard lock(failure_mutex);
      if (!failure) failure = std::current_exception();
      stop = true;
    }
  };
  std::vector<std::thread> pool;
  for (unsigned k = 1; k < threads; ++k) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();
  if (failure) std::rethrow_exception(failure);
  return std::min(next.load(), count);
}

template <class Body>
std::size_t parallel_for(std::size_t count, unsigned threads, Body&& body,
                         std::optional<Clock::time_point> deadline = std::nullopt) {
  return parallel_trials(
      count, threads, [] { return 0; }, [&](int&, std::size_t i) { body(i); }, deadline);
}

struct RunControl {
  unsigned threads = 0;        // 0: hardware concurrency
  double budget_seconds = 0;   // 0: unlimited

  std::optional<Clock::time_point> deadline() const {
    if (budget_seconds <= 0) return std::nullopt;
    return Clock::now() + std::chrono::duration_cast<Clock::duration>(std::chrono::duration<double>(budget_seconds));
  }
};

// ---- cached critical runs ------------------------------------------------------------

inline std::string hex(std::uint64_t x) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(x));
  return buf;
}

inline std::string rule_fingerprint(const RuleTable& rule, const CriticalOptions& opt) {
  nlohmann::json key = {{"rule", to_json(rule)},
                        {"T0", opt.initial_horizon},
                        {"steps", opt.steps},
                        {"N", opt.N},
                        {"tol", opt.tol}};
  return hex(hash_label(key.dump()));
}

inline nlohmann::json to_json(const CriticalRun& run) {
  return {{"solution", bsr::to_json(run.solution)},
          {"profile", bsr::to_json(run.profile)},
          {"report", bsr::to_json(run.report)}};
}

inline CriticalRun critical_run_from_json(const nlohmann::json& j) {
  return {ode_solution_from_json(j.at("solution")), rate_profile_from_json(j.at("profile")),
          critical_report_from_json(j.at("report"))};
}

// In-process memo plus an optional on-disk JSON cache keyed by the rule table
// and the solver options.
class CriticalCache {
 public:
  explicit CriticalCache(std::string dir = "") : dir_(std::move(dir)) {}

  std::shared_ptr<const CriticalRun> get(const RuleTable& rule, const CriticalOptions& opt = {}) {
    const auto key = rule_fingerprint(rule, opt);
    std::lock_guard lock(mutex_);
    if (auto it = memo_.find(key); it != memo_.end()) return it->second;
    std::shared_ptr<const CriticalRun> run;
    const auto path = file(key);
    if (!path.empty() && std::filesystem::exists(path)) {
      std::ifstream in(path);
      run = std::make_shared<CriticalRun>(critical_run_from_json(nlohmann::json::parse(in)));
      ++hits_;
    } else {
      run = std::make_shared<CriticalRun>(critical_time(rule, opt));
      if (!path.empty()) {
        std::filesystem::create_directories(dir_);
        std::ofstream(path) << to_json(*run).dump();
      }
    }
    memo_[key] = run;
    return run;
  }

  std::size_t disk_hits() const { return hits_; }

 private:
  std::string file(const std::string& key) const { return dir_.empty() ? "" : dir_ + "/tc-" + key + ".json"; }

  std::string dir_;
  std::mutex mutex_;
  std::map<std::string, std::shared_ptr<const CriticalRun>> memo_;
  std::size_t hits_ = 0;
};

inline CriticalCache& default_cache() {
  static CriticalCache cache;
  return cache;
}

// ---- quantile dominance ------------------------------------------------------------------

struct QuantileCheck {
  double q = 0.0;
  stats::QuantileInterval lower_side, upper_side;
  // lower-side estimate must not exceed the upper side's confidence bound
  bool pass() const { return lower_side.estimate <= upper_side.upper; }
};

inline std::vector<QuantileCheck> dominance(const std::vector<double>& smaller, const std::vector<double>& larger,
                                            const std::vector<double>& qs) {
  std::vector<QuantileCheck> out;
  for (double q : qs) out.push_back({q, stats::quantile_interval(smaller, q), stats::quantile_interval(larger, q)});
  return out;
}

inline nlohmann::json to_json(const QuantileCheck& c) {
  return {{"q", c.q},
          {"lower_side", {c.lower_side.estimate, c.lower_side.lower, c.lower_side.upper}},
          {"upper_side", {c.upper_side.estimate, c.upper_side.lower, c.upper_side.upper}},
          {"pass", c.pass()}};
}

inline nlohmann::json to_json(const std::vector<QuantileCheck>& v) {
  auto a = nlohmann::json::array();
  for (const auto& c : v) a.push_back(to_json(c));
  return a;
}

inline bool all_pass(const std::vector<QuantileCheck>& v) {
  return std::all_of(v.begin(), v.end(), [](const auto& c) { return c.pass(); });
}

// ---- scaling law -----------------------------------------------------------------------------

// Subcritical window t <= t_c - lambda n^{-1/3}.
inline void check_window(double t_c, double n, double t, double lambda) {
  const double limit = t_c - lambda * std::cbrt(1.0 / n);
  if (t > limit + 1e-12) {
    throw MalformedInput("t=" + std::to_string(t) + " outside the subcritical window t <= " + std::to_string(limit) +
                         " for n=" + std::to_string(static_cast<long long>(n)));
  }
  if (t < 0) throw MalformedInput("t must be >= 0");
}

// `count` times t_c - g with gaps geometric from `widest` down to lambda n^{-1/3}.
inline std::vector<double> window_grid(double t_c, double n, std::size_t count = 5, double widest = 0.15,
                                       double lambda = 1.0) {
  const double narrow = lambda * std::cbrt(1.0 / n);
  std::vector<double> t;
  for (std::size_t k = 0; k < count; ++k) {
    const double f = count > 1 ? static_cast<double>(k) / static_cast<double>(count - 1) : 0.0;
    t.push_back(k + 1 == count ? t_c - narrow : t_c - widest * std::pow(narrow / widest, f));
  }
  return t;
}

struct ScalingCell {
  double n = 0, t = 0;
  std::vector<double> L1;
  double median_L1 = 0, max_L1 = 0;
  double R_median = 0, R_max = 0;
};

struct ScalingTable {
  std::string rule_name;
  double t_c = 0;
  std::size_t trials = 0;
  std::vector<ScalingCell> cells;
  bool complete = true;

  double band_min() const {
    double m = INFINITY;
    for (const auto& c : cells) m = std::min(m, c.R_median);
    return m;
  }
  double band_max() const {
    double m = 0;
    for (const auto& c : cells) m = std::max(m, c.R_median);
    return m;
  }
  double band_ratio() const { return band_max() / band_min(); }
  double R_max() const {
    double m = 0;
    for (const auto& c : cells) m = std::max(m, c.R_max);
    return m;
  }
};

// For each n, `trials` continuous runs observed at every t of the list;
// R = L1 (t_c - t)^2 / log n with the spectral t_c.
inline ScalingTable scaling_experiment(const RuleTable& rule, double t_c, const std::vector<double>& ns,
                                       const std::vector<double>& ts, std::size_t trials, std::uint64_t seed,
                                       double lambda = 1.0, const RunControl& ctl = {}) {
  if (ns.empty()) throw MalformedInput("scaling needs at least one n");
  if (ts.empty()) throw MalformedInput("scaling needs at least one t");
  if (trials == 0) throw MalformedInput("scaling needs trials >= 1");
  for (double n : ns) {
    for (double t : ts) check_window(t_c, n, t, lambda);
  }
  ScalingTable table;
  table.rule_name = rule.name();
  table.t_c = t_c;
  table.trials = trials;
  const double t_max = *std::max_element(ts.begin(), ts.end());
  const auto deadline = ctl.deadline();
  for (double n : ns) {
    std::vector<std::vector<double>> L1(trials);
    const auto done = parallel_for(
        trials, ctl.threads,
        [&](std::size_t i) {
          const auto res = run_continuous(rule, static_cast<std::uint64_t>(n), t_max, ts,
                                          derive_seed(seed, "scaling/" + std::to_string(static_cast<long long>(n)), i));
          for (const auto& c : res.censuses) L1[i].push_back(static_cast<double>(c.L1));
        },
        deadline);
    if (done < trials) table.complete = false;
    if (done == 0) break;
    std::vector<double> sorted_ts = ts;
    std::sort(sorted_ts.begin(), sorted_ts.end());
    for (std::size_t k = 0; k < sorted_ts.size(); ++k) {
      ScalingCell cell;
      cell.n = n;
      cell.t = sorted_ts[k];
      for (std::size_t i = 0; i < done; ++i) cell.L1.push_back(L1[i][k]);
      cell.median_L1 = stats::median(cell.L1);
      cell.max_L1 = *std::max_element(cell.L1.begin(), cell.L1.end());
      const double scale = (t_c - cell.t) * (t_c - cell.t) / std::log(n);
      cell.R_median = cell.median_L1 * scale;
      cell.R_max = cell.max_L1 * scale;
      table.cells.push_back(std::move(cell));
    }
  }
  return table;
}

inline nlohmann::json to_json(const ScalingTable& s) {
  auto cells = nlohmann::json::array();
  for (const auto& c : s.cells) {
    cells.push_back({{"n", c.n}, {"t", c.t}, {"median_L1", c.median_L1}, {"max_L1", c.max_L1},
                     {"R_median", c.R_median}, {"R_max", c.R_max}});
  }
  return {{"kind", "scaling"},       {"rule", s.rule_name},        {"t_c", s.t_c},
          {"trials", s.trials},      {"cells", cells},             {"band_min", s.band_min()},
          {"band_max", s.band_max()}, {"band_ratio", s.band_ratio()}, {"R_max", s.R_max()},
          {"complete", s.complete}};
}

inline std::string scaling_csv(const ScalingTable& s) {
  std::ostringstream o;
  o << "n,t,trial,L1,R\n";
  for (const auto& c : s.cells) {
    const double scale = (s.t_c - c.t) * (s.t_c - c.t) / std::log(c.n);
    for (std::size_t i = 0; i < c.L1.size(); ++i) {
      o << static_cast<long long>(c.n) << ',' << c.t << ',' << i << ',' << c.L1[i] << ',' << c.L1[i] * scale << '\n';
    }
  }
  return o.str();
}

// ---- discrete/continuous coupling ----------------------------------------------------------

struct CouplingResult {
  std::string rule_name;
  double n = 0, t = 0, shifted_t = 0;
  std::vector<double> discrete_L1, continuous_L1, edges_at_t;
  std::vector<QuantileCheck> checks;
  double concentration = 0;  // share of trials with |X_n(t) - nt/2| <= 4 sqrt n
  bool inconclusive = false;
  bool complete = true;

  bool pass() const { return !inconclusive && all_pass(checks) && concentration >= 0.95; }
};

inline CouplingResult coupling_experiment(const RuleTable& rule, double n, double t, std::size_t trials,
                                          std::uint64_t seed, const RunControl& ctl = {}) {
  if (!(n >= 2) || !(t >= 0) || trials == 0) throw MalformedInput("coupling needs n >= 2, t >= 0, trials >= 1");
  CouplingResult r;
  r.rule_name = rule.name();
  r.n = n;
  r.t = t;
  r.shifted_t = t + std::log(n) / std::sqrt(n);
  const auto N = static_cast<std::uint64_t>(n);
  const auto steps = static_cast<std::uint64_t>(std::floor(0.5 * n * t + 1e-9));
  std::vector<double> d(trials), c(trials), x(trials);
  const auto done = parallel_for(
      trials, ctl.threads,
      [&](std::size_t i) {
        d[i] = static_cast<double>(run_discrete(rule, N, steps, {t}, derive_seed(seed, "coupling/discrete", i)).censuses[0].L1);
        const auto cont = run_continuous(rule, N, r.shifted_t, {t, r.shifted_t}, derive_seed(seed, "coupling/continuous", i));
        x[i] = static_cast<double>(cont.censuses[0].events);
        c[i] = static_cast<double>(cont.censuses[1].L1);
      },
      ctl.deadline());
  r.complete = done == trials;
  d.resize(done);
  c.resize(done);
  x.resize(done);
  r.discrete_L1 = d;
  r.continuous_L1 = c;
  r.edges_at_t = x;
  r.inconclusive = done < 100;
  if (done > 0) {
    r.checks = dominance(d, c, {0.5, 0.9, 0.99});
    std::size_t ok = 0;
    for (double e : x) ok += std::abs(e - 0.5 * n * t) <= 4 * std::sqrt(n);
    r.concentration = static_cast<double>(ok) / static_cast<double>(done);
  }
  return r;
}

inline nlohmann::json to_json(const CouplingResult& r) {
  return {{"kind", "coupling"},
          {"rule", r.rule_name},
          {"n", r.n},
          {"t", r.t},
          {"shifted_t", r.shifted_t},
          {"trials", r.discrete_L1.size()},
          {"checks", to_json(r.checks)},
          {"concentration", r.concentration},
          {"inconclusive", r.inconclusive},
          {"complete", r.complete},
          {"pass", r.pass()}};
}

inline std::string coupling_csv(const CouplingResult& r) {
  std::ostringstream o;
  o << "trial,discrete_L1,continuous_L1,edges_at_t\n";
  for (std::size_t i = 0; i < r.discrete_L1.size(); ++i) {
    o << i << ',' << r.discrete_L1[i] << ',' << r.continuous_L1[i] << ',' << r.edges_at_t[i] << '\n';
  }
  return o.str();
}

// ---- dominance chain C_n^0 <= C^RG <= G ----------------------------------------------------

struct DominanceResult {
  std::string rule_name;
  double n = 0, t = 0, delta = 0;
  std::vector<double> first_component, rg_volume, progeny;
  std::vector<QuantileCheck> first_vs_rg, rg_vs_progeny;
  std::size_t truncated = 0;
  BiasDiagnostics bias;

  bool pass() const { return all_pass(first_vs_rg) && all_pass(rg_vs_progeny); }
};

inline DominanceResult dominance_experiment(const RuleTable& rule, const RateProfile& profile, double n, double t,
                                            double delta, std::size_t trials, std::uint64_t seed,
                                            const RunControl& ctl = {},
                                            LinkMethod method = LinkMethod::poisson_edges) {
  if (trials == 0) throw MalformedInput("dominance needs trials >= 1");
  DominanceResult r;
  r.rule_name = rule.name();
  r.n = n;
  r.t = t;
  r.delta = delta;
  const auto inflated = inflate_rates(profile, delta);
  r.first_component.resize(trials);
  r.rg_volume.resize(trials);
  r.progeny.resize(trials);
  parallel_for(trials, ctl.threads, [&](std::size_t i) {
    const auto res = run_continuous(rule, static_cast<std::uint64_t>(n), t, {t}, derive_seed(seed, "dominance/graph", i));
    r.first_component[i] = static_cast<double>(res.censuses[0].first_component);
    auto rng = make_rng(seed, "dominance/rgiva", i);
    r.rg_volume[i] = static_cast<double>(conditioned_root_component(inflated, n, t, rng, method).volume);
  });
  std::vector<char> cut(trials, 0);
  parallel_trials(
      trials, ctl.threads, [&] { return std::make_unique<BranchingProcess>(inflated, t); },
      [&](std::unique_ptr<BranchingProcess>& bp, std::size_t i) {
        auto rng = make_rng(seed, "dominance/branching", i);
        const auto s = bp->total_progeny(rng, default_progeny_cap(profile.K));
        r.progeny[i] = s.G;
        cut[i] = s.truncated;
      });
  r.truncated = static_cast<std::size_t>(std::count(cut.begin(), cut.end(), 1));
  const std::vector<double> qs{0.9, 0.99};
  r.first_vs_rg = dominance(r.first_component, r.rg_volume, qs);
  r.rg_vs_progeny = dominance(r.rg_volume, r.progeny, qs);
  return r;
}

inline nlohmann::json to_json(const DominanceResult& r) {
  return {{"kind", "dominance"},
          {"rule", r.rule_name},
          {"n", r.n},
          {"t", r.t},
          {"delta", r.delta},
          {"trials", r.progeny.size()},
          {"first_vs_rg", to_json(r.first_vs_rg)},
          {"rg_vs_progeny", to_json(r.rg_vs_progeny)},
          {"truncated", r.truncated},
          {"pass", r.pass()}};
}

inline std::string dominance_csv(const DominanceResult& r) {
  std::ostringstream o;
  o << "trial,first_component,rg_volume,progeny\n";
  for (std::size_t i = 0; i < r.progeny.size(); ++i) {
    o << i << ',' << r.first_component[i] << ',' << r.rg_volume[i] << ',' << r.progeny[i] << '\n';
  }
  return o.str();
}

// ---- t_c cross-validation -----------------------------------------------------------------

struct CrossValidation {
  std::string rule_name;
  double t_c = 0, n = 0;
  std::vector<double> t_hat;  // inf{t : L1(t) >= n^{2/3}} per trial
  double t_hat_median = 0;

  double relative_error() const { return std::abs(t_hat_median - t_c) / t_c; }
};

inline CrossValidation tc_cross_validation(const RuleTable& rule, double t_c, double n, std::size_t trials,
                                           std::uint64_t seed, const RunControl& ctl = {}) {
  if (trials == 0) throw MalformedInput("cross-validation needs trials >= 1");
  CrossValidation cv;
  cv.rule_name = rule.name();
  cv.t_c = t_c;
  cv.n = n;
  cv.t_hat.resize(trials);
  SimulationOptions opt;
  opt.threshold = std::pow(n, 2.0 / 3.0);
  parallel_for(trials, ctl.threads, [&](std::size_t i) {
    cv.t_hat[i] = run_continuous(rule, static_cast<std::uint64_t>(n), 2 * t_c, {}, derive_seed(seed, "tc", i), opt).threshold_time;
  });
  if (std::any_of(cv.t_hat.begin(), cv.t_hat.end(), [](double x) { return std::isnan(x); })) {
    throw Inconclusive("threshold n^{2/3} not reached by 2 t_c");
  }
  cv.t_hat_median = stats::median(cv.t_hat);
  return cv;
}

inline nlohmann::json to_json(const CrossValidation& cv) {
  return {{"kind", "tc-crossval"}, {"rule", cv.rule_name},           {"t_c", cv.t_c},
          {"n", cv.n},             {"t_hat", cv.t_hat},              {"t_hat_median", cv.t_hat_median},
          {"relative_error", cv.relative_error()}};
}

// ---- hydrodynamic deviation sweep ------------------------------------------------------------

struct DeviationSweep {
  std::vector<double> n;
  std::vector<std::vector<double>> deviation;  // per n, per seed
  std::vector<double> median;
};

inline DeviationSweep deviation_sweep(const RuleTable& rule, const OdeSolution& sol, const std::vector<double>& ns,
                                      std::size_t seeds, std::uint64_t seed, const RunControl& ctl = {}) {
  DeviationSweep s;
  for (double n : ns) {
    std::vector<double> d(seeds);
    parallel_for(seeds, ctl.threads, [&](std::size_t i) {
      d[i] = hydrodynamic_deviation(rule, sol, static_cast<std::uint64_t>(n),
                                    derive_seed(seed, "deviation/" + std::to_string(static_cast<long long>(n)), i));
    });
    s.n.push_back(n);
    s.median.push_back(stats::median(d));
    s.deviation.push_back(std::move(d));
  }
  return s;
}

inline nlohmann::json to_json(const DeviationSweep& s) {
  return {{"kind", "deviation"}, {"n", s.n}, {"deviation", s.deviation}, {"median", s.median}};
}

// ---- branching experiment ------------------------------------------------------------------

struct OffspringProbe {
  double intensity = 0, mean = 0, se = 0;
  bool pass() const { return std::abs(mean - intensity) <= 3 * se; }
};

struct BranchingResult {
  double t = 0, delta = 0;
  std::vector<ProgenySample> samples;
  TailFit tail;
  std::optional<GenerationRatio> generations;
  double rho = 0;
  std::vector<OffspringProbe> probes;
  BiasDiagnostics bias;
  std::size_t truncated = 0;
  bool complete = true;
};

inline std::vector<double> progeny_volumes(const std::vector<ProgenySample>& s) {
  std::vector<double> G;
  for (const auto& x : s) {
    if (!x.truncated) G.push_back(x.G);
  }
  return G;
}

// Progeny samples at t (profile already inflated by delta), tail and
// generation fits, and `probes` offspring-count checks with `probe_draws` each.
inline BranchingResult branching_experiment(const RateProfile& profile, double t, double delta, std::size_t trials,
                                            std::uint64_t seed, std::size_t probes = 0,
                                            std::size_t probe_draws = 10000, SizeBias bias = SizeBias::doob,
                                            std::size_t N = 512, const RunControl& ctl = {}) {
  if (trials == 0) throw MalformedInput("branching needs trials >= 1");
  BranchingResult r;
  r.t = t;
  r.delta = delta;
  r.samples.resize(trials);
  // the rejection cap adapts across samples, so rejection runs stay on one worker
  const unsigned threads = bias == SizeBias::rejection ? 1u : ctl.threads;
  std::mutex diag_mutex;
  const auto done = parallel_trials(
      trials, threads,
      [&] {
        auto bp = std::make_unique<BranchingProcess>(profile, t, bias);
        return std::shared_ptr<BranchingProcess>(bp.release(), [&](BranchingProcess* p) {
          std::lock_guard lock(diag_mutex);
          r.bias.proposals += p->diagnostics().proposals;
          r.bias.cap_hits += p->diagnostics().cap_hits;
          r.bias.cap = std::max(r.bias.cap, p->diagnostics().cap);
          delete p;
        });
      },
      [&](std::shared_ptr<BranchingProcess>& bp, std::size_t i) {
        auto rng = make_rng(seed, "branching", i);
        r.samples[i] = bp->total_progeny(rng, default_progeny_cap(profile.K));
      },
      ctl.deadline());
  r.samples.resize(done);
  r.complete = done == trials;
  for (const auto& s : r.samples) r.truncated += s.truncated;
  r.tail = tail_rate(progeny_volumes(r.samples), derive_seed(seed, "branching/bootstrap"));
  try {
    r.generations = generation_ratio(r.samples);
  } catch (const Inconclusive&) {
  }
  r.rho = operator_norm(MomentField(profile), t, N).rho;
  BranchingProcess bp(profile, t, bias);
  for (std::size_t p = 0; p < probes; ++p) {
    auto rng = make_rng(seed, "branching/probe", p);
    const auto x = bp.root(rng);
    std::vector<double> counts;
    for (std::size_t k = 0; k < probe_draws; ++k) counts.push_back(static_cast<double>(bp.sample_children(x, rng).size()));
    r.probes.push_back({bp.offspring_intensity(x), stats::mean(counts), stats::standard_error(counts)});
  }
  return r;
}

inline nlohmann::json to_json(const BranchingResult& r) {
  nlohmann::json probes = nlohmann::json::array();
  for (const auto& p : r.probes) probes.push_back({{"intensity", p.intensity}, {"mean", p.mean}, {"se", p.se}});
  nlohmann::json j = {{"kind", "branching"},
                      {"t", r.t},
                      {"delta", r.delta},
                      {"samples", r.samples.size()},
                      {"truncated", r.truncated},
                      {"rho", r.rho},
                      {"tail",
                       {{"rate", r.tail.rate},
                        {"ci", {r.tail.ci_low, r.tail.ci_high}},
                        {"window", {r.tail.m_low, r.tail.m_high}},
                        {"degenerate", r.tail.degenerate},
                        {"inconclusive", r.tail.inconclusive}}},
                      {"probes", probes},
                      {"bias", {{"proposals", r.bias.proposals}, {"cap_hits", r.bias.cap_hits},
                                {"warning", r.bias.warning()}}},
                      {"complete", r.complete}};
  if (r.generations) {
    j["generation_ratio"] = {{"ratio", r.generations->ratio}, {"se", r.generations->se},
                             {"mean_volume", r.generations->mean_volume}};
  }
  return j;
}

inline std::string branching_csv(const BranchingResult& r, std::uint64_t seed) {
  std::ostringstream o;
  o << "seed,G,generations,truncated\n";
  for (std::size_t i = 0; i < r.samples.size(); ++i) {
    o << derive_seed(seed, "branching", i) << ',' << r.samples[i].G << ',' << r.samples[i].generations.size() << ','
      << (r.samples[i].truncated ? 1 : 0) << '\n';
  }
  return o.str();
}

// ---- experiment specs ---------------------------------------------------------------------

enum class Kind { solve_ode, tc, spectral_profile, perturbation, simulate, rgiva, branching, scaling, coupling, audit };

inline const std::vector<std::pair<Kind, std::string>>& kind_names() {
  static const std::vector<std::pair<Kind, std::string>> names{
      {Kind::solve_ode, "solve-ode"},   {Kind::tc, "tc"},           {Kind::spectral_profile, "spectral-profile"},
      {Kind::perturbation, "perturbation"}, {Kind::simulate, "simulate"}, {Kind::rgiva, "rgiva"},
      {Kind::branching, "branching"},   {Kind::scaling, "scaling"}, {Kind::coupling, "coupling"},
      {Kind::audit, "audit"}};
  return names;
}

inline std::string kind_name(Kind k) {
  for (const auto& [kind, name] : kind_names()) {
    if (kind == k) return name;
  }
  return "?";
}

inline Kind kind_from_name(const std::string& s) {
  for (const auto& [kind, name] : kind_names()) {
    if (name == s) return kind;
  }
  throw MalformedInput("unknown experiment kind \"" + s + "\"");
}

struct ExperimentSpec {
  Kind kind = Kind::tc;
  std::string rule = "bohman-frieze";
  std::vector<double> n;
  std::vector<double> t;
  std::size_t trials = 1;
  std::uint64_t seed = 1;
  std::size_t grid = 512;  // Nystrom nodes; ODE steps for solve-ode
  std::vector<double> delta;
  std::optional<double> gamma;
  double lambda = 1.0;
  bool chain = false;  // rgiva: also run the dominance chain
  std::string out;
  std::string cache_dir;
  RunControl control;

  void validate() const {
    auto need = [&](bool ok, const std::string& what) {
      if (!ok) throw MalformedInput(kind_name(kind) + ": " + what);
    };
    need(trials >= 1, "trials must be >= 1");
    if (gamma) need(*gamma > 0.0 && *gamma < 0.5, "gamma must lie in (0, 1/2)");
    for (double d : delta) need(d >= 0.0, "delta must be >= 0");
    for (double x : n) need(x >= 2 && x <= 4e9 && x == std::floor(x), "n must be an integer in [2, 4e9]");
    for (double x : t) need(std::isfinite(x) && x >= 0, "t values must be finite and >= 0");
    need(lambda > 0, "lambda must be > 0");
    if (gamma) need(n.size() == 1, "gamma needs exactly one n");
    switch (kind) {
      case Kind::solve_ode:
        need(t.size() <= 1, "at most one horizon");
        need(grid >= 10, "grid (ODE steps) must be >= 10");
        break;
      case Kind::tc:
        need(n.size() <= 1, "at most one n for cross-validation");
        need(grid >= 64, "grid must be >= 64");
        break;
      case Kind::spectral_profile:
        need(grid >= 64, "grid must be >= 64");
        break;
      case Kind::perturbation:
        need(delta.size() >= 2, "needs >= 2 deltas");
        need(t.size() <= 1, "at most one v");
        break;
      case Kind::simulate:
        need(n.size() == 1, "needs exactly one n");
        need(!t.empty(), "needs checkpoint times");
        break;
      case Kind::rgiva:
      case Kind::branching:
      case Kind::coupling:
        need(t.size() == 1, "needs exactly one t");
        if (kind != Kind::branching || chain) need(n.size() == 1, "needs exactly one n");
        need(delta.size() <= 1, "at most one delta");
        break;
      case Kind::scaling:
        need(!n.empty(), "needs an n list");
        need(!t.empty(), "needs a t list");
        break;
      case Kind::audit:
        need(n.size() == 1, "needs exactly one n");
        need(t.empty() || t.size() == 2, "window needs two times");
        if (t.size() == 2) need(t[0] < t[1], "window must be increasing");
        break;
    }
  }

  // Inflation: an explicit delta wins, else n^{-gamma}, else 0.
  double inflation() const {
    if (!delta.empty()) return delta.front();
    if (gamma) return PerturbationConfig{*gamma, n.front()}.delta_n();
    return 0.0;
  }
};

inline nlohmann::json to_json(const ExperimentSpec& s) {
  nlohmann::json j = {{"kind", kind_name(s.kind)}, {"rule", s.rule},     {"n", s.n},
                      {"t", s.t},                 {"trials", s.trials}, {"seed", s.seed},
                      {"grid", s.grid},           {"delta", s.delta},   {"lambda", s.lambda},
                      {"chain", s.chain}};
  if (s.gamma) j["gamma"] = *s.gamma;
  return j;
}

struct ResultRecord {
  std::string id;
  nlohmann::json spec;
  nlohmann::json seeds;
  nlohmann::json payload;
  std::string csv;
  double wall_time = 0;
  std::string version = version_tag;
  bool complete = true;

  nlohmann::json sidecar() const {
    return {{"id", id},           {"spec", spec},          {"seeds", seeds}, {"payload", payload},
            {"wall_time", wall_time}, {"version", version}, {"complete", complete}};
  }
};

// Writes <out>.json and, when there is tabular data, <out>.csv.
inline void write_record(const ResultRecord& r, const std::string& out) {
  if (out.empty()) return;
  const std::filesystem::path base(out);
  if (base.has_parent_path()) std::filesystem::create_directories(base.parent_path());
  std::ofstream(out + ".json") << r.sidecar().dump(2) << '\n';
  if (!r.csv.empty()) std::ofstream(out + ".csv") << r.csv;
}

namespace detail {

inline std::string ode_csv(const OdeSolution& s) {
  std::ostringstream o;
  o << "time";
  for (int i = 1; i <= s.K; ++i) o << ",x" << i;
  o << ",x_omega\n";
  char buf[32];
  for (std::size_t k = 0; k < s.size(); ++k) {
    std::snprintf(buf, sizeof buf, "%.10g", s.grid[k]);
    o << buf;
    for (double x : s.states[k]) {
      std::snprintf(buf, sizeof buf, ",%.17g", x);
      o << buf;
    }
    o << '\n';
  }
  return o.str();
}

}  // namespace detail

inline ResultRecord run(const ExperimentSpec& spec) {
  spec.validate();
  const auto start = Clock::now();
  ResultRecord rec;
  rec.spec = to_json(spec);
  rec.id = kind_name(spec.kind) + "-" + hex(hash_label(rec.spec.dump())).substr(0, 12);
  rec.seeds = {{"master", spec.seed}, {"scheme", "splitmix64(master ^ fnv1a(label)) + splitmix64(index + 1)"}};
  const auto rule = resolve_rule(spec.rule);
  CriticalCache disk(spec.cache_dir);
  auto& cache = spec.cache_dir.empty() ? default_cache() : disk;
  CriticalOptions copt;
  copt.N = spec.grid;
  auto critical = [&] { return cache.get(rule, copt); };
  const auto& ctl = spec.control;

  switch (spec.kind) {
    case Kind::solve_ode: {
      const double T = spec.t.empty() ? 4.0 : spec.t.front();
      const auto sol = solve_master_ode(rule, T, T / static_cast<double>(spec.grid));
      double worst_sum = 0, worst_neg = 0;
      for (const auto& x : sol.states) {
        double s = 0;
        for (double v : x) {
          s += v;
          worst_neg = std::min(worst_neg, v);
        }
        worst_sum = std::max(worst_sum, std::abs(s - 1));
      }
      rec.payload = {{"kind", "ode"}, {"rule", rule.name()}, {"T", T}, {"steps", spec.grid},
                     {"max_sum_error", worst_sum}, {"min_entry", worst_neg}, {"final_state", sol.states.back()}};
      rec.csv = detail::ode_csv(sol);
      break;
    }
    case Kind::tc: {
      const auto run = critical();
      rec.payload = bsr::to_json(run->report);
      if (!spec.n.empty()) {
        rec.payload["cross_validation"] =
            to_json(tc_cross_validation(rule, run->report.t_c, spec.n.front(), spec.trials, spec.seed, ctl));
      }
      break;
    }
    case Kind::spectral_profile: {
      const auto run = critical();
      std::vector<double> vs = spec.t;
      if (vs.empty()) {
        for (int k = 1; k <= 40; ++k) vs.push_back(run->report.t_c * k / 40.0 * 1.25);
      }
      const MomentField f(run->profile);
      std::vector<double> rho(vs.size());
      parallel_for(vs.size(), ctl.threads, [&](std::size_t k) { rho[k] = operator_norm(f, vs[k], spec.grid).rho; });
      std::ostringstream o;
      o << "v,rho,gap\n";
      char buf[96];
      for (std::size_t k = 0; k < vs.size(); ++k) {
        std::snprintf(buf, sizeof buf, "%.10g,%.12g,%.12g\n", vs[k], rho[k], 1 - rho[k]);
        o << buf;
      }
      rec.csv = o.str();
      rec.payload = {{"kind", "spectral-profile"}, {"rule", rule.name()}, {"t_c", run->report.t_c}, {"v", vs}, {"rho", rho}};
      break;
    }
    case Kind::perturbation: {
      const auto run = critical();
      const double v = spec.t.empty() ? 1.0 : spec.t.front();
      const auto orders = taylor_orders(rule);
      const double target = orders.alpha ? 0.9 * static_cast<double>(*orders.alpha) : 0.9;
      rec.payload = bsr::to_json(perturbation_scan(run->profile, spec.delta, v, rule.K() == 1 ? 0.9 : target, spec.grid));
      break;
    }
    case Kind::simulate: {
      const double t_max = *std::max_element(spec.t.begin(), spec.t.end());
      std::vector<SimulationResult> res(spec.trials);
      const auto done = parallel_for(
          spec.trials, ctl.threads,
          [&](std::size_t i) {
            res[i] = run_continuous(rule, static_cast<std::uint64_t>(spec.n.front()), t_max, spec.t,
                                    derive_seed(spec.seed, "simulate", i));
          },
          ctl.deadline());
      rec.complete = done == spec.trials;
      std::ostringstream o;
      o << "trial," << census_csv_header(rule.K()) << '\n';
      nlohmann::json l1 = nlohmann::json::array();
      for (std::size_t i = 0; i < done; ++i) {
        nlohmann::json row = nlohmann::json::array();
        for (const auto& c : res[i].censuses) {
          o << i << ',' << census_csv_row(c) << '\n';
          row.push_back(c.L1);
        }
        l1.push_back(row);
      }
      rec.csv = o.str();
      rec.payload = {{"kind", "simulate"}, {"rule", rule.name()}, {"n", spec.n.front()}, {"t", spec.t},
                     {"trials", done}, {"L1", l1}};
      break;
    }
    case Kind::rgiva: {
      const auto run = critical();
      const double n = spec.n.front(), t = spec.t.front(), delta = spec.inflation();
      if (spec.chain) {
        const auto d = dominance_experiment(rule, run->profile, n, t, delta, spec.trials, spec.seed, ctl);
        rec.payload = to_json(d);
        rec.csv = dominance_csv(d);
        break;
      }
      const auto profile = inflate_rates(run->profile, delta);
      std::vector<RootComponent> roots(spec.trials);
      const auto done = parallel_for(
          spec.trials, ctl.threads,
          [&](std::size_t i) {
            auto rng = make_rng(spec.seed, "rgiva", i);
            roots[i] = conditioned_root_component(profile, n, t, rng);
          },
          ctl.deadline());
      rec.complete = done == spec.trials;
      std::ostringstream o;
      o << "seed,volume,cloud_size\n";
      std::vector<double> vol;
      for (std::size_t i = 0; i < done; ++i) {
        o << derive_seed(spec.seed, "rgiva", i) << ',' << roots[i].volume << ',' << roots[i].cloud_size << '\n';
        vol.push_back(static_cast<double>(roots[i].volume));
      }
      rec.csv = o.str();
      rec.payload = {{"kind", "rgiva"}, {"rule", rule.name()}, {"n", n}, {"t", t}, {"delta", delta},
                     {"trials", done}, {"mean_volume", stats::mean(vol)}, {"median_volume", stats::median(vol)}};
      break;
    }
    case Kind::branching: {
      const auto run = critical();
      const double t = spec.t.front(), delta = spec.inflation();
      const auto r = branching_experiment(inflate_rates(run->profile, delta), t, delta, spec.trials, spec.seed, 0,
                                          10000, SizeBias::doob, spec.grid, ctl);
      rec.complete = r.complete;
      rec.payload = to_json(r);
      rec.csv = branching_csv(r, spec.seed);
      break;
    }
    case Kind::scaling: {
      const auto run = critical();
      const auto table = scaling_experiment(rule, run->report.t_c, spec.n, spec.t, spec.trials, spec.seed, spec.lambda, ctl);
      rec.complete = table.complete;
      rec.payload = to_json(table);
      rec.csv = scaling_csv(table);
      break;
    }
    case Kind::coupling: {
      const auto r = coupling_experiment(rule, spec.n.front(), spec.t.front(), spec.trials, spec.seed, ctl);
      rec.complete = r.complete;
      rec.payload = to_json(r);
      rec.csv = coupling_csv(r);
      break;
    }
    case Kind::audit: {
      const double v1 = spec.t.empty() ? 0.2 : spec.t[0], v2 = spec.t.empty() ? 0.8 : spec.t[1];
      const auto sol = solve_master_ode(rule, v2, v2 / 20000.0);
      const auto profile = rate_functions(rule, sol);
      rec.payload = bsr::to_json(rate_audit(rule, profile, static_cast<std::uint64_t>(spec.n.front()), v1, v2,
                                            derive_seed(spec.seed, "audit")));
      break;
    }
  }
  rec.wall_time = std::chrono::duration<double>(Clock::now() - start).count();
  write_record(rec, spec.out);
  return rec;
}

}  // namespace bsr::harness
