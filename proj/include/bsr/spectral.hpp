#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include <json.hpp>

#include "bsr/errors.hpp"
#include "bsr/hydro.hpp"
#include "bsr/random.hpp"
#include "bsr/stats.hpp"

namespace bsr {

class HorizonTooShort : public NumericalError {
 public:
  explicit HorizonTooShort(const std::string& what) : NumericalError(what) {}
};

namespace detail {

inline std::vector<double> cumulative_trapezoid(const std::vector<double>& f, double h) {
  std::vector<double> out(f.size(), 0.0);
  for (std::size_t k = 1; k < f.size(); ++k) out[k] = out[k - 1] + 0.5 * h * (f[k - 1] + f[k]);
  return out;
}

}  // namespace detail

// First and second moments of cluster sizes under the growth law "jump of
// size j at rate W c_j", in closed form through cumulative integrals:
//   L(u) = int_0^u lambda,  J(u) = int_0^u kappa e^{-L},
//   A1_i = int a_i e^{-L},  A2_i = int a_i e^{-2L},  AJ_i = int a_i e^{-L} J.
class MomentField {
 public:
  explicit MomentField(const RateProfile& p) : K_(p.K), h_(p.h), grid_(p.grid), b_(p.b) {
    const auto n = p.size();
    lambda_.assign(n, 0.0);
    kappa_.assign(n, 0.0);
    for (int j = 1; j <= K_; ++j) {
      const auto& c = p.c[static_cast<std::size_t>(j - 1)];
      for (std::size_t k = 0; k < n; ++k) {
        lambda_[k] += j * c[k];
        kappa_[k] += j * j * c[k];
      }
    }
    L_ = detail::cumulative_trapezoid(lambda_, h_);
    if (L_.back() > 700.0) {
      throw NumericalError("cumulative growth exceeds 700 on [0,T]; horizon too long for moment closure");
    }
    std::vector<double> f(n);
    for (std::size_t k = 0; k < n; ++k) f[k] = kappa_[k] * std::exp(-L_[k]);
    J_ = detail::cumulative_trapezoid(f, h_);
    for (int i = 0; i < K_; ++i) {
      const auto& a = p.a[static_cast<std::size_t>(i)];
      std::vector<double> f1(n), f2(n), fj(n);
      for (std::size_t k = 0; k < n; ++k) {
        const double e = std::exp(-L_[k]);
        f1[k] = a[k] * e;
        f2[k] = a[k] * e * e;
        fj[k] = a[k] * e * J_[k];
      }
      A1_.push_back(detail::cumulative_trapezoid(f1, h_));
      A2_.push_back(detail::cumulative_trapezoid(f2, h_));
      AJ_.push_back(detail::cumulative_trapezoid(fj, h_));
    }
  }

  int K() const { return K_; }
  double h() const { return h_; }
  double horizon() const { return grid_.back(); }
  const std::vector<double>& grid() const { return grid_; }
  const std::vector<double>& lambda() const { return lambda_; }
  const std::vector<double>& kappa() const { return kappa_; }

  // seed size of type index i (0-based): K+i+1
  int seed(int type) const { return K_ + type + 1; }

  double L(double u) const { return at(L_, u); }
  double J(double u) const { return at(J_, u); }
  double A1(int type, double u) const { return at(A1_[static_cast<std::size_t>(type)], u); }
  double b(double u) const { return at(b_, u); }
  double lambda_at(double u) const { return at(lambda_, u); }
  double kappa_at(double u) const { return at(kappa_, u); }

  double mean(int type, double s, double u) const { return seed(type) * std::exp(L(u) - L(s)); }

  double second_moment(int type, double s, double u) const {
    const double w0 = seed(type);
    const double g = std::exp(L(u) - L(s));
    return w0 * w0 * g * g + w0 * std::exp(2 * L(u) - L(s)) * (J(u) - J(s));
  }

  // Q(u) = sum_i int_0^u a_i(s) E[W_{i,s}(u)^2] ds
  double birth_second_moment(double u) const {
    const double e2 = std::exp(2 * L(u));
    const double j = J(u);
    double q = 0.0;
    for (int i = 0; i < K_; ++i) {
      const double w0 = seed(i);
      const auto idx = static_cast<std::size_t>(i);
      q += w0 * w0 * at(A2_[idx], u) + w0 * (j * at(A1_[idx], u) - at(AJ_[idx], u));
    }
    return std::max(0.0, e2 * q);
  }

  // sum_i int_0^u a_i(s) E[W_{i,s}(u)] ds
  double birth_mean(double u) const {
    double m = 0.0;
    for (int i = 0; i < K_; ++i) m += seed(i) * A1(i, u);
    return std::exp(L(u)) * m;
  }

  // S(u,u') = sum_i int_0^{u^u'} a_i(s) E[W(u) W(u')] ds
  double covariance_kernel(double u, double up) const {
    const double lo = std::min(u, up), hi = std::max(u, up);
    return birth_second_moment(lo) * std::exp(L(hi) - L(lo));
  }

 private:
  double at(const std::vector<double>& v, double u) const { return RateProfile::interpolate(v, h_, u); }

  int K_;
  double h_;
  std::vector<double> grid_, b_, lambda_, kappa_, L_, J_;
  std::vector<std::vector<double>> A1_, A2_, AJ_;
};

inline MomentField moment_field(const RateProfile& profile) { return MomentField(profile); }

struct MomentPath {
  std::vector<double> time, m, q;
};

// Cross-check of the closed forms: RK4 on m' = lambda m, q' = 2 lambda q + kappa m
// from birth time s (a grid node) with seed of the given type.
inline MomentPath moments_rk4(const MomentField& f, int type, std::size_t birth_index) {
  const auto& g = f.grid();
  if (birth_index >= g.size()) throw MalformedInput("birth index beyond grid");
  MomentPath p;
  double m = f.seed(type), q = m * m;
  const double h = f.h();
  auto rhs = [&](double u, double mm, double qq) {
    const double l = f.lambda_at(u), k = f.kappa_at(u);
    return std::pair{l * mm, 2 * l * qq + k * mm};
  };
  for (std::size_t k = birth_index; k < g.size(); ++k) {
    p.time.push_back(g[k]);
    p.m.push_back(m);
    p.q.push_back(q);
    if (k + 1 == g.size()) break;
    const double u = g[k];
    const auto [m1, q1] = rhs(u, m, q);
    const auto [m2, q2] = rhs(u + h / 2, m + h / 2 * m1, q + h / 2 * q1);
    const auto [m3, q3] = rhs(u + h / 2, m + h / 2 * m2, q + h / 2 * q2);
    const auto [m4, q4] = rhs(u + h, m + h * m3, q + h * q3);
    m += h / 6 * (m1 + 2 * m2 + 2 * m3 + m4);
    q += h / 6 * (q1 + 2 * q2 + 2 * q3 + q4);
  }
  return p;
}

// Nystrom discretization of the symmetrized kernel sqrt(wb) S sqrt(wb) on
// N+1 uniform trapezoid nodes of [0,v]. S is semi-separable, S(u,u') =
// Q(u) e^{-L(u)} e^{L(u')} for u <= u', so products cost O(N).
class KernelGrid {
 public:
  KernelGrid(const MomentField& f, double v, std::size_t N) : v_(v), N_(N) {
    if (N < 64) throw MalformedInput("operator_norm needs N >= 64");
    if (!(v >= 0.0) || v > f.horizon() + 1e-12) throw MalformedInput("v must lie in [0, T]");
    const std::size_t n = N + 1;
    nodes_.resize(n);
    alpha_.resize(n);
    beta_.resize(n);
    root_wb_.resize(n);
    for (std::size_t k = 0; k < n; ++k) {
      const double u = v * static_cast<double>(k) / static_cast<double>(N);
      nodes_[k] = u;
      const double w = (k == 0 || k == N ? 0.5 : 1.0) * v / static_cast<double>(N);
      root_wb_[k] = std::sqrt(w * std::max(0.0, f.b(u)));
      const double L = f.L(u);
      alpha_[k] = root_wb_[k] * f.birth_second_moment(u) * std::exp(-L);
      beta_[k] = root_wb_[k] * std::exp(L);
    }
  }

  std::size_t size() const { return nodes_.size(); }
  const std::vector<double>& nodes() const { return nodes_; }

  double entry(std::size_t k, std::size_t l) const {
    return k <= l ? alpha_[k] * beta_[l] : alpha_[l] * beta_[k];
  }

  std::vector<std::vector<double>> dense() const {
    std::vector<std::vector<double>> m(size(), std::vector<double>(size()));
    for (std::size_t k = 0; k < size(); ++k) {
      for (std::size_t l = 0; l < size(); ++l) m[k][l] = entry(k, l);
    }
    return m;
  }

  void apply(const std::vector<double>& x, std::vector<double>& y) const {
    const std::size_t n = size();
    y.assign(n, 0.0);
    double lower = 0.0;  // sum_{l<k} alpha_l x_l
    for (std::size_t k = 0; k < n; ++k) {
      y[k] = beta_[k] * lower;
      lower += alpha_[k] * x[k];
    }
    double upper = 0.0;  // sum_{l>=k} beta_l x_l
    for (std::size_t k = n; k-- > 0;) {
      upper += beta_[k] * x[k];
      y[k] += alpha_[k] * upper;
    }
  }

 private:
  double v_;
  std::size_t N_;
  std::vector<double> nodes_, alpha_, beta_, root_wb_;
};

struct PowerResult {
  double value = 0.0;
  std::size_t iterations = 0;
};

inline PowerResult power_iteration(const KernelGrid& H, double tol = 1e-10,
                                   std::size_t max_iterations = 100000) {
  Rng rng(0x5eedULL);
  std::vector<double> x(H.size()), y;
  for (auto& v : x) v = 0.5 + uniform01(rng);
  auto normalize = [](std::vector<double>& z) {
    double s = 0.0;
    for (double v : z) s += v * v;
    s = std::sqrt(s);
    if (s > 0.0) {
      for (auto& v : z) v /= s;
    }
    return s;
  };
  normalize(x);
  double previous = -1.0;
  for (std::size_t it = 1; it <= max_iterations; ++it) {
    H.apply(x, y);
    double r = 0.0;
    for (std::size_t k = 0; k < x.size(); ++k) r += x[k] * y[k];
    if (normalize(y) == 0.0) return {0.0, it};
    if (std::abs(r - previous) <= tol * std::abs(r)) return {r, it};
    previous = r;
    x.swap(y);
  }
  throw NumericalError("power iteration did not converge");
}

struct NormEstimate {
  double v = 0.0;
  std::size_t N = 0;
  double rho_N = 0.0;
  double rho_2N = 0.0;
  double rho = 0.0;  // Richardson extrapolation, trapezoid error O(N^-2)
  std::size_t iterations = 0;

  double discretization_gap() const { return std::abs(rho_N - rho_2N); }
};

inline NormEstimate operator_norm(const MomentField& f, double v, std::size_t N = 512,
                                  bool refine = true) {
  NormEstimate e;
  e.v = v;
  if (v == 0.0) {
    e.N = N;
    return e;
  }
  for (;;) {
    const auto coarse = power_iteration(KernelGrid(f, v, N));
    const auto fine = power_iteration(KernelGrid(f, v, 2 * N));
    e.N = N;
    e.rho_N = coarse.value;
    e.rho_2N = fine.value;
    e.rho = (4 * fine.value - coarse.value) / 3;
    e.iterations = coarse.iterations + fine.iterations;
    if (!refine || e.discretization_gap() <= 1e-4 || N >= 8192) break;
    N *= 2;
  }
  return e;
}

inline NormEstimate operator_norm(const RateProfile& p, double v, std::size_t N = 512) {
  return operator_norm(MomentField(p), v, N);
}

struct SpectralProfile {
  double delta = 0.0;
  std::vector<double> v;
  std::vector<double> rho;
};

inline SpectralProfile spectral_profile(const MomentField& f, const std::vector<double>& vs,
                                        double delta = 0.0, std::size_t N = 512) {
  SpectralProfile s;
  s.delta = delta;
  for (double v : vs) {
    s.v.push_back(v);
    s.rho.push_back(operator_norm(f, v, N).rho);
  }
  return s;
}

struct CriticalReport {
  std::string rule_name;
  double t_c = 0.0;
  double bracket_width = 0.0;
  double rho_at_tc = 0.0;
  double eta = 0.0;
  double eta_spread = 0.0;
  std::size_t N = 0;
  double horizon = 0.0;
  double h = 0.0;
};

// Bisection for rho_v = 1 on [0, T]; rho is increasing in v.
inline CriticalReport critical_time(const MomentField& f, std::size_t N = 512, double tol = 1e-6) {
  auto rho = [&](double v) { return operator_norm(f, v, N).rho; };
  CriticalReport r;
  r.horizon = f.horizon();
  r.h = f.h();
  r.N = N;
  if (rho(f.horizon()) < 1.0) {
    throw HorizonTooShort("rho_T < 1 at T=" + std::to_string(f.horizon()) + "; extend the horizon");
  }
  double lo = 0.0, hi = f.horizon();
  while (hi - lo > tol) {
    const double mid = 0.5 * (lo + hi);
    (rho(mid) < 1.0 ? lo : hi) = mid;
  }
  r.t_c = 0.5 * (lo + hi);
  r.bracket_width = hi - lo;
  r.rho_at_tc = rho(r.t_c);

  // (1 - rho_u)/(t_c - u) on u in [t_c - 0.1, t_c - 0.001], extrapolated to u = t_c
  std::vector<double> d, ratio;
  for (int k = 0; k <= 12; ++k) {
    const double gap = 0.1 * std::pow(0.001 / 0.1, k / 12.0);
    const double u = r.t_c - gap;
    if (u <= 0.0) continue;
    d.push_back(gap);
    ratio.push_back((1.0 - rho(u)) / gap);
  }
  const auto fit = stats::least_squares(d, ratio);
  r.eta = fit.intercept;
  const auto [mn, mx] = std::minmax_element(ratio.begin(), ratio.end());
  r.eta_spread = *mx - *mn;
  return r;
}

struct CriticalRun {
  OdeSolution solution;
  RateProfile profile;
  CriticalReport report;
};

struct CriticalOptions {
  double initial_horizon = 4.0;
  std::size_t steps = 20000;
  std::size_t N = 512;
  double tol = 1e-6;
};

// Solve on a provisional horizon, locate t_c, then re-solve on T = 2 t_c.
inline CriticalRun critical_time(const RuleTable& rule, const CriticalOptions& opt = {}) {
  double T = opt.initial_horizon;
  auto solve = [&](double horizon) {
    CriticalRun run;
    run.solution = solve_master_ode(rule, horizon, horizon / static_cast<double>(opt.steps));
    run.profile = rate_functions(rule, run.solution);
    return run;
  };
  double tc = 0.0;
  for (;;) {
    auto run = solve(T);
    try {
      tc = critical_time(MomentField(run.profile), opt.N, opt.tol).t_c;
      break;
    } catch (const HorizonTooShort&) {
      if (T >= 64.0) throw;
      T *= 2;
    }
  }
  auto run = solve(2 * tc);
  run.report = critical_time(MomentField(run.profile), opt.N, opt.tol);
  run.report.rule_name = rule.name();
  return run;
}

inline double spectral_gap(const RateProfile& profile, double t, std::size_t N = 512) {
  return 1.0 - operator_norm(MomentField(profile), t, N).rho;
}

struct PerturbationScan {
  double v = 0.0;
  double rho0 = 0.0;
  double target_exponent = 1.0;
  std::vector<double> deltas, rho, difference;
  double slope = 0.0;
  bool inconclusive = false;
  bool pass = false;
};

inline PerturbationScan perturbation_scan(const RateProfile& profile, const std::vector<double>& deltas,
                                          double v, double target_exponent, std::size_t N = 512) {
  PerturbationScan s;
  s.v = v;
  s.target_exponent = target_exponent;
  s.rho0 = operator_norm(MomentField(profile), v, N, false).rho;
  std::vector<double> lx, ly;
  for (double d : deltas) {
    if (d < 0.0 || d > 0.1) throw MalformedInput("perturbation deltas must lie in [0, 0.1]");
    const double r = d == 0.0 ? s.rho0 : operator_norm(MomentField(inflate_rates(profile, d)), v, N, false).rho;
    s.deltas.push_back(d);
    s.rho.push_back(r);
    s.difference.push_back(std::abs(r - s.rho0));
    if (d > 0.0) {
      if (s.difference.back() < 10 * 1e-10 * std::max(1.0, s.rho0)) s.inconclusive = true;
      lx.push_back(std::log(d));
      ly.push_back(std::log(std::max(s.difference.back(), 1e-300)));
    }
  }
  if (lx.size() < 2) throw MalformedInput("perturbation scan needs >= 2 positive deltas");
  const auto [lo, hi] = std::minmax_element(lx.begin(), lx.end());
  if (*hi - *lo < std::log(100.0) - 1e-9) throw MalformedInput("deltas must span >= 2 decades");
  s.slope = stats::least_squares(lx, ly).slope;
  s.pass = !s.inconclusive && s.slope >= target_exponent;
  return s;
}

inline nlohmann::json to_json(const CriticalReport& r) {
  return {{"kind", "critical-report"}, {"rule", r.rule_name}, {"t_c", r.t_c},
          {"bracket_width", r.bracket_width}, {"rho_at_tc", r.rho_at_tc}, {"eta", r.eta},
          {"eta_spread", r.eta_spread}, {"N", r.N}, {"T", r.horizon}, {"h", r.h}};
}

inline CriticalReport critical_report_from_json(const nlohmann::json& j) {
  CriticalReport r;
  r.rule_name = j.at("rule").get<std::string>();
  r.t_c = j.at("t_c").get<double>();
  r.bracket_width = j.at("bracket_width").get<double>();
  r.rho_at_tc = j.at("rho_at_tc").get<double>();
  r.eta = j.at("eta").get<double>();
  r.eta_spread = j.at("eta_spread").get<double>();
  r.N = j.at("N").get<std::size_t>();
  r.horizon = j.at("T").get<double>();
  r.h = j.at("h").get<double>();
  return r;
}

inline nlohmann::json to_json(const PerturbationScan& s) {
  return {{"kind", "perturbation-scan"}, {"v", s.v}, {"rho0", s.rho0}, {"deltas", s.deltas},
          {"rho", s.rho}, {"difference", s.difference}, {"slope", s.slope},
          {"target_exponent", s.target_exponent}, {"inconclusive", s.inconclusive}, {"pass", s.pass}};
}

}  // namespace bsr
