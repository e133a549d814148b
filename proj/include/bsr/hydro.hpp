#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "bsr/errors.hpp"
#include "bsr/polynomial.hpp"
#include "bsr/rules.hpp"

namespace bsr {

// Polynomial right sides and rate functions of a rule, in the variables
// x_1..x_K, x_omega (variable index = ComponentClass::index).
struct RateModel {
  int K = 0;
  std::vector<Polynomial> drift;    // K+1 entries, one per class
  std::vector<Polynomial> a;        // K entries: birth intensity of BSR* components of size K+i
  std::vector<Polynomial> f_omega;  // K entries: F_{i,omega}
  std::vector<Polynomial> c;        // K entries: F_{i,omega} / x_omega
  Polynomial f_omega_omega;
  Polynomial b;                     // 2 F_{omega,omega} / x_omega^2
};

namespace detail {

inline Polynomial::Exponents monomial(const Quadruple& j, int K) {
  Polynomial::Exponents e(static_cast<std::size_t>(K) + 1, 0);
  for (const auto& c : j) ++e[static_cast<std::size_t>(c.index(K))];
  return e;
}

inline bool same_multiset(int p, int q, int i1, int i2) {
  return (p == i1 && q == i2) || (p == i2 && q == i1);
}

// F_{i1,i2}: half the probability that the added pair has classes {i1,i2}.
inline Polynomial pair_intensity(const RuleTable& rule, int i1, int i2) {
  const int K = rule.K();
  Polynomial f(K + 1);
  for (std::size_t code = 0; code < rule.quadruple_count(); ++code) {
    const auto j = rule.quadruple(code);
    const bool first = rule.accepts(j);
    const int p = first ? j[0].index(K) : j[2].index(K);
    const int q = first ? j[1].index(K) : j[3].index(K);
    if (same_multiset(p, q, i1, i2)) f.add_term(monomial(j, K), Rational(1, 2));
  }
  return f;
}

}  // namespace detail

inline RateModel build_rate_model(const RuleTable& rule) {
  const int K = rule.K();
  RateModel m;
  m.K = K;
  m.drift.assign(static_cast<std::size_t>(K) + 1, Polynomial(K + 1));
  for (std::size_t code = 0; code < rule.quadruple_count(); ++code) {
    const auto j = rule.quadruple(code);
    const auto e = detail::monomial(j, K);
    for (int i = 0; i <= K; ++i) {
      m.drift[static_cast<std::size_t>(i)].add_term(e, delta(rule, j, ComponentClass::from_index(i, K)));
    }
  }
  for (int i = 1; i <= K; ++i) {
    Polynomial a(K + 1);
    for (int i1 = 1; i1 <= K; ++i1) {
      for (int i2 = i1; i2 <= K; ++i2) {
        if (i1 + i2 == K + i) a += detail::pair_intensity(rule, i1 - 1, i2 - 1);
      }
    }
    m.a.push_back(a);
    auto f = detail::pair_intensity(rule, i - 1, K);
    m.c.push_back(f.divided_by_variable(K, 1));
    m.f_omega.push_back(std::move(f));
  }
  m.f_omega_omega = detail::pair_intensity(rule, K, K);
  m.b = m.f_omega_omega.divided_by_variable(K, 2).scaled(Rational(2));
  return m;
}

// ---- master ODE -----------------------------------------------------------------

inline constexpr double negative_tolerance = 1e-12;

struct OdeSolution {
  std::string rule_name;
  int K = 0;
  double h = 0.0;
  double horizon = 0.0;
  std::vector<double> grid;
  std::vector<std::vector<double>> states;       // states[k][class index]
  std::vector<std::vector<double>> derivatives;  // right side at each grid point

  std::size_t size() const { return grid.size(); }

  // Piecewise cubic Hermite interpolation from the stored derivatives.
  std::vector<double> state_at(double u) const {
    if (u <= 0.0) return states.front();
    if (u >= horizon) return states.back();
    std::size_t k = std::min(static_cast<std::size_t>(u / h), grid.size() - 2);
    const double s = (u - grid[k]) / h;
    const double h00 = (1 + 2 * s) * (1 - s) * (1 - s);
    const double h10 = s * (1 - s) * (1 - s);
    const double h01 = s * s * (3 - 2 * s);
    const double h11 = s * s * (s - 1);
    std::vector<double> x(states[k].size());
    for (std::size_t i = 0; i < x.size(); ++i) {
      x[i] = h00 * states[k][i] + h10 * h * derivatives[k][i] + h01 * states[k + 1][i] +
             h11 * h * derivatives[k + 1][i];
      if (x[i] < 0.0 && x[i] > -negative_tolerance) x[i] = 0.0;
    }
    return x;
  }
};

namespace detail {

inline std::vector<double> evaluate_drift(const RateModel& model, const std::vector<double>& x) {
  std::vector<double> dx(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) dx[i] = model.drift[i](x);
  return dx;
}

}  // namespace detail

// Classical RK4 on a uniform grid with M = ceil(T/h) steps (the step is
// shrunk to T/M so the grid ends exactly at T).
inline OdeSolution solve_master_ode(const RuleTable& rule, double horizon, double h) {
  if (!(h > 0.0) || !(horizon > 0.0)) throw MalformedInput("horizon and step must be positive");
  const auto model = build_rate_model(rule);
  const auto steps = static_cast<std::size_t>(std::ceil(horizon / h - 1e-9));
  OdeSolution sol;
  sol.rule_name = rule.name();
  sol.K = rule.K();
  sol.h = horizon / static_cast<double>(steps);
  sol.horizon = horizon;
  sol.grid.resize(steps + 1);
  sol.states.reserve(steps + 1);
  sol.derivatives.reserve(steps + 1);

  std::vector<double> x(static_cast<std::size_t>(rule.K()) + 1, 0.0);
  x[0] = 1.0;
  const double dt = sol.h;
  std::vector<double> tmp(x.size());
  for (std::size_t k = 0; k <= steps; ++k) {
    sol.grid[k] = dt * static_cast<double>(k);
    auto k1 = detail::evaluate_drift(model, x);
    sol.states.push_back(x);
    sol.derivatives.push_back(k1);
    if (k == steps) break;
    for (std::size_t i = 0; i < x.size(); ++i) tmp[i] = x[i] + 0.5 * dt * k1[i];
    const auto k2 = detail::evaluate_drift(model, tmp);
    for (std::size_t i = 0; i < x.size(); ++i) tmp[i] = x[i] + 0.5 * dt * k2[i];
    const auto k3 = detail::evaluate_drift(model, tmp);
    for (std::size_t i = 0; i < x.size(); ++i) tmp[i] = x[i] + dt * k3[i];
    const auto k4 = detail::evaluate_drift(model, tmp);
    for (std::size_t i = 0; i < x.size(); ++i) {
      x[i] += dt / 6.0 * (k1[i] + 2 * k2[i] + 2 * k3[i] + k4[i]);
      if (!(x[i] >= -1e-9 && x[i] <= 1.0 + 1e-9)) {
        throw NumericalError("master ODE left [0,1] at t=" + std::to_string(dt * (k + 1)) +
                             "; use a smaller step");
      }
      if (x[i] < 0.0 && x[i] > -negative_tolerance) x[i] = 0.0;
    }
  }
  return sol;
}

// ---- rate profiles --------------------------------------------------------------

struct RateProfile {
  std::string rule_name;
  int K = 0;
  double h = 0.0;
  double delta = 0.0;
  std::vector<double> grid;
  std::vector<std::vector<double>> a;  // a[type][k], type = 0..K-1 for seed size K+1..2K
  std::vector<std::vector<double>> c;  // c[jump-1][k]
  std::vector<double> b;

  std::size_t size() const { return grid.size(); }
  double horizon() const { return grid.back(); }

  // Linear interpolation of grid values; consistent with trapezoid quadrature.
  static double interpolate(const std::vector<double>& values, double h, double u) {
    if (u <= 0.0) return values.front();
    const double pos = u / h;
    auto k = static_cast<std::size_t>(pos);
    if (k >= values.size() - 1) return values.back();
    const double s = pos - static_cast<double>(k);
    return values[k] + s * (values[k + 1] - values[k]);
  }

  double a_at(int type, double u) const { return interpolate(a[static_cast<std::size_t>(type)], h, u); }
  double c_at(int jump, double u) const { return interpolate(c[static_cast<std::size_t>(jump - 1)], h, u); }
  double b_at(double u) const { return interpolate(b, h, u); }
};

inline RateProfile rate_functions(const RateModel& model, const OdeSolution& sol) {
  RateProfile p;
  p.rule_name = sol.rule_name;
  p.K = sol.K;
  p.h = sol.h;
  p.grid = sol.grid;
  const auto K = static_cast<std::size_t>(sol.K);
  p.a.assign(K, std::vector<double>(sol.size()));
  p.c.assign(K, std::vector<double>(sol.size()));
  p.b.resize(sol.size());
  for (std::size_t k = 0; k < sol.size(); ++k) {
    const auto& x = sol.states[k];
    for (std::size_t i = 0; i < K; ++i) {
      p.a[i][k] = std::max(0.0, model.a[i](x));
      p.c[i][k] = std::max(0.0, model.c[i](x));
    }
    p.b[k] = std::max(0.0, model.b(x));
  }
  return p;
}

inline RateProfile rate_functions(const RuleTable& rule, const OdeSolution& sol) {
  if (rule.K() != sol.K) throw MalformedInput("rule and ODE solution disagree on K");
  return rate_functions(build_rate_model(rule), sol);
}

struct PerturbationConfig {
  double gamma = 0.4;
  double n = 1e4;

  double delta_n() const {
    if (!(gamma > 0.0 && gamma < 0.5)) throw MalformedInput("gamma must lie in (0, 1/2)");
    if (!(n >= 1.0)) throw MalformedInput("n must be >= 1");
    return std::pow(n, -gamma);
  }
};

inline RateProfile inflate_rates(const RateProfile& profile, double delta) {
  if (!(delta >= 0.0)) throw MalformedInput("inflation must be nonnegative");
  auto out = profile;
  out.delta = profile.delta + delta;
  for (auto& row : out.a) {
    for (auto& v : row) v += delta;
  }
  for (auto& row : out.c) {
    for (auto& v : row) v += delta;
  }
  for (auto& v : out.b) v += delta;
  return out;
}

inline RateProfile inflate_rates(const RateProfile& profile, const PerturbationConfig& cfg) {
  return inflate_rates(profile, cfg.delta_n());
}

// ---- exact Taylor orders at t = 0 ---------------------------------------------

struct TaylorOrders {
  int max_order = 0;
  std::vector<int> m_a;
  std::vector<int> m_c;
  std::vector<int> m_f_omega;  // leading order of F_{i,omega}
  int m_x_omega = 0;
  std::optional<Rational> alpha;  // empty when every term is dropped (all orders zero)
  std::optional<Rational> zeta;
  std::vector<Series> x;          // class-fraction series
  std::vector<Series> a_series;
  std::vector<Series> c_series;
};

namespace detail {

// Monomial series with memoized sub-products.
class MonomialSeries {
 public:
  MonomialSeries(const std::vector<Series>& x, std::size_t order) : x_(x), order_(order) {}

  const Series& operator()(const Polynomial::Exponents& e) {
    auto it = memo_.find(e);
    if (it != memo_.end()) return it->second;
    Series s;
    auto var = std::find_if(e.begin(), e.end(), [](int p) { return p > 0; });
    if (var == e.end()) {
      s.assign(order_ + 1, Rational(0));
      s[0] = 1;
    } else {
      auto rest = e;
      const auto v = static_cast<std::size_t>(var - e.begin());
      --rest[v];
      s = multiply((*this)(rest), x_[v], order_);
    }
    return memo_.emplace(e, std::move(s)).first->second;
  }

  Series compose(const Polynomial& p) {
    Series out(order_ + 1, Rational(0));
    for (const auto& [e, c] : p.terms()) {
      const auto& m = (*this)(e);
      for (std::size_t k = 0; k <= order_; ++k) out[k] += c * m[k];
    }
    return out;
  }

 private:
  const std::vector<Series>& x_;
  std::size_t order_;
  std::map<Polynomial::Exponents, Series> memo_;
};

// Taylor coefficients of the class fractions by the recursion
// (k+1) x_{k+1} = [drift(x)]_k, using pairwise Cauchy products of the
// homogeneous quartic right side.
inline std::vector<Series> fraction_series(const RateModel& model, std::size_t order) {
  const auto V = static_cast<std::size_t>(model.K) + 1;
  std::vector<Series> x(V, Series(order + 1, Rational(0)));
  x[0][0] = 1;
  std::vector<std::vector<Series>> pair(V, std::vector<Series>(V, Series(order + 1, Rational(0))));

  struct Term {
    Rational coefficient;
    std::array<std::size_t, 4> factors;
  };
  std::vector<std::vector<Term>> terms(V);
  for (std::size_t i = 0; i < V; ++i) {
    for (const auto& [e, c] : model.drift[i].terms()) {
      Term t{c, {}};
      std::size_t slot = 0;
      for (std::size_t v = 0; v < V; ++v) {
        for (int p = 0; p < e[v]; ++p) t.factors[slot++] = v;
      }
      if (slot != 4) throw NumericalError("drift polynomial is not homogeneous of degree 4");
      terms[i].push_back(t);
    }
  }

  for (std::size_t k = 0; k < order; ++k) {
    for (std::size_t a = 0; a < V; ++a) {
      for (std::size_t b = a; b < V; ++b) {
        Rational s = 0;
        for (std::size_t l = 0; l <= k; ++l) s += x[a][l] * x[b][k - l];
        pair[a][b][k] = s;
        pair[b][a][k] = s;
      }
    }
    for (std::size_t i = 0; i < V; ++i) {
      Rational s = 0;
      for (const auto& t : terms[i]) {
        const auto& p = pair[t.factors[0]][t.factors[1]];
        const auto& q = pair[t.factors[2]][t.factors[3]];
        Rational conv = 0;
        for (std::size_t l = 0; l <= k; ++l) conv += p[l] * q[k - l];
        s += t.coefficient * conv;
      }
      x[i][k + 1] = s / Rational(static_cast<long long>(k + 1));
    }
  }
  return x;
}

}  // namespace detail

inline TaylorOrders taylor_orders(const RuleTable& rule, int max_order = 16) {
  if (max_order < 10) throw MalformedInput("taylor_orders needs max_order >= 10");
  const auto model = build_rate_model(rule);
  const auto order = static_cast<std::size_t>(max_order);
  TaylorOrders out;
  out.max_order = max_order;
  out.x = detail::fraction_series(model, order);
  detail::MonomialSeries mono(out.x, order);

  auto order_of = [&](const Series& s, const std::string& what) {
    const int m = leading_order(s);
    if (m < 0) {
      throw NumericalError(what + " vanishes to order " + std::to_string(max_order) +
                           "; raise max_order");
    }
    return m;
  };

  const int K = rule.K();
  out.m_x_omega = order_of(out.x[static_cast<std::size_t>(K)], "x_omega");
  for (int i = 0; i < K; ++i) {
    const auto idx = static_cast<std::size_t>(i);
    out.a_series.push_back(mono.compose(model.a[idx]));
    out.c_series.push_back(mono.compose(model.c[idx]));
    const auto name = std::to_string(i + 1);
    out.m_a.push_back(order_of(out.a_series.back(), "a_" + name));
    out.m_c.push_back(order_of(out.c_series.back(), "c_" + name));
    out.m_f_omega.push_back(order_of(mono.compose(model.f_omega[idx]), "F_{" + name + ",w}"));
  }

  std::optional<Rational> smallest;
  auto consider = [&](const Rational& v) {
    if (!smallest || v < *smallest) smallest = v;
  };
  for (int i = 0; i < K; ++i) {
    const auto idx = static_cast<std::size_t>(i);
    if (out.m_a[idx] > 0) consider(1 + Rational(1, out.m_a[idx]));
    if (out.m_c[idx] > 0) consider(1 + Rational(2, out.m_c[idx]));
  }
  if (smallest) {
    out.alpha = *smallest / 2;
    out.zeta = *out.alpha / 2;
  }
  return out;
}

// ---- serialization --------------------------------------------------------------

inline nlohmann::json to_json(const OdeSolution& s) {
  return {{"kind", "ode-solution"}, {"rule", s.rule_name}, {"K", s.K},
          {"h", s.h},               {"T", s.horizon},      {"grid", s.grid},
          {"states", s.states},     {"derivatives", s.derivatives}};
}

inline OdeSolution ode_solution_from_json(const nlohmann::json& j) {
  OdeSolution s;
  s.rule_name = j.at("rule").get<std::string>();
  s.K = j.at("K").get<int>();
  s.h = j.at("h").get<double>();
  s.horizon = j.at("T").get<double>();
  s.grid = j.at("grid").get<std::vector<double>>();
  s.states = j.at("states").get<std::vector<std::vector<double>>>();
  s.derivatives = j.at("derivatives").get<std::vector<std::vector<double>>>();
  return s;
}

inline nlohmann::json to_json(const RateProfile& p) {
  return {{"kind", "rate-profile"}, {"rule", p.rule_name}, {"K", p.K},   {"h", p.h},
          {"T", p.horizon()},       {"delta", p.delta},    {"grid", p.grid},
          {"a", p.a},               {"c", p.c},            {"b", p.b}};
}

inline RateProfile rate_profile_from_json(const nlohmann::json& j) {
  RateProfile p;
  p.rule_name = j.at("rule").get<std::string>();
  p.K = j.at("K").get<int>();
  p.h = j.at("h").get<double>();
  p.delta = j.at("delta").get<double>();
  p.grid = j.at("grid").get<std::vector<double>>();
  p.a = j.at("a").get<std::vector<std::vector<double>>>();
  p.c = j.at("c").get<std::vector<std::vector<double>>>();
  p.b = j.at("b").get<std::vector<double>>();
  return p;
}

}  // namespace bsr
