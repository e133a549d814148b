#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "bsr/hydro.hpp"

namespace {

using bsr::Rational;

std::vector<bsr::RuleTable> corpus() {
  return {bsr::bohman_frieze(), bsr::small_first(2), bsr::isolated_first(2), bsr::small_first(3),
          bsr::isolated_first(3)};
}

// Scalar Bohman-Frieze singleton ODE x' = -x - x^2 + x^3, solved independently.
std::vector<double> scalar_bf(double T, std::size_t steps) {
  auto f = [](double x) { return -x - x * x + x * x * x; };
  const double h = T / static_cast<double>(steps);
  std::vector<double> out{1.0};
  double x = 1.0;
  for (std::size_t k = 0; k < steps; ++k) {
    const double k1 = f(x), k2 = f(x + 0.5 * h * k1), k3 = f(x + 0.5 * h * k2), k4 = f(x + h * k3);
    x += h / 6 * (k1 + 2 * k2 + 2 * k3 + k4);
    out.push_back(x);
  }
  return out;
}

TEST(MasterOde, InitialDerivatives) {
  const auto bf = bsr::solve_master_ode(bsr::bohman_frieze(), 1.0, 0.01);
  EXPECT_DOUBLE_EQ(bf.derivatives[0][0], -1.0);
  for (const auto& rule : {bsr::small_first(2), bsr::isolated_first(2), bsr::erdos_renyi(2)}) {
    const auto sol = bsr::solve_master_ode(rule, 0.5, 0.01);
    EXPECT_DOUBLE_EQ(sol.derivatives[0][1], 1.0) << rule.name();
  }
  // K >= 3: nothing of size K can form at rate O(1) at time 0.
  const auto k3 = bsr::solve_master_ode(bsr::small_first(3), 0.5, 0.01);
  EXPECT_DOUBLE_EQ(k3.derivatives[0][2], 0.0);
}

TEST(MasterOde, ConservationAndPositivity) {
  for (const auto& rule : corpus()) {
    const auto sol = bsr::solve_master_ode(rule, 4.0, 4.0 / 20000);
    for (const auto& x : sol.states) {
      const double total = std::accumulate(x.begin(), x.end(), 0.0);
      ASSERT_NEAR(total, 1.0, 1e-8) << rule.name();
      for (double v : x) ASSERT_GE(v, -1e-12) << rule.name();
    }
  }
}

TEST(MasterOde, BohmanFriezeMatchesScalarOde) {
  const double T = 3.0;
  const auto sol = bsr::solve_master_ode(bsr::bohman_frieze(), T, T / 300);
  const auto same_step = scalar_bf(T, 300);
  const auto reference = scalar_bf(T, 300 * 16);
  const double h = sol.h;
  double worst_same = 0.0, worst_ref = 0.0;
  for (std::size_t k = 0; k < sol.size(); ++k) {
    worst_same = std::max(worst_same, std::abs(sol.states[k][0] - same_step[k]));
    worst_ref = std::max(worst_ref, std::abs(sol.states[k][0] - reference[16 * k]));
  }
  EXPECT_LT(worst_same, 1e-13);
  EXPECT_LT(worst_ref, 10 * std::pow(h, 4));
}

TEST(MasterOde, FourthOrderConvergence) {
  for (const auto& rule : corpus()) {
    const double T = 4.0;
    auto max_dev = [&](std::size_t steps) {
      const auto coarse = bsr::solve_master_ode(rule, T, T / steps);
      const auto ref = bsr::solve_master_ode(rule, T, T / (8 * steps));
      double worst = 0.0;
      for (std::size_t k = 0; k < coarse.size(); ++k) {
        for (std::size_t i = 0; i < coarse.states[k].size(); ++i) {
          worst = std::max(worst, std::abs(coarse.states[k][i] - ref.states[8 * k][i]));
        }
      }
      return worst;
    };
    const double ratio = max_dev(50) / max_dev(100);
    EXPECT_NEAR(ratio, 16.0, 4.0) << rule.name();
  }
}

TEST(MasterOde, HermiteInterpolationIsAccurate) {
  const auto sol = bsr::solve_master_ode(bsr::bohman_frieze(), 2.0, 0.01);
  const auto fine = scalar_bf(2.0, 20000);
  for (double u : {0.003, 0.5071, 1.2345, 1.999}) {
    const auto x = sol.state_at(u);
    const auto k = static_cast<std::size_t>(std::lround(u / 1e-4));
    EXPECT_NEAR(x[0], fine[k], 1e-7);
    EXPECT_NEAR(x[0] + x[1], 1.0, 1e-8);
  }
}

TEST(MasterOde, RejectsBadArguments) {
  EXPECT_THROW(bsr::solve_master_ode(bsr::bohman_frieze(), 1.0, 0.0), bsr::MalformedInput);
  EXPECT_THROW(bsr::solve_master_ode(bsr::bohman_frieze(), -1.0, 0.1), bsr::MalformedInput);
  EXPECT_THROW(bsr::solve_master_ode(bsr::bohman_frieze(), 10.0, 4.0), bsr::NumericalError);
}

TEST(RateFunctions, BohmanFriezeReduction) {
  const auto sol = bsr::solve_master_ode(bsr::bohman_frieze(), 3.0, 3.0 / 20000);
  const auto p = bsr::rate_functions(bsr::bohman_frieze(), sol);
  for (std::size_t k = 0; k < sol.size(); ++k) {
    const double y = sol.states[k][0];
    ASSERT_NEAR(p.a[0][k], y * y - std::pow(y, 4) / 2, 1e-10);
    ASSERT_NEAR(p.c[0][k], (1 - y * y) * y, 1e-10);
    ASSERT_NEAR(p.b[k], 1 - y * y, 1e-10);
  }
}

TEST(RateFunctions, QuotientsAreContinuousAtZero) {
  // c_i and b are polynomials after cancelling x_omega, so their value at t=0
  // must equal the constant term of their Taylor series.
  for (const auto& rule : corpus()) {
    const auto model = bsr::build_rate_model(rule);
    const auto orders = bsr::taylor_orders(rule, 12);
    std::vector<double> x0(static_cast<std::size_t>(rule.K()) + 1, 0.0);
    x0[0] = 1.0;
    for (int i = 0; i < rule.K(); ++i) {
      EXPECT_DOUBLE_EQ(model.c[static_cast<std::size_t>(i)](x0),
                       static_cast<double>(orders.c_series[static_cast<std::size_t>(i)][0]));
    }
  }
}

TEST(RateFunctions, BoundedByOne) {
  for (const auto& rule : corpus()) {
    const auto sol = bsr::solve_master_ode(rule, 4.0, 4.0 / 4000);
    const auto p = bsr::rate_functions(rule, sol);
    for (std::size_t k = 0; k < p.size(); ++k) {
      for (int i = 0; i < rule.K(); ++i) {
        ASSERT_LE(p.a[static_cast<std::size_t>(i)][k], 1.0);
        ASSERT_LE(p.c[static_cast<std::size_t>(i)][k], 1.0);
      }
      ASSERT_LE(p.b[k], 1.0 + 1e-12);
    }
  }
}

TEST(InflateRates, ShiftsEveryFunction) {
  const auto sol = bsr::solve_master_ode(bsr::bohman_frieze(), 2.0, 0.001);
  const auto p = bsr::rate_functions(bsr::bohman_frieze(), sol);
  const auto same = bsr::inflate_rates(p, 0.0);
  EXPECT_EQ(same.a, p.a);
  EXPECT_EQ(same.b, p.b);
  const auto up = bsr::inflate_rates(p, 0.01);
  EXPECT_DOUBLE_EQ(up.a[0][0], 0.51);
  EXPECT_DOUBLE_EQ(up.delta, 0.01);
  for (std::size_t k = 0; k < p.size(); ++k) {
    ASSERT_NEAR(up.a[0][k] - p.a[0][k], 0.01, 1e-15);
    ASSERT_NEAR(up.c[0][k] - p.c[0][k], 0.01, 1e-15);
    ASSERT_NEAR(up.b[k] - p.b[k], 0.01, 1e-15);
  }
  EXPECT_THROW(bsr::inflate_rates(p, -1.0), bsr::MalformedInput);
}

TEST(PerturbationConfig, GammaRange) {
  EXPECT_NEAR((bsr::PerturbationConfig{0.25, 1e4}.delta_n()), 0.1, 1e-15);
  EXPECT_THROW((bsr::PerturbationConfig{0.5, 1e4}.delta_n()), bsr::MalformedInput);
  EXPECT_THROW((bsr::PerturbationConfig{0.0, 1e4}.delta_n()), bsr::MalformedInput);
}

// Coefficients computed once with sympy by iterating x = 1 + int(x' dt) on
// truncated polynomials; frozen here.
TEST(TaylorOrders, BohmanFriezeSeriesOracle) {
  const auto t = bsr::taylor_orders(bsr::bohman_frieze(), 12);
  const std::vector<Rational> x{1, -1, 0, Rational(2, 3), Rational(-1, 4), Rational(-8, 15)};
  const std::vector<Rational> c{0, 2, -3, Rational(-1, 3), Rational(9, 2)};
  const std::vector<Rational> a{Rational(1, 2), 0, -2, 2, Rational(13, 6)};
  for (std::size_t k = 0; k < x.size(); ++k) EXPECT_EQ(t.x[0][k], x[k]) << k;
  for (std::size_t k = 0; k < c.size(); ++k) EXPECT_EQ(t.c_series[0][k], c[k]) << k;
  for (std::size_t k = 0; k < a.size(); ++k) EXPECT_EQ(t.a_series[0][k], a[k]) << k;
  EXPECT_EQ(t.m_a, std::vector<int>{0});
  EXPECT_EQ(t.m_c, std::vector<int>{1});
  ASSERT_TRUE(t.alpha.has_value());
  EXPECT_EQ(*t.alpha, Rational(3, 2));
  EXPECT_EQ(*t.zeta, Rational(3, 4));
}

TEST(TaylorOrders, ConsistentQuotientOrders) {
  for (const auto& rule : corpus()) {
    const auto t = bsr::taylor_orders(rule);
    for (int i = 0; i < rule.K(); ++i) {
      const auto idx = static_cast<std::size_t>(i);
      EXPECT_EQ(t.m_c[idx], t.m_f_omega[idx] - t.m_x_omega) << rule.name() << " i=" << i + 1;
    }
  }
}

TEST(TaylorOrders, ExampleRulesReachCriticalWindow) {
  for (const auto& rule : {bsr::small_first(2), bsr::isolated_first(2)}) {
    const auto t = bsr::taylor_orders(rule);
    EXPECT_EQ(t.x[1][1], Rational(1));
    EXPECT_LE(t.m_a[0], 2) << rule.name();
    EXPECT_TRUE(t.m_a[1] == 2 || t.m_a[1] == 3) << rule.name();
    EXPECT_LE(t.m_c[0], 3) << rule.name();
    EXPECT_GE(t.m_c[1], 1) << rule.name();
    EXPECT_LE(t.m_c[1], 5) << rule.name();
    ASSERT_TRUE(t.zeta.has_value());
    EXPECT_GE(*t.zeta, Rational(1, 3)) << rule.name();
  }
}

TEST(TaylorOrders, CapThreeRulesVanishToFourthOrder) {
  for (const auto& rule : {bsr::small_first(3), bsr::isolated_first(3), bsr::erdos_renyi(3)}) {
    const auto t = bsr::taylor_orders(rule);
    EXPECT_EQ(t.x[2][1], Rational(0));
    EXPECT_GE(t.m_a[2], 4) << rule.name();
    ASSERT_TRUE(t.zeta.has_value());
    EXPECT_GT(*t.zeta, Rational(1, 4));
    EXPECT_LT(*t.zeta, Rational(1, 3));
  }
}

TEST(TaylorOrders, AllOrdersZeroLeavesAlphaUnbounded) {
  // K=1 Erdos-Renyi: a = x^2/2 and c = x are both nonzero at t=0.
  const auto t = bsr::taylor_orders(bsr::erdos_renyi(1));
  EXPECT_EQ(t.m_a[0], 0);
  EXPECT_EQ(t.m_c[0], 0);
  EXPECT_FALSE(t.alpha.has_value());
  EXPECT_THROW(bsr::taylor_orders(bsr::bohman_frieze(), 5), bsr::MalformedInput);
}

TEST(TaylorOrders, LogLogSlopeMatchesOrder) {
  for (const auto& rule : corpus()) {
    const auto sol = bsr::solve_master_ode(rule, 0.02, 1e-6);
    const auto p = bsr::rate_functions(rule, sol);
    const auto t = bsr::taylor_orders(rule);
    for (int i = 0; i < rule.K(); ++i) {
      const int m = t.m_a[static_cast<std::size_t>(i)];
      if (m > 5) continue;
      // least-squares slope of log a_i(t) against log t on [1e-4, 1e-2]
      double sx = 0, sy = 0, sxx = 0, sxy = 0;
      int count = 0;
      for (double lt = std::log(1e-4); lt <= std::log(1e-2) + 1e-12; lt += 0.1) {
        const double y = std::log(p.a_at(i, std::exp(lt)));
        sx += lt;
        sy += y;
        sxx += lt * lt;
        sxy += lt * y;
        ++count;
      }
      const double slope = (count * sxy - sx * sy) / (count * sxx - sx * sx);
      EXPECT_NEAR(slope, m, 0.1) << rule.name() << " a_" << i + 1;
    }
  }
}

TEST(Serialization, RoundTripIsExact) {
  const auto rule = bsr::small_first(2);
  const auto sol = bsr::solve_master_ode(rule, 1.0, 0.01);
  const auto back = bsr::ode_solution_from_json(nlohmann::json::parse(bsr::to_json(sol).dump()));
  EXPECT_EQ(back.states, sol.states);
  EXPECT_EQ(back.grid, sol.grid);
  const auto p = bsr::inflate_rates(bsr::rate_functions(rule, sol), 0.001);
  const auto pb = bsr::rate_profile_from_json(nlohmann::json::parse(bsr::to_json(p).dump()));
  EXPECT_EQ(pb.a, p.a);
  EXPECT_EQ(pb.c, p.c);
  EXPECT_EQ(pb.b, p.b);
  EXPECT_EQ(pb.delta, p.delta);
}

}  // namespace
