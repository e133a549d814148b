#include <gtest/gtest.h>

#include <cmath>

#include "bsr/graphsim.hpp"
#include "bsr/stats.hpp"

namespace {

TEST(DisjointForest, UnionAddsSizes) {
  bsr::DisjointForest f(10, 2);
  f.unite(0, 1);
  f.unite(1, 2);
  f.unite(3, 4);
  f.unite(4, 5);
  f.unite(5, 6);
  ASSERT_EQ(f.component_size(0), 3u);
  ASSERT_EQ(f.component_size(6), 4u);
  EXPECT_TRUE(f.unite(2, 3));
  EXPECT_EQ(f.component_size(6), 7u);
  EXPECT_FALSE(f.unite(0, 6));
  EXPECT_EQ(f.largest(), 7u);
  EXPECT_EQ(f.components(), 4u);
  EXPECT_EQ(f.sum_squares(), 49u + 3u);
  EXPECT_EQ(f.class_vertices(), (std::vector<std::uint64_t>{3, 0, 7}));
  EXPECT_TRUE(f.consistent());
}

TEST(Simulator, EmptyGraphCensus) {
  const auto res = bsr::run_continuous(bsr::bohman_frieze(), 100, 0.0, {0.0}, 1, {.histograms = true});
  ASSERT_EQ(res.censuses.size(), 1u);
  const auto& c = res.censuses[0];
  EXPECT_EQ(c.singleton_fraction(), 1.0);
  EXPECT_EQ(c.L1, 1u);
  ASSERT_EQ(c.histogram.size(), 1u);
  EXPECT_EQ(c.histogram[0], (std::pair<std::uint64_t, std::uint64_t>{1, 100}));
  const auto d = bsr::run_discrete(bsr::bohman_frieze(), 100, 0, {0.0}, 1);
  EXPECT_EQ(d.censuses[0].L1, 1u);
}

TEST(Simulator, ScriptedBohmanFrieze) {
  // Vertices 1..6 of the hand enumeration are 0..5 here.
  bsr::Simulator sim(bsr::bohman_frieze(), 6);
  auto e1 = sim.apply({0, 1, 2, 3});
  EXPECT_EQ(e1.choice, bsr::EdgeChoice::first);
  auto e2 = sim.apply({0, 1, 2, 3});
  EXPECT_EQ(e2.choice, bsr::EdgeChoice::second);
  auto e3 = sim.apply({4, 5, 0, 1});
  EXPECT_EQ(e3.choice, bsr::EdgeChoice::first);
  auto& f = sim.forest();
  EXPECT_EQ(f.find(0), f.find(1));
  EXPECT_EQ(f.find(2), f.find(3));
  EXPECT_EQ(f.find(4), f.find(5));
  EXPECT_NE(f.find(0), f.find(2));
  EXPECT_EQ(sim.census(0).L1, 2u);
  // first doubleton is {1,2}
  EXPECT_EQ(sim.first_component_size(), 2u);
}

TEST(Simulator, ScriptedDiscreteStep) {
  bsr::Simulator sim(bsr::bohman_frieze(), 4, bsr::SamplingMode::edge_pairs);
  sim.apply({0, 1, 2, 3});
  EXPECT_EQ(sim.forest().find(0), sim.forest().find(1));
  EXPECT_NE(sim.forest().find(2), sim.forest().find(3));
}

TEST(Simulator, SelfPairConsumesEvent) {
  bsr::Simulator sim(bsr::erdos_renyi(), 8);
  const auto out = sim.apply({0, 1, 3, 3});
  EXPECT_FALSE(out.merged);
  EXPECT_EQ(sim.forest().components(), 8u);
  EXPECT_EQ(sim.events(), 1u);
}

TEST(Simulator, EdgePairsNeverSelfLoop) {
  bsr::Simulator sim(bsr::bohman_frieze(), 4, bsr::SamplingMode::edge_pairs);
  bsr::Rng rng(3);
  for (int k = 0; k < 1000; ++k) {
    const auto v = sim.draw(rng);
    ASSERT_NE(v[0], v[1]);
    ASSERT_NE(v[2], v[3]);
  }
}

TEST(RunContinuous, EventCountNearHalfN) {
  const std::uint64_t n = 20000;
  std::vector<double> counts;
  for (std::uint64_t s = 0; s < 20; ++s) {
    counts.push_back(static_cast<double>(bsr::run_continuous(bsr::bohman_frieze(), n, 1.0, {}, s).events));
  }
  EXPECT_NEAR(bsr::stats::mean(counts), n / 2.0, 4 * std::sqrt(n / 2.0 / 20));
  std::vector<double> exact;
  for (std::uint64_t s = 0; s < 20; ++s) {
    exact.push_back(static_cast<double>(
        bsr::run_continuous(bsr::bohman_frieze(), n, 1.0, {}, s, {.exact_times = true}).events));
  }
  EXPECT_NEAR(bsr::stats::mean(exact), n / 2.0, 4 * std::sqrt(n / 2.0 / 20));
}

TEST(RunContinuous, DeterministicReplayAndMonotoneL1) {
  const std::vector<double> cps{0.2, 0.6, 1.0, 1.1, 1.3};
  const auto a = bsr::run_continuous(bsr::small_first(2), 5000, 1.3, cps, 42, {.check_every = 1000});
  const auto b = bsr::run_continuous(bsr::small_first(2), 5000, 1.3, cps, 42);
  const auto c = bsr::run_continuous(bsr::small_first(2), 5000, 1.3, cps, 43);
  ASSERT_EQ(a.censuses.size(), cps.size());
  bool differs = false;
  for (std::size_t k = 0; k < cps.size(); ++k) {
    EXPECT_EQ(bsr::census_csv_row(a.censuses[k]), bsr::census_csv_row(b.censuses[k]));
    differs |= bsr::census_csv_row(a.censuses[k]) != bsr::census_csv_row(c.censuses[k]);
    if (k > 0) {
      EXPECT_GE(a.censuses[k].L1, a.censuses[k - 1].L1);
    }
  }
  EXPECT_TRUE(differs);
}

TEST(RunContinuous, HistogramAccountsForAllVertices) {
  const auto res = bsr::run_continuous(bsr::bohman_frieze(), 3000, 1.5, {0.5, 1.5}, 7, {.histograms = true});
  for (const auto& c : res.censuses) {
    std::uint64_t total = 0, biggest = 0;
    for (const auto& [s, count] : c.histogram) {
      total += s * count;
      biggest = std::max(biggest, s);
    }
    EXPECT_EQ(total, 3000u);
    EXPECT_EQ(biggest, c.L1);
    EXPECT_DOUBLE_EQ(c.singleton_fraction(), static_cast<double>(c.histogram.front().second) / 3000.0);
  }
}

TEST(RunDiscrete, LabelsStepsByTwoKOverN) {
  const auto res = bsr::run_discrete(bsr::bohman_frieze(), 1000, 500, {0.0, 0.5, 1.0}, 5);
  ASSERT_EQ(res.censuses.size(), 3u);
  EXPECT_EQ(res.events, 500u);
  EXPECT_EQ(res.censuses[2].time, 1.0);
}

TEST(RunContinuous, PhaseTransitionContrast) {
  const double tc = 1.1763;
  const std::uint64_t n = 100000;
  const auto res = bsr::run_continuous(bsr::bohman_frieze(), n, tc + 0.1, {tc - 0.1, tc + 0.1}, 11);
  EXPECT_LT(static_cast<double>(res.censuses[0].L1) / n, 0.01);
  EXPECT_GT(static_cast<double>(res.censuses[1].L1) / n, 0.05);
}

TEST(HydrodynamicDeviation, SmallAndBounded) {
  const auto sol = bsr::solve_master_ode(bsr::bohman_frieze(), 2.0, 2.0 / 4000);
  const double d = bsr::hydrodynamic_deviation(bsr::bohman_frieze(), sol, 20000, 1);
  EXPECT_LE(d, 1.0);
  EXPECT_LT(d, 0.03);
}

TEST(RateAudit, DoubletonCountMatchesQuadrature) {
  const auto sol = bsr::solve_master_ode(bsr::bohman_frieze(), 1.0, 1e-4);
  const auto p = bsr::rate_functions(bsr::bohman_frieze(), sol);
  const std::uint64_t n = 100000;
  const auto audit = bsr::rate_audit(bsr::bohman_frieze(), p, n, 0.0, 0.1, 9);
  // independent quadrature of n int_0^0.1 a0(x(u)) du
  double integral = 0.0;
  for (std::size_t k = 0; k < 1000; ++k) {
    const double x = sol.states[k][0], y = sol.states[k + 1][0];
    integral += 0.5 * 1e-4 * ((x * x - std::pow(x, 4) / 2) + (y * y - std::pow(y, 4) / 2));
  }
  const auto& a = audit.categories[0];
  EXPECT_NEAR(static_cast<double>(a.count), n * integral, 3 * std::sqrt(static_cast<double>(a.count)));
  EXPECT_NEAR(a.predicted, n * integral, 0.01 * n * integral);
}

TEST(RateAudit, NoBigComponentsMeansExactPass) {
  const auto sol = bsr::solve_master_ode(bsr::small_first(3), 0.01, 1e-4);
  const auto p = bsr::rate_functions(bsr::small_first(3), sol);
  const auto audit = bsr::rate_audit(bsr::small_first(3), p, 1000, 0.0, 0.002, 1);
  const auto& b = audit.categories.back();
  EXPECT_EQ(b.count, 0u);
  EXPECT_EQ(b.ratio(), 1.0);
  EXPECT_EQ(b.z(), 0.0);
  EXPECT_TRUE(audit.insufficient);
}

TEST(RateAudit, RejectsBadWindow) {
  const auto sol = bsr::solve_master_ode(bsr::bohman_frieze(), 1.0, 1e-3);
  const auto p = bsr::rate_functions(bsr::bohman_frieze(), sol);
  EXPECT_THROW(bsr::rate_audit(bsr::bohman_frieze(), p, 1000, 0.5, 0.2, 1), bsr::MalformedInput);
}

}  // namespace
