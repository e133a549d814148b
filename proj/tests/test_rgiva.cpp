#include <gtest/gtest.h>

#include <cmath>

#include "bsr/rgiva.hpp"
#include "bsr/spectral.hpp"
#include "bsr/stats.hpp"
#include "test_support.hpp"

namespace {

using bsr::testing::bf_profile;
using bsr::testing::constant_profile;

bsr::ClusterTrajectory flat(double birth, int seed = 2) {
  bsr::ClusterTrajectory x;
  x.birth = birth;
  x.seed = seed;
  return x;
}

TEST(CumulativeDensity, LinearDensityInverts) {
  std::vector<double> f;
  for (int k = 0; k <= 20; ++k) f.push_back(0.1 * k);  // f(u) = u on [0,2]
  const bsr::CumulativeDensity F(f, 0.1);
  for (double u : {0.0, 0.05, 0.7, 1.33, 2.0}) {
    EXPECT_NEAR(F(u), u * u / 2, 1e-12);
    EXPECT_NEAR(F.invert(u * u / 2), u, 1e-9);
  }
  EXPECT_NEAR(F.between(0.5, 1.5), 1.0, 1e-12);
}

TEST(SampleCloud, NoImmigrationMeansEmpty) {
  bsr::Rng rng(1);
  const auto cloud = bsr::sample_cloud(constant_profile(2, 0.0, 1.0, 1.0), 1e5, 1.5, rng);
  EXPECT_TRUE(cloud.clusters.empty());
}

TEST(SampleCloud, NoAttachmentKeepsSeedsAndPoissonCount) {
  bsr::Rng rng(2);
  const double n = 2000;
  const auto cloud = bsr::sample_cloud(constant_profile(2, 1.0, 0.0, 1.0), n, 1.0, rng);
  // two types, each Poisson(n)
  EXPECT_NEAR(static_cast<double>(cloud.clusters.size()), 2 * n, 4 * std::sqrt(2 * n));
  for (const auto& c : cloud.clusters) {
    EXPECT_TRUE(c.jumps.empty());
    EXPECT_EQ(c.size_at(1.0), static_cast<std::uint64_t>(3 + c.type));
    EXPECT_GE(c.birth, 0.0);
    EXPECT_LE(c.birth, 1.0);
  }
}

TEST(SampleCloud, RefusesHugeClouds) {
  bsr::Rng rng(3);
  EXPECT_THROW(bsr::sample_cloud(constant_profile(1, 1.0, 0.0, 1.0), 1e9, 1.0, rng), bsr::MalformedInput);
  EXPECT_THROW(bsr::sample_cloud(constant_profile(1, 1.0, 0.0, 1.0), 10, 3.0, rng), bsr::MalformedInput);
}

TEST(GrowthSampler, BohmanFriezeMeanMatchesMomentField) {
  const auto& p = bf_profile();
  const bsr::GrowthSampler g(p);
  const bsr::MomentField f(p);
  bsr::Rng rng(4);
  for (double v : {0.5, 1.0, 1.5}) {
    std::vector<double> w;
    for (int k = 0; k < 10000; ++k) w.push_back(static_cast<double>(g.grow(0, 0.0, v, rng).size_at(v)));
    EXPECT_NEAR(bsr::stats::mean(w), f.mean(0, 0.0, v), 3 * bsr::stats::standard_error(w)) << v;
  }
}

TEST(GrowthSampler, YuleMomentsForConstantRate) {
  const auto p = constant_profile(1, 1.0, 1.0, 1.0);
  const bsr::GrowthSampler g(p);
  bsr::Rng rng(5);
  const double v = 1.0, e = std::exp(v);
  std::vector<double> w;
  for (int k = 0; k < 20000; ++k) w.push_back(static_cast<double>(g.grow(0, 0.0, v, rng).size_at(v)));
  const double var = 2 * (e * e - e);
  EXPECT_NEAR(bsr::stats::mean(w), 2 * e, 3 * std::sqrt(var / 20000));
  EXPECT_NEAR(bsr::stats::variance(w), var, 0.05 * var);
}

TEST(GrowthSampler, JumpsAreOrderedAndInRange) {
  const auto p = constant_profile(3, 1.0, 0.5, 1.0);
  const bsr::GrowthSampler g(p);
  bsr::Rng rng(6);
  for (int k = 0; k < 200; ++k) {
    const auto x = g.grow(k % 3, 0.3, 2.0, rng);
    double last = x.birth;
    for (const auto& [tau, j] : x.jumps) {
      EXPECT_GT(tau, last);
      EXPECT_GE(j, 1);
      EXPECT_LE(j, 3);
      last = tau;
    }
    EXPECT_EQ(x.size_at(0.2), 0u);
  }
}

TEST(PairIntegral, ConstantClustersGiveFour) {
  const auto p = constant_profile(1, 1.0, 0.0, 1.0, 1.0, 100);
  const bsr::CumulativeDensity B(p.b, p.h);
  const double I = bsr::pair_kernel_integral(flat(0.0), flat(0.0), B, 1.0);
  EXPECT_NEAR(I, 4.0, 1e-12);
  EXPECT_NEAR(-std::expm1(-I / 1.0), 1 - std::exp(-4.0), 1e-12);
}

TEST(PairIntegral, SymmetricWithJumps) {
  const auto& p = bf_profile();
  const bsr::GrowthSampler g(p);
  const bsr::CumulativeDensity B(p.b, p.h);
  bsr::Rng rng(7);
  for (int k = 0; k < 50; ++k) {
    const auto x = g.grow(0, 0.1 * (k % 7), 1.8, rng), y = g.grow(0, 0.05 * (k % 11), 1.8, rng);
    EXPECT_EQ(bsr::pair_kernel_integral(x, y, B, 1.8), bsr::pair_kernel_integral(y, x, B, 1.8));
  }
  // hand check: w_x = 2 then 3 after 0.5, w_y = 2 born at 0.25, b = 1
  const auto q = constant_profile(1, 1.0, 0.0, 1.0, 1.0, 100);
  const bsr::CumulativeDensity Bq(q.b, q.h);
  auto x = flat(0.0);
  x.jumps = {{0.5, 1}};
  EXPECT_NEAR(bsr::pair_kernel_integral(x, flat(0.25), Bq, 1.0), 2 * 2 * 0.25 + 3 * 2 * 0.5, 1e-12);
}

TEST(LinkClusters, NoEdgesWithoutB) {
  bsr::Rng rng(8);
  const auto p = constant_profile(1, 1.0, 0.5, 0.0);
  const auto cloud = bsr::sample_cloud(p, 500, 1.5, rng);
  for (auto method : {bsr::LinkMethod::poisson_edges, bsr::LinkMethod::pairwise}) {
    const auto linked = bsr::link_clusters(cloud, p, rng, method);
    EXPECT_EQ(linked.volume.size(), cloud.clusters.size());
  }
}

TEST(LinkClusters, VolumeConservation) {
  bsr::Rng rng(9);
  const auto& p = bf_profile();
  const auto cloud = bsr::sample_cloud(p, 2000, 1.1, rng);
  for (auto method : {bsr::LinkMethod::poisson_edges, bsr::LinkMethod::pairwise}) {
    const auto linked = bsr::link_clusters(cloud, p, rng, method);
    std::uint64_t total = 0;
    for (auto v : linked.volume) {
      EXPECT_GT(v, 0u);
      total += v;
    }
    EXPECT_EQ(total, cloud.total_volume());
    EXPECT_LT(linked.volume.size(), cloud.clusters.size());
  }
}

TEST(LinkClusters, TwoClusterProbability) {
  const auto p = constant_profile(1, 1.0, 0.0, 1.0, 1.0, 100);
  bsr::ClusterCloud cloud{1.0, 1.0, {flat(0.0), flat(0.0)}};
  const double expect = 1 - std::exp(-4.0);
  bsr::Rng rng(10);
  const int trials = 20000;
  for (auto method : {bsr::LinkMethod::poisson_edges, bsr::LinkMethod::pairwise}) {
    int hits = 0;
    for (int k = 0; k < trials; ++k) hits += bsr::link_clusters(cloud, p, rng, method).volume.size() == 1;
    EXPECT_NEAR(hits / double(trials), expect, 4 * std::sqrt(expect * (1 - expect) / trials));
  }
}

TEST(LinkClusters, ThreeClusterConnectionMatchesExactFormula) {
  const auto p = constant_profile(1, 1.0, 0.0, 1.0, 1.0, 100);
  auto big = flat(0.0);
  big.jumps = {{0.4, 1}};
  bsr::ClusterCloud cloud{20.0, 1.0, {big, flat(0.2), flat(0.6)}};
  const bsr::CumulativeDensity B(p.b, p.h);
  auto prob = [&](int x, int y) {
    return -std::expm1(-bsr::pair_kernel_integral(cloud.clusters[x], cloud.clusters[y], B, 1.0) / cloud.n);
  };
  const double p01 = prob(0, 1), p02 = prob(0, 2), p12 = prob(1, 2);
  const double expect = p01 + (1 - p01) * p02 * p12;
  bsr::Rng rng(11);
  const int trials = 40000;
  for (auto method : {bsr::LinkMethod::poisson_edges, bsr::LinkMethod::pairwise}) {
    int hits = 0;
    for (int k = 0; k < trials; ++k) {
      const auto l = bsr::link_clusters(cloud, p, rng, method);
      hits += l.component[0] == l.component[1];
    }
    EXPECT_NEAR(hits / double(trials), expect, 4 * std::sqrt(expect * (1 - expect) / trials));
  }
}

TEST(LinkClusters, PairwiseGuard) {
  const auto p = constant_profile(1, 1.0, 0.0, 1.0, 1.0, 100);
  bsr::ClusterCloud cloud{1.0, 1.0, std::vector<bsr::ClusterTrajectory>(bsr::pairwise_guard + 1, flat(0.0))};
  bsr::Rng rng(12);
  EXPECT_THROW(bsr::link_clusters(cloud, p, rng, bsr::LinkMethod::pairwise), bsr::MalformedInput);
}

TEST(LinkClusters, CoupledLinksMonotoneInDelta) {
  const auto& p = bf_profile();
  const auto hi = bsr::inflate_rates(p, 0.05);
  bsr::Rng rng(13);
  const auto cloud = bsr::sample_cloud(hi, 3000, 1.0, rng);
  const auto a = bsr::link_clusters_coupled(cloud, p, 99);
  const auto b = bsr::link_clusters_coupled(cloud, hi, 99);
  // the partition at delta refines the one at delta'
  for (std::size_t x = 0; x < cloud.clusters.size(); ++x) {
    for (std::size_t y = x + 1; y < cloud.clusters.size(); y += 37) {
      if (a.component[x] == a.component[y]) {
        ASSERT_EQ(b.component[x], b.component[y]);
      }
    }
  }
  EXPECT_GE(b.largest, a.largest);
  EXPECT_LE(b.volume.size(), a.volume.size());
}

TEST(ConditionedRoot, NoEdgesGivesRootSize) {
  const auto p = constant_profile(2, 1.0, 0.5, 0.0);
  bsr::Rng rng(14);
  for (int k = 0; k < 20; ++k) {
    const auto r = bsr::conditioned_root_component(p, 300, 1.5, rng);
    EXPECT_EQ(r.volume, r.root_size);
    EXPECT_GE(r.root_size, 4u);
  }
}

TEST(ConditionedRoot, TinyHorizonGivesSeed) {
  bsr::Rng rng(15);
  const auto r = bsr::conditioned_root_component(bf_profile(), 1000, 1e-9, rng);
  EXPECT_EQ(r.volume, 2u);
  EXPECT_EQ(r.root_size, 2u);
}

}  // namespace
