#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "cmod/decay_memory.hpp"
#include "cmod/verification.hpp"

using namespace cmod;

namespace {

const UpdateMap kIdentity = [](std::span<const double> p) { return std::vector<double>(p.begin(), p.end()); };

// Weighted sums applied one event and one term at a time.
std::vector<StationMessage> loop_messages(const EventBatch& batch, const Matrix& reps, const NodeCatalog& catalog,
                                          double lambda) {
  const std::size_t n = catalog.size(), d = reps.cols(), f = catalog.feature_dim();
  std::vector<StationMessage> out(n, StationMessage{std::vector<double>(d + f + 1, 0.0), 0.0});
  for (const auto& e : batch.events) {
    const double w = std::exp(-lambda * (batch.window_end - e.timestamp));
    for (int side = 0; side < 2; ++side) {
      const NodeId self = side == 0 ? e.origin : e.destination;
      const NodeId other = side == 0 ? e.destination : e.origin;
      for (std::size_t k = 0; k < d; ++k) out[self].p[k] += w * reps(other, k);
      for (std::size_t k = 0; k < f; ++k) out[self].p[d + k] += w * catalog.features()(other, k);
      out[self].p[d + f] += w * (side == 0 ? 1.0 : -1.0);
      out[self].q += w;
    }
  }
  return out;
}

double rel(double x, double y) { return std::abs(x - y) / std::max(std::abs(y), 1e-300); }

}  // namespace

TEST(EventRepresentation, OriginSeesDestination) {
  auto catalog = NodeCatalog::indexed(2);
  Matrix reps(2, 2);
  EXPECT_EQ(event_representation({0, 1, 0.0}, 0, reps, catalog), (std::vector<double>{0, 0, 0, 1, 1}));
}

TEST(EventRepresentation, DestinationSeesOrigin) {
  auto catalog = NodeCatalog::indexed(2);
  Matrix reps{{0.5, 0.5}, {0, 0}};
  EXPECT_EQ(event_representation({0, 1, 0.0}, 1, reps, catalog), (std::vector<double>{0.5, 0.5, 1, 0, -1}));
}

TEST(EventRepresentation, SelfLoopIsOrigin) {
  auto catalog = NodeCatalog::indexed(2);
  Matrix reps{{0.25, -1}, {0, 0}};
  EXPECT_EQ(event_representation({0, 0, 0.0}, 0, reps, catalog), (std::vector<double>{0.25, -1, 1, 0, 1}));
  EXPECT_THROW(event_representation({0, 0, 0.0}, 1, reps, catalog), NodeNotEndpoint);
}

TEST(AggregateMessages, UnitWeightAtReferenceTime) {
  auto catalog = NodeCatalog::indexed(2);
  Matrix reps{{0, 0}, {0.3, 0.7}};
  EventBatch b{{{0, 1, 10.0}}, 0.0, 10.0};
  auto msgs = aggregate_messages(b, reps, catalog, DecayConfig{0.1, 2, true});
  EXPECT_EQ(msgs[0].q, 1.0);
  EXPECT_EQ(msgs[0].p, event_representation(b.events[0], 0, reps, catalog));
}

TEST(AggregateMessages, DecayedWeight) {
  auto catalog = NodeCatalog::indexed(2);
  EventBatch b{{{0, 1, 0.0}}, 0.0, 10.0};
  auto msgs = aggregate_messages(b, Matrix(2, 2), catalog, DecayConfig{0.1, 2, true});
  EXPECT_NEAR(msgs[0].q, 0.3678794, 5e-8);
  EXPECT_NEAR(msgs[1].q, 0.3678794, 5e-8);
}

TEST(AggregateMessages, SelfLoopMessagesBothRoles) {
  auto catalog = NodeCatalog::indexed(1);
  EventBatch b{{{0, 0, 5.0}}, 0.0, 5.0};
  auto msgs = aggregate_messages(b, Matrix{{2.0}}, catalog, DecayConfig{0.1, 1, true});
  EXPECT_EQ(msgs[0].q, 2.0);
  EXPECT_EQ(msgs[0].p, (std::vector<double>{4.0, 2.0, 0.0}));
}

TEST(AggregateMessages, MatchesPerEventLoop) {
  const std::size_t n = 10, d = 3;
  const double lambda = std::log(2.0) / 300.0;
  auto catalog = NodeCatalog::indexed(n);
  auto events = random_events(500, n, 1800.0, 5);
  const Matrix reps = random_matrix(n, d, 6);
  EventBatch b{events, 0.0, 1800.0};
  auto got = aggregate_messages(b, reps, catalog, DecayConfig{lambda, d, true});
  auto expect = loop_messages(b, reps, catalog, lambda);
  for (std::size_t i = 0; i < n; ++i) {
    EXPECT_LE(rel(got[i].q, expect[i].q), 1e-12);
    for (std::size_t k = 0; k < expect[i].p.size(); ++k) {
      if (expect[i].p[k] == 0.0) EXPECT_LE(std::abs(got[i].p[k]), 1e-12);
      else EXPECT_LE(rel(got[i].p[k], expect[i].p[k]), 1e-12) << "node " << i << " k " << k;
    }
  }
}

TEST(UpdateStationMemory, FirstMessage) {
  auto mem = StationMemory::fresh(3);
  StationMessage msg{{1, 2, 3}, 1.0};
  auto out = update_station_memory(mem, msg, 0.0, kIdentity, DecayConfig{0.1, 3, true});
  EXPECT_EQ(out.a, (std::vector<double>{1, 2, 3}));
  EXPECT_EQ(out.b, 2.0);
}

TEST(UpdateStationMemory, HalfLifeHalvesBoth) {
  const double lambda = 0.01;
  StationMemory mem{{4.0, -2.0}, 3.0, 0.0};
  auto out = update_station_memory(mem, StationMessage{{0, 0}, 0.0}, std::log(2.0) / lambda, kIdentity,
                                   DecayConfig{lambda, 2, true});
  EXPECT_NEAR(out.a[0], 2.0, 1e-14);
  EXPECT_NEAR(out.a[1], -1.0, 1e-14);
  EXPECT_NEAR(out.b, 1.5, 1e-14);
  EXPECT_EQ(read_representation(out), read_representation(mem));
}

TEST(UpdateStationMemory, RejectsTimeRegression) {
  StationMemory mem{{0.0}, 1.0, 10.0};
  EXPECT_THROW(update_station_memory(mem, StationMessage{{0}, 0}, 5.0, kIdentity, DecayConfig{0.1, 1, true}),
               TimeRegression);
}

TEST(ReadRepresentation, Ratio) {
  EXPECT_EQ(read_representation(StationMemory{{2, 4}, 2.0, 0}), (std::vector<double>{1, 2}));
  EXPECT_EQ(read_representation(StationMemory::fresh(2)), (std::vector<double>{0, 0}));
  EXPECT_THROW(read_representation(StationMemory{{1}, 0.0, 0}), DegenerateNormalizer);
}

TEST(OracleRepresentation, ConvexityCases) {
  const DecayConfig cfg{0.01, 2, true};
  Matrix reps{{0, 0}, {0.4, -0.6}};
  std::vector<TransactionEvent> two{{0, 1, 10.0}, {1, 0, 90.0}};
  // Without the birth term the mean of identical values is that value.
  auto r = oracle_representation(0, two, 100.0, reps, cfg, -1e9);
  EXPECT_NEAR(r[0], 0.4, 1e-12);
  EXPECT_NEAR(r[1], -0.6, 1e-12);
  std::vector<TransactionEvent> one{{1, 0, 100.0}};
  r = oracle_representation(0, one, 100.0, reps, cfg, -1e9);
  EXPECT_NEAR(r[0], 0.4, 1e-12);
}

TEST(OracleRepresentation, OnlinePathMatchesClosedForm) {
  OracleCheckConfig c;
  c.events = 3000;
  c.nodes = 12;
  c.seed = 9;
  auto rep = run_oracle_check(c);
  EXPECT_GT(rep.batches, 0u);
  EXPECT_LE(rep.max_rel_error, 1e-9);
}

TEST(DecayProperty, EmptyUpdatesPreserveRepresentation) {
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> u(-5, 5), dt(0, 1e5), pos(0.01, 10);
  const DecayConfig cfg{std::log(2.0) / 3600.0, 4, true};
  for (int trial = 0; trial < 100; ++trial) {
    StationMemory mem{{u(rng), u(rng), u(rng), u(rng)}, pos(rng), 0.0};
    const auto before = read_representation(mem);
    double t = 0.0;
    for (int k = 0; k < 5; ++k) {
      t += dt(rng);
      mem = update_station_memory(mem, StationMessage{{0, 0, 0, 0}, 0.0}, t, kIdentity, cfg);
    }
    const auto after = read_representation(mem);
    for (std::size_t i = 0; i < 4; ++i) EXPECT_LE(rel(after[i], before[i]), 1e-12);
  }
}

TEST(DecayProperty, LinearFrozenUpdateIsBatchSplitInvariant) {
  const std::size_t n = 6, d = 3;
  auto catalog = NodeCatalog::indexed(n);
  const Matrix frozen = random_matrix(n, d, 2);
  const DecayConfig cfg{std::log(2.0) / 600.0, d, true};
  const RepresentationLayout bare{false, false};
  auto events = random_events(80, n, 1200.0, 4);

  auto run = [&](const std::vector<EventBatch>& batches) {
    std::vector<StationMemory> mem(n, StationMemory::fresh(d, 0.0));
    for (const auto& b : batches) {
      auto msgs = aggregate_messages(b, frozen, catalog, cfg, bare);
      for (std::size_t i = 0; i < n; ++i) mem[i] = update_station_memory(mem[i], msgs[i], b.window_end, kIdentity, cfg);
    }
    return mem;
  };
  auto whole = run({EventBatch{events, 0.0, 1200.0}});
  std::vector<TransactionEvent> first, second;
  for (const auto& e : events) (e.timestamp <= 500.0 ? first : second).push_back(e);
  auto split = run({EventBatch{first, 0.0, 500.0}, EventBatch{second, 500.0, 1200.0}});
  for (std::size_t i = 0; i < n; ++i) {
    EXPECT_LE(rel(split[i].b, whole[i].b), 1e-12);
    for (std::size_t k = 0; k < d; ++k) {
      EXPECT_LE(std::abs(split[i].a[k] - whole[i].a[k]), 1e-12 * std::max(1.0, std::abs(whole[i].a[k])));
    }
  }
}

TEST(DecayProperty, RepresentationIsConvexCombination) {
  // With identity updates and frozen neighbours each coordinate stays inside
  // the hull of {0} and the neighbour values.
  OracleCheckConfig c;
  c.events = 400;
  c.nodes = 5;
  c.d = 2;
  auto events = random_events(c.events, c.nodes, 7200.0, 8);
  const Matrix frozen = random_matrix(c.nodes, c.d, 9);
  for (std::size_t node = 0; node < c.nodes; ++node) {
    auto r = oracle_representation(node, events, 7200.0, frozen, DecayConfig{c.lambda, c.d, true}, 0.0);
    for (std::size_t k = 0; k < c.d; ++k) {
      double lo = 0.0, hi = 0.0;
      for (std::size_t j = 0; j < c.nodes; ++j) {
        lo = std::min(lo, frozen(j, k));
        hi = std::max(hi, frozen(j, k));
      }
      EXPECT_GE(r[k], lo - 1e-12);
      EXPECT_LE(r[k], hi + 1e-12);
    }
  }
}
