#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "cmod/model.hpp"
#include "cmod/multilevel.hpp"
#include "cmod/verification.hpp"
#include "test_util.hpp"

using namespace cmod;
using cmod::testing::small_hyper;

namespace {

// x^T W1^T W2 y, summed one term at a time.
double bilinear(const Matrix& x, std::size_t xi, const Matrix& y, std::size_t yi, const Matrix& w1, const Matrix& w2) {
  double total = 0.0;
  for (std::size_t r = 0; r < w1.rows(); ++r) {
    double l = 0.0, m = 0.0;
    for (std::size_t k = 0; k < w1.cols(); ++k) l += w1(r, k) * x(xi, k);
    for (std::size_t k = 0; k < w2.cols(); ++k) m += w2(r, k) * y(yi, k);
    total += l * m;
  }
  return total;
}

std::vector<StationMessage> random_messages(std::size_t n, std::size_t width, std::uint64_t seed) {
  auto m = random_matrix(n, width + 1, seed);
  std::vector<StationMessage> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    out[i].p.assign(m.row(i).begin(), m.row(i).begin() + static_cast<std::ptrdiff_t>(width));
    out[i].q = i % 3 == 0 ? 0.0 : 1.0 + std::abs(m(i, width));
    if (out[i].q == 0.0) std::fill(out[i].p.begin(), out[i].p.end(), 0.0);
  }
  return out;
}

struct Instance {
  HyperParams hp;
  ModelParams params;
  Matrix reps, cluster, area;
};

Instance random_instance(std::size_t n, std::size_t heads, std::size_t clusters, std::uint64_t seed) {
  Instance x;
  x.hp = small_hyper(n, 4, heads, clusters);
  x.params = init_params(x.hp, seed);
  x.reps = random_matrix(n, 4, seed + 1);
  x.cluster = random_matrix(clusters, 4, seed + 2);
  x.area = random_matrix(1, 4, seed + 3);
  return x;
}

}  // namespace

TEST(Relations, LogitsMatchTripleLoop) {
  auto x = random_instance(5, 2, 2, 1);
  auto rel = compute_relations(x.reps, x.cluster, x.area, x.params);
  ASSERT_EQ(rel.heads(), 2u);
  for (std::size_t h = 0; h < 2; ++h) {
    for (std::size_t i = 0; i < 5; ++i)
      for (std::size_t c = 0; c < 2; ++c)
        EXPECT_NEAR(rel.ac[h](i, c), bilinear(x.reps, i, x.cluster, c, x.params.wc1[h], x.params.wc2[h]), 1e-12);
    for (std::size_t c = 0; c < 2; ++c)
      EXPECT_NEAR(rel.ag[h](c, 0), bilinear(x.cluster, c, x.area, 0, x.params.wg1[h], x.params.wg2[h]), 1e-12);
  }
}

TEST(Relations, ZeroRepresentationsGiveUniformWeights) {
  auto x = random_instance(5, 2, 3, 2);
  auto rel = compute_relations(Matrix(5, 4), Matrix(3, 4), Matrix(1, 4), x.params);
  for (std::size_t h = 0; h < 2; ++h) {
    for (double v : rel.acm[h].data()) EXPECT_NEAR(v, 1.0 / 5.0, 1e-15);
    for (double v : rel.ace[h].data()) EXPECT_NEAR(v, 1.0 / 3.0, 1e-15);
  }
}

TEST(Relations, SingleClusterDegeneracy) {
  auto x = random_instance(4, 2, 1, 3);
  auto rel = compute_relations(x.reps, x.cluster, x.area, x.params);
  for (std::size_t h = 0; h < 2; ++h) {
    double col = 0.0;
    for (std::size_t i = 0; i < 4; ++i) {
      EXPECT_EQ(rel.ace[h](i, 0), 1.0);
      EXPECT_GE(rel.acm[h](i, 0), 0.0);
      col += rel.acm[h](i, 0);
    }
    EXPECT_NEAR(col, 1.0, 1e-15);
    EXPECT_EQ(rel.agm[h](0, 0), 1.0);
    EXPECT_EQ(rel.age[h](0, 0), 1.0);
  }
}

TEST(Relations, StochasticAcrossRandomInstances) {
  for (std::uint64_t s = 0; s < 20; ++s) {
    auto x = random_instance(3 + s % 5, std::size_t{1} << (s % 3), 1 + s % 4, s);
    auto rel = compute_relations(x.reps, x.cluster, x.area, x.params);
    EXPECT_LE(stochasticity_error(rel), 1e-12);
  }
}

TEST(ProjectClusterMessages, SingleStationIdentityProjection) {
  HyperParams hp = small_hyper(1, 2, 1, 1);
  auto catalog = NodeCatalog::indexed(1);
  auto params = init_params(hp, 0);
  const std::size_t ds = hp.station_message_width();
  hp.d_msg = ds;
  params.wc3 = {Matrix::identity(ds)};
  auto rel = compute_relations(Matrix(1, 2), Matrix(1, 2), Matrix(1, 2), params);
  std::vector<StationMessage> msgs{{{0.5, -1.0, 2.0, 1.0}, 1.0}};
  auto out = project_cluster_messages(rel, msgs, params);
  EXPECT_EQ(out, (Matrix{{0.5, -1.0, 2.0, 1.0}}));
}

TEST(ProjectClusterMessages, IdleStationsGiveZero) {
  auto x = random_instance(5, 2, 2, 4);
  auto rel = compute_relations(x.reps, x.cluster, x.area, x.params);
  std::vector<StationMessage> idle(5, StationMessage{std::vector<double>(x.hp.station_message_width(), 0.0), 0.0});
  auto out = project_cluster_messages(rel, idle, x.params);
  for (double v : out.data()) EXPECT_EQ(v, 0.0);
  EXPECT_EQ(project_area_message(rel, out, x.params), Matrix(1, x.hp.d_msg));
}

TEST(ProjectClusterMessages, MatchesLoopOracle) {
  auto x = random_instance(5, 2, 3, 5);
  auto rel = compute_relations(x.reps, x.cluster, x.area, x.params);
  const std::size_t ds = x.hp.station_message_width(), dh = x.hp.head_message_width();
  auto msgs = random_messages(5, ds, 6);
  auto got = project_cluster_messages(rel, msgs, x.params);
  ASSERT_EQ(got.rows(), 3u);
  ASSERT_EQ(got.cols(), x.hp.d_msg);
  for (std::size_t h = 0; h < 2; ++h)
    for (std::size_t c = 0; c < 3; ++c)
      for (std::size_t o = 0; o < dh; ++o) {
        double expect = 0.0;
        for (std::size_t j = 0; j < 5; ++j) {
          if (msgs[j].q == 0.0) continue;
          double proj = 0.0;
          for (std::size_t k = 0; k < ds; ++k) proj += x.params.wc3[h](o, k) * msgs[j].p[k] / msgs[j].q;
          expect += rel.acm[h](j, c) * proj;
        }
        EXPECT_NEAR(got(c, h * dh + o), expect, 1e-12);
      }
}

TEST(ProjectAreaMessage, MatchesLoopOracle) {
  auto x = random_instance(5, 2, 3, 7);
  auto rel = compute_relations(x.reps, x.cluster, x.area, x.params);
  const std::size_t dh = x.hp.head_message_width();
  auto cm = random_matrix(3, x.hp.d_msg, 8);
  auto got = project_area_message(rel, cm, x.params);
  for (std::size_t h = 0; h < 2; ++h)
    for (std::size_t o = 0; o < dh; ++o) {
      double expect = 0.0;
      for (std::size_t c = 0; c < 3; ++c) {
        double proj = 0.0;
        for (std::size_t k = 0; k < x.hp.d_msg; ++k) proj += x.params.wg3[h](o, k) * cm(c, k);
        expect += rel.agm[h](c, 0) * proj;
      }
      EXPECT_NEAR(got(0, h * dh + o), expect, 1e-12);
    }
}

TEST(ProjectAreaMessage, SingleClusterIsConcatenatedProjection) {
  auto x = random_instance(4, 2, 1, 9);
  auto rel = compute_relations(x.reps, x.cluster, x.area, x.params);
  auto cm = random_matrix(1, x.hp.d_msg, 10);
  auto got = project_area_message(rel, cm, x.params);
  const std::size_t dh = x.hp.head_message_width();
  for (std::size_t h = 0; h < 2; ++h)
    for (std::size_t o = 0; o < dh; ++o) {
      double proj = 0.0;
      for (std::size_t k = 0; k < x.hp.d_msg; ++k) proj += x.params.wg3[h](o, k) * cm(0, k);
      EXPECT_NEAR(got(0, h * dh + o), proj, 1e-14);
    }
}

TEST(UpdateLevelMemories, IdleWithoutElapsedTimeIsIdentity) {
  auto x = random_instance(4, 2, 2, 11);
  LevelState s{x.cluster, x.area, 100.0, 1.0};
  auto out = update_level_memories(s, Matrix(2, x.hp.d_msg), Matrix(1, x.hp.d_msg), 100.0, x.params, x.hp.decay(),
                                   false);
  EXPECT_EQ(out.cluster_mem, s.cluster_mem);
  EXPECT_EQ(out.area_mem, s.area_mem);
}

TEST(UpdateLevelMemories, HalfLifeHalves) {
  auto x = random_instance(4, 2, 2, 12);
  LevelState s{x.cluster, x.area, 0.0, 1.0};
  const double half = std::log(2.0) / x.hp.lambda;
  auto out = update_level_memories(s, Matrix(2, x.hp.d_msg), Matrix(1, x.hp.d_msg), half, x.params, x.hp.decay(),
                                   false);
  for (std::size_t k = 0; k < s.cluster_mem.size(); ++k) EXPECT_NEAR(out.cluster_mem[k], 0.5 * s.cluster_mem[k], 1e-15);
  for (std::size_t k = 0; k < s.area_mem.size(); ++k) EXPECT_NEAR(out.area_mem[k], 0.5 * s.area_mem[k], 1e-15);
}

TEST(UpdateLevelMemories, MatchesDirectFormula) {
  auto x = random_instance(4, 2, 2, 13);
  for (auto* m : {&x.params.cluster_mlp, &x.params.area_mlp}) {
    m->b1 = random_matrix(1, m->b1.cols(), 14);
    m->b2 = random_matrix(1, m->b2.cols(), 15);
  }
  LevelState s{x.cluster, x.area, 10.0, 1.0};
  auto cm = random_matrix(2, x.hp.d_msg, 16);
  auto am = random_matrix(1, x.hp.d_msg, 17);
  const double t = 55.0;
  auto out = update_level_memories(s, cm, am, t, x.params, x.hp.decay(), true);
  const double f = std::exp(-x.hp.lambda * (t - 10.0));
  auto mlp = [](const Mlp& m, const Matrix& in, std::size_t row) {
    std::vector<double> h(m.w1.rows()), o(m.w2.rows());
    for (std::size_t r = 0; r < h.size(); ++r) {
      double acc = m.b1(0, r);
      for (std::size_t k = 0; k < m.w1.cols(); ++k) acc += m.w1(r, k) * in(row, k);
      h[r] = std::max(acc, 0.0);
    }
    for (std::size_t r = 0; r < o.size(); ++r) {
      double acc = m.b2(0, r);
      for (std::size_t k = 0; k < h.size(); ++k) acc += m.w2(r, k) * h[k];
      o[r] = acc;
    }
    return o;
  };
  for (std::size_t c = 0; c < 2; ++c) {
    auto delta = mlp(x.params.cluster_mlp, cm, c);
    for (std::size_t k = 0; k < 4; ++k) EXPECT_NEAR(out.cluster_mem(c, k), f * s.cluster_mem(c, k) + delta[k], 1e-12);
  }
  auto delta = mlp(x.params.area_mlp, am, 0);
  for (std::size_t k = 0; k < 4; ++k) EXPECT_NEAR(out.area_mem(0, k), f * s.area_mem(0, k) + delta[k], 1e-12);
  EXPECT_EQ(out.last_update, t);
}

TEST(UpdateLevelMemories, RejectsTimeRegression) {
  auto x = random_instance(4, 2, 2, 18);
  LevelState s{x.cluster, x.area, 10.0, 1.0};
  EXPECT_THROW(update_level_memories(s, Matrix(2, x.hp.d_msg), Matrix(1, x.hp.d_msg), 5.0, x.params, x.hp.decay()),
               TimeRegression);
}

TEST(Fuse, SingleClusterBroadcastsLevelMemories) {
  auto x = random_instance(4, 2, 1, 19);
  auto rel = compute_relations(x.reps, x.cluster, x.area, x.params);
  LevelState s{x.cluster, x.area, 0.0, 1.0};
  auto z = fuse(x.reps, s, rel);
  ASSERT_EQ(z.cols(), 12u);
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t k = 0; k < 4; ++k) {
      EXPECT_EQ(z(i, k), x.reps(i, k));
      EXPECT_NEAR(z(i, 4 + k), x.cluster(0, k), 1e-12);
      EXPECT_NEAR(z(i, 8 + k), x.area(0, k), 1e-12);
    }
}

TEST(Fuse, ZeroLevelMemoriesLeaveStationBlockOnly) {
  auto x = random_instance(4, 2, 2, 20);
  auto rel = compute_relations(x.reps, x.cluster, x.area, x.params);
  auto z = fuse(x.reps, LevelState{Matrix(2, 4), Matrix(1, 4), 0.0, 1.0}, rel);
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t k = 0; k < 12; ++k) EXPECT_EQ(z(i, k), k < 4 ? x.reps(i, k) : 0.0);
}

TEST(Fuse, MatchesLoopOracle) {
  auto x = random_instance(5, 2, 3, 21);
  auto rel = compute_relations(x.reps, x.cluster, x.area, x.params);
  LevelState s{x.cluster, x.area, 0.0, 1.0};
  auto z = fuse(x.reps, s, rel);
  for (std::size_t i = 0; i < 5; ++i)
    for (std::size_t k = 0; k < 4; ++k) {
      double cl = 0.0, ar = 0.0;
      for (std::size_t h = 0; h < 2; ++h)
        for (std::size_t c = 0; c < 3; ++c) {
          cl += rel.ace[h](i, c) * x.cluster(c, k);
          ar += rel.ace[h](i, c) * rel.age[h](c, 0) * x.area(0, k);
        }
      EXPECT_NEAR(z(i, 4 + k), cl / 2.0, 1e-12);
      EXPECT_NEAR(z(i, 8 + k), ar / 2.0, 1e-12);
    }
}

TEST(MultilevelProperty, StationPermutationPermutesRelations) {
  auto x = random_instance(5, 2, 2, 22);
  const std::vector<std::size_t> perm{3, 0, 4, 1, 2};
  Matrix permuted(5, 4);
  for (std::size_t i = 0; i < 5; ++i)
    for (std::size_t k = 0; k < 4; ++k) permuted(i, k) = x.reps(perm[i], k);
  auto a = compute_relations(x.reps, x.cluster, x.area, x.params);
  auto b = compute_relations(permuted, x.cluster, x.area, x.params);
  for (std::size_t h = 0; h < 2; ++h) {
    for (std::size_t i = 0; i < 5; ++i)
      for (std::size_t c = 0; c < 2; ++c) {
        EXPECT_NEAR(b.acm[h](i, c), a.acm[h](perm[i], c), 1e-14);
        EXPECT_NEAR(b.ace[h](i, c), a.ace[h](perm[i], c), 1e-14);
      }
    for (std::size_t c = 0; c < 2; ++c) EXPECT_NEAR(b.agm[h](c, 0), a.agm[h](c, 0), 1e-14);
  }
}

TEST(MultilevelProperty, StochasticAtEveryStepOfRun) {
  const std::size_t n = 6;
  auto hp = small_hyper(n, 4, 2, 3);
  hp.tau = 60.0;
  auto catalog = NodeCatalog::indexed(n);
  auto params = init_params(hp, 23);
  auto events = random_events(400, n, 50 * 60.0, 24);
  MemoryBank bank = MemoryBank::initial(hp, params, 0.0);
  std::size_t steps = 0;
  for (const auto& b : batch_by_window(events, 0.0, 60.0, 50 * 60.0)) {
    auto out = step(bank, b, params, hp, catalog);
    ASSERT_TRUE(out.relations.has_value());
    EXPECT_LE(stochasticity_error(*out.relations), 1e-9);
    bank = std::move(out.bank);
    ++steps;
  }
  EXPECT_EQ(steps, 50u);
}
