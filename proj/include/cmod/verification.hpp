#pragma once

// Self-checks shared by the CLI and the acceptance suite: the closed-form
// decay oracle against the online accumulators, and finite differences
// against the tape on a toy model.

#include <chrono>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <random>
#include <span>
#include <vector>

#include "cmod/autodiff.hpp"
#include "cmod/decay_memory.hpp"
#include "cmod/events.hpp"
#include "cmod/model.hpp"
#include "cmod/params.hpp"

namespace cmod {

/// Random events over `nodes` nodes with uniform timestamps in [0, horizon), sorted.
inline std::vector<TransactionEvent> random_events(std::size_t count, std::size_t nodes, double horizon,
                                                   std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> node(0, nodes - 1);
  std::uniform_real_distribution<double> when(0.0, horizon);
  std::vector<TransactionEvent> out(count);
  for (auto& e : out) e = {node(rng), node(rng), when(rng)};
  std::stable_sort(out.begin(), out.end(), [](const auto& a, const auto& b) { return a.timestamp < b.timestamp; });
  return out;
}

inline Matrix random_matrix(std::size_t rows, std::size_t cols, std::uint64_t seed, double scale = 1.0) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-scale, scale);
  Matrix m(rows, cols);
  for (auto& x : m.data()) x = u(rng);
  return m;
}

/// max|x - y| / max|y| over one vector (0 when both are zero).
inline double normwise_rel_error(std::span<const double> x, std::span<const double> y) {
  double diff = 0.0, scale = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    diff = std::max(diff, std::abs(x[i] - y[i]));
    scale = std::max(scale, std::abs(y[i]));
  }
  if (diff == 0.0) return 0.0;
  return diff / std::max(scale, 1e-300);
}

struct OracleCheckConfig {
  std::size_t nodes = 20;
  std::size_t events = 10000;
  std::size_t d = 8;
  double tau = 1800.0;
  double horizon = 86400.0 * 2;
  double lambda = std::log(2.0) / 3600.0;
  std::uint64_t seed = 0;
};

struct OracleCheckReport {
  std::size_t batches = 0;
  std::size_t comparisons = 0;
  double max_rel_error = 0.0;
  double seconds = 0.0;
};

/// Online accumulators (identity update map, frozen neighbour representations,
/// no features or role flag) against the closed form after every batch.
inline OracleCheckReport run_oracle_check(const OracleCheckConfig& c) {
  const auto started = std::chrono::steady_clock::now();
  const auto events = random_events(c.events, c.nodes, c.horizon, c.seed);
  const Matrix frozen = random_matrix(c.nodes, c.d, c.seed + 1);
  const NodeCatalog catalog = NodeCatalog::indexed(c.nodes);
  const DecayConfig cfg{c.lambda, c.d, true};
  const RepresentationLayout bare{false, false};
  const UpdateMap identity = [](std::span<const double> p) { return std::vector<double>(p.begin(), p.end()); };

  std::vector<StationMemory> mem(c.nodes, StationMemory::fresh(c.d, 0.0));
  OracleCheckReport rep;
  std::size_t seen = 0;
  for (const auto& batch : batch_by_window(events, 0.0, c.tau, c.horizon)) {
    const auto msgs = aggregate_messages(batch, frozen, catalog, cfg, bare);
    for (std::size_t i = 0; i < c.nodes; ++i) mem[i] = update_station_memory(mem[i], msgs[i], batch.window_end, identity, cfg);
    seen += batch.events.size();
    const std::span<const TransactionEvent> history(events.data(), seen);
    for (std::size_t i = 0; i < c.nodes; ++i) {
      const auto online = read_representation(mem[i]);
      const auto closed = oracle_representation(i, history, batch.window_end, frozen, cfg, 0.0);
      rep.max_rel_error = std::max(rep.max_rel_error, normwise_rel_error(online, closed));
      ++rep.comparisons;
    }
    ++rep.batches;
  }
  rep.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
  return rep;
}

// ---------------------------------------------------------------------------
// Gradient check on a toy model

struct ToyProblem {
  HyperParams hp;
  NodeCatalog catalog;
  ModelParams params;
  MemoryBank bank;
  EventBatch batch;
  ODMatrix truth;
};

/// N=3, d=4, H=2, N_c=2 with warmed station memories and initial level memories,
/// so every parameter array (including the initial cluster/area memories)
/// reaches the loss.
inline ToyProblem make_toy_problem(std::uint64_t seed = 0, Ablation ablation = {}) {
  ToyProblem t;
  t.catalog = NodeCatalog::indexed(3);
  HyperParams hp;
  hp.d = 4;
  hp.heads = 2;
  hp.d_msg = 4;
  hp.n_clusters = 2;
  hp.lambda = std::log(2.0) / 60.0;
  hp.tau = 60.0;
  hp.ablation = ablation;
  t.hp = hp.resolved(3, t.catalog.feature_dim());
  t.params = init_params(t.hp, seed);
  // Nonzero biases so their gradients are probed at a generic point.
  std::mt19937_64 rng(seed + 17);
  std::uniform_real_distribution<double> u(-0.3, 0.3);
  for (auto* m : {&t.params.station_mlp, &t.params.cluster_mlp, &t.params.area_mlp, &t.params.output_mlp}) {
    for (auto& x : m->b1.data()) x = u(rng);
    for (auto& x : m->b2.data()) x = u(rng);
  }
  t.params.output_mlp.b2(0, 0) = 0.8;
  t.bank = MemoryBank::initial(t.hp, t.params, 0.0);
  t.bank.station_a = random_matrix(3, t.hp.d, seed + 5, 0.8);
  t.bank.station_b = {1.7, 0.9, 2.4};
  t.batch.window_start = 0.0;
  t.batch.window_end = 60.0;
  t.batch.events = {{0, 1, 5.0}, {1, 2, 17.0}, {2, 0, 30.0}, {0, 2, 44.0}, {1, 1, 52.0}};
  t.truth = Matrix{{0, 2, 1}, {0, 1, 0}, {3, 0, 0}};
  return t;
}

inline double toy_loss(const ToyProblem& t, const ModelParams& p) {
  ad::Tape tape;
  auto pv = bind(tape, p, false);
  MemoryBank bank = t.bank;
  auto g = build_step(tape, bank, t.batch, pv, t.hp, t.catalog);
  auto raw = predict_raw(g.z, pv.output_mlp);
  return od_loss(raw, t.truth, t.hp.ablation.mse_loss).value()(0, 0);
}

inline ad::NamedArrays toy_gradients(const ToyProblem& t) {
  ad::Tape tape;
  auto pv = bind(tape, t.params, true);
  auto g = build_step(tape, t.bank, t.batch, pv, t.hp, t.catalog);
  auto raw = predict_raw(g.z, pv.output_mlp);
  auto loss = od_loss(raw, t.truth, t.hp.ablation.mse_loss);
  tape.backward(loss);
  return gradients(t.params, pv);
}

struct GradCheckResult {
  ad::FdReport report;
  double seconds = 0.0;
};

inline GradCheckResult run_toy_grad_check(std::uint64_t seed = 0, ad::FdOptions opt = {}) {
  const auto started = std::chrono::steady_clock::now();
  const ToyProblem t = make_toy_problem(seed);
  const auto analytic = toy_gradients(t);
  const auto f = [&](const ad::NamedArrays& arrays) {
    ModelParams p = t.params;
    p.assign(arrays);
    return toy_loss(t, p);
  };
  GradCheckResult r;
  r.report = ad::fd_check(f, t.params.named(), analytic, opt);
  r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
  return r;
}

}  // namespace cmod
