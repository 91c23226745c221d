#pragma once

// One CMOD step: event representations → station messages → station memory
// update → relations → cluster/area messages and memories → fusion, plus the
// pairwise output head and the masked OD loss.

#include <cmath>
#include <cstddef>
#include <optional>
#include <vector>

#include "cmod/autodiff.hpp"
#include "cmod/decay_memory.hpp"
#include "cmod/error.hpp"
#include "cmod/events.hpp"
#include "cmod/matrix.hpp"
#include "cmod/multilevel.hpp"
#include "cmod/params.hpp"

namespace cmod {

/// The model's evolving state: station accumulators plus level memories.
struct MemoryBank {
  Matrix station_a;                // N × d
  std::vector<double> station_b;   // N
  LevelState level;
  double last_update = 0.0;
  // Level memories still hold the trainable initial values; the step then
  // reads them from the parameters so they receive gradients.
  bool level_is_initial = true;

  static MemoryBank initial(const HyperParams& hp, const ModelParams& params, double t0) {
    MemoryBank bank;
    bank.station_a = Matrix(hp.n_nodes, hp.d);
    bank.station_b.assign(hp.n_nodes, 1.0);
    bank.level = LevelState{params.cluster_init, params.area_init, t0, 1.0};
    bank.last_update = t0;
    return bank;
  }

  std::size_t nodes() const { return station_b.size(); }

  Matrix representations() const {
    Matrix r = station_a;
    for (std::size_t i = 0; i < r.rows(); ++i) {
      if (!(station_b[i] > 0.0)) throw DegenerateNormalizer("station " + std::to_string(i));
      for (auto& x : r.row(i)) x /= station_b[i];
    }
    return r;
  }

  StationMemory station(NodeId i) const {
    return {std::vector<double>(station_a.row(i).begin(), station_a.row(i).end()), station_b[i], last_update};
  }
};

/// Tape handles for one step.
struct StepGraph {
  ad::Var z;              // N × 3d fused representations
  ad::Var station_a;      // N × d updated accumulators
  ad::Var station_reps;   // N × d updated representations
  std::optional<LevelVars> level;
  std::optional<RelationVars> relations;
  std::optional<ad::Var> cluster_msgs;
  std::optional<ad::Var> area_msg;
  std::vector<StationMessage> messages;
  std::vector<double> station_b;  // updated normalizers
  double t = 0.0;
};

inline void check_batch(const MemoryBank& bank, const EventBatch& batch) {
  if (batch.window_end < bank.last_update) {
    throw TimeRegression("batch ends at " + std::to_string(batch.window_end) + " before last update " +
                         std::to_string(bank.last_update));
  }
  if (batch.window_start != bank.last_update) {
    throw InvalidArgument("batch starts at " + std::to_string(batch.window_start) + " but memories were updated at " +
                          std::to_string(bank.last_update));
  }
  for (const auto& e : batch.events) {
    if (e.timestamp < batch.window_start || e.timestamp > batch.window_end) {
      throw TimeRegression("event at " + std::to_string(e.timestamp) + " outside its batch window");
    }
  }
}

/// Records one step on `tape`. The incoming bank is a constant: gradients stop
/// at the window boundary, except for the initial level memories.
inline StepGraph build_step(ad::Tape& tape, const MemoryBank& bank, const EventBatch& batch, const ParamVars& p,
                            const HyperParams& hp, const NodeCatalog& catalog) {
  check_batch(bank, batch);
  const std::size_t n = bank.nodes();
  if (n != catalog.size() || bank.station_a.cols() != hp.d) {
    throw DimensionMismatch("memory bank " + bank.station_a.shape_string() + " does not match model/catalog");
  }
  const DecayConfig cfg = hp.decay();
  const Matrix prev_reps = bank.representations();
  const double t = batch.window_end;
  const double f = cfg.factor(t - bank.last_update);

  StepGraph g;
  g.t = t;
  g.messages = aggregate_messages(batch, prev_reps, catalog, cfg);

  Matrix decayed = bank.station_a;
  for (auto& x : decayed.data()) x *= f;
  g.station_b.resize(n);
  for (std::size_t i = 0; i < n; ++i) g.station_b[i] = f * bank.station_b[i] + g.messages[i].q;

  if (batch.events.empty()) {
    g.station_a = tape.constant(std::move(decayed));
  } else {
    const std::size_t ds = g.messages.front().p.size();
    Matrix pm(n, ds), mask(n, hp.d);
    for (std::size_t i = 0; i < n; ++i) {
      std::copy(g.messages[i].p.begin(), g.messages[i].p.end(), pm.row(i).begin());
      if (g.messages[i].q > 0.0) std::fill(mask.row(i).begin(), mask.row(i).end(), 1.0);
    }
    auto delta = ad::mul(mlp_forward(p.station_mlp, tape.constant(std::move(pm))), tape.constant(std::move(mask)));
    g.station_a = ad::add(tape.constant(std::move(decayed)), delta);
  }
  Matrix inv_b(n, hp.d);
  for (std::size_t i = 0; i < n; ++i) std::fill(inv_b.row(i).begin(), inv_b.row(i).end(), 1.0 / g.station_b[i]);
  g.station_reps = ad::mul(g.station_a, tape.constant(std::move(inv_b)));

  if (hp.ablation.no_multilevel) {
    g.z = ad::concat_cols({g.station_reps, tape.constant(Matrix(n, hp.d)), tape.constant(Matrix(n, hp.d))});
    return g;
  }

  LevelVars prev_level = bank.level_is_initial
                             ? LevelVars{p.cluster_init, p.area_init}
                             : LevelVars{tape.constant(bank.level.cluster_mem), tape.constant(bank.level.area_mem)};
  auto rel = compute_relations(tape.constant(prev_reps), prev_level.cluster_mem, prev_level.area_mem, p,
                               hp.relation_scale);
  auto cluster_msgs = project_cluster_messages(rel, tape.constant(normalized_messages(g.messages)), p);
  auto area_msg = project_area_message(rel, cluster_msgs, p);
  auto level = update_level_memories(prev_level, bank.level, cluster_msgs, area_msg, t, p.cluster_mlp, p.area_mlp, cfg,
                                     !batch.events.empty());
  g.z = fuse(g.station_reps, level, rel);
  g.level = level;
  g.relations = std::move(rel);
  g.cluster_msgs = cluster_msgs;
  g.area_msg = area_msg;
  return g;
}

/// The bank after the recorded step (values only).
inline MemoryBank advance(const MemoryBank& bank, const StepGraph& g, const EventBatch& batch, const HyperParams& hp) {
  MemoryBank next = bank;
  next.station_a = g.station_a.value();
  next.station_b = g.station_b;
  next.last_update = g.t;
  if (g.level) {
    next.level.cluster_mem = g.level->cluster_mem.value();
    next.level.area_mem = g.level->area_mem.value();
    next.level.last_update = g.t;
    if (hp.ablation.no_weighted_update && !batch.events.empty()) next.level.update_count += 1.0;
    next.level_is_initial = false;
  } else {
    next.level.last_update = g.t;
  }
  return next;
}

struct StepOutput {
  MemoryBank bank;
  Matrix z;
  std::optional<RelationTensors> relations;
};

inline StepOutput step(const MemoryBank& bank, const EventBatch& batch, const ModelParams& params,
                       const HyperParams& hp, const NodeCatalog& catalog) {
  ad::Tape tape;
  auto p = bind(tape, params, false);
  auto g = build_step(tape, bank, batch, p, hp, catalog);
  StepOutput out{advance(bank, g, batch, hp), g.z.value(), std::nullopt};
  if (g.relations) out.relations = g.relations->values();
  return out;
}

// ---------------------------------------------------------------------------
// Output head and loss

/// Raw predictions MLP([Z_i ; Z_j]) for all ordered pairs, as an N²×1 column
/// indexed i·N + j. The first layer splits into per-node halves so each node's
/// projection is computed once.
inline ad::Var predict_raw(ad::Var z, const MlpVars& out) {
  const std::size_t n = z.rows(), width = z.cols();
  if (out.w1.cols() != 2 * width) {
    throw DimensionMismatch("output head expects pair width " + std::to_string(out.w1.cols()) + ", got " +
                            std::to_string(2 * width));
  }
  auto u = ad::matmul_nt(z, ad::slice_cols(out.w1, 0, width));
  auto v = ad::matmul_nt(z, ad::slice_cols(out.w1, width, width));
  std::vector<std::size_t> origin(n * n), dest(n * n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      origin[i * n + j] = i;
      dest[i * n + j] = j;
    }
  auto hidden = ad::relu(add_bias(ad::add(ad::gather_rows(u, std::move(origin)), ad::gather_rows(v, std::move(dest))),
                                  out.b1));
  return add_bias(ad::matmul_nt(hidden, out.w2), out.b2);
}

/// m = 1 where y > 0, or where y = 0 and ŷ > 0; m = 0 where y = 0 and ŷ <= 0.
inline Matrix loss_mask(const Matrix& raw, const Matrix& truth, bool mse) {
  Matrix m(raw.rows(), raw.cols(), 1.0);
  if (mse) return m;
  for (std::size_t k = 0; k < raw.size(); ++k) {
    if (truth[k] <= 0.0 && raw[k] <= 0.0) m[k] = 0.0;
  }
  return m;
}

/// mean(m ⊙ (y - ŷ)²) over all N² cells; `raw` is the N²×1 column from predict_raw.
inline ad::Var od_loss(ad::Var raw, const ODMatrix& truth, bool mse) {
  if (raw.value().size() != truth.size()) {
    throw DimensionMismatch("prediction has " + std::to_string(raw.value().size()) + " cells, truth " +
                            std::to_string(truth.size()));
  }
  Matrix y(raw.rows(), raw.cols(), std::vector<double>(truth.data()));
  Matrix mask = loss_mask(raw.value(), y, mse);
  auto diff = ad::sub(raw, raw.tape->constant(std::move(y)));
  return ad::mean(ad::mul(ad::square(diff), raw.tape->constant(std::move(mask))));
}

struct ODPrediction {
  ODMatrix raw;      // unclamped, consumed by the loss
  ODMatrix clamped;  // max(raw, 0), the reported matrix
};

inline ODPrediction predict_od(const Matrix& z, const ModelParams& params) {
  ad::Tape tape;
  auto p = bind(tape, params, false);
  const std::size_t n = z.rows();
  auto raw = predict_raw(tape.constant(z), p.output_mlp);
  ODPrediction out{Matrix(n, n, std::vector<double>(raw.value().data())), Matrix(n, n)};
  for (std::size_t k = 0; k < out.raw.size(); ++k) out.clamped[k] = std::max(out.raw[k], 0.0);
  return out;
}

inline double od_loss(const Matrix& raw, const ODMatrix& truth, bool mse = false) {
  if (!raw.same_shape(truth)) throw DimensionMismatch("od_loss " + raw.shape_string() + " vs " + truth.shape_string());
  ad::Tape tape;
  return od_loss(tape.constant(raw), truth, mse).value()(0, 0);
}

}  // namespace cmod
