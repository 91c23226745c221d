#pragma once

// Station ↔ cluster ↔ area attention hierarchy: relation logits, upward
// message projection, level memory updates, and cross-level fusion.
//
// Everything is written against the autodiff tape so that training and the
// plain-value entry points below share one implementation.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <vector>

#include "cmod/autodiff.hpp"
#include "cmod/decay_memory.hpp"
#include "cmod/error.hpp"
#include "cmod/matrix.hpp"
#include "cmod/params.hpp"

namespace cmod {

/// Cluster and area memories. The area level holds a single node.
struct LevelState {
  Matrix cluster_mem;  // N_c × d
  Matrix area_mem;     // 1 × d
  double last_update = 0.0;
  // Contributions averaged so far (initial memory counts as one); only used
  // when weighted updates are disabled.
  double update_count = 1.0;
};

/// Per-head relation logits and their normalized views.
///   ac  : N × N_c    station–cluster logits
///   ag  : N_c × 1    cluster–area logits
///   acm : softmax of ac over stations (each column sums to 1)
///   agm : softmax of ag over clusters
///   ace : softmax of ac over clusters (each row sums to 1)
///   age : softmax of ag over the area axis (all ones with one area node)
struct RelationTensors {
  std::vector<Matrix> ac, ag, acm, agm, ace, age;

  std::size_t heads() const { return ac.size(); }
};

struct RelationVars {
  std::vector<ad::Var> ac, ag, acm, agm, ace, age;

  RelationTensors values() const {
    RelationTensors r;
    for (std::size_t h = 0; h < ac.size(); ++h) {
      r.ac.push_back(ac[h].value());
      r.ag.push_back(ag[h].value());
      r.acm.push_back(acm[h].value());
      r.agm.push_back(agm[h].value());
      r.ace.push_back(ace[h].value());
      r.age.push_back(age[h].value());
    }
    return r;
  }
};

namespace detail {

inline void require(bool ok, const std::string& what) {
  if (!ok) throw DimensionMismatch(what);
}

// (W1 · leftᵀ)ᵀ (W2 · rightᵀ) = (left W1ᵀ)(right W2ᵀ)ᵀ
inline ad::Var bilinear_logits(ad::Var left, ad::Var right, ad::Var w1, ad::Var w2, double scale) {
  auto l = ad::matmul_nt(left, w1);
  auto r = ad::matmul_nt(right, w2);
  auto logits = ad::matmul_nt(l, r);
  return scale == 1.0 ? logits : ad::scale(logits, scale);
}

}  // namespace detail

inline RelationVars compute_relations(ad::Var station_reps, ad::Var cluster_reps, ad::Var area_rep,
                                      const ParamVars& p, double relation_scale = 1.0) {
  const std::size_t d = station_reps.cols();
  detail::require(cluster_reps.cols() == d && area_rep.cols() == d && area_rep.rows() == 1,
                  "station/cluster/area representations disagree on width");
  detail::require(!p.wc1.empty() && p.wc1.front().cols() == d, "relation projections expect width " +
                                                                   std::to_string(p.wc1.empty() ? 0 : p.wc1.front().cols()));
  RelationVars rel;
  for (std::size_t h = 0; h < p.wc1.size(); ++h) {
    auto ac = detail::bilinear_logits(station_reps, cluster_reps, p.wc1[h], p.wc2[h], relation_scale);
    auto ag = detail::bilinear_logits(cluster_reps, area_rep, p.wg1[h], p.wg2[h], relation_scale);
    rel.ac.push_back(ac);
    rel.ag.push_back(ag);
    rel.acm.push_back(ad::softmax(ac, ad::Axis::rows));
    rel.agm.push_back(ad::softmax(ag, ad::Axis::rows));
    rel.ace.push_back(ad::softmax(ac, ad::Axis::cols));
    rel.age.push_back(ad::softmax(ag, ad::Axis::cols));
  }
  return rel;
}

/// Rows p_j / q_j, or zero for stations without events in the batch.
inline Matrix normalized_messages(std::span<const StationMessage> msgs) {
  const std::size_t width = msgs.empty() ? 0 : msgs.front().p.size();
  Matrix m(msgs.size(), width);
  for (std::size_t j = 0; j < msgs.size(); ++j) {
    if (msgs[j].q <= 0.0) continue;
    for (std::size_t k = 0; k < width; ++k) m(j, k) = msgs[j].p[k] / msgs[j].q;
  }
  return m;
}

/// Per head: Σ_j acm[h][j, i] · W^{c3}_h (p_j / q_j); heads concatenated.
inline ad::Var project_cluster_messages(const RelationVars& rel, ad::Var station_msgs, const ParamVars& p) {
  std::vector<ad::Var> parts;
  for (std::size_t h = 0; h < rel.acm.size(); ++h) {
    detail::require(station_msgs.cols() == p.wc3[h].cols(), "station messages have width " +
                                                                std::to_string(station_msgs.cols()) +
                                                                ", projection expects " + std::to_string(p.wc3[h].cols()));
    detail::require(station_msgs.rows() == rel.acm[h].rows(), "station count mismatch in cluster projection");
    auto projected = ad::matmul_nt(station_msgs, p.wc3[h]);  // N × d_msg/H
    parts.push_back(ad::matmul(ad::transpose(rel.acm[h]), projected));   // N_c × d_msg/H
  }
  return ad::concat_cols(parts);
}

/// Per head: Σ_i agm[h][i] · W^{g3}_h p^c_i; heads concatenated.
inline ad::Var project_area_message(const RelationVars& rel, ad::Var cluster_msgs, const ParamVars& p) {
  std::vector<ad::Var> parts;
  for (std::size_t h = 0; h < rel.agm.size(); ++h) {
    detail::require(cluster_msgs.cols() == p.wg3[h].cols(), "cluster messages have wrong width");
    detail::require(cluster_msgs.rows() == rel.agm[h].rows(), "cluster count mismatch in area projection");
    auto projected = ad::matmul_nt(cluster_msgs, p.wg3[h]);  // N_c × d_msg/H
    parts.push_back(ad::matmul(ad::transpose(rel.agm[h]), projected));   // 1 × d_msg/H
  }
  return ad::concat_cols(parts);
}

struct LevelVars {
  ad::Var cluster_mem;
  ad::Var area_mem;
};

/// a^c ← f·a^c + MLP_c(p^c), a^g ← f·a^g + MLP_g(p^g). With `active` false
/// (no events in the batch) the memories only decay. With weighted updates
/// disabled the memories are running means of the initial value and every
/// MLP output.
inline LevelVars update_level_memories(LevelVars prev, const LevelState& state, ad::Var cluster_msgs,
                                       ad::Var area_msg, double t, const MlpVars& cluster_mlp,
                                       const MlpVars& area_mlp, const DecayConfig& cfg, bool active) {
  if (t < state.last_update) {
    throw TimeRegression("level update at " + std::to_string(t) + " precedes " + std::to_string(state.last_update));
  }
  if (!active) {
    const double f = cfg.factor(t - state.last_update);
    if (f == 1.0) return prev;
    return {ad::scale(prev.cluster_mem, f), ad::scale(prev.area_mem, f)};
  }
  auto dc = mlp_forward(cluster_mlp, cluster_msgs);
  auto dg = mlp_forward(area_mlp, area_msg);
  if (!cfg.weighted) {
    const double n = state.update_count;
    const double keep = n / (n + 1.0), take = 1.0 / (n + 1.0);
    return {ad::add(ad::scale(prev.cluster_mem, keep), ad::scale(dc, take)),
            ad::add(ad::scale(prev.area_mem, keep), ad::scale(dg, take))};
  }
  const double f = cfg.factor(t - state.last_update);
  return {ad::add(ad::scale(prev.cluster_mem, f), dc), ad::add(ad::scale(prev.area_mem, f), dg)};
}

/// Z = [r ; (1/H) Σ_h ace_h a^c ; (1/H) Σ_h ace_h age_h a^g].
inline ad::Var fuse(ad::Var station_reps, LevelVars level, const RelationVars& rel) {
  detail::require(level.cluster_mem.cols() == station_reps.cols() && level.area_mem.cols() == station_reps.cols(),
                  "level memories disagree with station width");
  const double inv_h = 1.0 / static_cast<double>(rel.ace.size());
  std::vector<ad::Var> cluster_terms, area_terms;
  for (std::size_t h = 0; h < rel.ace.size(); ++h) {
    detail::require(rel.ace[h].rows() == station_reps.rows() && rel.ace[h].cols() == level.cluster_mem.rows(),
                    "fusion weights do not match memories");
    cluster_terms.push_back(ad::matmul(rel.ace[h], level.cluster_mem));
    area_terms.push_back(ad::matmul(rel.ace[h], ad::matmul(rel.age[h], level.area_mem)));
  }
  auto accumulate = [&](const std::vector<ad::Var>& terms) {
    ad::Var acc = terms.front();
    for (std::size_t k = 1; k < terms.size(); ++k) acc = ad::add(acc, terms[k]);
    return ad::scale(acc, inv_h);
  };
  return ad::concat_cols({station_reps, accumulate(cluster_terms), accumulate(area_terms)});
}

// ---------------------------------------------------------------------------
// Plain-value entry points

namespace detail {

inline RelationVars constant_relations(ad::Tape& tape, const RelationTensors& r) {
  RelationVars v;
  for (std::size_t h = 0; h < r.heads(); ++h) {
    v.ac.push_back(tape.constant(r.ac[h]));
    v.ag.push_back(tape.constant(r.ag[h]));
    v.acm.push_back(tape.constant(r.acm[h]));
    v.agm.push_back(tape.constant(r.agm[h]));
    v.ace.push_back(tape.constant(r.ace[h]));
    v.age.push_back(tape.constant(r.age[h]));
  }
  return v;
}

}  // namespace detail

inline RelationTensors compute_relations(const Matrix& station_reps, const Matrix& cluster_reps, const Matrix& area_rep,
                                         const ModelParams& params, double relation_scale = 1.0) {
  ad::Tape tape;
  auto p = bind(tape, params, false);
  return compute_relations(tape.constant(station_reps), tape.constant(cluster_reps), tape.constant(area_rep), p,
                           relation_scale)
      .values();
}

inline Matrix project_cluster_messages(const RelationTensors& rel, std::span<const StationMessage> msgs,
                                       const ModelParams& params) {
  ad::Tape tape;
  auto p = bind(tape, params, false);
  return project_cluster_messages(detail::constant_relations(tape, rel), tape.constant(normalized_messages(msgs)), p)
      .value();
}

inline Matrix project_area_message(const RelationTensors& rel, const Matrix& cluster_msgs, const ModelParams& params) {
  ad::Tape tape;
  auto p = bind(tape, params, false);
  return project_area_message(detail::constant_relations(tape, rel), tape.constant(cluster_msgs), p).value();
}

inline LevelState update_level_memories(const LevelState& state, const Matrix& cluster_msgs, const Matrix& area_msg,
                                        double t, const ModelParams& params, const DecayConfig& cfg, bool active = true) {
  ad::Tape tape;
  auto p = bind(tape, params, false);
  LevelVars prev{tape.constant(state.cluster_mem), tape.constant(state.area_mem)};
  auto next = update_level_memories(prev, state, tape.constant(cluster_msgs), tape.constant(area_msg), t,
                                    p.cluster_mlp, p.area_mlp, cfg, active);
  LevelState out{next.cluster_mem.value(), next.area_mem.value(), t, state.update_count};
  if (active && !cfg.weighted) out.update_count += 1.0;
  return out;
}

inline Matrix fuse(const Matrix& station_reps, const LevelState& state, const RelationTensors& rel) {
  ad::Tape tape;
  LevelVars level{tape.constant(state.cluster_mem), tape.constant(state.area_mem)};
  return fuse(tape.constant(station_reps), level, detail::constant_relations(tape, rel)).value();
}

/// Largest deviation from 1 of any normalized line (acm columns, agm, ace rows).
inline double stochasticity_error(const RelationTensors& rel) {
  double worst = 0.0;
  for (std::size_t h = 0; h < rel.heads(); ++h) {
    const auto& acm = rel.acm[h];
    for (std::size_t c = 0; c < acm.cols(); ++c) {
      double s = 0.0;
      for (std::size_t r = 0; r < acm.rows(); ++r) s += acm(r, c);
      worst = std::max(worst, std::abs(s - 1.0));
    }
    double s = 0.0;
    for (double x : rel.agm[h].data()) s += x;
    worst = std::max(worst, std::abs(s - 1.0));
    const auto& ace = rel.ace[h];
    for (std::size_t r = 0; r < ace.rows(); ++r) {
      double t = 0.0;
      for (double x : ace.row(r)) t += x;
      worst = std::max(worst, std::abs(t - 1.0));
    }
  }
  return worst;
}

}  // namespace cmod
