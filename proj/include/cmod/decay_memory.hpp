#pragma once

// Station-level exponential-decay memories.
//
// Each station keeps a weighted accumulator `a` and a temporal normalizer `b`;
// its representation is a / b. Both accumulators decay by the same factor, so
// idle time never changes a representation, only how much weight the past
// carries against the next message.

#include <cmath>
#include <cstddef>
#include <functional>
#include <span>
#include <vector>

#include "cmod/error.hpp"
#include "cmod/events.hpp"
#include "cmod/matrix.hpp"

namespace cmod {

struct DecayConfig {
  double lambda = std::log(2.0) / 3600.0;  // 1/s; one-hour half-life
  std::size_t d = 256;
  // When false every decay factor and message weight is 1 (plain sums).
  bool weighted = true;

  double factor(double dt) const { return weighted ? std::exp(-lambda * dt) : 1.0; }

  void validate() const {
    if (!(lambda > 0.0) || !std::isfinite(lambda)) throw InvalidArgument("lambda must be positive");
    if (d == 0) throw InvalidArgument("memory dimension must be at least 1");
  }
};

struct StationMemory {
  std::vector<double> a;
  double b = 1.0;
  double last_update = 0.0;

  static StationMemory fresh(std::size_t d, double t = 0.0) { return {std::vector<double>(d, 0.0), 1.0, t}; }
};

struct StationMessage {
  std::vector<double> p;
  double q = 0.0;
};

/// Which parts of [r_other ; F_other ; role] an event representation carries.
/// The decay oracle disables features and role so that s_k = r_other.
struct RepresentationLayout {
  bool features = true;
  bool role = true;

  std::size_t width(std::size_t d, std::size_t feature_dim) const {
    return d + (features ? feature_dim : 0) + (role ? 1 : 0);
  }
};

enum class Role { origin, destination };

namespace detail {

inline void write_event_representation(NodeId other, Role role, const Matrix& reps, const NodeCatalog& catalog,
                                       const RepresentationLayout& layout, double weight, std::span<double> out) {
  std::size_t k = 0;
  for (double v : reps.row(other)) out[k++] += weight * v;
  if (layout.features) {
    for (double v : catalog.features().row(other)) out[k++] += weight * v;
  }
  if (layout.role) out[k] += weight * (role == Role::origin ? 1.0 : -1.0);
}

}  // namespace detail

/// [r_other ; F_other ; role] for `for_node`, where `other` is the opposite
/// endpoint; role is +1 when for_node is the origin (self-loops count as origin).
inline std::vector<double> event_representation(const TransactionEvent& event, NodeId for_node, const Matrix& reps,
                                                const NodeCatalog& catalog, RepresentationLayout layout = {}) {
  if (for_node != event.origin && for_node != event.destination) {
    throw NodeNotEndpoint("node " + std::to_string(for_node) + " is not an endpoint of the event");
  }
  const Role role = for_node == event.origin ? Role::origin : Role::destination;
  const NodeId other = role == Role::origin ? event.destination : event.origin;
  std::vector<double> s(layout.width(reps.cols(), catalog.feature_dim()), 0.0);
  detail::write_event_representation(other, role, reps, catalog, layout, 1.0, s);
  return s;
}

/// Per-node decay-weighted message sums with reference time batch.window_end.
/// Every event messages both endpoints (a self-loop messages its node twice,
/// once per role).
inline std::vector<StationMessage> aggregate_messages(const EventBatch& batch, const Matrix& reps,
                                                      const NodeCatalog& catalog, const DecayConfig& cfg,
                                                      RepresentationLayout layout = {}) {
  const std::size_t n = catalog.size();
  if (reps.rows() != n) throw DimensionMismatch("representations have " + std::to_string(reps.rows()) + " rows for " + std::to_string(n) + " nodes");
  const std::size_t width = layout.width(reps.cols(), catalog.feature_dim());
  std::vector<StationMessage> msgs(n, StationMessage{std::vector<double>(width, 0.0), 0.0});
  const double t = batch.window_end;
  for (const auto& e : batch.events) {
    if (e.origin >= n || e.destination >= n) throw UnknownNode("event node index out of range");
    const double w = cfg.weighted ? std::exp(-cfg.lambda * (t - e.timestamp)) : 1.0;
    detail::write_event_representation(e.destination, Role::origin, reps, catalog, layout, w, msgs[e.origin].p);
    msgs[e.origin].q += w;
    detail::write_event_representation(e.origin, Role::destination, reps, catalog, layout, w, msgs[e.destination].p);
    msgs[e.destination].q += w;
  }
  return msgs;
}

using UpdateMap = std::function<std::vector<double>(std::span<const double>)>;

/// a' = f·a + MLP(p), b' = f·b + q with f = exp(-λ(t - t⁻)). An empty message
/// (q = 0) only decays the memory.
inline StationMemory update_station_memory(const StationMemory& mem, const StationMessage& msg, double t,
                                           const UpdateMap& update, const DecayConfig& cfg) {
  if (t < mem.last_update) {
    throw TimeRegression("update at " + std::to_string(t) + " precedes last update " + std::to_string(mem.last_update));
  }
  const double f = cfg.factor(t - mem.last_update);
  StationMemory out{mem.a, f * mem.b + msg.q, t};
  for (auto& x : out.a) x *= f;
  if (msg.q > 0.0) {
    const auto delta = update(msg.p);
    if (delta.size() != out.a.size()) throw DimensionMismatch("update map output has wrong width");
    for (std::size_t i = 0; i < delta.size(); ++i) out.a[i] += delta[i];
  }
  return out;
}

inline std::vector<double> read_representation(const StationMemory& mem) {
  if (!(mem.b > 0.0)) throw DegenerateNormalizer("normalizer b = " + std::to_string(mem.b));
  std::vector<double> r(mem.a.size());
  for (std::size_t i = 0; i < r.size(); ++i) r[i] = mem.a[i] / mem.b;
  return r;
}

/// Direct evaluation of the closed-form decayed average with frozen neighbour
/// representations:
///
///   r_i(t) = Σ_k w_k r_{other(k)} / (w_birth + Σ_k w_k),  w = exp(-λ(t - t')),
///
/// over every history event touching `node` with t' <= t. The w_birth term is
/// the initial normalizer b = 1 placed at `birth_time` with a zero numerator.
inline std::vector<double> oracle_representation(NodeId node, std::span<const TransactionEvent> history, double t,
                                                 const Matrix& frozen_reps, const DecayConfig& cfg,
                                                 double birth_time = 0.0) {
  std::vector<double> num(frozen_reps.cols(), 0.0);
  double den = std::exp(-cfg.lambda * (t - birth_time));
  auto add = [&](NodeId other, double w) {
    for (std::size_t j = 0; j < num.size(); ++j) num[j] += w * frozen_reps(other, j);
    den += w;
  };
  for (const auto& e : history) {
    if (e.timestamp > t) continue;
    const double w = std::exp(-cfg.lambda * (t - e.timestamp));
    if (e.origin == node) add(e.destination, w);
    if (e.destination == node) add(e.origin, w);
  }
  for (auto& x : num) x /= den;
  return num;
}

}  // namespace cmod
