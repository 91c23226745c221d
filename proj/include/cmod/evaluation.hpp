#pragma once

#include <cstddef>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "cmod/events.hpp"
#include "cmod/metrics.hpp"
#include "cmod/model.hpp"
#include "cmod/multilevel.hpp"
#include "cmod/training.hpp"

namespace cmod {

struct PredictionRow {
  NodeId origin = 0;
  NodeId destination = 0;
  double window_start = 0.0;
  double window_end = 0.0;
  double predicted = 0.0;
  double actual = 0.0;
};

struct EvaluationResult {
  MetricReport all_pairs;
  MetricReport above_average;
  std::vector<PredictionRow> rows;
  std::vector<ODMatrix> preds, truths;
  std::vector<double> window_starts;
};

inline void append_rows(std::vector<PredictionRow>& rows, const ODMatrix& pred, const ODMatrix& truth, double start,
                        double end) {
  for (std::size_t i = 0; i < pred.rows(); ++i)
    for (std::size_t j = 0; j < pred.cols(); ++j) rows.push_back({i, j, start, end, pred(i, j), truth(i, j)});
}

inline EvaluationResult summarize(std::vector<ODMatrix> preds, std::vector<ODMatrix> truths,
                                  std::vector<double> starts, std::vector<PredictionRow> rows) {
  EvaluationResult r;
  r.all_pairs = compute_metrics(preds, truths, MetricScope::all_pairs);
  r.above_average = compute_metrics(preds, truths, MetricScope::above_average);
  r.preds = std::move(preds);
  r.truths = std::move(truths);
  r.window_starts = std::move(starts);
  r.rows = std::move(rows);
  return r;
}

/// Replays the stream chronologically from splits.t0 with fixed parameters
/// and scores the clamped predictions for every target in `phase`.
inline EvaluationResult evaluate(const ModelParams& params, std::span<const TransactionEvent> events,
                                 const NodeCatalog& catalog, const HyperParams& hp, const Splits& splits,
                                 Phase phase = Phase::test) {
  std::vector<ODMatrix> preds, truths;
  std::vector<double> starts;
  std::vector<PredictionRow> rows;
  walk(params, events, catalog, hp, splits, [&](const WalkTarget& w) {
    if (w.phase != phase) return;
    preds.push_back(w.prediction->clamped);
    truths.push_back(*w.truth);
    starts.push_back(w.window_start);
    append_rows(rows, w.prediction->clamped, *w.truth, w.window_start, w.window_end);
  });
  return summarize(std::move(preds), std::move(truths), std::move(starts), std::move(rows));
}

/// Historical-average baseline fitted on the training windows and scored on
/// the windows of `phase`.
inline EvaluationResult evaluate_historical_average(std::span<const TransactionEvent> events,
                                                    const NodeCatalog& catalog, double tau, const Splits& splits,
                                                    Phase phase = Phase::test) {
  const std::size_t n = catalog.size();
  HistoricalAverage ha(tau, n);
  std::vector<ODMatrix> preds, truths;
  std::vector<double> starts;
  std::vector<PredictionRow> rows;
  for (std::size_t k = 0;; ++k) {
    const double start = splits.t0 + static_cast<double>(k) * tau;
    const Phase ph = phase_of(splits, start, tau);
    if (ph == Phase::outside) break;
    if (ph == Phase::train) ha.add(start, build_od_matrix(events, start, tau, n));
  }
  for (std::size_t k = 0;; ++k) {
    const double start = splits.t0 + static_cast<double>(k) * tau;
    const Phase ph = phase_of(splits, start, tau);
    if (ph == Phase::outside) break;
    if (ph != phase) continue;
    auto y = build_od_matrix(events, start, tau, n);
    auto p = ha.predict(start).y;
    append_rows(rows, p, y, start, start + tau);
    preds.push_back(std::move(p));
    truths.push_back(std::move(y));
    starts.push_back(start);
  }
  return summarize(std::move(preds), std::move(truths), std::move(starts), std::move(rows));
}

inline void write_predictions(std::ostream& out, std::span<const PredictionRow> rows, const NodeCatalog& catalog,
                              bool with_actual = true) {
  out << "origin,destination,window_start,window_end,predicted" << (with_actual ? ",actual" : "") << '\n';
  out.precision(17);
  for (const auto& r : rows) {
    out << catalog.name(r.origin) << ',' << catalog.name(r.destination) << ',' << r.window_start << ','
        << r.window_end << ',' << r.predicted;
    if (with_actual) out << ',' << r.actual;
    out << '\n';
  }
}

struct RepresentationRow {
  double timestamp = 0.0;
  NodeId node = 0;
  std::size_t dim = 0;
  double value = 0.0;
};

/// Station representations r_i after every batch, for the requested nodes.
inline std::vector<RepresentationRow> export_representations(const ModelParams& params,
                                                             std::span<const TransactionEvent> events,
                                                             const NodeCatalog& catalog, const HyperParams& hp,
                                                             const Splits& splits, std::span<const NodeId> nodes) {
  for (NodeId v : nodes)
    if (v >= catalog.size()) throw UnknownNode("node index " + std::to_string(v));
  std::vector<RepresentationRow> rows;
  MemoryBank bank = MemoryBank::initial(hp, params, splits.t0);
  for (const auto& batch : make_batches(events, hp, splits)) {
    bank = step(bank, batch, params, hp, catalog).bank;
    const Matrix reps = bank.representations();
    for (NodeId v : nodes)
      for (std::size_t k = 0; k < reps.cols(); ++k) rows.push_back({batch.window_end, v, k, reps(v, k)});
  }
  return rows;
}

inline void write_representations(std::ostream& out, std::span<const RepresentationRow> rows,
                                  const NodeCatalog& catalog) {
  out << "timestamp,node,dim,value\n";
  out.precision(17);
  for (const auto& r : rows) out << r.timestamp << ',' << catalog.name(r.node) << ',' << r.dim << ',' << r.value << '\n';
}

/// Relations the next step would use, after replaying every batch.
inline RelationTensors relations_after(const ModelParams& params, std::span<const TransactionEvent> events,
                                       const NodeCatalog& catalog, const HyperParams& hp, const Splits& splits) {
  if (hp.ablation.no_multilevel) throw InvalidArgument("relations are undefined without the multi-level structure");
  MemoryBank bank = MemoryBank::initial(hp, params, splits.t0);
  for (const auto& batch : make_batches(events, hp, splits)) bank = step(bank, batch, params, hp, catalog).bank;
  return compute_relations(bank.representations(), bank.level.cluster_mem, bank.level.area_mem, params,
                           hp.relation_scale);
}

/// `head,station,cluster,weight` rows of one normalized view (acm or ace).
inline void write_relations(std::ostream& out, std::span<const Matrix> view, const NodeCatalog& catalog) {
  out << "head,station,cluster,weight\n";
  out.precision(17);
  for (std::size_t h = 0; h < view.size(); ++h)
    for (std::size_t i = 0; i < view[h].rows(); ++i)
      for (std::size_t c = 0; c < view[h].cols(); ++c)
        out << h << ',' << catalog.name(i) << ',' << c << ',' << view[h](i, c) << '\n';
}

}  // namespace cmod
