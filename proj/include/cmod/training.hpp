#pragma once

// Chronological training: replay the stream window by window, predict the
// next window's demand after each memory update, and take one Adam step per
// training target.

#include <chrono>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "cmod/autodiff.hpp"
#include "cmod/error.hpp"
#include "cmod/events.hpp"
#include "cmod/metrics.hpp"
#include "cmod/model.hpp"
#include "cmod/optim.hpp"
#include "cmod/params.hpp"

namespace cmod {

/// Contiguous chronological splits: train [t0, train_end), validation
/// [train_end, val_end), test [val_end, test_end).
struct Splits {
  double t0 = 0.0;
  double train_end = 0.0;
  double val_end = 0.0;
  double test_end = 0.0;

  static Splits by_days(double t0, std::size_t train_days, std::size_t val_days, std::size_t test_days,
                        double day_length = 86400.0) {
    Splits s{t0, t0 + day_length * static_cast<double>(train_days),
             t0 + day_length * static_cast<double>(train_days + val_days),
             t0 + day_length * static_cast<double>(train_days + val_days + test_days)};
    s.validate();
    return s;
  }

  void validate() const {
    if (!(t0 <= train_end && train_end <= val_end && val_end <= test_end)) {
      throw InvalidArgument("splits must satisfy t0 <= train_end <= val_end <= test_end");
    }
  }
};

enum class Phase { train, validation, test, outside };

inline Phase phase_of(const Splits& s, double target_start, double tau) {
  if (target_start < s.t0 || target_start + tau > s.test_end + 1e-9 * tau) return Phase::outside;
  if (target_start < s.train_end) return Phase::train;
  if (target_start < s.val_end) return Phase::validation;
  return Phase::test;
}

struct TrainConfig {
  std::size_t max_epochs = 30;
  std::size_t patience = 10;
  double lr = 1e-4;
  std::uint64_t seed = 0;
  Splits splits;

  void validate() const {
    if (patience == 0) throw InvalidArgument("patience must be at least 1");
    if (max_epochs == 0) throw InvalidArgument("max_epochs must be at least 1");
    if (!(lr > 0.0)) throw InvalidArgument("learning rate must be positive");
    splits.validate();
  }
};

/// Batches covering [splits.t0, splits.test_end): by window, or capped when hyper.cap > 0.
inline std::vector<EventBatch> make_batches(std::span<const TransactionEvent> events, const HyperParams& hp,
                                            const Splits& s) {
  std::vector<TransactionEvent> in_span;
  for (const auto& e : events)
    if (e.timestamp >= s.t0 && e.timestamp < s.test_end) in_span.push_back(e);
  return hp.cap > 0 ? batch_by_cap(in_span, s.t0, hp.tau, hp.cap, s.test_end)
                    : batch_by_window(in_span, s.t0, hp.tau, s.test_end);
}

/// Tracks the best validation score; signals a stop after `patience`
/// consecutive epochs without strict improvement.
class EarlyStopper {
 public:
  explicit EarlyStopper(std::size_t patience) : patience_(patience) {
    if (patience == 0) throw InvalidArgument("patience must be at least 1");
  }

  /// Returns true when this epoch is the new best.
  bool observe(double score) {
    ++epoch_;
    if (score < best_) {
      best_ = score;
      best_epoch_ = epoch_;
      stale_ = 0;
      return true;
    }
    ++stale_;
    return false;
  }

  bool should_stop() const { return stale_ >= patience_; }
  double best() const { return best_; }
  std::size_t best_epoch() const { return best_epoch_; }  // 1-based; 0 before any observation

 private:
  std::size_t patience_;
  std::size_t epoch_ = 0;
  std::size_t best_epoch_ = 0;
  std::size_t stale_ = 0;
  double best_ = std::numeric_limits<double>::infinity();
};

struct HistoryRow {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double val_mae = 0.0;
  double val_rmse = 0.0;
  std::optional<double> val_pcc;
  double seconds = 0.0;
};

inline void write_history(std::ostream& out, std::span<const HistoryRow> rows) {
  out << "epoch,train_loss,val_mae,val_rmse,val_pcc,seconds\n";
  out.precision(17);
  for (const auto& r : rows) {
    out << r.epoch << ',' << r.train_loss << ',' << r.val_mae << ',' << r.val_rmse << ',';
    if (r.val_pcc) out << *r.val_pcc;
    else out << "nan";
    out << ',' << r.seconds << '\n';
  }
}

struct TrainResult {
  ModelParams params;  // best validation epoch
  OptimizerState opt;  // optimizer state at the end of training
  std::vector<HistoryRow> history;
  std::size_t best_epoch = 0;
};

/// Observer for one predicted target window during a walk.
struct WalkTarget {
  const EventBatch* batch = nullptr;
  Phase phase = Phase::outside;
  double window_start = 0.0;
  double window_end = 0.0;
  const ODPrediction* prediction = nullptr;
  const ODMatrix* truth = nullptr;
  const MemoryBank* bank = nullptr;  // after the update
};

/// Replays batches with fixed parameters. `visit` sees every batch whose target
/// lies in the splits; `until` stops the walk once a target reaches that phase.
inline MemoryBank walk(const ModelParams& params, std::span<const TransactionEvent> events, const NodeCatalog& catalog,
                       const HyperParams& hp, const Splits& splits, const std::function<void(const WalkTarget&)>& visit,
                       std::optional<Phase> until = std::nullopt, std::span<const EventBatch> batches_in = {}) {
  std::vector<EventBatch> own;
  if (batches_in.empty()) {
    own = make_batches(events, hp, splits);
    batches_in = own;
  }
  MemoryBank bank = MemoryBank::initial(hp, params, splits.t0);
  for (const auto& batch : batches_in) {
    const double t = batch.window_end;
    const Phase ph = phase_of(splits, t, hp.tau);
    if (until && ph == *until) break;
    auto out = step(bank, batch, params, hp, catalog);
    bank = std::move(out.bank);
    if (ph == Phase::outside) continue;
    const ODPrediction pred = predict_od(out.z, params);
    const ODMatrix truth = build_od_matrix(events, t, hp.tau, catalog.size());
    visit(WalkTarget{&batch, ph, t, t + hp.tau, &pred, &truth, &bank});
  }
  return bank;
}

struct EpochStats {
  double train_loss = 0.0;
  std::size_t train_steps = 0;
  std::vector<ODMatrix> val_preds, val_truths;
};

/// One epoch: fresh bank, gradient steps on training targets, then
/// validation targets with parameters frozen.
inline EpochStats run_epoch(ModelParams& params, OptimizerState& opt, std::span<const TransactionEvent> events,
                            std::span<const EventBatch> batches, const NodeCatalog& catalog, const HyperParams& hp,
                            const Splits& splits, const std::function<void(double)>& on_loss = {}) {
  EpochStats stats;
  MemoryBank bank = MemoryBank::initial(hp, params, splits.t0);
  for (const auto& batch : batches) {
    const double t = batch.window_end;
    const Phase ph = phase_of(splits, t, hp.tau);
    if (ph == Phase::test) break;
    if (ph == Phase::train) {
      const ODMatrix truth = build_od_matrix(events, t, hp.tau, catalog.size());
      ad::Tape tape;
      auto pv = bind(tape, params, true);
      auto g = build_step(tape, bank, batch, pv, hp, catalog);
      auto raw = predict_raw(g.z, pv.output_mlp);
      auto loss = od_loss(raw, truth, hp.ablation.mse_loss);
      tape.backward(loss);
      const double lv = loss.value()(0, 0);
      stats.train_loss += lv;
      ++stats.train_steps;
      if (on_loss) on_loss(lv);
      bank = advance(bank, g, batch, hp);
      std::vector<Matrix*> targets;
      params.for_each([&](const std::string&, Matrix& m) { targets.push_back(&m); });
      std::vector<const Matrix*> grads;
      for (const auto& v : pv.all()) grads.push_back(&v.grad());
      adam_update(targets, grads, opt);
      project_station_gain(params, hp);
      continue;
    }
    auto out = step(bank, batch, params, hp, catalog);
    bank = std::move(out.bank);
    if (ph == Phase::validation) {
      stats.val_preds.push_back(predict_od(out.z, params).clamped);
      stats.val_truths.push_back(build_od_matrix(events, t, hp.tau, catalog.size()));
    }
  }
  if (stats.train_steps > 0) stats.train_loss /= static_cast<double>(stats.train_steps);
  return stats;
}

struct TrainOptions {
  std::function<void(const HistoryRow&)> on_epoch;
  std::function<void(double)> on_step_loss;
  std::optional<ModelParams> initial;  // start from these instead of init_params
};

inline TrainResult train(std::span<const TransactionEvent> events, const NodeCatalog& catalog, const HyperParams& hp,
                         const TrainConfig& tc, const TrainOptions& options = {}) {
  tc.validate();
  hp.validate();
  const auto batches = make_batches(events, hp, tc.splits);
  bool any_train = false;
  for (const auto& b : batches) any_train = any_train || phase_of(tc.splits, b.window_end, hp.tau) == Phase::train;
  if (!any_train) throw EmptyTrainSplit("no prediction target falls inside the training split");

  ModelParams params = options.initial ? *options.initial : init_params(hp, tc.seed);
  OptimizerState opt = OptimizerState::for_arrays(params.named(), tc.lr);
  TrainResult result{params, opt, {}, 0};
  EarlyStopper stopper(tc.patience);
  for (std::size_t epoch = 1; epoch <= tc.max_epochs; ++epoch) {
    const auto started = std::chrono::steady_clock::now();
    auto stats = run_epoch(params, opt, events, batches, catalog, hp, tc.splits, options.on_step_loss);
    HistoryRow row;
    row.epoch = epoch;
    row.train_loss = stats.train_loss;
    double score = stats.train_loss;  // no validation targets: fall back to training loss
    if (!stats.val_preds.empty()) {
      auto rep = compute_metrics(stats.val_preds, stats.val_truths);
      row.val_mae = rep.mae;
      row.val_rmse = rep.rmse;
      row.val_pcc = rep.pcc;
      score = rep.mae;
    } else {
      row.val_mae = row.val_rmse = std::numeric_limits<double>::quiet_NaN();
    }
    row.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
    result.history.push_back(row);
    if (options.on_epoch) options.on_epoch(row);
    if (stopper.observe(score)) {
      result.params = params;
      result.best_epoch = epoch;
    }
    if (stopper.should_stop()) break;
  }
  result.opt = std::move(opt);
  return result;
}

}  // namespace cmod
