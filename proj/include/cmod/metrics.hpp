#pragma once

#include <cmath>
#include <cstddef>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "cmod/error.hpp"
#include "cmod/events.hpp"
#include "cmod/matrix.hpp"

namespace cmod {

enum class MetricScope { all_pairs, above_average };

inline const char* to_string(MetricScope s) { return s == MetricScope::all_pairs ? "all_pairs" : "above_average"; }

struct MetricReport {
  MetricScope scope = MetricScope::all_pairs;
  double mae = 0.0;
  double rmse = 0.0;
  std::optional<double> pcc;  // empty when either vector has zero variance
  bool degenerate_variance = false;
  bool empty_scope = false;
  double threshold = 0.0;  // truth average used by above_average
  std::size_t windows = 0;
  std::size_t cells = 0;
};

inline nlohmann::json to_json(const MetricReport& r) {
  nlohmann::json j = {{"scope", to_string(r.scope)}, {"mae", r.mae},         {"rmse", r.rmse},
                      {"windows", r.windows},        {"cells", r.cells},     {"threshold", r.threshold},
                      {"degenerate_variance", r.degenerate_variance},        {"empty_scope", r.empty_scope}};
  j["pcc"] = r.pcc ? nlohmann::json(*r.pcc) : nlohmann::json(nullptr);
  return j;
}

/// Pearson correlation; nullopt if either input is constant.
inline std::optional<double> pearson(std::span<const double> x, std::span<const double> y) {
  const std::size_t n = x.size();
  if (n == 0) return std::nullopt;
  double mx = 0.0, my = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    mx += x[i];
    my += y[i];
  }
  mx /= static_cast<double>(n);
  my /= static_cast<double>(n);
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double dx = x[i] - mx, dy = y[i] - my;
    sxy += dx * dy;
    sxx += dx * dx;
    syy += dy * dy;
  }
  if (sxx <= 0.0 || syy <= 0.0) return std::nullopt;
  return std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
}

/// MAE / RMSE / PCC over every (window, i, j) cell in scope. above_average
/// keeps cells whose true demand exceeds `threshold`, by default the mean of
/// all truth cells.
inline MetricReport compute_metrics(std::span<const ODMatrix> preds, std::span<const ODMatrix> truths,
                                    MetricScope scope = MetricScope::all_pairs,
                                    std::optional<double> threshold = std::nullopt) {
  if (preds.size() != truths.size()) {
    throw LengthMismatch(std::to_string(preds.size()) + " predictions for " + std::to_string(truths.size()) + " truths");
  }
  double total = 0.0;
  std::size_t all_cells = 0;
  for (std::size_t w = 0; w < truths.size(); ++w) {
    if (!preds[w].same_shape(truths[w])) throw LengthMismatch("window " + std::to_string(w) + " shape mismatch");
    for (double y : truths[w].data()) total += y;
    all_cells += truths[w].size();
  }
  MetricReport r;
  r.scope = scope;
  r.windows = truths.size();
  r.threshold = threshold.value_or(all_cells ? total / static_cast<double>(all_cells) : 0.0);

  std::vector<double> yp, yt;
  yp.reserve(all_cells);
  yt.reserve(all_cells);
  for (std::size_t w = 0; w < truths.size(); ++w) {
    for (std::size_t k = 0; k < truths[w].size(); ++k) {
      if (scope == MetricScope::above_average && !(truths[w][k] > r.threshold)) continue;
      yp.push_back(preds[w][k]);
      yt.push_back(truths[w][k]);
    }
  }
  r.cells = yt.size();
  if (r.cells == 0) {
    r.empty_scope = true;
    r.degenerate_variance = true;
    return r;
  }
  double abs_sum = 0.0, sq_sum = 0.0;
  for (std::size_t i = 0; i < yt.size(); ++i) {
    const double e = yt[i] - yp[i];
    abs_sum += std::abs(e);
    sq_sum += e * e;
  }
  r.mae = abs_sum / static_cast<double>(r.cells);
  r.rmse = std::sqrt(sq_sum / static_cast<double>(r.cells));
  r.pcc = pearson(yp, yt);
  r.degenerate_variance = !r.pcc.has_value();
  return r;
}

/// Historical average per time-of-day slot, slot = floor((t mod 86400) / tau).
class HistoricalAverage {
 public:
  static constexpr double kDay = 86400.0;

  HistoricalAverage(double tau, std::size_t n) : tau_(tau), n_(n), global_(n, n) {
    if (!(tau > 0.0)) throw InvalidArgument("tau must be positive");
  }

  std::size_t slot(double window_start) const {
    double tod = std::fmod(window_start, kDay);
    if (tod < 0.0) tod += kDay;
    return static_cast<std::size_t>(std::floor(tod / tau_ + 1e-9));
  }

  void add(double window_start, const ODMatrix& y) {
    if (y.rows() != n_ || y.cols() != n_) throw DimensionMismatch("HA window shape " + y.shape_string());
    auto& acc = sums_.try_emplace(slot(window_start), Matrix(n_, n_)).first->second;
    for (std::size_t k = 0; k < y.size(); ++k) {
      acc[k] += y[k];
      global_[k] += y[k];
    }
    ++counts_[slot(window_start)];
    ++total_;
  }

  struct Prediction {
    ODMatrix y;
    bool unseen_slot = false;  // fell back to the global mean
  };

  Prediction predict(double window_start) const {
    if (total_ == 0) throw InvalidArgument("historical average has no training windows");
    const auto s = slot(window_start);
    auto it = sums_.find(s);
    Prediction p{Matrix(n_, n_), it == sums_.end()};
    const Matrix& src = p.unseen_slot ? global_ : it->second;
    const double c = static_cast<double>(p.unseen_slot ? total_ : counts_.at(s));
    for (std::size_t k = 0; k < src.size(); ++k) p.y[k] = src[k] / c;
    return p;
  }

 private:
  double tau_;
  std::size_t n_;
  std::map<std::size_t, Matrix> sums_;
  std::map<std::size_t, std::size_t> counts_;
  Matrix global_;
  std::size_t total_ = 0;
};

struct LabeledWindow {
  double window_start = 0.0;
  ODMatrix y;
};

inline HistoricalAverage ha_baseline(std::span<const LabeledWindow> train, double tau) {
  if (train.empty()) throw InvalidArgument("historical average needs at least one window");
  HistoricalAverage ha(tau, train.front().y.rows());
  for (const auto& w : train) ha.add(w.window_start, w.y);
  return ha;
}

}  // namespace cmod
