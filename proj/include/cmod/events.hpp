#pragma once

// Transaction stream ingestion: CSV parsing, window/cap batching, and
// ground-truth OD matrix construction.

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <istream>
#include <optional>
#include <ostream>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "cmod/error.hpp"
#include "cmod/matrix.hpp"

namespace cmod {

using NodeId = std::size_t;
using ODMatrix = Matrix;

struct TransactionEvent {
  NodeId origin = 0;
  NodeId destination = 0;
  double timestamp = 0.0;  // seconds

  friend bool operator==(const TransactionEvent&, const TransactionEvent&) = default;
};

/// Events observed in [window_start, window_end]; window_start is the previous
/// update time of the memory bank, window_end the reference time of the update.
struct EventBatch {
  std::vector<TransactionEvent> events;
  double window_start = 0.0;
  double window_end = 0.0;
};

class NodeCatalog {
 public:
  NodeCatalog() = default;

  /// N nodes named "0".."N-1" with one-hot features.
  static NodeCatalog indexed(std::size_t n) {
    std::vector<std::string> names;
    names.reserve(n);
    for (std::size_t i = 0; i < n; ++i) names.push_back(std::to_string(i));
    return NodeCatalog(std::move(names));
  }

  explicit NodeCatalog(std::vector<std::string> names)
      : names_(std::move(names)), features_(Matrix::identity(names_.size())) {
    if (names_.empty()) throw InvalidArgument("catalog must contain at least one node");
    for (std::size_t i = 0; i < names_.size(); ++i) {
      if (!index_.emplace(names_[i], i).second) {
        throw InvalidArgument("duplicate node name '" + names_[i] + "'");
      }
    }
  }

  NodeCatalog(std::vector<std::string> names, Matrix features) : NodeCatalog(std::move(names)) {
    set_features(std::move(features));
  }

  std::size_t size() const noexcept { return names_.size(); }
  const std::vector<std::string>& names() const noexcept { return names_; }
  const std::string& name(NodeId i) const { return names_.at(i); }
  const Matrix& features() const noexcept { return features_; }
  std::size_t feature_dim() const noexcept { return features_.cols(); }

  void set_features(Matrix features) {
    if (features.rows() != names_.size() || features.cols() == 0) {
      throw DimensionMismatch("feature matrix " + features.shape_string() + " for " +
                              std::to_string(names_.size()) + " nodes");
    }
    features_ = std::move(features);
  }

  std::optional<NodeId> find(std::string_view name) const {
    auto it = index_.find(std::string(name));
    if (it == index_.end()) return std::nullopt;
    return it->second;
  }

 private:
  std::vector<std::string> names_;
  std::unordered_map<std::string, NodeId> index_;
  Matrix features_;
};

namespace detail {

inline std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t' || s.front() == '\r')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
  return s;
}

inline std::vector<std::string_view> split_csv(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  for (;;) {
    const std::size_t pos = line.find(',', start);
    if (pos == std::string_view::npos) {
      out.push_back(trim(line.substr(start)));
      break;
    }
    out.push_back(trim(line.substr(start, pos - start)));
    start = pos + 1;
  }
  return out;
}

inline std::optional<double> parse_double(std::string_view s) {
  double v = 0.0;
  const auto* end = s.data() + s.size();
  auto [ptr, ec] = std::from_chars(s.data(), end, v);
  if (ec != std::errc() || ptr != end) return std::nullopt;
  return v;
}

inline std::optional<std::size_t> parse_index(std::string_view s) {
  std::size_t v = 0;
  const auto* end = s.data() + s.size();
  auto [ptr, ec] = std::from_chars(s.data(), end, v);
  if (ec != std::errc() || ptr != end) return std::nullopt;
  return v;
}

inline bool read_line(std::istream& in, std::string& line) {
  if (!std::getline(in, line)) return false;
  if (!line.empty() && line.back() == '\r') line.pop_back();
  return true;
}

}  // namespace detail

/// Parses the `origin,destination,timestamp` event CSV, resolving node names
/// through `catalog`. Blank lines are skipped; line numbers count the header
/// as line 1.
inline std::vector<TransactionEvent> parse_events(std::istream& in, const NodeCatalog& catalog) {
  std::string line;
  std::size_t line_no = 0;
  if (!detail::read_line(in, line)) throw MalformedRow("line 1: missing header");
  ++line_no;
  {
    auto cols = detail::split_csv(line);
    if (cols.size() != 3 || cols[0] != "origin" || cols[1] != "destination" || cols[2] != "timestamp") {
      throw MalformedRow("line 1: expected header 'origin,destination,timestamp'");
    }
  }
  std::vector<TransactionEvent> events;
  while (detail::read_line(in, line)) {
    ++line_no;
    if (detail::trim(line).empty()) continue;
    auto cols = detail::split_csv(line);
    const std::string where = "line " + std::to_string(line_no);
    if (cols.size() != 3) throw MalformedRow(where + ": expected 3 fields, got " + std::to_string(cols.size()));
    auto o = catalog.find(cols[0]);
    if (!o) throw UnknownNode(where + ": unknown origin '" + std::string(cols[0]) + "'");
    auto d = catalog.find(cols[1]);
    if (!d) throw UnknownNode(where + ": unknown destination '" + std::string(cols[1]) + "'");
    auto t = detail::parse_double(cols[2]);
    if (!t || !std::isfinite(*t)) throw MalformedRow(where + ": bad timestamp '" + std::string(cols[2]) + "'");
    if (!events.empty() && *t < events.back().timestamp) {
      throw NonMonotonicTimestamp(where + ": timestamp " + std::string(cols[2]) +
                                  " precedes previous event");
    }
    events.push_back({*o, *d, *t});
  }
  return events;
}

/// Catalog CSV with header `name,index`; indices must form 0..N-1.
inline NodeCatalog parse_catalog(std::istream& in) {
  std::string line;
  if (!detail::read_line(in, line)) throw MalformedRow("line 1: missing header");
  auto header = detail::split_csv(line);
  if (header.size() != 2 || header[0] != "name" || header[1] != "index") {
    throw MalformedRow("line 1: expected header 'name,index'");
  }
  std::vector<std::pair<std::size_t, std::string>> rows;
  std::size_t line_no = 1;
  while (detail::read_line(in, line)) {
    ++line_no;
    if (detail::trim(line).empty()) continue;
    auto cols = detail::split_csv(line);
    auto idx = cols.size() == 2 ? detail::parse_index(cols[1]) : std::nullopt;
    if (!idx || cols[0].empty()) throw MalformedRow("line " + std::to_string(line_no) + ": expected 'name,index'");
    rows.emplace_back(*idx, std::string(cols[0]));
  }
  std::sort(rows.begin(), rows.end());
  std::vector<std::string> names;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i].first != i) throw MalformedRow("catalog indices must be exactly 0..N-1");
    names.push_back(rows[i].second);
  }
  return NodeCatalog(std::move(names));
}

/// Without a catalog, node columns are integer indices; N is inferred as max index + 1.
inline std::pair<std::vector<TransactionEvent>, NodeCatalog> parse_events_indexed(std::istream& in) {
  std::string line;
  std::vector<std::string> lines;
  while (std::getline(in, line)) lines.push_back(line);
  std::size_t max_index = 0;
  for (std::size_t i = 1; i < lines.size(); ++i) {
    auto cols = detail::split_csv(lines[i]);
    if (cols.size() != 3) continue;  // reported by the full parse below
    for (int c = 0; c < 2; ++c) {
      auto idx = detail::parse_index(cols[c]);
      if (!idx) throw UnknownNode("line " + std::to_string(i + 1) + ": '" + std::string(cols[c]) + "' is not a node index");
      max_index = std::max(max_index, *idx);
    }
  }
  NodeCatalog catalog = NodeCatalog::indexed(max_index + 1);
  std::string joined;
  for (const auto& l : lines) {
    joined += l;
    joined += '\n';
  }
  std::istringstream replay(joined);
  auto events = parse_events(replay, catalog);
  return {std::move(events), std::move(catalog)};
}

inline void write_events(std::ostream& out, std::span<const TransactionEvent> events, const NodeCatalog& catalog) {
  out << "origin,destination,timestamp\n";
  char buf[64];
  for (const auto& e : events) {
    auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), e.timestamp);
    out << catalog.name(e.origin) << ',' << catalog.name(e.destination) << ',' << std::string_view(buf, ptr - buf) << '\n';
  }
}

inline void write_catalog(std::ostream& out, const NodeCatalog& catalog) {
  out << "name,index\n";
  for (std::size_t i = 0; i < catalog.size(); ++i) out << catalog.name(i) << ',' << i << '\n';
}

/// Default time origin: first event's timestamp floored to a multiple of tau.
inline double default_origin(std::span<const TransactionEvent> events, double tau) {
  if (events.empty()) return 0.0;
  return std::floor(events.front().timestamp / tau) * tau;
}

namespace detail {

inline double window_boundary(double t0, double tau, std::size_t k) { return t0 + static_cast<double>(k) * tau; }

// Index of the half-open window containing t, robust to rounding at boundaries.
inline std::size_t window_index(double t, double t0, double tau) {
  auto k = static_cast<std::size_t>(std::floor((t - t0) / tau));
  while (k > 0 && t < window_boundary(t0, tau, k)) --k;
  while (t >= window_boundary(t0, tau, k + 1)) ++k;
  return k;
}

inline void check_batching_args(std::span<const TransactionEvent> events, double t0, double tau) {
  if (!(tau > 0.0) || !std::isfinite(tau)) throw InvalidArgument("tau must be positive");
  if (!std::isfinite(t0)) throw InvalidArgument("t0 must be finite");
  for (std::size_t i = 0; i < events.size(); ++i) {
    if (events[i].timestamp < t0) throw InvalidArgument("event precedes time origin t0");
    if (i > 0 && events[i].timestamp < events[i - 1].timestamp) {
      throw NonMonotonicTimestamp("event " + std::to_string(i) + " precedes its predecessor");
    }
  }
}

// Number of windows needed to cover every event and, if given, the horizon.
inline std::size_t window_count(std::span<const TransactionEvent> events, double t0, double tau,
                                std::optional<double> horizon_end) {
  std::size_t n = 0;
  if (!events.empty()) n = window_index(events.back().timestamp, t0, tau) + 1;
  if (horizon_end && *horizon_end > t0) {
    auto h = static_cast<std::size_t>(std::ceil((*horizon_end - t0) / tau));
    while (h > 0 && window_boundary(t0, tau, h - 1) >= *horizon_end) --h;
    n = std::max(n, h);
  }
  return n;
}

}  // namespace detail

/// One batch per window [t0 + k·tau, t0 + (k+1)·tau); empty windows still yield a batch.
inline std::vector<EventBatch> batch_by_window(std::span<const TransactionEvent> events, double t0, double tau,
                                               std::optional<double> horizon_end = std::nullopt) {
  detail::check_batching_args(events, t0, tau);
  const std::size_t n = detail::window_count(events, t0, tau, horizon_end);
  std::vector<EventBatch> batches(n);
  for (std::size_t k = 0; k < n; ++k) {
    batches[k].window_start = detail::window_boundary(t0, tau, k);
    batches[k].window_end = detail::window_boundary(t0, tau, k + 1);
  }
  for (const auto& e : events) batches[detail::window_index(e.timestamp, t0, tau)].events.push_back(e);
  return batches;
}

/// Splits each tau-window into consecutive sub-batches of at most `cap` events.
/// A non-final sub-batch ends at its last event's timestamp; the final one ends
/// at the window boundary. If the cap-th event shares the sub-batch's start
/// time, the sub-batch extends until the timestamp advances so that every
/// batch spans positive time.
inline std::vector<EventBatch> batch_by_cap(std::span<const TransactionEvent> events, double t0, double tau,
                                            std::size_t cap, std::optional<double> horizon_end = std::nullopt) {
  if (cap == 0) throw InvalidArgument("cap must be at least 1");
  std::vector<EventBatch> out;
  for (auto& window : batch_by_window(events, t0, tau, horizon_end)) {
    if (window.events.size() <= cap) {
      out.push_back(std::move(window));
      continue;
    }
    double start = window.window_start;
    std::size_t i = 0;
    const auto& evs = window.events;
    while (i < evs.size()) {
      std::size_t j = std::min(i + cap, evs.size());
      // Never close at the start time, and never split a group of equal timestamps.
      while (j < evs.size() && (evs[j - 1].timestamp <= start || evs[j].timestamp == evs[j - 1].timestamp)) ++j;
      EventBatch b;
      b.events.assign(evs.begin() + static_cast<std::ptrdiff_t>(i), evs.begin() + static_cast<std::ptrdiff_t>(j));
      b.window_start = start;
      const bool last = j == evs.size();
      b.window_end = last ? window.window_end : evs[j - 1].timestamp;
      start = b.window_end;
      out.push_back(std::move(b));
      i = j;
    }
  }
  return out;
}

/// Y[i][j] = #events with origin i, destination j and t <= t_k < t + tau.
/// `events` must be sorted by timestamp.
inline ODMatrix build_od_matrix(std::span<const TransactionEvent> events, double t, double tau, std::size_t n) {
  if (n == 0) throw InvalidArgument("N must be at least 1");
  if (!(tau > 0.0)) throw InvalidArgument("tau must be positive");
  ODMatrix y(n, n);
  auto lo = std::lower_bound(events.begin(), events.end(), t,
                             [](const TransactionEvent& e, double v) { return e.timestamp < v; });
  const double end = t + tau;
  for (auto it = lo; it != events.end() && it->timestamp < end; ++it) {
    if (it->origin >= n || it->destination >= n) throw UnknownNode("node index out of range");
    y(it->origin, it->destination) += 1.0;
  }
  return y;
}

}  // namespace cmod
