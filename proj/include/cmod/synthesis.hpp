#pragma once

// Seeded synthetic transaction streams: nodes are split into planted
// communities and every ordered node pair is an inhomogeneous Poisson process
// whose rate follows a piecewise-constant time-of-day profile of its
// (origin community, destination community).

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include <json.hpp>

#include "cmod/error.hpp"
#include "cmod/events.hpp"

namespace cmod {

struct ProfileSegment {
  double start = 0.0;  // seconds into the day, inclusive
  double end = 0.0;    // exclusive
  double multiplier = 1.0;
};

struct CommunityProfile {
  std::size_t from = 0;
  std::size_t to = 0;
  std::vector<ProfileSegment> segments;
};

struct SynthConfig {
  std::size_t n_nodes = 24;
  std::size_t communities = 3;
  double day_length = 86400.0;
  std::size_t days = 18;
  double base_rate = 1.0 / 720.0;  // events per second per pair at multiplier 1
  double default_multiplier = 0.05;  // outside every listed segment
  std::vector<CommunityProfile> profile;
  std::uint64_t seed = 0;

  double horizon() const { return day_length * static_cast<double>(days); }

  /// Community of node i: contiguous, near-equal blocks.
  std::size_t community(NodeId i) const { return i * communities / n_nodes; }

  void validate() const {
    if (n_nodes == 0 || communities == 0 || communities > n_nodes) throw InvalidArgument("need 1 <= communities <= nodes");
    if (!(day_length > 0.0) || days == 0) throw InvalidArgument("day length and day count must be positive");
    if (!(base_rate >= 0.0) || !(default_multiplier >= 0.0)) throw InvalidArgument("rates must be nonnegative");
    for (const auto& p : profile) {
      if (p.from >= communities || p.to >= communities) throw InvalidArgument("profile names an unknown community");
      auto segs = p.segments;
      std::sort(segs.begin(), segs.end(), [](auto& a, auto& b) { return a.start < b.start; });
      for (std::size_t k = 0; k < segs.size(); ++k) {
        const auto& s = segs[k];
        if (!(s.multiplier >= 0.0)) throw InvalidArgument("profile multipliers must be nonnegative");
        if (!(s.start >= 0.0 && s.start < s.end && s.end <= day_length)) throw InvalidArgument("profile segment outside the day");
        if (k > 0 && s.start < segs[k - 1].end) throw InvalidArgument("profile segments overlap");
      }
    }
  }
};

/// Residential communities 0..K-2 and a business community K-1: morning flows
/// into business, evening flows back, quieter intra-community traffic.
inline SynthConfig default_synth_config() {
  SynthConfig cfg;
  const double h = 3600.0;
  const std::size_t biz = cfg.communities - 1;
  for (std::size_t a = 0; a < cfg.communities; ++a) {
    for (std::size_t b = 0; b < cfg.communities; ++b) {
      CommunityProfile p{a, b, {}};
      if (a != biz && b == biz) {
        p.segments = {{6 * h, 7 * h, 1.0}, {7 * h, 9 * h, 3.0}, {9 * h, 17 * h, 0.6}, {17 * h, 22 * h, 0.3}};
      } else if (a == biz && b != biz) {
        p.segments = {{7 * h, 9 * h, 0.3}, {9 * h, 17 * h, 0.6}, {17 * h, 19 * h, 3.0}, {19 * h, 23 * h, 1.0}};
      } else if (a == b && a == biz) {
        p.segments = {{7 * h, 9 * h, 0.4}, {9 * h, 17 * h, 1.2}, {17 * h, 22 * h, 0.4}};
      } else if (a == b) {
        p.segments = {{7 * h, 10 * h, 0.6}, {10 * h, 17 * h, 0.4}, {17 * h, 22 * h, 0.8}};
      } else {
        p.segments = {{7 * h, 22 * h, 0.15}};
      }
      cfg.profile.push_back(std::move(p));
    }
  }
  return cfg;
}

inline nlohmann::json to_json(const SynthConfig& c) {
  nlohmann::json prof = nlohmann::json::array();
  for (const auto& p : c.profile) {
    nlohmann::json segs = nlohmann::json::array();
    for (const auto& s : p.segments) segs.push_back({s.start, s.end, s.multiplier});
    prof.push_back({{"from", p.from}, {"to", p.to}, {"segments", segs}});
  }
  return {{"n_nodes", c.n_nodes},       {"communities", c.communities},
          {"day_length", c.day_length}, {"days", c.days},
          {"base_rate", c.base_rate},   {"default_multiplier", c.default_multiplier},
          {"profile", prof},            {"seed", c.seed}};
}

/// Missing keys keep the values of `base` (a missing profile keeps its profile).
inline SynthConfig synth_from_json(const nlohmann::json& j, SynthConfig base = default_synth_config()) {
  base.n_nodes = j.value("n_nodes", base.n_nodes);
  base.communities = j.value("communities", base.communities);
  base.day_length = j.value("day_length", base.day_length);
  base.days = j.value("days", base.days);
  base.base_rate = j.value("base_rate", base.base_rate);
  base.default_multiplier = j.value("default_multiplier", base.default_multiplier);
  base.seed = j.value("seed", base.seed);
  if (j.contains("profile")) {
    base.profile.clear();
    for (const auto& p : j.at("profile")) {
      CommunityProfile cp{p.at("from").get<std::size_t>(), p.at("to").get<std::size_t>(), {}};
      for (const auto& s : p.at("segments")) cp.segments.push_back({s.at(0).get<double>(), s.at(1).get<double>(), s.at(2).get<double>()});
      base.profile.push_back(std::move(cp));
    }
  }
  return base;
}

/// The exact rate function of a SynthConfig.
class RateFunction {
 public:
  explicit RateFunction(const SynthConfig& cfg) : cfg_(cfg) {
    cfg_.validate();
    const std::size_t k = cfg_.communities;
    pieces_.assign(k * k, {});
    for (std::size_t a = 0; a < k; ++a)
      for (std::size_t b = 0; b < k; ++b) pieces_[a * k + b] = {{0.0, cfg_.day_length, cfg_.default_multiplier}};
    for (const auto& p : cfg_.profile) {
      auto segs = p.segments;
      std::sort(segs.begin(), segs.end(), [](auto& x, auto& y) { return x.start < y.start; });
      std::vector<ProfileSegment> full;
      double cursor = 0.0;
      for (const auto& s : segs) {
        if (s.start > cursor) full.push_back({cursor, s.start, cfg_.default_multiplier});
        full.push_back(s);
        cursor = s.end;
      }
      if (cursor < cfg_.day_length) full.push_back({cursor, cfg_.day_length, cfg_.default_multiplier});
      pieces_[p.from * k + p.to] = std::move(full);
    }
  }

  const SynthConfig& config() const { return cfg_; }

  double rate(NodeId o, NodeId d, double t) const {
    double tod = std::fmod(t, cfg_.day_length);
    if (tod < 0.0) tod += cfg_.day_length;
    for (const auto& s : pieces(o, d)) {
      if (tod >= s.start && tod < s.end) return cfg_.base_rate * s.multiplier;
    }
    return cfg_.base_rate * cfg_.default_multiplier;
  }

  double max_rate(NodeId o, NodeId d) const {
    double m = 0.0;
    for (const auto& s : pieces(o, d)) m = std::max(m, s.multiplier);
    return cfg_.base_rate * m;
  }

  /// ∫ rate over [a, b), exact for the piecewise-constant profile.
  double integral(NodeId o, NodeId d, double a, double b) const {
    if (b <= a) return 0.0;
    const double len = cfg_.day_length;
    double total = 0.0;
    const auto first = static_cast<long long>(std::floor(a / len));
    const auto last = static_cast<long long>(std::floor(b / len));
    for (long long day = first; day <= last; ++day) {
      const double base = static_cast<double>(day) * len;
      for (const auto& s : pieces(o, d)) {
        const double lo = std::max(a, base + s.start);
        const double hi = std::min(b, base + s.end);
        if (hi > lo) total += (hi - lo) * s.multiplier;
      }
    }
    return total * cfg_.base_rate;
  }

 private:
  const std::vector<ProfileSegment>& pieces(NodeId o, NodeId d) const {
    return pieces_[cfg_.community(o) * cfg_.communities + cfg_.community(d)];
  }

  SynthConfig cfg_;
  std::vector<std::vector<ProfileSegment>> pieces_;
};

struct SynthStream {
  std::vector<TransactionEvent> events;
  NodeCatalog catalog;
  RateFunction rate;
};

/// Thinning sampler per ordered pair, each with its own seed derived from
/// (seed, origin, destination); merged by timestamp with ties in pair order.
inline SynthStream generate(const SynthConfig& cfg) {
  RateFunction rate(cfg);
  const double horizon = cfg.horizon();
  const std::size_t n = cfg.n_nodes;
  std::vector<TransactionEvent> events;
  for (NodeId o = 0; o < n; ++o) {
    for (NodeId d = 0; d < n; ++d) {
      const double bound = rate.max_rate(o, d);
      if (bound <= 0.0) continue;
      std::seed_seq seq{static_cast<std::uint32_t>(cfg.seed), static_cast<std::uint32_t>(cfg.seed >> 32),
                        static_cast<std::uint32_t>(o), static_cast<std::uint32_t>(d)};
      std::mt19937_64 rng(seq);
      std::exponential_distribution<double> gap(bound);
      std::uniform_real_distribution<double> accept(0.0, 1.0);
      for (double t = gap(rng); t < horizon; t += gap(rng)) {
        if (accept(rng) * bound < rate.rate(o, d, t)) events.push_back({o, d, t});
      }
    }
  }
  std::stable_sort(events.begin(), events.end(),
                   [](const TransactionEvent& a, const TransactionEvent& b) { return a.timestamp < b.timestamp; });
  return {std::move(events), NodeCatalog::indexed(n), std::move(rate)};
}

inline double true_window_mean(const SynthConfig& cfg, NodeId origin, NodeId destination, double window_start,
                               double window_end) {
  return RateFunction(cfg).integral(origin, destination, window_start, window_end);
}

}  // namespace cmod
