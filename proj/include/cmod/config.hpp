#pragma once

// JSON views of the hyperparameter structs, shared by checkpoints, run
// reports and the CLI config file. Keys are the lower_snake_case field names.

#include <cstdint>
#include <string>

#include <json.hpp>

#include "cmod/params.hpp"

namespace cmod {

inline nlohmann::json to_json(const Ablation& a) {
  return {{"no_multilevel", a.no_multilevel}, {"no_weighted_update", a.no_weighted_update}, {"mse_loss", a.mse_loss}};
}

inline Ablation ablation_from_json(const nlohmann::json& j, Ablation a = {}) {
  a.no_multilevel = j.value("no_multilevel", a.no_multilevel);
  a.no_weighted_update = j.value("no_weighted_update", a.no_weighted_update);
  a.mse_loss = j.value("mse_loss", a.mse_loss);
  return a;
}

inline nlohmann::json to_json(const HyperParams& h) {
  return {{"lambda", h.lambda},
          {"tau", h.tau},
          {"heads", h.heads},
          {"d", h.d},
          {"d_rel", h.d_rel},
          {"d_msg", h.d_msg},
          {"n_clusters", h.n_clusters},
          {"cap", h.cap},
          {"relation_scale", h.relation_scale},
          {"station_gain_limit", h.station_gain_limit},
          {"ablation", to_json(h.ablation)},
          {"n_nodes", h.n_nodes},
          {"feature_dim", h.feature_dim}};
}

inline HyperParams hyper_from_json(const nlohmann::json& j, HyperParams h = {}) {
  h.lambda = j.value("lambda", h.lambda);
  h.tau = j.value("tau", h.tau);
  h.heads = j.value("heads", h.heads);
  h.d = j.value("d", h.d);
  h.d_rel = j.value("d_rel", h.d_rel);
  h.d_msg = j.value("d_msg", h.d_msg);
  h.n_clusters = j.value("n_clusters", h.n_clusters);
  h.cap = j.value("cap", h.cap);
  h.relation_scale = j.value("relation_scale", h.relation_scale);
  h.station_gain_limit = j.value("station_gain_limit", h.station_gain_limit);
  if (j.contains("ablation")) h.ablation = ablation_from_json(j.at("ablation"), h.ablation);
  h.n_nodes = j.value("n_nodes", h.n_nodes);
  h.feature_dim = j.value("feature_dim", h.feature_dim);
  return h;
}

/// FNV-1a over a byte string.
inline std::uint64_t fnv1a64(const void* data, std::size_t n, std::uint64_t h = 0xcbf29ce484222325ULL) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::string hex64(std::uint64_t v) {
  static const char* digits = "0123456789abcdef";
  std::string s(16, '0');
  for (int i = 15; i >= 0; --i, v >>= 4) s[static_cast<std::size_t>(i)] = digits[v & 0xf];
  return s;
}

inline std::string config_hash(const nlohmann::json& config) {
  const std::string canonical = config.dump();
  return hex64(fnv1a64(canonical.data(), canonical.size()));
}

}  // namespace cmod
