#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "cmod/autodiff.hpp"
#include "cmod/decay_memory.hpp"
#include "cmod/error.hpp"
#include "cmod/matrix.hpp"

namespace cmod {

struct Ablation {
  bool no_multilevel = false;       // drop clusters/area; Z = [r ; 0 ; 0]
  bool no_weighted_update = false;  // all decay factors and message weights = 1
  bool mse_loss = false;            // unmasked squared error

  friend bool operator==(const Ablation&, const Ablation&) = default;
};

struct HyperParams {
  double lambda = std::log(2.0) / 3600.0;
  double tau = 1800.0;
  std::size_t heads = 8;
  std::size_t d = 256;
  std::size_t d_rel = 0;   // relation projection width; 0 means d / heads
  std::size_t d_msg = 256;
  std::size_t n_clusters = 0;  // 0 means ceil(sqrt(N))
  std::size_t cap = 0;         // 0 disables capped batching
  double relation_scale = 1.0;
  // Upper bound on the station MLP's spectral gain from neighbour
  // representations to the memory increment; 0 disables the projection.
  double station_gain_limit = 0.9;
  Ablation ablation;

  // Resolved from the node catalog.
  std::size_t n_nodes = 0;
  std::size_t feature_dim = 0;

  std::size_t relation_width() const { return d_rel != 0 ? d_rel : std::max<std::size_t>(1, d / heads); }
  std::size_t clusters() const {
    if (n_clusters != 0) return n_clusters;
    return std::max<std::size_t>(1, static_cast<std::size_t>(std::ceil(std::sqrt(static_cast<double>(n_nodes)))));
  }
  std::size_t station_message_width() const { return d + feature_dim + 1; }
  std::size_t head_message_width() const { return d_msg / heads; }

  DecayConfig decay() const { return DecayConfig{lambda, d, !ablation.no_weighted_update}; }

  /// Fills n_nodes/feature_dim and resolves the derived defaults.
  HyperParams resolved(std::size_t nodes, std::size_t features) const {
    HyperParams h = *this;
    h.n_nodes = nodes;
    h.feature_dim = features;
    h.d_rel = relation_width();
    h.n_clusters = clusters();
    h.validate();
    return h;
  }

  void validate() const {
    if (!(lambda > 0.0) || !std::isfinite(lambda)) throw InvalidArgument("lambda must be positive");
    if (!(tau > 0.0) || !std::isfinite(tau)) throw InvalidArgument("tau must be positive");
    if (heads == 0 || d == 0 || d_msg == 0) throw InvalidArgument("heads, d and d_msg must be positive");
    if (d_msg % heads != 0) throw InvalidArgument("d_msg must be divisible by heads");
    if (n_nodes == 0) throw InvalidArgument("hyperparameters are not resolved against a catalog");
    if (feature_dim == 0) throw InvalidArgument("feature dimension must be positive");
    if (!(station_gain_limit >= 0.0)) throw InvalidArgument("station_gain_limit must be nonnegative");
  }
};

/// One hidden layer of width `out`, rectifier, linear output.
struct Mlp {
  Matrix w1;  // hidden × in
  Matrix b1;  // 1 × hidden
  Matrix w2;  // out × hidden
  Matrix b2;  // 1 × out

  std::size_t in_dim() const { return w1.cols(); }
  std::size_t out_dim() const { return w2.rows(); }
};

struct ModelParams {
  std::vector<Matrix> wc1, wc2, wg1, wg2;  // per head, d_rel × d
  std::vector<Matrix> wc3;                 // per head, (d_msg/H) × d_s
  std::vector<Matrix> wg3;                 // per head, (d_msg/H) × d_msg
  Mlp station_mlp;                         // d_s → d
  Mlp cluster_mlp;                         // d_msg → d
  Mlp area_mlp;                            // d_msg → d
  Mlp output_mlp;                          // 6d → 1, hidden d
  Matrix cluster_init;                     // N_c × d
  Matrix area_init;                        // 1 × d

  /// Visits every array with a stable name, in a fixed order.
  template <typename Self, typename F>
  static void visit(Self& self, F&& f) {
    auto heads = [&](const char* base, auto& v) {
      for (std::size_t h = 0; h < v.size(); ++h) f(std::string(base) + ".h" + std::to_string(h), v[h]);
    };
    auto mlp = [&](const char* base, auto& m) {
      f(std::string(base) + ".w1", m.w1);
      f(std::string(base) + ".b1", m.b1);
      f(std::string(base) + ".w2", m.w2);
      f(std::string(base) + ".b2", m.b2);
    };
    heads("wc1", self.wc1);
    heads("wc2", self.wc2);
    heads("wg1", self.wg1);
    heads("wg2", self.wg2);
    heads("wc3", self.wc3);
    heads("wg3", self.wg3);
    mlp("station_mlp", self.station_mlp);
    mlp("cluster_mlp", self.cluster_mlp);
    mlp("area_mlp", self.area_mlp);
    mlp("output_mlp", self.output_mlp);
    f(std::string("cluster_init"), self.cluster_init);
    f(std::string("area_init"), self.area_init);
  }
  template <typename F>
  void for_each(F&& f) { visit(*this, std::forward<F>(f)); }
  template <typename F>
  void for_each(F&& f) const { visit(*this, std::forward<F>(f)); }

  ad::NamedArrays named() const {
    ad::NamedArrays out;
    for_each([&](const std::string& name, const Matrix& m) { out.emplace_back(name, m); });
    return out;
  }

  void assign(const ad::NamedArrays& arrays) {
    std::size_t i = 0;
    for_each([&](const std::string& name, Matrix& m) {
      if (i >= arrays.size() || arrays[i].first != name || !arrays[i].second.same_shape(m)) {
        throw ShapeMismatch("array '" + name + "' does not match");
      }
      m = arrays[i++].second;
    });
    if (i != arrays.size()) throw ShapeMismatch("unexpected extra arrays");
  }

  friend bool operator==(const ModelParams& a, const ModelParams& b) { return a.named() == b.named(); }
};

namespace detail {

inline Matrix uniform_matrix(std::size_t rows, std::size_t cols, double scale, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> dist(-scale, scale);
  Matrix m(rows, cols);
  for (auto& x : m.data()) x = dist(rng);
  return m;
}

inline Matrix fan_in_matrix(std::size_t rows, std::size_t cols, std::mt19937_64& rng) {
  return uniform_matrix(rows, cols, 1.0 / std::sqrt(static_cast<double>(cols)), rng);
}

inline Mlp make_mlp(std::size_t in, std::size_t hidden, std::size_t out, std::mt19937_64& rng) {
  Mlp m;
  m.w1 = fan_in_matrix(hidden, in, rng);
  m.b1 = Matrix(1, hidden);
  m.w2 = fan_in_matrix(out, hidden, rng);
  m.b2 = Matrix(1, out);
  return m;
}

}  // namespace detail

/// Largest singular value of columns [c0, c0 + width) of m, by power iteration
/// from a fixed start vector.
inline double spectral_norm(const Matrix& m, std::size_t c0, std::size_t width, std::size_t iterations = 30) {
  if (width == 0 || m.rows() == 0) return 0.0;
  std::vector<double> v(width, 1.0 / std::sqrt(static_cast<double>(width))), u(m.rows());
  double sigma = 0.0;
  for (std::size_t it = 0; it < iterations; ++it) {
    for (std::size_t i = 0; i < m.rows(); ++i) {
      double acc = 0.0;
      for (std::size_t k = 0; k < width; ++k) acc += m(i, c0 + k) * v[k];
      u[i] = acc;
    }
    std::fill(v.begin(), v.end(), 0.0);
    for (std::size_t i = 0; i < m.rows(); ++i)
      for (std::size_t k = 0; k < width; ++k) v[k] += m(i, c0 + k) * u[i];
    double norm = 0.0;
    for (double x : v) norm += x * x;
    norm = std::sqrt(norm);
    if (norm == 0.0) return 0.0;
    sigma = std::sqrt(norm);
    for (double& x : v) x /= norm;
  }
  return sigma;
}

/// Rescales the representation block of the station MLP's first layer so that
/// ||W2|| * ||W1[:, rep]|| <= hp.station_gain_limit. Returns the gain before
/// projection.
inline double project_station_gain(ModelParams& p, const HyperParams& hp) {
  const double g = spectral_norm(p.station_mlp.w2, 0, p.station_mlp.w2.cols()) *
                   spectral_norm(p.station_mlp.w1, 0, hp.d);
  if (hp.station_gain_limit > 0.0 && g > hp.station_gain_limit) {
    const double shrink = hp.station_gain_limit / g;
    auto& w1 = p.station_mlp.w1;
    for (std::size_t i = 0; i < w1.rows(); ++i)
      for (std::size_t k = 0; k < hp.d; ++k) w1(i, k) *= shrink;
  }
  return g;
}

/// Deterministic given seed: weights ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)),
/// biases zero, initial cluster/area memories ~ U(-1/sqrt(d), 1/sqrt(d)).
inline ModelParams init_params(const HyperParams& hp, std::uint64_t seed) {
  hp.validate();
  std::mt19937_64 rng(seed);
  const std::size_t d = hp.d, dr = hp.relation_width(), ds = hp.station_message_width();
  const std::size_t dh = hp.head_message_width();
  ModelParams p;
  for (std::size_t h = 0; h < hp.heads; ++h) {
    p.wc1.push_back(detail::fan_in_matrix(dr, d, rng));
    p.wc2.push_back(detail::fan_in_matrix(dr, d, rng));
    p.wg1.push_back(detail::fan_in_matrix(dr, d, rng));
    p.wg2.push_back(detail::fan_in_matrix(dr, d, rng));
    p.wc3.push_back(detail::fan_in_matrix(dh, ds, rng));
    p.wg3.push_back(detail::fan_in_matrix(dh, hp.d_msg, rng));
  }
  p.station_mlp = detail::make_mlp(ds, d, d, rng);
  p.cluster_mlp = detail::make_mlp(hp.d_msg, d, d, rng);
  p.area_mlp = detail::make_mlp(hp.d_msg, d, d, rng);
  p.output_mlp = detail::make_mlp(6 * d, d, 1, rng);
  p.cluster_init = detail::fan_in_matrix(hp.clusters(), d, rng);
  p.area_init = detail::fan_in_matrix(1, d, rng);
  project_station_gain(p, hp);
  return p;
}

// ---------------------------------------------------------------------------
// Tape bindings

struct MlpVars {
  ad::Var w1, b1, w2, b2;
};

struct ParamVars {
  std::vector<ad::Var> wc1, wc2, wg1, wg2, wc3, wg3;
  MlpVars station_mlp, cluster_mlp, area_mlp, output_mlp;
  ad::Var cluster_init, area_init;

  /// Same order as ModelParams::for_each.
  std::vector<ad::Var> all() const {
    std::vector<ad::Var> out;
    for (const auto* v : {&wc1, &wc2, &wg1, &wg2, &wc3, &wg3}) out.insert(out.end(), v->begin(), v->end());
    for (const auto* m : {&station_mlp, &cluster_mlp, &area_mlp, &output_mlp}) {
      out.insert(out.end(), {m->w1, m->b1, m->w2, m->b2});
    }
    out.push_back(cluster_init);
    out.push_back(area_init);
    return out;
  }
};

/// Records every parameter on `tape`, as variables when `trainable`.
inline ParamVars bind(ad::Tape& tape, const ModelParams& p, bool trainable) {
  auto put = [&](const Matrix& m) { return trainable ? tape.variable(m) : tape.constant(m); };
  auto heads = [&](const std::vector<Matrix>& v) {
    std::vector<ad::Var> out;
    for (const auto& m : v) out.push_back(put(m));
    return out;
  };
  auto mlp = [&](const Mlp& m) { return MlpVars{put(m.w1), put(m.b1), put(m.w2), put(m.b2)}; };
  ParamVars v;
  v.wc1 = heads(p.wc1);
  v.wc2 = heads(p.wc2);
  v.wg1 = heads(p.wg1);
  v.wg2 = heads(p.wg2);
  v.wc3 = heads(p.wc3);
  v.wg3 = heads(p.wg3);
  v.station_mlp = mlp(p.station_mlp);
  v.cluster_mlp = mlp(p.cluster_mlp);
  v.area_mlp = mlp(p.area_mlp);
  v.output_mlp = mlp(p.output_mlp);
  v.cluster_init = put(p.cluster_init);
  v.area_init = put(p.area_init);
  return v;
}

/// Gradients of every bound parameter, named as in ModelParams.
inline ad::NamedArrays gradients(const ModelParams& p, const ParamVars& vars) {
  ad::NamedArrays out;
  const auto v = vars.all();
  std::size_t i = 0;
  p.for_each([&](const std::string& name, const Matrix&) {
    out.emplace_back(name, v[i].grad());
    ++i;
  });
  return out;
}

/// Row-wise bias add as ones(n,1)·b.
inline ad::Var add_bias(ad::Var x, ad::Var b) {
  auto ones = x.tape->constant(Matrix(x.rows(), 1, 1.0));
  return ad::add(x, ad::matmul(ones, b));
}

/// Applies the MLP to every row of x (n × in).
inline ad::Var mlp_forward(const MlpVars& m, ad::Var x) {
  auto h = ad::relu(add_bias(ad::matmul_nt(x, m.w1), m.b1));
  return add_bias(ad::matmul_nt(h, m.w2), m.b2);
}

}  // namespace cmod
