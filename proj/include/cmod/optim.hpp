#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "cmod/autodiff.hpp"
#include "cmod/error.hpp"
#include "cmod/matrix.hpp"

namespace cmod {

struct OptimizerState {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::uint64_t step = 0;
  std::vector<Matrix> m;  // first moments, one per parameter array
  std::vector<Matrix> v;  // second moments

  static OptimizerState for_arrays(const ad::NamedArrays& params, double lr) {
    OptimizerState s;
    s.lr = lr;
    for (const auto& [name, value] : params) {
      s.m.emplace_back(value.rows(), value.cols());
      s.v.emplace_back(value.rows(), value.cols());
    }
    return s;
  }
};

/// Bias-corrected Adam update of `params[a]` by `grads[a]`, in place.
inline void adam_update(std::span<Matrix* const> params, std::span<const Matrix* const> grads, OptimizerState& opt) {
  if (params.size() != grads.size() || params.size() != opt.m.size() || params.size() != opt.v.size()) {
    throw ShapeError("adam_step: parameter, gradient and moment counts differ");
  }
  for (std::size_t a = 0; a < params.size(); ++a) {
    if (!params[a]->same_shape(*grads[a]) || !params[a]->same_shape(opt.m[a]) || !params[a]->same_shape(opt.v[a])) {
      throw ShapeError("adam_step: shape mismatch at array " + std::to_string(a));
    }
  }
  ++opt.step;
  const double c1 = 1.0 - std::pow(opt.beta1, static_cast<double>(opt.step));
  const double c2 = 1.0 - std::pow(opt.beta2, static_cast<double>(opt.step));
  for (std::size_t a = 0; a < params.size(); ++a) {
    auto& theta = params[a]->data();
    const auto& g = grads[a]->data();
    auto& m = opt.m[a].data();
    auto& v = opt.v[a].data();
    for (std::size_t i = 0; i < theta.size(); ++i) {
      m[i] = opt.beta1 * m[i] + (1.0 - opt.beta1) * g[i];
      v[i] = opt.beta2 * v[i] + (1.0 - opt.beta2) * g[i] * g[i];
      const double mhat = m[i] / c1;
      const double vhat = v[i] / c2;
      theta[i] -= opt.lr * mhat / (std::sqrt(vhat) + opt.eps);
    }
  }
}

inline void adam_step(ad::NamedArrays& params, const ad::NamedArrays& grads, OptimizerState& opt) {
  std::vector<Matrix*> p;
  std::vector<const Matrix*> g;
  for (auto& [name, m] : params) p.push_back(&m);
  for (const auto& [name, m] : grads) g.push_back(&m);
  adam_update(p, g, opt);
}

}  // namespace cmod
