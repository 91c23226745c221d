#pragma once

// Reverse-mode differentiation over dense matrices.
//
// A Tape records every operation in creation order, which is already a
// topological order, so backward() walks the node list in reverse. Each tape
// supports exactly one backward pass; build a new tape per training step.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <limits>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "cmod/error.hpp"
#include "cmod/matrix.hpp"

namespace cmod::ad {

class Tape;

/// Handle to a value recorded on a Tape.
struct Var {
  Tape* tape = nullptr;
  std::size_t id = 0;

  const Matrix& value() const;
  const Matrix& grad() const;
  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }
};

class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, const Matrix& out_grad)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Matrix value) { return push("constant", std::move(value), false, nullptr); }
  Var variable(Matrix value) { return push("variable", std::move(value), true, nullptr); }

  /// Registers an op result. The closure receives d(loss)/d(output) and must
  /// accumulate into its parents through accumulate().
  Var record(const char* op, Matrix value, std::initializer_list<Var> parents, BackwardFn fn) {
    bool needs = false;
    for (const auto& p : parents) {
      check_owner(p);
      needs = needs || nodes_[p.id].requires_grad;
    }
    if (!value.all_finite()) throw NonFiniteValue(std::string("forward value of '") + op + "' is not finite");
    return push(op, std::move(value), needs, needs ? std::move(fn) : nullptr);
  }

  Var record(const char* op, Matrix value, const std::vector<Var>& parents, BackwardFn fn) {
    bool needs = false;
    for (const auto& p : parents) {
      check_owner(p);
      needs = needs || nodes_[p.id].requires_grad;
    }
    if (!value.all_finite()) throw NonFiniteValue(std::string("forward value of '") + op + "' is not finite");
    return push(op, std::move(value), needs, needs ? std::move(fn) : nullptr);
  }

  const Matrix& value(Var v) const { return nodes_.at(v.id).value; }

  /// Gradient of the last backward() loss with respect to v; zero when v does
  /// not influence the loss.
  const Matrix& grad(Var v) const {
    const auto& n = nodes_.at(v.id);
    if (n.grad.size() != n.value.size()) {
      zero_cache_ = Matrix(n.value.rows(), n.value.cols());
      return zero_cache_;
    }
    return n.grad;
  }

  bool requires_grad(Var v) const { return nodes_.at(v.id).requires_grad; }

  void accumulate(Var target, const Matrix& g) {
    auto& n = nodes_[target.id];
    if (!n.requires_grad) return;
    if (!g.same_shape(n.value)) {
      throw ShapeError(std::string("gradient ") + g.shape_string() + " for value " + n.value.shape_string());
    }
    auto& dst = n.grad.data();
    const auto& src = g.data();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
  }

  // Direct access for closures that scatter into a parent without building a
  // temporary matrix.
  Matrix* grad_buffer(Var target) {
    auto& n = nodes_[target.id];
    return n.requires_grad ? &n.grad : nullptr;
  }

  void backward(Var loss) {
    check_owner(loss);
    if (backward_done_) throw TapeReused("backward() already ran on this tape");
    const auto& lv = nodes_[loss.id].value;
    if (lv.rows() != 1 || lv.cols() != 1) throw NotScalar("loss has shape " + lv.shape_string());
    backward_done_ = true;
    for (auto& n : nodes_) {
      if (n.requires_grad) n.grad = Matrix(n.value.rows(), n.value.cols());
    }
    if (!nodes_[loss.id].requires_grad) return;
    nodes_[loss.id].grad(0, 0) = 1.0;
    for (std::size_t i = loss.id + 1; i-- > 0;) {
      auto& n = nodes_[i];
      if (!n.backward) continue;
      // nodes_ is never resized during backward, so the reference stays valid.
      n.backward(*this, n.grad);
    }
    for (const auto& n : nodes_) {
      if (n.requires_grad && !n.grad.all_finite()) {
        throw NonFiniteValue(std::string("gradient at '") + n.op + "' is not finite");
      }
    }
  }

  std::size_t size() const noexcept { return nodes_.size(); }

 private:
  struct Node {
    const char* op;
    Matrix value;
    Matrix grad;
    bool requires_grad;
    BackwardFn backward;
  };

  Var push(const char* op, Matrix value, bool requires_grad, BackwardFn fn) {
    if (backward_done_) throw TapeReused("cannot record after backward()");
    nodes_.push_back(Node{op, std::move(value), Matrix(), requires_grad, std::move(fn)});
    return Var{this, nodes_.size() - 1};
  }

  void check_owner(Var v) const {
    if (v.tape != this || v.id >= nodes_.size()) throw ShapeError("variable belongs to another tape");
  }

  std::vector<Node> nodes_;
  bool backward_done_ = false;
  mutable Matrix zero_cache_;
};

inline const Matrix& Var::value() const { return tape->value(*this); }
inline const Matrix& Var::grad() const { return tape->grad(*this); }

// ---------------------------------------------------------------------------
// Operations

inline Var matmul(Var a, Var b) {
  const Matrix& av = a.value();
  const Matrix& bv = b.value();
  Matrix out = matmul_values(av, bv);
  return a.tape->record("matmul", std::move(out), {a, b}, [a, b](Tape& t, const Matrix& g) {
    if (auto* ga = t.grad_buffer(a)) gemm_nt_accumulate(g, b.value(), *ga);
    if (auto* gb = t.grad_buffer(b)) gemm_tn_accumulate(a.value(), g, *gb);
  });
}

/// a · bᵀ without materializing the transpose.
inline Var matmul_nt(Var a, Var b) {
  const Matrix& av = a.value();
  const Matrix& bv = b.value();
  if (av.cols() != bv.cols()) throw ShapeError("matmul_nt " + av.shape_string() + " * (" + bv.shape_string() + ")^T");
  Matrix out(av.rows(), bv.rows());
  gemm_nt_accumulate(av, bv, out);
  return a.tape->record("matmul_nt", std::move(out), {a, b}, [a, b](Tape& t, const Matrix& g) {
    if (auto* ga = t.grad_buffer(a)) gemm_accumulate(g, b.value(), *ga);
    if (auto* gb = t.grad_buffer(b)) gemm_tn_accumulate(g, a.value(), *gb);
  });
}

inline Var transpose(Var a) {
  return a.tape->record("transpose", transposed(a.value()), {a},
                        [a](Tape& t, const Matrix& g) { t.accumulate(a, transposed(g)); });
}

namespace detail {

inline void check_same_shape(const char* op, Var a, Var b) {
  if (!a.value().same_shape(b.value())) {
    throw ShapeError(std::string(op) + ": " + a.value().shape_string() + " vs " + b.value().shape_string());
  }
}

template <typename F>
Matrix map_values(const Matrix& a, F f) {
  Matrix out(a.rows(), a.cols());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = f(a[i]);
  return out;
}

}  // namespace detail

inline Var add(Var a, Var b) {
  detail::check_same_shape("add", a, b);
  Matrix out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b.value()[i];
  return a.tape->record("add", std::move(out), {a, b}, [a, b](Tape& t, const Matrix& g) {
    t.accumulate(a, g);
    t.accumulate(b, g);
  });
}

inline Var sub(Var a, Var b) {
  detail::check_same_shape("sub", a, b);
  Matrix out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b.value()[i];
  return a.tape->record("sub", std::move(out), {a, b}, [a, b](Tape& t, const Matrix& g) {
    t.accumulate(a, g);
    if (auto* gb = t.grad_buffer(b))
      for (std::size_t i = 0; i < g.size(); ++i) (*gb)[i] -= g[i];
  });
}

/// Elementwise product.
inline Var mul(Var a, Var b) {
  detail::check_same_shape("mul", a, b);
  Matrix out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b.value()[i];
  return a.tape->record("mul", std::move(out), {a, b}, [a, b](Tape& t, const Matrix& g) {
    if (auto* ga = t.grad_buffer(a))
      for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i] * b.value()[i];
    if (auto* gb = t.grad_buffer(b))
      for (std::size_t i = 0; i < g.size(); ++i) (*gb)[i] += g[i] * a.value()[i];
  });
}

inline Var scale(Var a, double s) {
  return a.tape->record("scale", detail::map_values(a.value(), [s](double x) { return s * x; }), {a},
                        [a, s](Tape& t, const Matrix& g) {
                          if (auto* ga = t.grad_buffer(a))
                            for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += s * g[i];
                        });
}

inline Var exp(Var a) {
  Matrix out = detail::map_values(a.value(), [](double x) { return std::exp(x); });
  return a.tape->record("exp", std::move(out), {a}, [a](Tape& t, const Matrix& g) {
    if (auto* ga = t.grad_buffer(a))
      for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i] * std::exp(a.value()[i]);
  });
}

/// max(x, 0); derivative at exactly 0 is 0.
inline Var relu(Var a) {
  return a.tape->record("relu", detail::map_values(a.value(), [](double x) { return x > 0.0 ? x : 0.0; }), {a},
                        [a](Tape& t, const Matrix& g) {
                          if (auto* ga = t.grad_buffer(a))
                            for (std::size_t i = 0; i < g.size(); ++i)
                              if (a.value()[i] > 0.0) (*ga)[i] += g[i];
                        });
}

inline Var square(Var a) {
  return a.tape->record("square", detail::map_values(a.value(), [](double x) { return x * x; }), {a},
                        [a](Tape& t, const Matrix& g) {
                          if (auto* ga = t.grad_buffer(a))
                            for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += 2.0 * a.value()[i] * g[i];
                        });
}

enum class Axis { rows = 0, cols = 1 };

namespace detail {

// Softmax along `axis`: Axis::rows normalizes each column over its rows,
// Axis::cols normalizes each row over its columns.
inline Matrix softmax_values(const Matrix& a, Axis axis) {
  Matrix out(a.rows(), a.cols());
  const bool over_rows = axis == Axis::rows;
  const std::size_t lines = over_rows ? a.cols() : a.rows();
  const std::size_t len = over_rows ? a.rows() : a.cols();
  auto at = [&](const Matrix& m, std::size_t line, std::size_t k) -> double {
    return over_rows ? m(k, line) : m(line, k);
  };
  for (std::size_t l = 0; l < lines; ++l) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t k = 0; k < len; ++k) mx = std::max(mx, at(a, l, k));
    double z = 0.0;
    for (std::size_t k = 0; k < len; ++k) {
      const double e = std::exp(at(a, l, k) - mx);
      (over_rows ? out(k, l) : out(l, k)) = e;
      z += e;
    }
    for (std::size_t k = 0; k < len; ++k) (over_rows ? out(k, l) : out(l, k)) /= z;
  }
  return out;
}

}  // namespace detail

inline Var softmax(Var a, Axis axis) {
  Matrix out = detail::softmax_values(a.value(), axis);
  Matrix y = out;
  return a.tape->record("softmax", std::move(out), {a}, [a, axis, y = std::move(y)](Tape& t, const Matrix& g) {
    auto* ga = t.grad_buffer(a);
    if (!ga) return;
    const bool over_rows = axis == Axis::rows;
    const std::size_t lines = over_rows ? y.cols() : y.rows();
    const std::size_t len = over_rows ? y.rows() : y.cols();
    for (std::size_t l = 0; l < lines; ++l) {
      double dot = 0.0;
      for (std::size_t k = 0; k < len; ++k) {
        dot += over_rows ? g(k, l) * y(k, l) : g(l, k) * y(l, k);
      }
      for (std::size_t k = 0; k < len; ++k) {
        if (over_rows) {
          (*ga)(k, l) += y(k, l) * (g(k, l) - dot);
        } else {
          (*ga)(l, k) += y(l, k) * (g(l, k) - dot);
        }
      }
    }
  });
}

/// Axis::rows collapses rows (result 1×cols); Axis::cols collapses columns (rows×1).
inline Var sum(Var a, Axis axis) {
  const Matrix& av = a.value();
  Matrix out = axis == Axis::rows ? Matrix(1, av.cols()) : Matrix(av.rows(), 1);
  for (std::size_t i = 0; i < av.rows(); ++i)
    for (std::size_t j = 0; j < av.cols(); ++j) (axis == Axis::rows ? out(0, j) : out(i, 0)) += av(i, j);
  return a.tape->record("sum", std::move(out), {a}, [a, axis](Tape& t, const Matrix& g) {
    auto* ga = t.grad_buffer(a);
    if (!ga) return;
    for (std::size_t i = 0; i < ga->rows(); ++i)
      for (std::size_t j = 0; j < ga->cols(); ++j) (*ga)(i, j) += axis == Axis::rows ? g(0, j) : g(i, 0);
  });
}

inline Var sum_all(Var a) {
  double s = 0.0;
  for (double x : a.value().data()) s += x;
  return a.tape->record("sum_all", Matrix(1, 1, s), {a}, [a](Tape& t, const Matrix& g) {
    if (auto* ga = t.grad_buffer(a))
      for (auto& x : ga->data()) x += g(0, 0);
  });
}

/// Mean of all entries, as a 1×1 value.
inline Var mean(Var a) {
  const std::size_t n = a.value().size();
  if (n == 0) throw ShapeError("mean of empty matrix");
  double s = 0.0;
  for (double x : a.value().data()) s += x;
  return a.tape->record("mean", Matrix(1, 1, s / static_cast<double>(n)), {a}, [a, n](Tape& t, const Matrix& g) {
    if (auto* ga = t.grad_buffer(a)) {
      const double w = g(0, 0) / static_cast<double>(n);
      for (auto& x : ga->data()) x += w;
    }
  });
}

inline Var concat_cols(const std::vector<Var>& parts) {
  if (parts.empty()) throw ShapeError("concat of nothing");
  const std::size_t rows = parts.front().rows();
  std::size_t cols = 0;
  for (const auto& p : parts) {
    if (p.rows() != rows) throw ShapeError("concat_cols: row counts differ");
    cols += p.cols();
  }
  Matrix out(rows, cols);
  std::size_t off = 0;
  for (const auto& p : parts) {
    const Matrix& pv = p.value();
    for (std::size_t i = 0; i < rows; ++i) std::copy(pv.row(i).begin(), pv.row(i).end(), out.row(i).begin() + off);
    off += pv.cols();
  }
  return parts.front().tape->record("concat_cols", std::move(out), parts, [parts](Tape& t, const Matrix& g) {
    std::size_t off = 0;
    for (const auto& p : parts) {
      const std::size_t c = p.cols();
      if (auto* gp = t.grad_buffer(p)) {
        for (std::size_t i = 0; i < g.rows(); ++i)
          for (std::size_t j = 0; j < c; ++j) (*gp)(i, j) += g(i, off + j);
      }
      off += c;
    }
  });
}

inline Var concat_rows(const std::vector<Var>& parts) {
  if (parts.empty()) throw ShapeError("concat of nothing");
  const std::size_t cols = parts.front().cols();
  std::size_t rows = 0;
  for (const auto& p : parts) {
    if (p.cols() != cols) throw ShapeError("concat_rows: column counts differ");
    rows += p.rows();
  }
  Matrix out(rows, cols);
  std::size_t off = 0;
  for (const auto& p : parts) {
    std::copy(p.value().data().begin(), p.value().data().end(), out.data().begin() + static_cast<std::ptrdiff_t>(off * cols));
    off += p.rows();
  }
  return parts.front().tape->record("concat_rows", std::move(out), parts, [parts, cols](Tape& t, const Matrix& g) {
    std::size_t off = 0;
    for (const auto& p : parts) {
      if (auto* gp = t.grad_buffer(p)) {
        for (std::size_t k = 0; k < gp->size(); ++k) (*gp)[k] += g[off * cols + k];
      }
      off += p.rows();
    }
  });
}

inline Var slice_cols(Var a, std::size_t begin, std::size_t count) {
  const Matrix& av = a.value();
  if (begin + count > av.cols()) throw ShapeError("slice_cols out of range");
  Matrix out(av.rows(), count);
  for (std::size_t i = 0; i < av.rows(); ++i)
    for (std::size_t j = 0; j < count; ++j) out(i, j) = av(i, begin + j);
  return a.tape->record("slice_cols", std::move(out), {a}, [a, begin, count](Tape& t, const Matrix& g) {
    if (auto* ga = t.grad_buffer(a))
      for (std::size_t i = 0; i < g.rows(); ++i)
        for (std::size_t j = 0; j < count; ++j) (*ga)(i, begin + j) += g(i, j);
  });
}

inline Var slice_rows(Var a, std::size_t begin, std::size_t count) {
  const Matrix& av = a.value();
  if (begin + count > av.rows()) throw ShapeError("slice_rows out of range");
  Matrix out(count, av.cols());
  std::copy_n(av.data().begin() + static_cast<std::ptrdiff_t>(begin * av.cols()), count * av.cols(), out.data().begin());
  return a.tape->record("slice_rows", std::move(out), {a}, [a, begin](Tape& t, const Matrix& g) {
    if (auto* ga = t.grad_buffer(a))
      for (std::size_t k = 0; k < g.size(); ++k) (*ga)[begin * g.cols() + k] += g[k];
  });
}

/// out.row(k) = a.row(index[k]); the backward pass scatter-adds.
inline Var gather_rows(Var a, std::vector<std::size_t> index) {
  const Matrix& av = a.value();
  Matrix out(index.size(), av.cols());
  for (std::size_t k = 0; k < index.size(); ++k) {
    if (index[k] >= av.rows()) throw ShapeError("gather_rows index out of range");
    std::copy(av.row(index[k]).begin(), av.row(index[k]).end(), out.row(k).begin());
  }
  return a.tape->record("gather_rows", std::move(out), {a}, [a, index = std::move(index)](Tape& t, const Matrix& g) {
    if (auto* ga = t.grad_buffer(a)) {
      for (std::size_t k = 0; k < index.size(); ++k) {
        auto dst = ga->row(index[k]);
        auto src = g.row(k);
        for (std::size_t j = 0; j < dst.size(); ++j) dst[j] += src[j];
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Finite-difference verification

using NamedArrays = std::vector<std::pair<std::string, Matrix>>;

struct FdOptions {
  double h_rel = 1e-5;        // step h = h_rel * max(1, |theta|)
  double tolerance = 1e-4;    // max relative error per array
  double abs_floor = 1e-6;    // denominator floor for relative error
  std::size_t max_coords = 64;  // coordinates probed per array when it is larger
  std::uint64_t seed = 0;
};

struct FdEntry {
  std::string array;
  std::size_t coordinate = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  double rel_error = 0.0;
};

struct FdArrayReport {
  std::string array;
  std::size_t probed = 0;
  double max_rel_error = 0.0;
  bool pass = true;
};

struct FdReport {
  std::vector<FdEntry> entries;
  std::vector<FdArrayReport> arrays;
  double max_rel_error = 0.0;
  bool pass = true;
};

inline double relative_error(double analytic, double numeric, double floor) {
  const double diff = std::abs(analytic - numeric);
  if (diff == 0.0) return 0.0;
  return diff / std::max({std::abs(analytic), std::abs(numeric), floor});
}

/// Compares `analytic` gradients against central differences of `f` at
/// `params`. Arrays larger than max_coords are probed at a seeded random
/// subset of coordinates.
inline FdReport fd_check(const std::function<double(const NamedArrays&)>& f, const NamedArrays& params,
                         const NamedArrays& analytic, const FdOptions& opt = {}) {
  if (params.size() != analytic.size()) throw ShapeError("fd_check: gradient list does not match parameters");
  FdReport report;
  std::mt19937_64 rng(opt.seed);
  NamedArrays probe = params;
  for (std::size_t a = 0; a < params.size(); ++a) {
    const auto& [name, value] = params[a];
    if (!analytic[a].second.same_shape(value)) throw ShapeError("fd_check: gradient shape mismatch for " + name);
    std::vector<std::size_t> coords(value.size());
    for (std::size_t i = 0; i < coords.size(); ++i) coords[i] = i;
    if (coords.size() > opt.max_coords) {
      std::shuffle(coords.begin(), coords.end(), rng);
      coords.resize(opt.max_coords);
      std::sort(coords.begin(), coords.end());
    }
    FdArrayReport ar{name, coords.size(), 0.0, true};
    for (std::size_t c : coords) {
      const double theta = value[c];
      const double h = opt.h_rel * std::max(1.0, std::abs(theta));
      probe[a].second[c] = theta + h;
      const double fp = f(probe);
      probe[a].second[c] = theta - h;
      const double fm = f(probe);
      probe[a].second[c] = theta;
      const double numeric = (fp - fm) / (2.0 * h);
      const double an = analytic[a].second[c];
      const double rel = relative_error(an, numeric, opt.abs_floor);
      report.entries.push_back({name, c, an, numeric, rel});
      ar.max_rel_error = std::max(ar.max_rel_error, rel);
    }
    ar.pass = ar.max_rel_error < opt.tolerance;
    report.max_rel_error = std::max(report.max_rel_error, ar.max_rel_error);
    report.pass = report.pass && ar.pass;
    report.arrays.push_back(std::move(ar));
  }
  return report;
}

}  // namespace cmod::ad
