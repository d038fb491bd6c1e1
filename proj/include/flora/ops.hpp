#pragma once

// Differentiable primitives on 2-D row-major tensors.
//
// Each op computes its value eagerly, then records a closure that maps the
// output gradient onto its inputs. Closures capture ids, never references to
// node storage (the node vector may reallocate while recording).

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "flora/error.hpp"
#include "flora/tape.hpp"
#include "flora/tensor.hpp"

namespace flora::ops {

namespace detail {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using Map = Eigen::Map<RowMat>;

inline ConstMap view(const Tensor& t) { return ConstMap(t.data().data(), t.rows(), t.cols()); }
inline ConstMap view(const std::vector<double>& v, std::size_t r, std::size_t c) { return ConstMap(v.data(), r, c); }
inline Map view_mut(std::vector<double>& v, std::size_t r, std::size_t c) { return Map(v.data(), r, c); }

inline void require_2d(const Tensor& t, const char* op) {
  if (t.rank() != 2) throw ShapeError(std::string(op) + ": expected a 2-D tensor, got " + shape_str(t.shape()));
}

template <typename F>
Var unary(Var x, F&& fwd, Tape::BackwardFn bwd) {
  const Tensor& xv = x.value();
  std::vector<double> out(xv.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(xv[i]);
  Tensor value(xv.shape(), std::move(out));
  return x.tape->push(std::move(value), {x}, std::move(bwd));
}

}  // namespace detail

/// x[n x k] * w[k x m]
inline Var matmul(Var a, Var b) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  detail::require_2d(av, "matmul");
  detail::require_2d(bv, "matmul");
  if (av.cols() != bv.rows()) {
    throw ShapeError("matmul: inner extents differ " + shape_str(av.shape()) + " x " + shape_str(bv.shape()));
  }
  const std::size_t n = av.rows(), k = av.cols(), m = bv.cols();
  std::vector<double> out(n * m);
  detail::view_mut(out, n, m).noalias() = detail::view(av) * detail::view(bv);
  Tape* tape = a.tape;
  const std::size_t ia = a.id, ib = b.id;
  return tape->push(Tensor(Shape{n, m}, std::move(out)), {a, b}, [ia, ib, n, k, m](Tape& t, std::size_t self) {
    const auto g = detail::view(t.grad(self), n, m);
    if (t.needs_grad(ia)) {
      detail::view_mut(t.grad_acc(ia), n, k).noalias() += g * detail::view(t.value(ib)).transpose();
    }
    if (t.needs_grad(ib)) {
      detail::view_mut(t.grad_acc(ib), k, m).noalias() += detail::view(t.value(ia)).transpose() * g;
    }
  });
}

/// Adds a row vector (shape [m] or [1, m]) to every row of x[n x m].
inline Var add_bias(Var x, Var b) {
  const Tensor& xv = x.value();
  const Tensor& bv = b.value();
  detail::require_2d(xv, "add_bias");
  const std::size_t n = xv.rows(), m = xv.cols();
  if (bv.size() != m) throw ShapeError("add_bias: bias length does not match columns");
  std::vector<double> out(xv.data().begin(), xv.data().end());
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t c = 0; c < m; ++c) out[r * m + c] += bv[c];
  const std::size_t ix = x.id, ib = b.id;
  return x.tape->push(Tensor(xv.shape(), std::move(out)), {x, b}, [ix, ib, n, m](Tape& t, std::size_t self) {
    const auto& g = t.grad(self);
    if (t.needs_grad(ix)) {
      auto& gx = t.grad_acc(ix);
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
    }
    if (t.needs_grad(ib)) {
      auto& gb = t.grad_acc(ib);
      for (std::size_t r = 0; r < n; ++r)
        for (std::size_t c = 0; c < m; ++c) gb[c] += g[r * m + c];
    }
  });
}

inline Var add(Var a, Var b) {
  check_same_shape(a.value(), b.value(), "add");
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
  const std::size_t ia = a.id, ib = b.id;
  return a.tape->push(Tensor(av.shape(), std::move(out)), {a, b}, [ia, ib](Tape& t, std::size_t self) {
    const auto& g = t.grad(self);
    for (std::size_t id : {ia, ib}) {
      if (!t.needs_grad(id)) continue;
      auto& gi = t.grad_acc(id);
      for (std::size_t i = 0; i < g.size(); ++i) gi[i] += g[i];
    }
  });
}

inline Var sub(Var a, Var b) {
  check_same_shape(a.value(), b.value(), "sub");
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] - bv[i];
  const std::size_t ia = a.id, ib = b.id;
  return a.tape->push(Tensor(av.shape(), std::move(out)), {a, b}, [ia, ib](Tape& t, std::size_t self) {
    const auto& g = t.grad(self);
    if (t.needs_grad(ia)) {
      auto& ga = t.grad_acc(ia);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    }
    if (t.needs_grad(ib)) {
      auto& gb = t.grad_acc(ib);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
    }
  });
}

/// Elementwise product.
inline Var mul(Var a, Var b) {
  check_same_shape(a.value(), b.value(), "mul");
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
  const std::size_t ia = a.id, ib = b.id;
  return a.tape->push(Tensor(av.shape(), std::move(out)), {a, b}, [ia, ib](Tape& t, std::size_t self) {
    const auto& g = t.grad(self);
    if (t.needs_grad(ia)) {
      auto& ga = t.grad_acc(ia);
      const Tensor& bv = t.value(ib);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv[i];
    }
    if (t.needs_grad(ib)) {
      auto& gb = t.grad_acc(ib);
      const Tensor& av = t.value(ia);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * av[i];
    }
  });
}

inline Var scale(Var x, double c) {
  const std::size_t ix = x.id;
  return detail::unary(x, [c](double v) { return c * v; }, [ix, c](Tape& t, std::size_t self) {
    const auto& g = t.grad(self);
    auto& gx = t.grad_acc(ix);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += c * g[i];
  });
}

inline Var add_scalar(Var x, double c) {
  const std::size_t ix = x.id;
  return detail::unary(x, [c](double v) { return v + c; }, [ix](Tape& t, std::size_t self) {
    const auto& g = t.grad(self);
    auto& gx = t.grad_acc(ix);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
  });
}

inline Var relu(Var x) {
  if (x.tape->recording()) {
    double m = std::numeric_limits<double>::infinity();
    for (double v : x.value().data()) m = std::min(m, std::abs(v));
    x.tape->note_kink(m);
  }
  const std::size_t ix = x.id;
  return detail::unary(x, [](double v) { return v > 0.0 ? v : 0.0; }, [ix](Tape& t, std::size_t self) {
    const auto& g = t.grad(self);
    const Tensor& xv = t.value(ix);
    auto& gx = t.grad_acc(ix);
    for (std::size_t i = 0; i < g.size(); ++i)
      if (xv[i] > 0.0) gx[i] += g[i];
  });
}

/// x * sigmoid(x)
inline Var silu(Var x) {
  const std::size_t ix = x.id;
  return detail::unary(x, [](double v) { return v / (1.0 + std::exp(-v)); }, [ix](Tape& t, std::size_t self) {
    const auto& g = t.grad(self);
    const Tensor& xv = t.value(ix);
    auto& gx = t.grad_acc(ix);
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double s = 1.0 / (1.0 + std::exp(-xv[i]));
      gx[i] += g[i] * s * (1.0 + xv[i] * (1.0 - s));
    }
  });
}

/// log(1 + exp(x)), evaluated without overflow.
inline Var softplus(Var x) {
  const std::size_t ix = x.id;
  return detail::unary(
      x, [](double v) { return std::max(v, 0.0) + std::log1p(std::exp(-std::abs(v))); },
      [ix](Tape& t, std::size_t self) {
        const auto& g = t.grad(self);
        const Tensor& xv = t.value(ix);
        auto& gx = t.grad_acc(ix);
        for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] / (1.0 + std::exp(-xv[i]));
      });
}

inline Var exp(Var x) {
  const std::size_t ix = x.id;
  return detail::unary(x, [](double v) { return std::exp(v); }, [ix](Tape& t, std::size_t self) {
    const auto& g = t.grad(self);
    const auto& y = t.value(self);
    auto& gx = t.grad_acc(ix);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * y[i];
  });
}

inline Var clamp(Var x, double lo, double hi) {
  if (x.tape->recording()) {
    double m = std::numeric_limits<double>::infinity();
    for (double v : x.value().data()) m = std::min({m, std::abs(v - lo), std::abs(v - hi)});
    x.tape->note_kink(m);
  }
  const std::size_t ix = x.id;
  return detail::unary(x, [lo, hi](double v) { return std::clamp(v, lo, hi); }, [ix, lo, hi](Tape& t, std::size_t self) {
    const auto& g = t.grad(self);
    const Tensor& xv = t.value(ix);
    auto& gx = t.grad_acc(ix);
    for (std::size_t i = 0; i < g.size(); ++i)
      if (xv[i] > lo && xv[i] < hi) gx[i] += g[i];
  });
}

/// Per-row normalization to zero mean and unit variance, no affine part.
inline Var layer_norm(Var x, double eps = 1e-6) {
  const Tensor& xv = x.value();
  detail::require_2d(xv, "layer_norm");
  const std::size_t n = xv.rows(), m = xv.cols();
  std::vector<double> out(xv.size());
  std::vector<double> inv_std(n);
  for (std::size_t r = 0; r < n; ++r) {
    const double* row = xv.data().data() + r * m;
    double mean = 0.0;
    for (std::size_t c = 0; c < m; ++c) mean += row[c];
    mean /= static_cast<double>(m);
    double var = 0.0;
    for (std::size_t c = 0; c < m; ++c) var += (row[c] - mean) * (row[c] - mean);
    var /= static_cast<double>(m);
    inv_std[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t c = 0; c < m; ++c) out[r * m + c] = (row[c] - mean) * inv_std[r];
  }
  const std::size_t ix = x.id;
  return x.tape->push(Tensor(xv.shape(), std::move(out)), {x},
                      [ix, n, m, inv_std = std::move(inv_std)](Tape& t, std::size_t self) {
                        const auto& g = t.grad(self);
                        const auto& y = t.value(self);
                        auto& gx = t.grad_acc(ix);
                        const double inv_m = 1.0 / static_cast<double>(m);
                        for (std::size_t r = 0; r < n; ++r) {
                          double gsum = 0.0, gysum = 0.0;
                          for (std::size_t c = 0; c < m; ++c) {
                            gsum += g[r * m + c];
                            gysum += g[r * m + c] * y[r * m + c];
                          }
                          for (std::size_t c = 0; c < m; ++c) {
                            const std::size_t i = r * m + c;
                            gx[i] += inv_std[r] * (g[i] - inv_m * gsum - y[i] * inv_m * gysum);
                          }
                        }
                      });
}

/// Columns [begin, end) of x.
inline Var slice_cols(Var x, std::size_t begin, std::size_t end) {
  const Tensor& xv = x.value();
  detail::require_2d(xv, "slice_cols");
  const std::size_t n = xv.rows(), m = xv.cols();
  if (begin > end || end > m) throw ShapeError("slice_cols: range out of bounds");
  const std::size_t w = end - begin;
  std::vector<double> out(n * w);
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t c = 0; c < w; ++c) out[r * w + c] = xv[r * m + begin + c];
  const std::size_t ix = x.id;
  return x.tape->push(Tensor(Shape{n, w}, std::move(out)), {x}, [ix, n, m, w, begin](Tape& t, std::size_t self) {
    const auto& g = t.grad(self);
    auto& gx = t.grad_acc(ix);
    for (std::size_t r = 0; r < n; ++r)
      for (std::size_t c = 0; c < w; ++c) gx[r * m + begin + c] += g[r * w + c];
  });
}

inline Var concat_cols(Var a, Var b) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  detail::require_2d(av, "concat_cols");
  detail::require_2d(bv, "concat_cols");
  if (av.rows() != bv.rows()) throw ShapeError("concat_cols: row count mismatch");
  const std::size_t n = av.rows(), ma = av.cols(), mb = bv.cols(), m = ma + mb;
  std::vector<double> out(n * m);
  for (std::size_t r = 0; r < n; ++r) {
    std::copy_n(av.data().data() + r * ma, ma, out.data() + r * m);
    std::copy_n(bv.data().data() + r * mb, mb, out.data() + r * m + ma);
  }
  const std::size_t ia = a.id, ib = b.id;
  return a.tape->push(Tensor(Shape{n, m}, std::move(out)), {a, b}, [ia, ib, n, ma, mb, m](Tape& t, std::size_t self) {
    const auto& g = t.grad(self);
    if (t.needs_grad(ia)) {
      auto& ga = t.grad_acc(ia);
      for (std::size_t r = 0; r < n; ++r)
        for (std::size_t c = 0; c < ma; ++c) ga[r * ma + c] += g[r * m + c];
    }
    if (t.needs_grad(ib)) {
      auto& gb = t.grad_acc(ib);
      for (std::size_t r = 0; r < n; ++r)
        for (std::size_t c = 0; c < mb; ++c) gb[r * mb + c] += g[r * m + ma + c];
    }
  });
}

/// Repeats each row `times` times consecutively: [n x m] -> [n*times x m].
inline Var repeat_rows(Var x, std::size_t times) {
  const Tensor& xv = x.value();
  detail::require_2d(xv, "repeat_rows");
  const std::size_t n = xv.rows(), m = xv.cols();
  std::vector<double> out(n * times * m);
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t k = 0; k < times; ++k) std::copy_n(xv.data().data() + r * m, m, out.data() + (r * times + k) * m);
  const std::size_t ix = x.id;
  return x.tape->push(Tensor(Shape{n * times, m}, std::move(out)), {x}, [ix, n, m, times](Tape& t, std::size_t self) {
    const auto& g = t.grad(self);
    auto& gx = t.grad_acc(ix);
    for (std::size_t r = 0; r < n; ++r)
      for (std::size_t k = 0; k < times; ++k)
        for (std::size_t c = 0; c < m; ++c) gx[r * m + c] += g[(r * times + k) * m + c];
  });
}

/// Averages consecutive groups of `group` rows: [n*group x m] -> [n x m].
inline Var mean_row_groups(Var x, std::size_t group) {
  const Tensor& xv = x.value();
  detail::require_2d(xv, "mean_row_groups");
  if (group == 0 || xv.rows() % group != 0) throw ShapeError("mean_row_groups: rows not divisible by group");
  const std::size_t n = xv.rows() / group, m = xv.cols();
  const double inv = 1.0 / static_cast<double>(group);
  std::vector<double> out(n * m, 0.0);
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t k = 0; k < group; ++k)
      for (std::size_t c = 0; c < m; ++c) out[r * m + c] += inv * xv[(r * group + k) * m + c];
  const std::size_t ix = x.id;
  return x.tape->push(Tensor(Shape{n, m}, std::move(out)), {x}, [ix, n, m, group, inv](Tape& t, std::size_t self) {
    const auto& g = t.grad(self);
    auto& gx = t.grad_acc(ix);
    for (std::size_t r = 0; r < n; ++r)
      for (std::size_t k = 0; k < group; ++k)
        for (std::size_t c = 0; c < m; ++c) gx[(r * group + k) * m + c] += inv * g[r * m + c];
  });
}

inline Var sum(Var x) {
  double s = 0.0;
  for (double v : x.value().data()) s += v;
  const std::size_t ix = x.id;
  return x.tape->push(Tensor::scalar(s), {x}, [ix](Tape& t, std::size_t self) {
    const double g = t.grad(self)[0];
    for (double& gi : t.grad_acc(ix)) gi += g;
  });
}

inline Var mean(Var x) {
  const double n = static_cast<double>(x.value().size());
  return scale(sum(x), 1.0 / n);
}

/// Sum of squares scaled by `c`.
inline Var sum_sq(Var x, double c = 1.0) {
  const Tensor& xv = x.value();
  double s = 0.0;
  for (double v : xv.data()) s += v * v;
  const std::size_t ix = x.id;
  return x.tape->push(Tensor::scalar(c * s), {x}, [ix, c](Tape& t, std::size_t self) {
    const double g = t.grad(self)[0];
    const Tensor& xv = t.value(ix);
    auto& gx = t.grad_acc(ix);
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += 2.0 * c * g * xv[i];
  });
}

/// Mean squared error over all entries.
inline Var mse(Var a, Var b) {
  Var d = sub(a, b);
  return sum_sq(d, 1.0 / static_cast<double>(d.value().size()));
}

/// sum_r w[r] * sum_c x[r,c]^2 * c
inline Var row_weighted_sum_sq(Var x, std::vector<double> weights, double c = 1.0) {
  const Tensor& xv = x.value();
  detail::require_2d(xv, "row_weighted_sum_sq");
  const std::size_t n = xv.rows(), m = xv.cols();
  if (weights.size() != n) throw ShapeError("row_weighted_sum_sq: weight count does not match rows");
  double s = 0.0;
  for (std::size_t r = 0; r < n; ++r) {
    double rs = 0.0;
    for (std::size_t k = 0; k < m; ++k) rs += xv[r * m + k] * xv[r * m + k];
    s += weights[r] * rs;
  }
  const std::size_t ix = x.id;
  return x.tape->push(Tensor::scalar(c * s), {x}, [ix, n, m, c, w = std::move(weights)](Tape& t, std::size_t self) {
    const double g = t.grad(self)[0];
    const Tensor& xv = t.value(ix);
    auto& gx = t.grad_acc(ix);
    for (std::size_t r = 0; r < n; ++r)
      for (std::size_t k = 0; k < m; ++k) gx[r * m + k] += 2.0 * c * g * w[r] * xv[r * m + k];
  });
}

/// Mean softmax cross-entropy of logits[n x C] against integer labels.
inline Var cross_entropy(Var logits, std::vector<std::size_t> labels) {
  const Tensor& lv = logits.value();
  detail::require_2d(lv, "cross_entropy");
  const std::size_t n = lv.rows(), C = lv.cols();
  if (labels.size() != n) throw ShapeError("cross_entropy: label count does not match rows");
  std::vector<double> prob(n * C);
  double loss = 0.0;
  for (std::size_t r = 0; r < n; ++r) {
    if (labels[r] >= C) throw ShapeError("cross_entropy: label out of range");
    const double* row = lv.data().data() + r * C;
    const double mx = *std::max_element(row, row + C);
    double z = 0.0;
    for (std::size_t c = 0; c < C; ++c) z += std::exp(row[c] - mx);
    for (std::size_t c = 0; c < C; ++c) prob[r * C + c] = std::exp(row[c] - mx) / z;
    loss -= row[labels[r]] - mx - std::log(z);
  }
  loss /= static_cast<double>(n);
  const std::size_t il = logits.id;
  return logits.tape->push(Tensor::scalar(loss), {logits},
                           [il, n, C, prob = std::move(prob), labels = std::move(labels)](Tape& t, std::size_t self) {
                             const double g = t.grad(self)[0] / static_cast<double>(n);
                             auto& gl = t.grad_acc(il);
                             for (std::size_t r = 0; r < n; ++r)
                               for (std::size_t c = 0; c < C; ++c)
                                 gl[r * C + c] += g * (prob[r * C + c] - (c == labels[r] ? 1.0 : 0.0));
                           });
}

/// Scaled dot-product attention applied independently within consecutive
/// groups of `tokens` rows (one group per item).
inline Var token_attention(Var q, Var k, Var v, std::size_t tokens) {
  const Tensor& qv = q.value();
  const Tensor& kv = k.value();
  const Tensor& vv = v.value();
  check_same_shape(qv, kv, "token_attention");
  detail::require_2d(vv, "token_attention");
  if (vv.rows() != qv.rows()) throw ShapeError("token_attention: value rows differ");
  if (tokens == 0 || qv.rows() % tokens != 0) throw ShapeError("token_attention: rows not divisible by tokens");
  const std::size_t items = qv.rows() / tokens, dk = qv.cols(), dv = vv.cols();
  const double s = 1.0 / std::sqrt(static_cast<double>(dk));
  std::vector<double> attn(items * tokens * tokens);
  std::vector<double> out(qv.rows() * dv, 0.0);
  for (std::size_t b = 0; b < items; ++b) {
    const std::size_t r0 = b * tokens;
    const auto Q = detail::view(qv).middleRows(r0, tokens);
    const auto K = detail::view(kv).middleRows(r0, tokens);
    const auto V = detail::view(vv).middleRows(r0, tokens);
    detail::RowMat S = (Q * K.transpose()) * s;
    for (std::size_t i = 0; i < tokens; ++i) {
      const double mx = S.row(i).maxCoeff();
      S.row(i) = (S.row(i).array() - mx).exp().matrix();
      S.row(i) /= S.row(i).sum();
    }
    detail::Map(attn.data() + b * tokens * tokens, tokens, tokens) = S;
    detail::Map(out.data() + r0 * dv, tokens, dv).noalias() = S * V;
  }
  const std::size_t iq = q.id, ik = k.id, iv = v.id;
  return q.tape->push(Tensor(Shape{qv.rows(), dv}, std::move(out)), {q, k, v},
                      [iq, ik, iv, items, tokens, dk, dv, s, attn = std::move(attn)](Tape& t, std::size_t self) {
                        const auto G = detail::view(t.grad(self), items * tokens, dv);
                        const auto Q = detail::view(t.value(iq));
                        const auto K = detail::view(t.value(ik));
                        const auto V = detail::view(t.value(iv));
                        for (std::size_t b = 0; b < items; ++b) {
                          const std::size_t r0 = b * tokens;
                          const detail::ConstMap A(attn.data() + b * tokens * tokens, tokens, tokens);
                          const auto Gb = G.middleRows(r0, tokens);
                          if (t.needs_grad(iv)) {
                            detail::view_mut(t.grad_acc(iv), items * tokens, dv).middleRows(r0, tokens).noalias() +=
                                A.transpose() * Gb;
                          }
                          detail::RowMat dA = Gb * V.middleRows(r0, tokens).transpose();
                          detail::RowMat dS(tokens, tokens);
                          for (std::size_t i = 0; i < tokens; ++i) {
                            const double dot = dA.row(i).dot(A.row(i));
                            dS.row(i) = (A.row(i).array() * (dA.row(i).array() - dot)).matrix() * s;
                          }
                          if (t.needs_grad(iq)) {
                            detail::view_mut(t.grad_acc(iq), items * tokens, dk).middleRows(r0, tokens).noalias() +=
                                dS * K.middleRows(r0, tokens);
                          }
                          if (t.needs_grad(ik)) {
                            detail::view_mut(t.grad_acc(ik), items * tokens, dk).middleRows(r0, tokens).noalias() +=
                                dS.transpose() * Q.middleRows(r0, tokens);
                          }
                        }
                      });
}

}  // namespace flora::ops
