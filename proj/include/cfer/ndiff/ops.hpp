// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "cfer/ndiff/tape.hpp"
#include "cfer/rng.hpp"

namespace cfer::nd {

namespace detail {

inline void require(bool ok, const std::string &what) {
  if (!ok) throw ShapeError(what);
}

/// Gradient sink of a parent, or nullptr when the parent is not trainable.
inline Tensor *sink(Tape &t, Var v) {
  return t.requires_grad(v.id) ? &t.grad(v.id) : nullptr;
}

inline double sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

/// out[m x n] += a[m x k] * b[k x n]
inline void gemm_nn(const double *a, const double *b, double *out, std::size_t m, std::size_t k,
                    std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    double *o = out + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = a[i * k + p];
      if (av == 0.0) continue;
      const double *br = b + p * n;
      for (std::size_t j = 0; j < n; ++j) o[j] += av * br[j];
    }
  }
}

/// out[m x n] += a[m x k] * b[n x k]^T
inline void gemm_nt(const double *a, const double *b, double *out, std::size_t m, std::size_t k,
                    std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double *ar = a + i * k;
    for (std::size_t j = 0; j < n; ++j) {
      const double *br = b + j * k;
      double s = 0.0;
      for (std::size_t p = 0; p < k; ++p) s += ar[p] * br[p];
      out[i * n + j] += s;
    }
  }
}

/// out[k x n] += a[m x k]^T * b[m x n]
inline void gemm_tn(const double *a, const double *b, double *out, std::size_t m, std::size_t k,
                    std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double *br = b + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = a[i * k + p];
      if (av == 0.0) continue;
      double *o = out + p * n;
      for (std::size_t j = 0; j < n; ++j) o[j] += av * br[j];
    }
  }
}

} // namespace detail

// ---------------------------------------------------------------------------
// Linear algebra

/// Standard matrix product of [m x k] and [k x n].
inline Var matmul(Var a, Var b) {
  const Tensor &av = a.value(), &bv = b.value();
  detail::require(av.rank() == 2 && bv.rank() == 2 && av.dim(1) == bv.dim(0),
                  "matmul: cannot multiply " + shape_str(av.shape()) + " by " +
                      shape_str(bv.shape()));
  const std::size_t m = av.dim(0), k = av.dim(1), n = bv.dim(1);
  Tensor out({m, n});
  detail::gemm_nn(av.data(), bv.data(), out.data(), m, k, n);
  return a.tape->push(std::move(out), {a, b}, [a, b, m, k, n](Tape &t, std::size_t self) {
    const Tensor &g = t.grad(self);
    if (Tensor *ga = detail::sink(t, a)) detail::gemm_nt(g.data(), t.value(b).data(), ga->data(), m, n, k);
    if (Tensor *gb = detail::sink(t, b)) detail::gemm_tn(t.value(a).data(), g.data(), gb->data(), m, k, n);
  });
}

/// Affine map y = W x + b applied to a vector [in] or to each row of [T x in].
/// W is [out x in], b is [out].
inline Var linear(Var x, Var w, std::optional<Var> b = std::nullopt) {
  const Tensor &xv = x.value(), &wv = w.value();
  detail::require(wv.rank() == 2, "linear: weight must be a matrix, got " + shape_str(wv.shape()));
  const std::size_t in = wv.dim(1), out_dim = wv.dim(0);
  const bool is_vec = xv.rank() == 1;
  detail::require((is_vec && xv.dim(0) == in) || (xv.rank() == 2 && xv.dim(1) == in),
                  "linear: input " + shape_str(xv.shape()) + " incompatible with weight " +
                      shape_str(wv.shape()));
  if (b) detail::require(b->value().size() == out_dim, "linear: bias size mismatch");
  const std::size_t rows = is_vec ? 1 : xv.dim(0);
  Tensor out(is_vec ? Shape{out_dim} : Shape{rows, out_dim});
  detail::gemm_nt(xv.data(), wv.data(), out.data(), rows, in, out_dim);
  if (b) {
    const double *bv = b->value().data();
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t j = 0; j < out_dim; ++j) out[r * out_dim + j] += bv[j];
  }
  std::vector<Var> parents{x, w};
  if (b) parents.push_back(*b);
  return x.tape->push(std::move(out), parents, [x, w, b, rows, in, out_dim](Tape &t, std::size_t self) {
    const Tensor &g = t.grad(self);
    if (Tensor *gx = detail::sink(t, x)) detail::gemm_nn(g.data(), t.value(w).data(), gx->data(), rows, out_dim, in);
    if (Tensor *gw = detail::sink(t, w)) detail::gemm_tn(g.data(), t.value(x).data(), gw->data(), rows, out_dim, in);
    if (b) {
      if (Tensor *gb = detail::sink(t, *b))
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t j = 0; j < out_dim; ++j) (*gb)[j] += g[r * out_dim + j];
    }
  });
}

/// s_r = sum_ij u_i W[i, r, j] v_j + b_r with W shaped [du x n_r x dv].
inline Var bilinear(Var u, Var w, Var v, Var b) {
  const Tensor &uv = u.value(), &wv = w.value(), &vv = v.value(), &bv = b.value();
  detail::require(wv.rank() == 3, "bilinear: weight must be rank 3, got " + shape_str(wv.shape()));
  const std::size_t du = wv.dim(0), nr = wv.dim(1), dv = wv.dim(2);
  detail::require(uv.size() == du && vv.size() == dv && bv.size() == nr,
                  "bilinear: operand sizes do not match weight " + shape_str(wv.shape()));
  Tensor out({nr});
  std::vector<double> wv_dot(du * nr, 0.0); // W[i, r, :] . v
  for (std::size_t i = 0; i < du; ++i)
    for (std::size_t r = 0; r < nr; ++r) {
      const double *wr = wv.data() + (i * nr + r) * dv;
      double s = 0.0;
      for (std::size_t j = 0; j < dv; ++j) s += wr[j] * vv[j];
      wv_dot[i * nr + r] = s;
    }
  for (std::size_t r = 0; r < nr; ++r) {
    double s = bv[r];
    for (std::size_t i = 0; i < du; ++i) s += uv[i] * wv_dot[i * nr + r];
    out[r] = s;
  }
  return u.tape->push(std::move(out), {u, w, v, b},
                      [u, w, v, b, du, nr, dv, wv_dot = std::move(wv_dot)](Tape &t, std::size_t self) {
    const Tensor &g = t.grad(self);
    const Tensor &uv = t.value(u), &vv = t.value(v), &wv = t.value(w);
    if (Tensor *gu = detail::sink(t, u))
      for (std::size_t i = 0; i < du; ++i)
        for (std::size_t r = 0; r < nr; ++r) (*gu)[i] += g[r] * wv_dot[i * nr + r];
    if (Tensor *gv = detail::sink(t, v))
      for (std::size_t i = 0; i < du; ++i)
        for (std::size_t r = 0; r < nr; ++r) {
          const double c = g[r] * uv[i];
          if (c == 0.0) continue;
          const double *wr = wv.data() + (i * nr + r) * dv;
          for (std::size_t j = 0; j < dv; ++j) (*gv)[j] += c * wr[j];
        }
    if (Tensor *gw = detail::sink(t, w))
      for (std::size_t i = 0; i < du; ++i)
        for (std::size_t r = 0; r < nr; ++r) {
          const double c = g[r] * uv[i];
          if (c == 0.0) continue;
          double *o = gw->data() + (i * nr + r) * dv;
          for (std::size_t j = 0; j < dv; ++j) o[j] += c * vv[j];
        }
    if (Tensor *gb = detail::sink(t, b)) gb->add_(g);
  });
}

// ---------------------------------------------------------------------------
// Elementwise arithmetic

inline Var add(Var a, Var b) {
  detail::require(a.shape() == b.shape(), "add: shape mismatch " + shape_str(a.shape()) + " vs " +
                                              shape_str(b.shape()));
  Tensor out = a.value();
  out.add_(b.value());
  return a.tape->push(std::move(out), {a, b}, [a, b](Tape &t, std::size_t self) {
    const Tensor &g = t.grad(self);
    if (Tensor *ga = detail::sink(t, a)) ga->add_(g);
    if (Tensor *gb = detail::sink(t, b)) gb->add_(g);
  });
}

inline Var add_n(std::span<const Var> xs) {
  detail::require(!xs.empty(), "add_n: empty input");
  Tensor out = xs[0].value();
  for (std::size_t i = 1; i < xs.size(); ++i) {
    detail::require(xs[i].shape() == out.shape(), "add_n: shape mismatch");
    out.add_(xs[i].value());
  }
  std::vector<Var> parents(xs.begin(), xs.end());
  return xs[0].tape->push(std::move(out), parents, [parents](Tape &t, std::size_t self) {
    const Tensor &g = t.grad(self);
    for (const Var &p : parents)
      if (Tensor *gp = detail::sink(t, p)) gp->add_(g);
  });
}

/// Hadamard product.
inline Var mul(Var a, Var b) {
  detail::require(a.shape() == b.shape(), "mul: shape mismatch");
  const Tensor &av = a.value(), &bv = b.value();
  Tensor out(av.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
  return a.tape->push(std::move(out), {a, b}, [a, b](Tape &t, std::size_t self) {
    const Tensor &g = t.grad(self);
    const Tensor &av = t.value(a), &bv = t.value(b);
    if (Tensor *ga = detail::sink(t, a))
      for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i] * bv[i];
    if (Tensor *gb = detail::sink(t, b))
      for (std::size_t i = 0; i < g.size(); ++i) (*gb)[i] += g[i] * av[i];
  });
}

inline Var scale(Var a, double c) {
  Tensor out = a.value();
  out.scale_(c);
  return a.tape->push(std::move(out), {a}, [a, c](Tape &t, std::size_t self) {
    const Tensor &g = t.grad(self);
    Tensor &ga = t.grad(a.id);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += c * g[i];
  });
}

/// Sum of all elements as a scalar.
inline Var sum(Var a) {
  double s = 0.0;
  for (double x : a.value().values()) s += x;
  return a.tape->push(Tensor::scalar(s), {a}, [a](Tape &t, std::size_t self) {
    const double g = t.grad(self)[0];
    Tensor &ga = t.grad(a.id);
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g;
  });
}

inline Var reshape(Var a, Shape shape) {
  Tensor out = a.value().reshaped(std::move(shape));
  return a.tape->push(std::move(out), {a}, [a](Tape &t, std::size_t self) {
    t.grad(a.id).add_(t.grad(self));
  });
}

// ---------------------------------------------------------------------------
// Structural ops

/// Concatenation along `axis`; all other dimensions must agree.
inline Var concat(std::span<const Var> xs, std::size_t axis = 0) {
  detail::require(!xs.empty(), "concat: empty input");
  const Shape &first = xs[0].shape();
  detail::require(axis < first.size(), "concat: axis out of range");
  Shape out_shape = first;
  out_shape[axis] = 0;
  for (const Var &x : xs) {
    const Shape &s = x.shape();
    bool ok = s.size() == first.size();
    for (std::size_t d = 0; ok && d < s.size(); ++d)
      if (d != axis && s[d] != first[d]) ok = false;
    detail::require(ok, "concat: incompatible shapes " + shape_str(first) + " and " + shape_str(s));
    out_shape[axis] += s[axis];
  }
  if (xs.size() == 1) return xs[0];
  std::size_t outer = 1, inner = 1;
  for (std::size_t d = 0; d < axis; ++d) outer *= first[d];
  for (std::size_t d = axis + 1; d < first.size(); ++d) inner *= first[d];
  Tensor out(out_shape);
  const std::size_t out_block = out_shape[axis] * inner;
  std::vector<std::size_t> offsets;
  std::size_t off = 0;
  for (const Var &x : xs) {
    offsets.push_back(off);
    const std::size_t blk = x.shape()[axis] * inner;
    const double *src = x.value().data();
    for (std::size_t o = 0; o < outer; ++o)
      std::copy(src + o * blk, src + (o + 1) * blk, out.data() + o * out_block + off);
    off += blk;
  }
  std::vector<Var> parents(xs.begin(), xs.end());
  return xs[0].tape->push(std::move(out), parents,
                          [parents, offsets, outer, inner, axis, out_block](Tape &t, std::size_t self) {
    const Tensor &g = t.grad(self);
    for (std::size_t k = 0; k < parents.size(); ++k) {
      Tensor *gp = detail::sink(t, parents[k]);
      if (!gp) continue;
      const std::size_t blk = t.value(parents[k]).shape()[axis] * inner;
      for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t i = 0; i < blk; ++i) (*gp)[o * blk + i] += g[o * out_block + offsets[k] + i];
    }
  });
}

inline Var concat(std::initializer_list<Var> xs, std::size_t axis = 0) {
  return concat(std::span<const Var>(xs.begin(), xs.size()), axis);
}

/// Stacks equally sized vectors into a [k x d] matrix.
inline Var stack_rows(std::span<const Var> rows) {
  detail::require(!rows.empty(), "stack_rows: empty input");
  const std::size_t d = rows[0].size();
  std::vector<Var> parts;
  parts.reserve(rows.size());
  for (const Var &r : rows) {
    detail::require(r.value().rank() == 1 && r.size() == d, "stack_rows: rows must be equal-length vectors");
    parts.push_back(r);
  }
  Tensor out({rows.size(), d});
  for (std::size_t k = 0; k < rows.size(); ++k)
    std::copy_n(rows[k].value().data(), d, out.data() + k * d);
  return rows[0].tape->push(std::move(out), parts, [parts, d](Tape &t, std::size_t self) {
    const Tensor &g = t.grad(self);
    for (std::size_t k = 0; k < parts.size(); ++k)
      if (Tensor *gp = detail::sink(t, parts[k]))
        for (std::size_t j = 0; j < d; ++j) (*gp)[j] += g[k * d + j];
  });
}

/// Row i of a matrix as a vector.
inline Var row(Var x, std::size_t i) {
  const Tensor &xv = x.value();
  detail::require(xv.rank() == 2 && i < xv.dim(0), "row: index out of range");
  const std::size_t d = xv.dim(1);
  Tensor out({d});
  std::copy_n(xv.data() + i * d, d, out.data());
  return x.tape->push(std::move(out), {x}, [x, i, d](Tape &t, std::size_t self) {
    const Tensor &g = t.grad(self);
    Tensor &gx = t.grad(x.id);
    for (std::size_t j = 0; j < d; ++j) gx[i * d + j] += g[j];
  });
}

/// Selects rows by index (repeats allowed); backward scatters.
inline Var gather_rows(Var x, std::vector<std::size_t> idx) {
  const Tensor &xv = x.value();
  detail::require(xv.rank() == 2, "gather_rows: input must be a matrix");
  const std::size_t d = xv.dim(1);
  Tensor out({idx.size(), d});
  for (std::size_t k = 0; k < idx.size(); ++k) {
    detail::require(idx[k] < xv.dim(0), "gather_rows: index out of range");
    std::copy_n(xv.data() + idx[k] * d, d, out.data() + k * d);
  }
  return x.tape->push(std::move(out), {x}, [x, idx = std::move(idx), d](Tape &t, std::size_t self) {
    const Tensor &g = t.grad(self);
    Tensor &gx = t.grad(x.id);
    for (std::size_t k = 0; k < idx.size(); ++k)
      for (std::size_t j = 0; j < d; ++j) gx[idx[k] * d + j] += g[k * d + j];
  });
}

/// Weighted sum of selected rows: sum_k w_k * x[row_k].
inline Var combine_rows(Var x, std::vector<std::pair<std::size_t, double>> terms) {
  const Tensor &xv = x.value();
  detail::require(xv.rank() == 2, "combine_rows: input must be a matrix");
  const std::size_t d = xv.dim(1);
  Tensor out({d});
  for (auto [r, w] : terms) {
    detail::require(r < xv.dim(0), "combine_rows: index out of range");
    for (std::size_t j = 0; j < d; ++j) out[j] += w * xv[r * d + j];
  }
  return x.tape->push(std::move(out), {x}, [x, terms = std::move(terms), d](Tape &t, std::size_t self) {
    const Tensor &g = t.grad(self);
    Tensor &gx = t.grad(x.id);
    for (auto [r, w] : terms)
      for (std::size_t j = 0; j < d; ++j) gx[r * d + j] += w * g[j];
  });
}

/// alpha[k] weighted sum of the rows of m[k x d].
inline Var weighted_sum(Var alpha, Var m) {
  const Tensor &av = alpha.value(), &mv = m.value();
  detail::require(av.rank() == 1 && mv.rank() == 2 && mv.dim(0) == av.dim(0),
                  "weighted_sum: expected alpha[k] and m[k x d]");
  const std::size_t k = mv.dim(0), d = mv.dim(1);
  Tensor out({d});
  detail::gemm_nn(av.data(), mv.data(), out.data(), 1, k, d);
  return alpha.tape->push(std::move(out), {alpha, m}, [alpha, m, k, d](Tape &t, std::size_t self) {
    const Tensor &g = t.grad(self);
    if (Tensor *ga = detail::sink(t, alpha)) detail::gemm_nt(g.data(), t.value(m).data(), ga->data(), 1, d, k);
    if (Tensor *gm = detail::sink(t, m)) detail::gemm_tn(t.value(alpha).data(), g.data(), gm->data(), 1, k, d);
  });
}

/// Neighborhood sum over a graph: y_i = sum_{j in N(i)} x_j, for x [T x w].
/// `adjacency[i]` lists N(i) and may include i itself.
inline Var aggregate(Var x, const std::vector<std::vector<int>> &adjacency) {
  const Tensor &xv = x.value();
  detail::require(xv.rank() == 2 && xv.dim(0) == adjacency.size(),
                  "aggregate: adjacency has " + std::to_string(adjacency.size()) +
                      " nodes but input is " + shape_str(xv.shape()));
  const std::size_t n = xv.dim(0), w = xv.dim(1);
  Tensor out({n, w});
  for (std::size_t i = 0; i < n; ++i)
    for (int j : adjacency[i]) {
      const double *src = xv.data() + static_cast<std::size_t>(j) * w;
      double *dst = out.data() + i * w;
      for (std::size_t c = 0; c < w; ++c) dst[c] += src[c];
    }
  return x.tape->push(std::move(out), {x}, [x, adjacency, n, w](Tape &t, std::size_t self) {
    const Tensor &g = t.grad(self);
    Tensor &gx = t.grad(x.id);
    for (std::size_t i = 0; i < n; ++i)
      for (int j : adjacency[i]) {
        const double *src = g.data() + i * w;
        double *dst = gx.data() + static_cast<std::size_t>(j) * w;
        for (std::size_t c = 0; c < w; ++c) dst[c] += src[c];
      }
  });
}

// ---------------------------------------------------------------------------
// Nonlinearities

inline Var relu(Var x) {
  Tensor out = x.value();
  for (double &v : out.values()) v = v > 0.0 ? v : 0.0;
  return x.tape->push(std::move(out), {x}, [x](Tape &t, std::size_t self) {
    const Tensor &g = t.grad(self);
    const Tensor &xv = t.value(x);
    Tensor &gx = t.grad(x.id);
    for (std::size_t i = 0; i < g.size(); ++i)
      if (xv[i] > 0.0) gx[i] += g[i];
  });
}

inline Var sigmoid(Var x) {
  Tensor out = x.value();
  for (double &v : out.values()) v = detail::sigmoid(v);
  const std::size_t out_id = x.tape->size();
  return x.tape->push(std::move(out), {x}, [x, out_id](Tape &t, std::size_t self) {
    const Tensor &g = t.grad(self);
    const Tensor &y = t.value(out_id);
    Tensor &gx = t.grad(x.id);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * y[i] * (1.0 - y[i]);
  });
}

inline Var tanh(Var x) {
  Tensor out = x.value();
  for (double &v : out.values()) v = std::tanh(v);
  const std::size_t out_id = x.tape->size();
  return x.tape->push(std::move(out), {x}, [x, out_id](Tape &t, std::size_t self) {
    const Tensor &g = t.grad(self);
    const Tensor &y = t.value(out_id);
    Tensor &gx = t.grad(x.id);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * (1.0 - y[i] * y[i]);
  });
}

/// Softmax along `axis`, shifted by the per-slice maximum.
inline Var softmax(Var x, std::size_t axis = 0) {
  const Tensor &xv = x.value();
  detail::require(axis < std::max<std::size_t>(xv.rank(), 1), "softmax: axis out of range");
  const Shape &s = xv.shape();
  std::size_t outer = 1, inner = 1;
  const std::size_t n = s.empty() ? 1 : s[axis];
  for (std::size_t d = 0; d < axis; ++d) outer *= s[d];
  for (std::size_t d = axis + 1; d < s.size(); ++d) inner *= s[d];
  Tensor out(xv.shape());
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t in = 0; in < inner; ++in) {
      auto at = [&](std::size_t k) { return o * n * inner + k * inner + in; };
      double mx = xv[at(0)];
      for (std::size_t k = 1; k < n; ++k) mx = std::max(mx, xv[at(k)]);
      double z = 0.0;
      for (std::size_t k = 0; k < n; ++k) z += (out[at(k)] = std::exp(xv[at(k)] - mx));
      for (std::size_t k = 0; k < n; ++k) out[at(k)] /= z;
    }
  const std::size_t out_id = x.tape->size();
  return x.tape->push(std::move(out), {x}, [x, out_id, outer, inner, n](Tape &t, std::size_t self) {
    const Tensor &g = t.grad(self);
    const Tensor &y = t.value(out_id);
    Tensor &gx = t.grad(x.id);
    for (std::size_t o = 0; o < outer; ++o)
      for (std::size_t in = 0; in < inner; ++in) {
        auto at = [&](std::size_t k) { return o * n * inner + k * inner + in; };
        double dot = 0.0;
        for (std::size_t k = 0; k < n; ++k) dot += g[at(k)] * y[at(k)];
        for (std::size_t k = 0; k < n; ++k) gx[at(k)] += y[at(k)] * (g[at(k)] - dot);
      }
  });
}

// ---------------------------------------------------------------------------
// Recurrent cell

/// Parameter bundle of one GRU direction. Gate rows are stacked in the order
/// update (z), reset (r), candidate (n):
///   w_x [3h x d_in], w_h [3h x h], b [3h].
struct GruVars {
  Var w_x, w_h, b;
};

/// Recurrent half of a GRU step. `xp` is the input projection W x + b [3h]
/// (gates z, r, n), so callers can project a whole sequence at once:
///   z = sigmoid(xp_z + Uz h)
///   r = sigmoid(xp_r + Ur h)
///   n = tanh(xp_n + Un (r * h))
///   h' = (1 - z) * h + z * n
inline Var gru_step(Var xp, Var h_prev, Var w_h) {
  const Tensor &pv = xp.value(), &hv = h_prev.value(), &wh = w_h.value();
  const std::size_t h = hv.size();
  detail::require(pv.rank() == 1 && hv.rank() == 1, "gru_step: projection and h must be vectors");
  detail::require(pv.size() == 3 * h, "gru_step: projection has " + std::to_string(pv.size()) +
                                          " entries, expected 3h = " + std::to_string(3 * h));
  detail::require(wh.rank() == 2 && wh.dim(0) == 3 * h && wh.dim(1) == h,
                  "gru_step: w_h " + shape_str(wh.shape()) + " incompatible with h[" + std::to_string(h) + "]");

  std::vector<double> rec(2 * h, 0.0); // Uz h, Ur h
  detail::gemm_nt(hv.data(), wh.data(), rec.data(), 1, h, 2 * h);

  // Saved activations: z, r, n, r*h.
  std::vector<double> act(4 * h);
  double *z = act.data(), *r = z + h, *n = r + h, *rh = n + h;
  for (std::size_t i = 0; i < h; ++i) {
    z[i] = detail::sigmoid(pv[i] + rec[i]);
    r[i] = detail::sigmoid(pv[h + i] + rec[h + i]);
    rh[i] = r[i] * hv[i];
  }
  std::vector<double> cand(h, 0.0);
  detail::gemm_nt(rh, wh.data() + 2 * h * h, cand.data(), 1, h, h);
  Tensor out({h});
  for (std::size_t i = 0; i < h; ++i) {
    n[i] = std::tanh(pv[2 * h + i] + cand[i]);
    out[i] = (1.0 - z[i]) * hv[i] + z[i] * n[i];
  }

  return xp.tape->push(std::move(out), {xp, h_prev, w_h},
                       [xp, h_prev, w_h, h, act = std::move(act)](Tape &t, std::size_t self) {
    const Tensor &g = t.grad(self);
    const Tensor &hv = t.value(h_prev), &wh = t.value(w_h);
    const double *z = act.data(), *r = z + h, *n = r + h, *rh = n + h;
    std::vector<double> dpre(3 * h), dh(h), drh(h, 0.0);
    for (std::size_t i = 0; i < h; ++i) {
      dpre[i] = g[i] * (n[i] - hv[i]) * z[i] * (1.0 - z[i]);
      dpre[2 * h + i] = g[i] * z[i] * (1.0 - n[i] * n[i]);
      dh[i] = g[i] * (1.0 - z[i]);
    }
    // d(r*h) = Un^T dn
    detail::gemm_nn(dpre.data() + 2 * h, wh.data() + 2 * h * h, drh.data(), 1, h, h);
    for (std::size_t i = 0; i < h; ++i) {
      dpre[h + i] = drh[i] * hv[i] * r[i] * (1.0 - r[i]);
      dh[i] += drh[i] * r[i];
    }
    // Uz^T dz + Ur^T dr
    detail::gemm_nn(dpre.data(), wh.data(), dh.data(), 1, 2 * h, h);

    if (Tensor *gh = detail::sink(t, h_prev))
      for (std::size_t i = 0; i < h; ++i) (*gh)[i] += dh[i];
    if (Tensor *gp = detail::sink(t, xp))
      for (std::size_t i = 0; i < 3 * h; ++i) (*gp)[i] += dpre[i];
    if (Tensor *gwh = detail::sink(t, w_h)) {
      detail::gemm_tn(dpre.data(), hv.data(), gwh->data(), 1, 2 * h, h);
      detail::gemm_tn(dpre.data() + 2 * h, rh, gwh->data() + 2 * h * h, 1, h, h);
    }
  });
}

/// One full GRU step: gru_step(W_x x + b, h, w_h).
inline Var gru_cell(Var x, Var h_prev, const GruVars &p) {
  const Tensor &xv = x.value(), &wx = p.w_x.value();
  detail::require(xv.rank() == 1, "gru_cell: x must be a vector");
  detail::require(wx.rank() == 2 && wx.dim(1) == xv.size() && wx.dim(0) == 3 * h_prev.size(),
                  "gru_cell: w_x " + shape_str(wx.shape()) + " incompatible with x[" + std::to_string(xv.size()) +
                      "], h[" + std::to_string(h_prev.size()) + "]");
  detail::require(p.b.size() == 3 * h_prev.size(), "gru_cell: bias must have 3h entries");
  return gru_step(linear(x, p.w_x, p.b), h_prev, p.w_h);
}

// ---------------------------------------------------------------------------
// Loss and regularization

inline constexpr double kProbClamp = 1e-12;

/// Binary cross entropy summed over relations. Probabilities are clamped to
/// [1e-12, 1 - 1e-12]; clamped entries pass no gradient.
inline Var bce_loss(Var probs, std::span<const std::uint8_t> labels) {
  const Tensor &pv = probs.value();
  detail::require(pv.size() == labels.size(), "bce_loss: " + std::to_string(pv.size()) +
                                                  " probabilities vs " + std::to_string(labels.size()) + " labels");
  double loss = 0.0;
  std::vector<double> dp(pv.size());
  for (std::size_t r = 0; r < pv.size(); ++r) {
    const double p = std::clamp(pv[r], kProbClamp, 1.0 - kProbClamp);
    const bool clamped = p != pv[r];
    if (labels[r]) {
      loss -= std::log(p);
      dp[r] = clamped ? 0.0 : -1.0 / p;
    } else {
      loss -= std::log(1.0 - p);
      dp[r] = clamped ? 0.0 : 1.0 / (1.0 - p);
    }
  }
  return probs.tape->push(Tensor::scalar(loss), {probs}, [probs, dp = std::move(dp)](Tape &t, std::size_t self) {
    const double g = t.grad(self)[0];
    Tensor &gp = t.grad(probs.id);
    for (std::size_t r = 0; r < dp.size(); ++r) gp[r] += g * dp[r];
  });
}

enum class Mode { Train, Eval };

/// Inverted dropout: in train mode each entry is kept with probability
/// 1 - rate and scaled by 1 / (1 - rate); identity in eval mode or at rate 0.
inline Var dropout(Var x, double rate, Mode mode, Rng &rng) {
  if (rate < 0.0 || rate >= 1.0) throw Error("dropout: rate must lie in [0, 1)");
  if (mode == Mode::Eval || rate == 0.0) return x;
  const double keep_scale = 1.0 / (1.0 - rate);
  std::vector<double> mask(x.size());
  for (double &m : mask) m = rng.uniform() < rate ? 0.0 : keep_scale;
  Tensor out = x.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= mask[i];
  return x.tape->push(std::move(out), {x}, [x, mask = std::move(mask)](Tape &t, std::size_t self) {
    const Tensor &g = t.grad(self);
    Tensor &gx = t.grad(x.id);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * mask[i];
  });
}

} // namespace cfer::nd
