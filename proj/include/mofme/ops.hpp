#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <initializer_list>

#include "mofme/rng.hpp"
#include "mofme/tensor.hpp"

namespace mofme {

namespace detail {

// Raw matmul kernels. All accumulate into c, callers zero-fill first; the
// accumulate form is reused directly for gradient buffers.
template <class T>
void mm_nn(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const T* ai = a + i * k;
    T* ci = c + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      T av = ai[p];
      const T* bp = b + p * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += av * bp[j];
    }
  }
}

// c[m x n] += a[m x k] * b[n x k]^T
template <class T>
void mm_nt(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const T* ai = a + i * k;
    T* ci = c + i * n;
    for (std::size_t j = 0; j < n; ++j) {
      const T* bj = b + j * k;
      T acc = 0;
      for (std::size_t p = 0; p < k; ++p) acc += ai[p] * bj[p];
      ci[j] += acc;
    }
  }
}

// c[m x n] += a[k x m]^T * b[k x n]
template <class T>
void mm_tn(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t p = 0; p < k; ++p) {
    const T* ap = a + p * m;
    const T* bp = b + p * n;
    for (std::size_t i = 0; i < m; ++i) {
      T av = ap[i];
      T* ci = c + i * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += av * bp[j];
    }
  }
}

template <class T, class F>
void finish(Tensor<T>& out, std::initializer_list<const Tensor<T>*> inputs, F&& back) {
  Tape<T>* tape = Tape<T>::current();
  if (!tape) return;
  bool rg = false;
  for (const Tensor<T>* in : inputs) rg = rg || in->requires_grad();
  if (!rg) return;
  out.ptr()->requires_grad = true;
  out.ptr()->tape_pos = tape->record(std::forward<F>(back), out.ptr());
}

template <class T>
void check_same_shape(const char* op, const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape())
    throw ShapeError(msg(op, ": mismatched shapes ", shape_str(a.shape()), " vs ",
                         shape_str(b.shape())));
}

// Folds an arbitrary-rank tensor into [rows x last-dim].
template <class T>
std::pair<std::size_t, std::size_t> rows_cols(const Tensor<T>& x) {
  if (x.rank() == 0 || x.numel() == 0)
    throw ShapeError("expected a non-empty tensor");
  std::size_t cols = x.shape().back();
  return {x.numel() / cols, cols};
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise arithmetic

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  detail::check_same_shape("add", a, b);
  Tensor<T> out = Tensor<T>::zeros(a.shape());
  const auto& av = a.value();
  const auto& bv = b.value();
  auto& ov = out.raw();
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] + bv[i];
  detail::finish(out, {&a, &b}, [pa = a.ptr(), pb = b.ptr(), po = out.ptr()] {
    const auto& g = po->grad;
    if (pa->requires_grad) {
      auto& ga = pa->grad_buf();
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    }
    if (pb->requires_grad) {
      auto& gb = pb->grad_buf();
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
    }
  });
  return out;
}

template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  detail::check_same_shape("sub", a, b);
  Tensor<T> out = Tensor<T>::zeros(a.shape());
  const auto& av = a.value();
  const auto& bv = b.value();
  auto& ov = out.raw();
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] - bv[i];
  detail::finish(out, {&a, &b}, [pa = a.ptr(), pb = b.ptr(), po = out.ptr()] {
    const auto& g = po->grad;
    if (pa->requires_grad) {
      auto& ga = pa->grad_buf();
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    }
    if (pb->requires_grad) {
      auto& gb = pb->grad_buf();
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
    }
  });
  return out;
}

template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::check_same_shape("mul", a, b);
  Tensor<T> out = Tensor<T>::zeros(a.shape());
  const auto& av = a.value();
  const auto& bv = b.value();
  auto& ov = out.raw();
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] * bv[i];
  detail::finish(out, {&a, &b}, [pa = a.ptr(), pb = b.ptr(), po = out.ptr()] {
    const auto& g = po->grad;
    if (pa->requires_grad) {
      auto& ga = pa->grad_buf();
      const auto& bv2 = pb->value;
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv2[i];
    }
    if (pb->requires_grad) {
      auto& gb = pb->grad_buf();
      const auto& av2 = pa->value;
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * av2[i];
    }
  });
  return out;
}

template <class T>
Tensor<T> add_scalar(const Tensor<T>& a, T c) {
  Tensor<T> out = Tensor<T>::zeros(a.shape());
  const auto& av = a.value();
  auto& ov = out.raw();
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] + c;
  detail::finish(out, {&a}, [pa = a.ptr(), po = out.ptr()] {
    const auto& g = po->grad;
    auto& ga = pa->grad_buf();
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
  });
  return out;
}

template <class T>
Tensor<T> mul_scalar(const Tensor<T>& a, T c) {
  Tensor<T> out = Tensor<T>::zeros(a.shape());
  const auto& av = a.value();
  auto& ov = out.raw();
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] * c;
  detail::finish(out, {&a}, [pa = a.ptr(), po = out.ptr(), c] {
    const auto& g = po->grad;
    auto& ga = pa->grad_buf();
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * c;
  });
  return out;
}

template <class T>
Tensor<T> neg(const Tensor<T>& a) {
  return mul_scalar(a, T(-1));
}

template <class T>
Tensor<T> reciprocal(const Tensor<T>& a) {
  Tensor<T> out = Tensor<T>::zeros(a.shape());
  const auto& av = a.value();
  auto& ov = out.raw();
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = T(1) / av[i];
  detail::finish(out, {&a}, [pa = a.ptr(), po = out.ptr()] {
    const auto& g = po->grad;
    const auto& y = po->value;
    auto& ga = pa->grad_buf();
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] -= g[i] * y[i] * y[i];
  });
  return out;
}

template <class T>
Tensor<T> sqrt_el(const Tensor<T>& a) {
  Tensor<T> out = Tensor<T>::zeros(a.shape());
  const auto& av = a.value();
  auto& ov = out.raw();
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = std::sqrt(av[i]);
  detail::finish(out, {&a}, [pa = a.ptr(), po = out.ptr()] {
    const auto& g = po->grad;
    const auto& y = po->value;
    auto& ga = pa->grad_buf();
    for (std::size_t i = 0; i < g.size(); ++i)
      ga[i] += g[i] / (T(2) * y[i]);
  });
  return out;
}

// max(x, floor); gradient flows only through non-floored entries.
template <class T>
Tensor<T> clamp_min(const Tensor<T>& a, T floor) {
  Tensor<T> out = Tensor<T>::zeros(a.shape());
  const auto& av = a.value();
  auto& ov = out.raw();
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] > floor ? av[i] : floor;
  detail::finish(out, {&a}, [pa = a.ptr(), po = out.ptr(), floor] {
    const auto& g = po->grad;
    const auto& x = pa->value;
    auto& ga = pa->grad_buf();
    for (std::size_t i = 0; i < g.size(); ++i)
      if (x[i] > floor) ga[i] += g[i];
  });
  return out;
}

// ---------------------------------------------------------------------------
// Activations

template <class T>
Tensor<T> relu(const Tensor<T>& a) {
  Tensor<T> out = Tensor<T>::zeros(a.shape());
  const auto& av = a.value();
  auto& ov = out.raw();
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] > T(0) ? av[i] : T(0);
  detail::finish(out, {&a}, [pa = a.ptr(), po = out.ptr()] {
    const auto& g = po->grad;
    const auto& x = pa->value;
    auto& ga = pa->grad_buf();
    for (std::size_t i = 0; i < g.size(); ++i)
      if (x[i] > T(0)) ga[i] += g[i];
  });
  return out;
}

// Exact GELU, 0.5 x (1 + erf(x / sqrt(2))).
template <class T>
Tensor<T> gelu(const Tensor<T>& a) {
  constexpr double kInvSqrt2 = 0.70710678118654752440;
  constexpr double kInvSqrt2Pi = 0.39894228040143267794;
  Tensor<T> out = Tensor<T>::zeros(a.shape());
  const auto& av = a.value();
  auto& ov = out.raw();
  for (std::size_t i = 0; i < ov.size(); ++i) {
    double x = double(av[i]);
    ov[i] = T(0.5 * x * (1.0 + std::erf(x * kInvSqrt2)));
  }
  detail::finish(out, {&a}, [pa = a.ptr(), po = out.ptr()] {
    const auto& g = po->grad;
    const auto& x = pa->value;
    auto& ga = pa->grad_buf();
    for (std::size_t i = 0; i < g.size(); ++i) {
      double xv = double(x[i]);
      double cdf = 0.5 * (1.0 + std::erf(xv * kInvSqrt2));
      double pdf = kInvSqrt2Pi * std::exp(-0.5 * xv * xv);
      ga[i] += g[i] * T(cdf + xv * pdf);
    }
  });
  return out;
}

// ---------------------------------------------------------------------------
// Matrix products

template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.size(1) != b.size(0))
    throw ShapeError(msg("matmul: incompatible shapes ", shape_str(a.shape()),
                         " vs ", shape_str(b.shape())));
  std::size_t m = a.size(0), k = a.size(1), n = b.size(1);
  Tensor<T> out = Tensor<T>::zeros({m, n});
  detail::mm_nn(a.value().data(), b.value().data(), out.raw().data(), m, k, n);
  detail::finish(out, {&a, &b},
                 [pa = a.ptr(), pb = b.ptr(), po = out.ptr(), m, k, n] {
                   const T* g = po->grad.data();
                   if (pa->requires_grad)
                     detail::mm_nt(g, pb->value.data(), pa->grad_buf().data(), m, n, k);
                   if (pb->requires_grad)
                     detail::mm_tn(pa->value.data(), g, pb->grad_buf().data(), k, m, n);
                 });
  return out;
}

// a [m x k] * b[n x k]^T without materializing the transpose.
template <class T>
Tensor<T> matmul_nt(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.size(1) != b.size(1))
    throw ShapeError(msg("matmul_nt: incompatible shapes ", shape_str(a.shape()),
                         " vs ", shape_str(b.shape())));
  std::size_t m = a.size(0), k = a.size(1), n = b.size(0);
  Tensor<T> out = Tensor<T>::zeros({m, n});
  detail::mm_nt(a.value().data(), b.value().data(), out.raw().data(), m, k, n);
  detail::finish(out, {&a, &b},
                 [pa = a.ptr(), pb = b.ptr(), po = out.ptr(), m, k, n] {
                   const T* g = po->grad.data();
                   if (pa->requires_grad)
                     detail::mm_nn(g, pb->value.data(), pa->grad_buf().data(), m, n, k);
                   if (pb->requires_grad)
                     detail::mm_tn(g, pa->value.data(), pb->grad_buf().data(), n, m, k);
                 });
  return out;
}

// Batched [B x m x k] * [B x k x n].
template <class T>
Tensor<T> bmm(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 3 || b.rank() != 3 || a.size(0) != b.size(0) ||
      a.size(2) != b.size(1))
    throw ShapeError(msg("bmm: incompatible shapes ", shape_str(a.shape()), " vs ",
                         shape_str(b.shape())));
  std::size_t bts = a.size(0), m = a.size(1), k = a.size(2), n = b.size(2);
  Tensor<T> out = Tensor<T>::zeros({bts, m, n});
  for (std::size_t i = 0; i < bts; ++i)
    detail::mm_nn(a.value().data() + i * m * k, b.value().data() + i * k * n,
                  out.raw().data() + i * m * n, m, k, n);
  detail::finish(out, {&a, &b},
                 [pa = a.ptr(), pb = b.ptr(), po = out.ptr(), bts, m, k, n] {
                   for (std::size_t i = 0; i < bts; ++i) {
                     const T* g = po->grad.data() + i * m * n;
                     if (pa->requires_grad)
                       detail::mm_nt(g, pb->value.data() + i * k * n,
                                     pa->grad_buf().data() + i * m * k, m, n, k);
                     if (pb->requires_grad)
                       detail::mm_tn(pa->value.data() + i * m * k, g,
                                     pb->grad_buf().data() + i * k * n, k, m, n);
                   }
                 });
  return out;
}

// Batched [B x m x k] * [B x n x k]^T (attention scores).
template <class T>
Tensor<T> bmm_nt(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 3 || b.rank() != 3 || a.size(0) != b.size(0) ||
      a.size(2) != b.size(2))
    throw ShapeError(msg("bmm_nt: incompatible shapes ", shape_str(a.shape()),
                         " vs ", shape_str(b.shape())));
  std::size_t bts = a.size(0), m = a.size(1), k = a.size(2), n = b.size(1);
  Tensor<T> out = Tensor<T>::zeros({bts, m, n});
  for (std::size_t i = 0; i < bts; ++i)
    detail::mm_nt(a.value().data() + i * m * k, b.value().data() + i * n * k,
                  out.raw().data() + i * m * n, m, k, n);
  detail::finish(out, {&a, &b},
                 [pa = a.ptr(), pb = b.ptr(), po = out.ptr(), bts, m, k, n] {
                   for (std::size_t i = 0; i < bts; ++i) {
                     const T* g = po->grad.data() + i * m * n;
                     if (pa->requires_grad)
                       detail::mm_nn(g, pb->value.data() + i * n * k,
                                     pa->grad_buf().data() + i * m * k, m, n, k);
                     if (pb->requires_grad)
                       detail::mm_tn(g, pa->value.data() + i * m * k,
                                     pb->grad_buf().data() + i * n * k, n, m, k);
                   }
                 });
  return out;
}

// ---------------------------------------------------------------------------
// Shape manipulation

template <class T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape) {
  if (shape_numel(shape) != a.numel())
    throw ShapeError(msg("reshape: ", shape_str(a.shape()), " -> ",
                         shape_str(shape), " changes element count"));
  Tensor<T> out = Tensor<T>::from(std::move(shape), a.value());
  detail::finish(out, {&a}, [pa = a.ptr(), po = out.ptr()] {
    const auto& g = po->grad;
    auto& ga = pa->grad_buf();
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
  });
  return out;
}

template <class T>
Tensor<T> transpose(const Tensor<T>& a) {
  if (a.rank() != 2)
    throw ShapeError(msg("transpose: expected rank-2, got ", shape_str(a.shape())));
  std::size_t m = a.size(0), n = a.size(1);
  Tensor<T> out = Tensor<T>::zeros({n, m});
  const auto& av = a.value();
  auto& ov = out.raw();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) ov[j * m + i] = av[i * n + j];
  detail::finish(out, {&a}, [pa = a.ptr(), po = out.ptr(), m, n] {
    const auto& g = po->grad;
    auto& ga = pa->grad_buf();
    for (std::size_t j = 0; j < n; ++j)
      for (std::size_t i = 0; i < m; ++i) ga[i * n + j] += g[j * m + i];
  });
  return out;
}

namespace detail {

inline std::vector<std::size_t> strides_of(const Shape& s) {
  std::vector<std::size_t> st(s.size(), 1);
  for (std::size_t i = s.size(); i-- > 1;) st[i - 1] = st[i] * s[i];
  return st;
}

// Flat index map realizing an axis permutation.
inline std::vector<std::size_t> permute_map(const Shape& in, const std::vector<std::size_t>& axes) {
  Shape out_shape(in.size());
  for (std::size_t i = 0; i < axes.size(); ++i) out_shape[i] = in[axes[i]];
  auto in_strides = strides_of(in);
  std::size_t n = shape_numel(in);
  std::vector<std::size_t> map(n);
  std::vector<std::size_t> idx(in.size(), 0);
  for (std::size_t o = 0; o < n; ++o) {
    std::size_t src = 0;
    for (std::size_t i = 0; i < axes.size(); ++i) src += idx[i] * in_strides[axes[i]];
    map[o] = src;
    for (std::size_t i = in.size(); i-- > 0;) {
      if (++idx[i] < out_shape[i]) break;
      idx[i] = 0;
    }
  }
  return map;
}

}  // namespace detail

// Generic axis permutation (copying).
template <class T>
Tensor<T> permute(const Tensor<T>& a, const std::vector<std::size_t>& axes) {
  if (axes.size() != a.rank())
    throw ShapeError(msg("permute: axes count ", axes.size(), " vs rank ", a.rank()));
  Shape out_shape(a.rank());
  for (std::size_t i = 0; i < axes.size(); ++i) out_shape[i] = a.shape()[axes[i]];
  auto map = detail::permute_map(a.shape(), axes);
  Tensor<T> out = Tensor<T>::zeros(out_shape);
  const auto& av = a.value();
  auto& ov = out.raw();
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = av[map[i]];
  detail::finish(out, {&a}, [pa = a.ptr(), po = out.ptr(), map = std::move(map)] {
    const auto& g = po->grad;
    auto& ga = pa->grad_buf();
    for (std::size_t i = 0; i < g.size(); ++i) ga[map[i]] += g[i];
  });
  return out;
}

// out[i] = a[map[i]]; backward scatter-adds. Used for patch packing/unpacking.
template <class T>
Tensor<T> gather_flat(const Tensor<T>& a, std::vector<std::size_t> map, Shape out_shape) {
  if (shape_numel(out_shape) != map.size())
    throw ShapeError("gather_flat: map size does not match output shape");
  Tensor<T> out = Tensor<T>::zeros(std::move(out_shape));
  const auto& av = a.value();
  auto& ov = out.raw();
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = av[map[i]];
  detail::finish(out, {&a}, [pa = a.ptr(), po = out.ptr(), map = std::move(map)] {
    const auto& g = po->grad;
    auto& ga = pa->grad_buf();
    for (std::size_t i = 0; i < g.size(); ++i) ga[map[i]] += g[i];
  });
  return out;
}

// ---------------------------------------------------------------------------
// Row-structured ops (tensors folded to [R x C] on the last axis)

// Adds a [C] vector to every row (bias add).
template <class T>
Tensor<T> add_rowvec(const Tensor<T>& a, const Tensor<T>& v) {
  auto [r, c] = detail::rows_cols(a);
  if (v.numel() != c)
    throw ShapeError(msg("add_rowvec: vector ", shape_str(v.shape()),
                         " vs row width ", c));
  Tensor<T> out = Tensor<T>::zeros(a.shape());
  const auto& av = a.value();
  const auto& vv = v.value();
  auto& ov = out.raw();
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) ov[i * c + j] = av[i * c + j] + vv[j];
  detail::finish(out, {&a, &v}, [pa = a.ptr(), pv = v.ptr(), po = out.ptr(), r, c] {
    const auto& g = po->grad;
    if (pa->requires_grad) {
      auto& ga = pa->grad_buf();
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    }
    if (pv->requires_grad) {
      auto& gv = pv->grad_buf();
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) gv[j] += g[i * c + j];
    }
  });
  return out;
}

// Adds p (shape [r x C]) tiled along rows: a has R = tiles * r rows.
template <class T>
Tensor<T> add_tiled(const Tensor<T>& a, const Tensor<T>& p) {
  auto [ra, c] = detail::rows_cols(a);
  auto [rp, cp] = detail::rows_cols(p);
  if (c != cp || ra % rp != 0)
    throw ShapeError(msg("add_tiled: ", shape_str(a.shape()), " vs ",
                         shape_str(p.shape())));
  std::size_t block = rp * c;
  Tensor<T> out = Tensor<T>::zeros(a.shape());
  const auto& av = a.value();
  const auto& pv = p.value();
  auto& ov = out.raw();
  for (std::size_t i = 0; i < av.size(); ++i) ov[i] = av[i] + pv[i % block];
  detail::finish(out, {&a, &p}, [pa = a.ptr(), pp = p.ptr(), po = out.ptr(), block] {
    const auto& g = po->grad;
    if (pa->requires_grad) {
      auto& ga = pa->grad_buf();
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    }
    if (pp->requires_grad) {
      auto& gp = pp->grad_buf();
      for (std::size_t i = 0; i < g.size(); ++i) gp[i % block] += g[i];
    }
  });
  return out;
}

// Scales row i of a by w[i].
template <class T>
Tensor<T> mul_rows(const Tensor<T>& a, const Tensor<T>& w) {
  auto [r, c] = detail::rows_cols(a);
  if (w.numel() != r)
    throw ShapeError(msg("mul_rows: weights ", shape_str(w.shape()), " vs rows ", r));
  Tensor<T> out = Tensor<T>::zeros(a.shape());
  const auto& av = a.value();
  const auto& wv = w.value();
  auto& ov = out.raw();
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) ov[i * c + j] = av[i * c + j] * wv[i];
  detail::finish(out, {&a, &w}, [pa = a.ptr(), pw = w.ptr(), po = out.ptr(), r, c] {
    const auto& g = po->grad;
    if (pa->requires_grad) {
      auto& ga = pa->grad_buf();
      const auto& wv2 = pw->value;
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) ga[i * c + j] += g[i * c + j] * wv2[i];
    }
    if (pw->requires_grad) {
      auto& gw = pw->grad_buf();
      const auto& av2 = pa->value;
      for (std::size_t i = 0; i < r; ++i) {
        T acc = 0;
        for (std::size_t j = 0; j < c; ++j) acc += g[i * c + j] * av2[i * c + j];
        gw[i] += acc;
      }
    }
  });
  return out;
}

template <class T>
Tensor<T> div_rows(const Tensor<T>& a, const Tensor<T>& w) {
  return mul_rows(a, reciprocal(w));
}

// Sum over the last axis: [.. x C] -> [rows].
template <class T>
Tensor<T> sum_rows(const Tensor<T>& a) {
  auto [r, c] = detail::rows_cols(a);
  Tensor<T> out = Tensor<T>::zeros({r});
  const auto& av = a.value();
  auto& ov = out.raw();
  for (std::size_t i = 0; i < r; ++i) {
    T acc = 0;
    for (std::size_t j = 0; j < c; ++j) acc += av[i * c + j];
    ov[i] = acc;
  }
  detail::finish(out, {&a}, [pa = a.ptr(), po = out.ptr(), r, c] {
    const auto& g = po->grad;
    auto& ga = pa->grad_buf();
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) ga[i * c + j] += g[i];
  });
  return out;
}

// Extracts column j of [R x C] as a [R] vector.
template <class T>
Tensor<T> column(const Tensor<T>& a, std::size_t j) {
  auto [r, c] = detail::rows_cols(a);
  if (j >= c) throw ShapeError(msg("column: index ", j, " out of ", c));
  Tensor<T> out = Tensor<T>::zeros({r});
  const auto& av = a.value();
  auto& ov = out.raw();
  for (std::size_t i = 0; i < r; ++i) ov[i] = av[i * c + j];
  detail::finish(out, {&a}, [pa = a.ptr(), po = out.ptr(), r, c, j] {
    const auto& g = po->grad;
    auto& ga = pa->grad_buf();
    for (std::size_t i = 0; i < r; ++i) ga[i * c + j] += g[i];
  });
  return out;
}

// ---------------------------------------------------------------------------
// Reductions

template <class T>
Tensor<T> sum(const Tensor<T>& a) {
  Tensor<T> out = Tensor<T>::zeros({1});
  T acc = 0;
  for (T v : a.value()) acc += v;
  out.raw()[0] = acc;
  detail::finish(out, {&a}, [pa = a.ptr(), po = out.ptr()] {
    T g = po->grad[0];
    auto& ga = pa->grad_buf();
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g;
  });
  return out;
}

template <class T>
Tensor<T> mean(const Tensor<T>& a) {
  return mul_scalar(sum(a), T(1) / T(a.numel()));
}

// ---------------------------------------------------------------------------
// Softmax / layer norm

// Softmax over the last axis, max-subtracted per slice for stability.
template <class T>
Tensor<T> softmax_lastdim(const Tensor<T>& a) {
  auto [r, c] = detail::rows_cols(a);
  Tensor<T> out = Tensor<T>::zeros(a.shape());
  const auto& av = a.value();
  auto& ov = out.raw();
  for (std::size_t i = 0; i < r; ++i) {
    const T* x = av.data() + i * c;
    T* y = ov.data() + i * c;
    T mx = x[0];
    for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, x[j]);
    T denom = 0;
    for (std::size_t j = 0; j < c; ++j) {
      y[j] = std::exp(x[j] - mx);
      denom += y[j];
    }
    for (std::size_t j = 0; j < c; ++j) y[j] /= denom;
  }
  detail::finish(out, {&a}, [pa = a.ptr(), po = out.ptr(), r, c] {
    const auto& g = po->grad;
    const auto& y = po->value;
    auto& ga = pa->grad_buf();
    for (std::size_t i = 0; i < r; ++i) {
      const T* gi = g.data() + i * c;
      const T* yi = y.data() + i * c;
      T dot = 0;
      for (std::size_t j = 0; j < c; ++j) dot += gi[j] * yi[j];
      for (std::size_t j = 0; j < c; ++j)
        ga[i * c + j] += yi[j] * (gi[j] - dot);
    }
  });
  return out;
}

// Per-row layer norm with affine parameters.
template <class T>
Tensor<T> layer_norm(const Tensor<T>& a, const Tensor<T>& gamma, const Tensor<T>& beta,
                     T eps = T(1e-5)) {
  auto [r, c] = detail::rows_cols(a);
  if (gamma.numel() != c || beta.numel() != c)
    throw ShapeError(msg("layer_norm: affine params must have ", c, " entries"));
  Tensor<T> out = Tensor<T>::zeros(a.shape());
  std::vector<T> inv_sigma(r), xhat(r * c);
  const auto& av = a.value();
  const auto& gv = gamma.value();
  const auto& bv = beta.value();
  auto& ov = out.raw();
  for (std::size_t i = 0; i < r; ++i) {
    const T* x = av.data() + i * c;
    T mu = 0;
    for (std::size_t j = 0; j < c; ++j) mu += x[j];
    mu /= T(c);
    T var = 0;
    for (std::size_t j = 0; j < c; ++j) var += (x[j] - mu) * (x[j] - mu);
    var /= T(c);
    T is = T(1) / std::sqrt(var + eps);
    inv_sigma[i] = is;
    for (std::size_t j = 0; j < c; ++j) {
      T xh = (x[j] - mu) * is;
      xhat[i * c + j] = xh;
      ov[i * c + j] = xh * gv[j] + bv[j];
    }
  }
  detail::finish(out, {&a, &gamma, &beta},
                 [pa = a.ptr(), pg = gamma.ptr(), pb = beta.ptr(), po = out.ptr(), r, c,
                  inv_sigma = std::move(inv_sigma), xhat = std::move(xhat)] {
                   const auto& g = po->grad;
                   const auto& gv2 = pg->value;
                   if (pg->requires_grad) {
                     auto& gg = pg->grad_buf();
                     for (std::size_t i = 0; i < r; ++i)
                       for (std::size_t j = 0; j < c; ++j)
                         gg[j] += g[i * c + j] * xhat[i * c + j];
                   }
                   if (pb->requires_grad) {
                     auto& gb = pb->grad_buf();
                     for (std::size_t i = 0; i < r; ++i)
                       for (std::size_t j = 0; j < c; ++j) gb[j] += g[i * c + j];
                   }
                   if (pa->requires_grad) {
                     auto& ga = pa->grad_buf();
                     for (std::size_t i = 0; i < r; ++i) {
                       const T* gi = g.data() + i * c;
                       const T* xh = xhat.data() + i * c;
                       T mean_dy = 0, mean_dyxh = 0;
                       for (std::size_t j = 0; j < c; ++j) {
                         T dy = gi[j] * gv2[j];
                         mean_dy += dy;
                         mean_dyxh += dy * xh[j];
                       }
                       mean_dy /= T(c);
                       mean_dyxh /= T(c);
                       for (std::size_t j = 0; j < c; ++j) {
                         T dy = gi[j] * gv2[j];
                         ga[i * c + j] += inv_sigma[i] * (dy - mean_dy - xh[j] * mean_dyxh);
                       }
                     }
                   }
                 });
  return out;
}

// ---------------------------------------------------------------------------
// Dropout

// Inverted dropout: survivors are scaled by 1/(1-rate) at train time so the
// eval path is the identity.
template <class T>
Tensor<T> dropout(const Tensor<T>& a, double rate, RngStream& rng, bool training) {
  if (rate < 0.0 || rate >= 1.0)
    throw ConfigError(msg("dropout: rate must be in [0, 1), got ", rate));
  if (!training || rate == 0.0) return a;
  T scale = T(1.0 / (1.0 - rate));
  std::vector<T> mask(a.numel());
  for (auto& m : mask) m = rng.uniform() < rate ? T(0) : scale;
  Tensor<T> out = Tensor<T>::zeros(a.shape());
  const auto& av = a.value();
  auto& ov = out.raw();
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] * mask[i];
  detail::finish(out, {&a}, [pa = a.ptr(), po = out.ptr(), mask = std::move(mask)] {
    const auto& g = po->grad;
    auto& ga = pa->grad_buf();
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * mask[i];
  });
  return out;
}

// ---------------------------------------------------------------------------
// Row gather / scatter

// Gathers rows (rank >= 2) or elements (rank 1) by index.
template <class T>
Tensor<T> gather_rows(const Tensor<T>& a, const std::vector<std::size_t>& idx) {
  std::size_t c = a.rank() >= 2 ? a.numel() / a.size(0) : 1;
  std::size_t rows = a.rank() >= 2 ? a.size(0) : a.numel();
  for (auto i : idx)
    if (i >= rows) throw ShapeError(msg("gather_rows: index ", i, " out of ", rows));
  Shape out_shape = a.shape();
  out_shape[0] = idx.size();
  Tensor<T> out = Tensor<T>::zeros(out_shape);
  const auto& av = a.value();
  auto& ov = out.raw();
  for (std::size_t i = 0; i < idx.size(); ++i)
    for (std::size_t j = 0; j < c; ++j) ov[i * c + j] = av[idx[i] * c + j];
  detail::finish(out, {&a}, [pa = a.ptr(), po = out.ptr(), idx, c] {
    const auto& g = po->grad;
    auto& ga = pa->grad_buf();
    for (std::size_t i = 0; i < idx.size(); ++i)
      for (std::size_t j = 0; j < c; ++j) ga[idx[i] * c + j] += g[i * c + j];
  });
  return out;
}

// Sums several row-sets into one [rows x C] output: rows idx[s][i] of the
// result accumulate srcs[s] row i. Backward gathers per source. This is the
// merge step of group-by-expert dispatch.
template <class T>
Tensor<T> scatter_rows_sum(const std::vector<Tensor<T>>& srcs,
                           const std::vector<std::vector<std::size_t>>& idx,
                           std::size_t rows) {
  if (srcs.empty()) throw ShapeError("scatter_rows_sum: no sources");
  if (srcs.size() != idx.size())
    throw ShapeError("scatter_rows_sum: sources and index lists differ in count");
  std::size_t c = 1;
  for (std::size_t i = 1; i < srcs[0].rank(); ++i) c *= srcs[0].shape()[i];
  Shape out_shape = srcs[0].shape();
  out_shape[0] = rows;
  Tensor<T> out = Tensor<T>::zeros(out_shape);
  auto& ov = out.raw();
  bool rg = false;
  for (std::size_t s = 0; s < srcs.size(); ++s) {
    if (srcs[s].size(0) != idx[s].size())
      throw ShapeError("scatter_rows_sum: source row count does not match indices");
    const auto& sv = srcs[s].value();
    for (std::size_t i = 0; i < idx[s].size(); ++i) {
      if (idx[s][i] >= rows)
        throw ShapeError(msg("scatter_rows_sum: index ", idx[s][i], " out of ", rows));
      for (std::size_t j = 0; j < c; ++j) ov[idx[s][i] * c + j] += sv[i * c + j];
    }
    rg = rg || srcs[s].requires_grad();
  }
  Tape<T>* tape = Tape<T>::current();
  if (tape && rg) {
    std::vector<std::shared_ptr<TensorData<T>>> ptrs;
    ptrs.reserve(srcs.size());
    for (const auto& s : srcs) ptrs.push_back(s.ptr());
    out.ptr()->requires_grad = true;
    out.ptr()->tape_pos = tape->record(
        [ptrs = std::move(ptrs), po = out.ptr(), idx, c] {
          const auto& g = po->grad;
          for (std::size_t s = 0; s < ptrs.size(); ++s) {
            if (!ptrs[s]->requires_grad) continue;
            auto& gs = ptrs[s]->grad_buf();
            for (std::size_t i = 0; i < idx[s].size(); ++i)
              for (std::size_t j = 0; j < c; ++j)
                gs[i * c + j] += g[idx[s][i] * c + j];
          }
        },
        out.ptr());
  }
  return out;
}

// ---------------------------------------------------------------------------
// 3x3 same-padding convolution, NCHW. Shift-and-accumulate over whole rows; a
// zero-padded scratch copy of each input plane keeps the inner loops
// branch-free and unit-stride.

namespace detail {

// Copies plane into dst with a one-pixel zero border; dst is (h+2) x (w+2).
template <class T>
void pad_plane(const T* plane, std::size_t h, std::size_t w, T* dst) {
  const std::size_t wp = w + 2;
  std::fill(dst, dst + wp, T(0));
  std::fill(dst + (h + 1) * wp, dst + (h + 2) * wp, T(0));
  for (std::size_t y = 0; y < h; ++y) {
    T* d = dst + (y + 1) * wp;
    d[0] = T(0);
    d[w + 1] = T(0);
    std::copy(plane + y * w, plane + (y + 1) * w, d + 1);
  }
}

}  // namespace detail

template <class T>
Tensor<T> conv2d_3x3(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
  if (x.rank() != 4 || w.rank() != 4 || w.size(2) != 3 || w.size(3) != 3 ||
      x.size(1) != w.size(1) || b.numel() != w.size(0))
    throw ShapeError(msg("conv2d_3x3: incompatible shapes ", shape_str(x.shape()),
                         ", ", shape_str(w.shape()), ", ", shape_str(b.shape())));
  const std::size_t B = x.size(0), Ci = x.size(1), H = x.size(2), W = x.size(3);
  const std::size_t Co = w.size(0), HW = H * W, WP = W + 2;
  Tensor<T> out = Tensor<T>::zeros({B, Co, H, W});
  const T* xv = x.value().data();
  const T* wv = w.value().data();
  const T* bv = b.value().data();
  T* ov = out.raw().data();
  std::vector<T> padded(Ci * (H + 2) * WP);
  for (std::size_t n = 0; n < B; ++n) {
    for (std::size_t ci = 0; ci < Ci; ++ci)
      detail::pad_plane(xv + (n * Ci + ci) * HW, H, W, padded.data() + ci * (H + 2) * WP);
    for (std::size_t co = 0; co < Co; ++co) {
      T* o = ov + (n * Co + co) * HW;
      for (std::size_t i = 0; i < HW; ++i) o[i] = bv[co];
      for (std::size_t ci = 0; ci < Ci; ++ci) {
        const T* pad = padded.data() + ci * (H + 2) * WP;
        const T* wk = wv + (co * Ci + ci) * 9;
        for (std::size_t y = 0; y < H; ++y) {
          T* orow = o + y * W;
          const T* r0 = pad + y * WP;
          const T* r1 = r0 + WP;
          const T* r2 = r1 + WP;
          for (std::size_t xx = 0; xx < W; ++xx)
            orow[xx] += wk[0] * r0[xx] + wk[1] * r0[xx + 1] + wk[2] * r0[xx + 2] +
                        wk[3] * r1[xx] + wk[4] * r1[xx + 1] + wk[5] * r1[xx + 2] +
                        wk[6] * r2[xx] + wk[7] * r2[xx + 1] + wk[8] * r2[xx + 2];
        }
      }
    }
  }
  detail::finish(out, {&x, &w, &b},
                 [px = x.ptr(), pw = w.ptr(), pb = b.ptr(), po = out.ptr(), B, Ci, H, W, Co] {
                   const std::size_t HW = H * W, WP = W + 2;
                   const T* g = po->grad.data();
                   if (pb->requires_grad) {
                     auto& gb = pb->grad_buf();
                     for (std::size_t n = 0; n < B; ++n)
                       for (std::size_t co = 0; co < Co; ++co) {
                         const T* gi = g + (n * Co + co) * HW;
                         T acc = 0;
                         for (std::size_t i = 0; i < HW; ++i) acc += gi[i];
                         gb[co] += acc;
                       }
                   }
                   if (!px->requires_grad && !pw->requires_grad) return;
                   const T* xv2 = px->value.data();
                   const T* wv2 = pw->value.data();
                   T* gx = px->requires_grad ? px->grad_buf().data() : nullptr;
                   T* gw = pw->requires_grad ? pw->grad_buf().data() : nullptr;
                   std::vector<T> padded(Ci * (H + 2) * WP);
                   std::vector<T> gpad((H + 2) * WP);
                   for (std::size_t n = 0; n < B; ++n) {
                     if (gw)
                       for (std::size_t ci = 0; ci < Ci; ++ci)
                         detail::pad_plane(xv2 + (n * Ci + ci) * HW, H, W,
                                           padded.data() + ci * (H + 2) * WP);
                     for (std::size_t co = 0; co < Co; ++co) {
                       const T* go = g + (n * Co + co) * HW;
                       if (gw) {
                         // dW[k] = sum over pixels of g * shifted input
                         for (std::size_t ci = 0; ci < Ci; ++ci) {
                           const T* pad = padded.data() + ci * (H + 2) * WP;
                           T* gwk = gw + (co * Ci + ci) * 9;
                           T acc[9] = {};
                           for (std::size_t y = 0; y < H; ++y) {
                             const T* grow = go + y * W;
                             const T* r0 = pad + y * WP;
                             const T* r1 = r0 + WP;
                             const T* r2 = r1 + WP;
                             for (std::size_t xx = 0; xx < W; ++xx) {
                               T gv = grow[xx];
                               acc[0] += gv * r0[xx];
                               acc[1] += gv * r0[xx + 1];
                               acc[2] += gv * r0[xx + 2];
                               acc[3] += gv * r1[xx];
                               acc[4] += gv * r1[xx + 1];
                               acc[5] += gv * r1[xx + 2];
                               acc[6] += gv * r2[xx];
                               acc[7] += gv * r2[xx + 1];
                               acc[8] += gv * r2[xx + 2];
                             }
                           }
                           for (int k = 0; k < 9; ++k) gwk[k] += acc[k];
                         }
                       }
                       if (gx) {
                         // dIn gets g correlated with the flipped kernel;
                         // accumulate into a padded scratch, then crop.
                         for (std::size_t ci = 0; ci < Ci; ++ci) {
                           std::fill(gpad.begin(), gpad.end(), T(0));
                           const T* wk = wv2 + (co * Ci + ci) * 9;
                           for (std::size_t y = 0; y < H; ++y) {
                             const T* grow = go + y * W;
                             T* r0 = gpad.data() + y * WP;
                             T* r1 = r0 + WP;
                             T* r2 = r1 + WP;
                             for (std::size_t xx = 0; xx < W; ++xx) {
                               T gv = grow[xx];
                               r0[xx] += gv * wk[0];
                               r0[xx + 1] += gv * wk[1];
                               r0[xx + 2] += gv * wk[2];
                               r1[xx] += gv * wk[3];
                               r1[xx + 1] += gv * wk[4];
                               r1[xx + 2] += gv * wk[5];
                               r2[xx] += gv * wk[6];
                               r2[xx + 1] += gv * wk[7];
                               r2[xx + 2] += gv * wk[8];
                             }
                           }
                           T* gplane = gx + (n * Ci + ci) * HW;
                           for (std::size_t y = 0; y < H; ++y) {
                             const T* src = gpad.data() + (y + 1) * WP + 1;
                             T* dst = gplane + y * W;
                             for (std::size_t xx = 0; xx < W; ++xx) dst[xx] += src[xx];
                           }
                         }
                       }
                     }
                   }
                 });
  return out;
}

}  // namespace mofme
