#pragma once

// Differentiable op set over Tensor<T>.  Matrix products go through Eigen;
// everything else is explicit loops with fixed iteration order so results are
// bit-reproducible run to run.  Softmax variants are fused (mask handled
// inside the op, masked entries exactly zero) and cross-entropy fuses its
// log-softmax, so no intermediate ever holds -inf.

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include "memcom/rng.hpp"
#include "memcom/rowgemm.hpp"
#include "memcom/tensor.hpp"

namespace memcom {

template <typename T>
using MatRM = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapMat = Eigen::Map<MatRM<T>>;
template <typename T>
using MapConst = Eigen::Map<const MatRM<T>>;

template <typename T>
Tensor<T> randn(Rng& rng, Shape shape, double stddev, bool requires_grad = false,
                std::string name = "") {
  int64_t n = shape_numel(shape);
  std::vector<T> v(static_cast<size_t>(n));
  for (auto& x : v) x = static_cast<T>(rng.normal() * stddev);
  return Tensor<T>::leaf(std::move(shape), std::move(v), requires_grad, std::move(name));
}

// ---------------------------------------------------------------------------
// Elementwise and structural ops
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  MEMCOM_CHECK(a.shape() == b.shape(), "add: shape mismatch " + shape_str(a.shape()) + " vs " +
                                           shape_str(b.shape()));
  std::vector<T> out(a.data().size());
  for (size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + b.data()[i];
  return Tensor<T>::op_result(a.shape(), std::move(out), "add", {a, b},
                              [a, b](const std::vector<T>& go) {
                                int64_t n = static_cast<int64_t>(go.size());
                                if (a.requires_grad()) a.node()->accum_grad(go.data(), n);
                                if (b.requires_grad()) b.node()->accum_grad(go.data(), n);
                              });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  MEMCOM_CHECK(a.shape() == b.shape(), "mul: shape mismatch");
  std::vector<T> out(a.data().size());
  for (size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * b.data()[i];
  return Tensor<T>::op_result(
      a.shape(), std::move(out), "mul", {a, b}, [a, b](const std::vector<T>& go) {
        size_t n = go.size();
        std::vector<T> buf(n);
        if (a.requires_grad()) {
          for (size_t i = 0; i < n; ++i) buf[i] = go[i] * b.data()[i];
          a.node()->accum_grad(buf.data(), static_cast<int64_t>(n));
        }
        if (b.requires_grad()) {
          for (size_t i = 0; i < n; ++i) buf[i] = go[i] * a.data()[i];
          b.node()->accum_grad(buf.data(), static_cast<int64_t>(n));
        }
      });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, double c) {
  std::vector<T> out(a.data().size());
  T cc = static_cast<T>(c);
  for (size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * cc;
  return Tensor<T>::op_result(a.shape(), std::move(out), "scale", {a},
                              [a, cc](const std::vector<T>& go) {
                                if (!a.requires_grad()) return;
                                std::vector<T> buf(go.size());
                                for (size_t i = 0; i < go.size(); ++i) buf[i] = go[i] * cc;
                                a.node()->accum_grad(buf.data(), static_cast<int64_t>(go.size()));
                              });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  return add(a, scale(b, -1.0));
}

template <typename T>
Tensor<T> silu(const Tensor<T>& a) {
  std::vector<T> out(a.data().size());
  for (size_t i = 0; i < out.size(); ++i) {
    T x = a.data()[i];
    T s = T(1) / (T(1) + std::exp(-x));
    out[i] = x * s;
  }
  return Tensor<T>::op_result(a.shape(), std::move(out), "silu", {a},
                              [a](const std::vector<T>& go) {
                                if (!a.requires_grad()) return;
                                std::vector<T> buf(go.size());
                                for (size_t i = 0; i < go.size(); ++i) {
                                  T x = a.data()[i];
                                  T s = T(1) / (T(1) + std::exp(-x));
                                  buf[i] = go[i] * s * (T(1) + x * (T(1) - s));
                                }
                                a.node()->accum_grad(buf.data(), static_cast<int64_t>(go.size()));
                              });
}

template <typename T>
Tensor<T> sum(const Tensor<T>& a) {
  T acc = T(0);
  for (T v : a.data()) acc += v;
  return Tensor<T>::op_result({1}, {acc}, "sum", {a}, [a](const std::vector<T>& go) {
    if (!a.requires_grad()) return;
    std::vector<T> buf(a.data().size(), go[0]);
    a.node()->accum_grad(buf.data(), static_cast<int64_t>(buf.size()));
  });
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape) {
  MEMCOM_CHECK(shape_numel(shape) == a.numel(),
               "reshape: element count mismatch " + shape_str(a.shape()) + " -> " +
                   shape_str(shape));
  std::vector<T> out = a.data();
  return Tensor<T>::op_result(std::move(shape), std::move(out), "reshape", {a},
                              [a](const std::vector<T>& go) {
                                if (!a.requires_grad()) return;
                                a.node()->accum_grad(go.data(), static_cast<int64_t>(go.size()));
                              });
}

// Transpose of the trailing two axes; rank 2 or 3.
template <typename T>
Tensor<T> transpose_last2(const Tensor<T>& a) {
  MEMCOM_CHECK(a.rank() == 2 || a.rank() == 3, "transpose_last2: rank must be 2 or 3");
  Shape s = a.shape();
  size_t r = s.size();
  int64_t batch = (r == 3) ? s[0] : 1;
  int64_t rows = s[r - 2], cols = s[r - 1];
  Shape so = s;
  std::swap(so[r - 2], so[r - 1]);
  std::vector<T> out(a.data().size());
  for (int64_t b = 0; b < batch; ++b) {
    const T* src = a.data().data() + b * rows * cols;
    T* dst = out.data() + b * rows * cols;
    for (int64_t i = 0; i < rows; ++i)
      for (int64_t j = 0; j < cols; ++j) dst[j * rows + i] = src[i * cols + j];
  }
  return Tensor<T>::op_result(std::move(so), std::move(out), "transpose_last2", {a},
                              [a, batch, rows, cols](const std::vector<T>& go) {
                                if (!a.requires_grad()) return;
                                std::vector<T> buf(go.size());
                                for (int64_t b = 0; b < batch; ++b) {
                                  const T* src = go.data() + b * rows * cols;
                                  T* dst = buf.data() + b * rows * cols;
                                  for (int64_t j = 0; j < cols; ++j)
                                    for (int64_t i = 0; i < rows; ++i)
                                      dst[i * cols + j] = src[j * rows + i];
                                }
                                a.node()->accum_grad(buf.data(), static_cast<int64_t>(buf.size()));
                              });
}

// Permutation of a rank-3 tensor's axes.
template <typename T>
Tensor<T> permute3(const Tensor<T>& a, std::array<int, 3> perm) {
  MEMCOM_CHECK(a.rank() == 3, "permute3: rank must be 3");
  bool seen[3] = {false, false, false};
  for (int p : perm) {
    MEMCOM_CHECK(p >= 0 && p < 3 && !seen[p], "permute3: invalid permutation");
    seen[p] = true;
  }
  const Shape& s = a.shape();
  Shape so = {s[perm[0]], s[perm[1]], s[perm[2]]};
  int64_t stride_in[3] = {s[1] * s[2], s[2], 1};
  std::vector<T> out(a.data().size());
  int64_t idx = 0;
  for (int64_t i = 0; i < so[0]; ++i)
    for (int64_t j = 0; j < so[1]; ++j)
      for (int64_t k = 0; k < so[2]; ++k)
        out[static_cast<size_t>(idx++)] =
            a.data()[static_cast<size_t>(i * stride_in[perm[0]] + j * stride_in[perm[1]] +
                                         k * stride_in[perm[2]])];
  return Tensor<T>::op_result(
      std::move(so), std::move(out), "permute3", {a}, [a, perm, s](const std::vector<T>& go) {
        if (!a.requires_grad()) return;
        Shape so2 = {s[perm[0]], s[perm[1]], s[perm[2]]};
        int64_t stride_in[3] = {s[1] * s[2], s[2], 1};
        std::vector<T> buf(go.size());
        int64_t idx = 0;
        for (int64_t i = 0; i < so2[0]; ++i)
          for (int64_t j = 0; j < so2[1]; ++j)
            for (int64_t k = 0; k < so2[2]; ++k)
              buf[static_cast<size_t>(i * stride_in[perm[0]] + j * stride_in[perm[1]] +
                                      k * stride_in[perm[2]])] = go[static_cast<size_t>(idx++)];
        a.node()->accum_grad(buf.data(), static_cast<int64_t>(buf.size()));
      });
}

template <typename T>
Tensor<T> concat(int axis, const std::vector<Tensor<T>>& parts) {
  MEMCOM_CHECK(!parts.empty(), "concat: no inputs");
  const Shape& s0 = parts[0].shape();
  MEMCOM_CHECK(axis >= 0 && axis < static_cast<int>(s0.size()), "concat: axis out of range");
  Shape so = s0;
  so[axis] = 0;
  for (const auto& p : parts) {
    MEMCOM_CHECK(p.rank() == s0.size(), "concat: rank mismatch");
    for (size_t i = 0; i < s0.size(); ++i)
      if (static_cast<int>(i) != axis)
        MEMCOM_CHECK(p.shape()[i] == s0[i], "concat: shape mismatch off-axis");
    so[axis] += p.shape()[axis];
  }
  int64_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= so[i];
  for (size_t i = axis + 1; i < so.size(); ++i) inner *= so[i];
  std::vector<T> out(static_cast<size_t>(shape_numel(so)));
  int64_t off = 0;
  for (const auto& p : parts) {
    int64_t pa = p.shape()[axis];
    for (int64_t o = 0; o < outer; ++o)
      std::copy_n(p.data().data() + o * pa * inner, pa * inner,
                  out.data() + (o * so[axis] + off) * inner);
    off += pa;
  }
  std::vector<Tensor<T>> parents = parts;
  int64_t total_axis = so[axis];
  return Tensor<T>::op_result(
      std::move(so), std::move(out), "concat", parents,
      [parents, axis, outer, inner, total_axis](const std::vector<T>& go) {
        int64_t off = 0;
        for (const auto& p : parents) {
          int64_t pa = p.shape()[axis];
          if (p.requires_grad()) {
            std::vector<T> buf(static_cast<size_t>(p.numel()));
            for (int64_t o = 0; o < outer; ++o)
              std::copy_n(go.data() + (o * total_axis + off) * inner, pa * inner,
                          buf.data() + o * pa * inner);
            p.node()->accum_grad(buf.data(), static_cast<int64_t>(buf.size()));
          }
          off += pa;
        }
      });
}

// Half-open range [lo, hi) along the given axis.
template <typename T>
Tensor<T> slice(const Tensor<T>& a, int axis, int64_t lo, int64_t hi) {
  const Shape& s = a.shape();
  MEMCOM_CHECK(axis >= 0 && axis < static_cast<int>(s.size()), "slice: axis out of range");
  MEMCOM_CHECK(0 <= lo && lo <= hi && hi <= s[axis], "slice: range out of bounds");
  Shape so = s;
  so[axis] = hi - lo;
  int64_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= s[i];
  for (size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
  std::vector<T> out(static_cast<size_t>(shape_numel(so)));
  for (int64_t o = 0; o < outer; ++o)
    std::copy_n(a.data().data() + (o * s[axis] + lo) * inner, (hi - lo) * inner,
                out.data() + o * (hi - lo) * inner);
  int64_t ax_in = s[axis];
  return Tensor<T>::op_result(std::move(so), std::move(out), "slice", {a},
                              [a, axis, lo, hi, outer, inner, ax_in](const std::vector<T>& go) {
                                if (!a.requires_grad()) return;
                                std::vector<T> buf(static_cast<size_t>(a.numel()), T(0));
                                for (int64_t o = 0; o < outer; ++o)
                                  std::copy_n(go.data() + o * (hi - lo) * inner, (hi - lo) * inner,
                                              buf.data() + (o * ax_in + lo) * inner);
                                a.node()->accum_grad(buf.data(), static_cast<int64_t>(buf.size()));
                              });
}

// Grouped-query expansion: output head q reads input head q / groups.
template <typename T>
Tensor<T> repeat_heads(const Tensor<T>& a, int64_t groups) {
  MEMCOM_CHECK(a.rank() == 3, "repeat_heads: rank must be 3");
  MEMCOM_CHECK(groups >= 1, "repeat_heads: groups must be >= 1");
  const Shape& s = a.shape();
  int64_t kv = s[0], rows = s[1] * s[2];
  Shape so = {kv * groups, s[1], s[2]};
  std::vector<T> out(static_cast<size_t>(shape_numel(so)));
  for (int64_t h = 0; h < kv * groups; ++h)
    std::copy_n(a.data().data() + (h / groups) * rows, rows, out.data() + h * rows);
  return Tensor<T>::op_result(std::move(so), std::move(out), "repeat_heads", {a},
                              [a, groups, kv, rows](const std::vector<T>& go) {
                                if (!a.requires_grad()) return;
                                std::vector<T> buf(static_cast<size_t>(a.numel()), T(0));
                                for (int64_t h = 0; h < kv * groups; ++h) {
                                  const T* src = go.data() + h * rows;
                                  T* dst = buf.data() + (h / groups) * rows;
                                  for (int64_t i = 0; i < rows; ++i) dst[i] += src[i];
                                }
                                a.node()->accum_grad(buf.data(), static_cast<int64_t>(buf.size()));
                              });
}

// ---------------------------------------------------------------------------
// Matrix product
// ---------------------------------------------------------------------------

namespace detail {

// Forward products go through the row-independent kernel (see rowgemm.hpp);
// gradient products have no bitwise contract and use Eigen for speed.
template <typename T>
void gemm(const T* a, const T* b, T* c, int64_t m, int64_t k, int64_t n, bool accumulate) {
  if (!accumulate) {
    rowgemm(a, b, c, m, k, n);
    return;
  }
  MapConst<T> A(a, m, k);
  MapConst<T> B(b, k, n);
  MapMat<T> C(c, m, n);
  C.noalias() += A * B;
}

template <typename T>
void gemm_at(const T* a, const T* b, T* c, int64_t m, int64_t k, int64_t n, bool accumulate) {
  // c[k,n] (+)= a[m,k]^T * b[m,n]  with a given as [m,k]
  MapConst<T> A(a, m, k);
  MapConst<T> B(b, m, n);
  MapMat<T> C(c, k, n);
  if (accumulate)
    C.noalias() += A.transpose() * B;
  else
    C.noalias() = A.transpose() * B;
}

template <typename T>
void gemm_bt(const T* a, const T* b, T* c, int64_t m, int64_t k, int64_t n, bool accumulate) {
  // c[m,k] (+)= a[m,n] * b[k,n]^T  with b given as [k,n]
  MapConst<T> A(a, m, n);
  MapConst<T> B(b, k, n);
  MapMat<T> C(c, m, k);
  if (accumulate)
    C.noalias() += A * B.transpose();
  else
    C.noalias() = A * B.transpose();
}

}  // namespace detail

// [m,k] x [k,n]; [B,m,k] x [B,k,n]; or [B,m,k] x [k,n] (weights broadcast
// over the batch).
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  size_t ra = a.rank(), rb = b.rank();
  MEMCOM_CHECK((ra == 2 && rb == 2) || (ra == 3 && rb == 3) || (ra == 3 && rb == 2),
               "matmul: unsupported ranks");
  int64_t batch = (ra == 3) ? a.shape()[0] : 1;
  int64_t m = a.shape()[ra - 2], k = a.shape()[ra - 1];
  int64_t kb = b.shape()[rb - 2], n = b.shape()[rb - 1];
  MEMCOM_CHECK(k == kb, "matmul: inner dim mismatch " + shape_str(a.shape()) + " x " +
                            shape_str(b.shape()));
  if (ra == 3 && rb == 3)
    MEMCOM_CHECK(a.shape()[0] == b.shape()[0], "matmul: batch dim mismatch");
  bool b_broadcast = (ra == 3 && rb == 2);
  Shape so = (ra == 2) ? Shape{m, n} : Shape{batch, m, n};
  std::vector<T> out(static_cast<size_t>(shape_numel(so)));
  for (int64_t bi = 0; bi < batch; ++bi) {
    const T* pa = a.data().data() + bi * m * k;
    const T* pb = b.data().data() + (b_broadcast || rb == 2 ? 0 : bi * k * n);
    detail::gemm(pa, pb, out.data() + bi * m * n, m, k, n, false);
  }
  return Tensor<T>::op_result(
      std::move(so), std::move(out), "matmul", {a, b},
      [a, b, batch, m, k, n, b_broadcast, rb](const std::vector<T>& go) {
        if (a.requires_grad()) {
          std::vector<T> buf(static_cast<size_t>(a.numel()));
          for (int64_t bi = 0; bi < batch; ++bi) {
            const T* pg = go.data() + bi * m * n;
            const T* pb = b.data().data() + (b_broadcast || rb == 2 ? 0 : bi * k * n);
            detail::gemm_bt(pg, pb, buf.data() + bi * m * k, m, k, n, false);
          }
          a.node()->accum_grad(buf.data(), static_cast<int64_t>(buf.size()));
        }
        if (b.requires_grad()) {
          std::vector<T> buf(static_cast<size_t>(b.numel()), T(0));
          for (int64_t bi = 0; bi < batch; ++bi) {
            const T* pa = a.data().data() + bi * m * k;
            const T* pg = go.data() + bi * m * n;
            T* pc = buf.data() + (b_broadcast || rb == 2 ? 0 : bi * k * n);
            detail::gemm_at(pa, pg, pc, m, k, n, b_broadcast || rb == 2);
          }
          b.node()->accum_grad(buf.data(), static_cast<int64_t>(buf.size()));
        }
      });
}

// ---------------------------------------------------------------------------
// Normalization, softmax, rotary embedding, losses
// ---------------------------------------------------------------------------

// Root-mean-square norm over the last axis with a learned gain.
template <typename T>
Tensor<T> rmsnorm(const Tensor<T>& x, const Tensor<T>& gain, double eps) {
  MEMCOM_CHECK(x.rank() >= 1 && gain.rank() == 1, "rmsnorm: bad ranks");
  int64_t d = x.shape().back();
  MEMCOM_CHECK(gain.shape()[0] == d, "rmsnorm: gain length mismatch");
  int64_t rows = x.numel() / d;
  std::vector<T> out(x.data().size());
  T te = static_cast<T>(eps);
  for (int64_t r = 0; r < rows; ++r) {
    const T* px = x.data().data() + r * d;
    T* po = out.data() + r * d;
    T ms = T(0);
    for (int64_t j = 0; j < d; ++j) ms += px[j] * px[j];
    ms /= static_cast<T>(d);
    T inv = T(1) / std::sqrt(ms + te);
    for (int64_t j = 0; j < d; ++j) po[j] = px[j] * inv * gain.data()[static_cast<size_t>(j)];
  }
  return Tensor<T>::op_result(
      x.shape(), std::move(out), "rmsnorm", {x, gain},
      [x, gain, d, rows, te](const std::vector<T>& go) {
        std::vector<T> dx(x.requires_grad() ? x.data().size() : 0);
        std::vector<T> dg(gain.requires_grad() ? static_cast<size_t>(d) : 0, T(0));
        for (int64_t r = 0; r < rows; ++r) {
          const T* px = x.data().data() + r * d;
          const T* pg = go.data() + r * d;
          T ms = T(0);
          for (int64_t j = 0; j < d; ++j) ms += px[j] * px[j];
          ms /= static_cast<T>(d);
          T inv = T(1) / std::sqrt(ms + te);
          if (x.requires_grad()) {
            T dot = T(0);
            for (int64_t j = 0; j < d; ++j)
              dot += pg[j] * gain.data()[static_cast<size_t>(j)] * px[j];
            T c = inv * inv * inv * dot / static_cast<T>(d);
            T* pdx = dx.data() + r * d;
            for (int64_t j = 0; j < d; ++j)
              pdx[j] = inv * pg[j] * gain.data()[static_cast<size_t>(j)] - c * px[j];
          }
          if (gain.requires_grad())
            for (int64_t j = 0; j < d; ++j) dg[static_cast<size_t>(j)] += pg[j] * px[j] * inv;
        }
        if (x.requires_grad()) x.node()->accum_grad(dx.data(), static_cast<int64_t>(dx.size()));
        if (gain.requires_grad()) gain.node()->accum_grad(dg.data(), d);
      });
}

// Softmax over the last axis, numerically stabilized by max subtraction.
template <typename T>
Tensor<T> softmax_lastdim(const Tensor<T>& x) {
  int64_t n = x.shape().back();
  int64_t rows = x.numel() / n;
  std::vector<T> out(x.data().size());
  for (int64_t r = 0; r < rows; ++r) {
    const T* px = x.data().data() + r * n;
    T* po = out.data() + r * n;
    T mx = px[0];
    for (int64_t j = 1; j < n; ++j) mx = std::max(mx, px[j]);
    T z = T(0);
    for (int64_t j = 0; j < n; ++j) {
      po[j] = std::exp(px[j] - mx);
      z += po[j];
    }
    T invz = T(1) / z;
    for (int64_t j = 0; j < n; ++j) po[j] *= invz;
  }
  std::vector<T> value = out;
  return Tensor<T>::op_result(
      x.shape(), std::move(value), "softmax", {x},
      [x, probs = std::move(out), n, rows](const std::vector<T>& go) {
        if (!x.requires_grad()) return;
        std::vector<T> buf(go.size());
        for (int64_t r = 0; r < rows; ++r) {
          const T* pp = probs.data() + r * n;
          const T* pg = go.data() + r * n;
          T* pb = buf.data() + r * n;
          T dot = T(0);
          for (int64_t j = 0; j < n; ++j) dot += pp[j] * pg[j];
          for (int64_t j = 0; j < n; ++j) pb[j] = pp[j] * (pg[j] - dot);
        }
        x.node()->accum_grad(buf.data(), static_cast<int64_t>(buf.size()));
      });
}

// Causal softmax over attention scores [h, Tq, Tk] where Tk = prefix + Tq.
// Query j may attend keys [0, prefix + j]; masked entries are exactly zero and
// row statistics are taken over the allowed range only.
template <typename T>
Tensor<T> causal_softmax(const Tensor<T>& scores, int64_t prefix) {
  MEMCOM_CHECK(scores.rank() == 3, "causal_softmax: rank must be 3");
  int64_t h = scores.shape()[0], tq = scores.shape()[1], tk = scores.shape()[2];
  MEMCOM_CHECK(prefix >= 0 && tk == prefix + tq,
               "causal_softmax: key length must equal prefix + query length");
  std::vector<T> out(scores.data().size(), T(0));
  for (int64_t hh = 0; hh < h; ++hh)
    for (int64_t j = 0; j < tq; ++j) {
      int64_t allowed = prefix + j + 1;
      const T* ps = scores.data().data() + (hh * tq + j) * tk;
      T* po = out.data() + (hh * tq + j) * tk;
      T mx = ps[0];
      for (int64_t c = 1; c < allowed; ++c) mx = std::max(mx, ps[c]);
      T z = T(0);
      for (int64_t c = 0; c < allowed; ++c) {
        po[c] = std::exp(ps[c] - mx);
        z += po[c];
      }
      T invz = T(1) / z;
      for (int64_t c = 0; c < allowed; ++c) po[c] *= invz;
    }
  std::vector<T> value = out;
  Tensor<T> result = Tensor<T>::op_result(
      scores.shape(), std::move(value), "causal_softmax", {scores},
      [scores, probs = std::move(out), h, tq, tk, prefix](const std::vector<T>& go) {
        if (!scores.requires_grad()) return;
        std::vector<T> buf(go.size(), T(0));
        for (int64_t hh = 0; hh < h; ++hh)
          for (int64_t j = 0; j < tq; ++j) {
            int64_t allowed = prefix + j + 1;
            const T* pp = probs.data() + (hh * tq + j) * tk;
            const T* pg = go.data() + (hh * tq + j) * tk;
            T* pb = buf.data() + (hh * tq + j) * tk;
            T dot = T(0);
            for (int64_t c = 0; c < allowed; ++c) dot += pp[c] * pg[c];
            for (int64_t c = 0; c < allowed; ++c) pb[c] = pp[c] * (pg[c] - dot);
          }
        scores.node()->accum_grad(buf.data(), static_cast<int64_t>(buf.size()));
      });
  return result;
}

// Rotary position embedding over [T, H, D] with explicit integer positions.
// Channel pair (2i, 2i+1) rotates by pos * base^(-2i/D).  Angles are computed
// in double regardless of T.
template <typename T>
Tensor<T> rope_apply(const Tensor<T>& x, const std::vector<int64_t>& positions, double base) {
  MEMCOM_CHECK(x.rank() == 3, "rope_apply: rank must be 3");
  int64_t t = x.shape()[0], h = x.shape()[1], d = x.shape()[2];
  MEMCOM_CHECK(d % 2 == 0, "rope_apply: head dim must be even");
  MEMCOM_CHECK(static_cast<int64_t>(positions.size()) == t,
               "rope_apply: positions length mismatch");
  int64_t half = d / 2;
  std::vector<double> inv_freq(static_cast<size_t>(half));
  for (int64_t i = 0; i < half; ++i)
    inv_freq[static_cast<size_t>(i)] = std::pow(base, -2.0 * static_cast<double>(i) /
                                                          static_cast<double>(d));
  std::vector<T> out(x.data().size());
  for (int64_t tt = 0; tt < t; ++tt) {
    double pos = static_cast<double>(positions[static_cast<size_t>(tt)]);
    for (int64_t hh = 0; hh < h; ++hh) {
      const T* px = x.data().data() + (tt * h + hh) * d;
      T* po = out.data() + (tt * h + hh) * d;
      for (int64_t i = 0; i < half; ++i) {
        double th = pos * inv_freq[static_cast<size_t>(i)];
        T c = static_cast<T>(std::cos(th)), s = static_cast<T>(std::sin(th));
        T a = px[2 * i], b = px[2 * i + 1];
        po[2 * i] = a * c - b * s;
        po[2 * i + 1] = a * s + b * c;
      }
    }
  }
  return Tensor<T>::op_result(
      x.shape(), std::move(out), "rope", {x},
      [x, positions, inv_freq, t, h, d, half](const std::vector<T>& go) {
        if (!x.requires_grad()) return;
        std::vector<T> buf(go.size());
        for (int64_t tt = 0; tt < t; ++tt) {
          double pos = static_cast<double>(positions[static_cast<size_t>(tt)]);
          for (int64_t hh = 0; hh < h; ++hh) {
            const T* pg = go.data() + (tt * h + hh) * d;
            T* pb = buf.data() + (tt * h + hh) * d;
            for (int64_t i = 0; i < half; ++i) {
              double th = pos * inv_freq[static_cast<size_t>(i)];
              T c = static_cast<T>(std::cos(th)), s = static_cast<T>(std::sin(th));
              T da = pg[2 * i], db = pg[2 * i + 1];
              pb[2 * i] = da * c + db * s;
              pb[2 * i + 1] = -da * s + db * c;
            }
          }
        }
        x.node()->accum_grad(buf.data(), static_cast<int64_t>(buf.size()));
      });
}

// Token embedding rows gathered by id.
template <typename T>
Tensor<T> embedding_lookup(const Tensor<T>& table, const std::vector<int32_t>& ids) {
  MEMCOM_CHECK(table.rank() == 2, "embedding_lookup: table must be rank 2");
  int64_t v = table.shape()[0], d = table.shape()[1];
  int64_t n = static_cast<int64_t>(ids.size());
  std::vector<T> out(static_cast<size_t>(n * d));
  for (int64_t i = 0; i < n; ++i) {
    int32_t id = ids[static_cast<size_t>(i)];
    MEMCOM_CHECK(id >= 0 && id < v, "embedding_lookup: token id out of range");
    std::copy_n(table.data().data() + static_cast<int64_t>(id) * d, d, out.data() + i * d);
  }
  return Tensor<T>::op_result({n, d}, std::move(out), "embedding_lookup", {table},
                              [table, ids, d](const std::vector<T>& go) {
                                if (!table.requires_grad()) return;
                                std::vector<T> buf(table.data().size(), T(0));
                                for (size_t i = 0; i < ids.size(); ++i) {
                                  const T* src = go.data() + static_cast<int64_t>(i) * d;
                                  T* dst = buf.data() + static_cast<int64_t>(ids[i]) * d;
                                  for (int64_t j = 0; j < d; ++j) dst[j] += src[j];
                                }
                                table.node()->accum_grad(buf.data(),
                                                         static_cast<int64_t>(buf.size()));
                              });
}

// Mean masked token-level cross-entropy with a fused, stabilized log-softmax.
// logits [n, V]; loss = mean over masked rows of (logsumexp(row) - row[target]).
template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, const std::vector<int32_t>& targets,
                        const std::vector<uint8_t>& mask) {
  MEMCOM_CHECK(logits.rank() == 2, "cross_entropy: logits must be rank 2");
  int64_t n = logits.shape()[0], v = logits.shape()[1];
  MEMCOM_CHECK(static_cast<int64_t>(targets.size()) == n, "cross_entropy: targets length");
  MEMCOM_CHECK(static_cast<int64_t>(mask.size()) == n, "cross_entropy: mask length");
  int64_t m_count = 0;
  for (uint8_t b : mask) m_count += (b != 0);
  MEMCOM_CHECK(m_count > 0, "cross_entropy: mask selects no positions");
  T acc = T(0);
  for (int64_t i = 0; i < n; ++i) {
    if (!mask[static_cast<size_t>(i)]) continue;
    int32_t tgt = targets[static_cast<size_t>(i)];
    MEMCOM_CHECK(tgt >= 0 && tgt < v, "cross_entropy: target id out of range");
    const T* p = logits.data().data() + i * v;
    T mx = p[0];
    for (int64_t j = 1; j < v; ++j) mx = std::max(mx, p[j]);
    T z = T(0);
    for (int64_t j = 0; j < v; ++j) z += std::exp(p[j] - mx);
    acc += std::log(z) + mx - p[tgt];
  }
  T loss = acc / static_cast<T>(m_count);
  return Tensor<T>::op_result(
      {1}, {loss}, "cross_entropy", {logits},
      [logits, targets, mask, n, v, m_count](const std::vector<T>& go) {
        if (!logits.requires_grad()) return;
        T g = go[0] / static_cast<T>(m_count);
        std::vector<T> buf(logits.data().size(), T(0));
        for (int64_t i = 0; i < n; ++i) {
          if (!mask[static_cast<size_t>(i)]) continue;
          const T* p = logits.data().data() + i * v;
          T* pb = buf.data() + i * v;
          T mx = p[0];
          for (int64_t j = 1; j < v; ++j) mx = std::max(mx, p[j]);
          T z = T(0);
          for (int64_t j = 0; j < v; ++j) {
            pb[j] = std::exp(p[j] - mx);
            z += pb[j];
          }
          T invz = T(1) / z;
          for (int64_t j = 0; j < v; ++j) pb[j] *= invz * g;
          pb[targets[static_cast<size_t>(i)]] -= g;
        }
        logits.node()->accum_grad(buf.data(), static_cast<int64_t>(buf.size()));
      });
}

// Row-wise log-softmax values for scoring (no graph; evaluation helper).
template <typename T>
std::vector<T> log_softmax_row(const T* row, int64_t v) {
  T mx = row[0];
  for (int64_t j = 1; j < v; ++j) mx = std::max(mx, row[j]);
  T z = T(0);
  for (int64_t j = 0; j < v; ++j) z += std::exp(row[j] - mx);
  T lz = std::log(z) + mx;
  std::vector<T> out(static_cast<size_t>(v));
  for (int64_t j = 0; j < v; ++j) out[static_cast<size_t>(j)] = row[j] - lz;
  return out;
}

}  // namespace memcom
