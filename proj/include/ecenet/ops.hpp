#pragma once

#include <Eigen/Core>
#include <unsupported/Eigen/SpecialFunctions>
#include <cmath>
#include <limits>
#include <memory>
#include <numbers>
#include <vector>

#include "ecenet/tape.hpp"
#include "ecenet/tensor.hpp"

// Differentiable operations over Var<T>. Every op computes its value eagerly
// and records a closure that adds its contribution to the parents' gradients.

namespace ecenet {

namespace detail {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using ConstMap = Eigen::Map<const RowMat<T>>;
template <typename T>
using MutMap = Eigen::Map<RowMat<T>>;

inline constexpr std::size_t kSmallGemm = std::size_t{1} << 16;

/// Plain loop kernel: every output element is one fused multiply-add chain
/// over k in index order, independent of its row or column position.
template <typename T>
void small_gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b,
                T* c, bool accumulate) {
  Buffer<T> row(n);
  for (std::size_t i = 0; i < m; ++i) {
    std::fill(row.begin(), row.end(), T(0));
    for (std::size_t p = 0; p < k; ++p) {
      const T av = trans_a ? a[p * m + i] : a[i * k + p];
      if (trans_b) {
        for (std::size_t j = 0; j < n; ++j) row[j] = std::fma(av, b[j * k + p], row[j]);
      } else {
        const T* bp = b + p * n;
        for (std::size_t j = 0; j < n; ++j) row[j] = std::fma(av, bp[j], row[j]);
      }
    }
    T* ci = c + i * n;
    for (std::size_t j = 0; j < n; ++j) ci[j] = accumulate ? ci[j] + row[j] : row[j];
  }
}

/// C[m x n] (+)= op(A) * op(B). A is stored k x m when trans_a, else m x k;
/// B is stored n x k when trans_b, else k x n.
template <typename T>
void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c,
          bool accumulate) {
  if (m * n * k <= kSmallGemm) {
    small_gemm(trans_a, trans_b, m, n, k, a, b, c, accumulate);
    return;
  }
  const auto M = static_cast<Eigen::Index>(m);
  const auto N = static_cast<Eigen::Index>(n);
  const auto K = static_cast<Eigen::Index>(k);
  MutMap<T> C(c, M, N);
  if (!accumulate) C.setZero();
  if (!trans_a && !trans_b) {
    C.noalias() += ConstMap<T>(a, M, K) * ConstMap<T>(b, K, N);
  } else if (!trans_a && trans_b) {
    C.noalias() += ConstMap<T>(a, M, K) * ConstMap<T>(b, N, K).transpose();
  } else if (trans_a && !trans_b) {
    C.noalias() += ConstMap<T>(a, K, M).transpose() * ConstMap<T>(b, K, N);
  } else {
    C.noalias() += ConstMap<T>(a, K, M).transpose() * ConstMap<T>(b, N, K).transpose();
  }
}

/// Splits a shape around `axis` into (outer, n, inner) so element (o, j, i)
/// sits at (o * n + j) * inner + i.
struct AxisSplit {
  std::size_t outer = 1, n = 1, inner = 1;
};

inline AxisSplit split_axis(const Shape& s, std::size_t axis) {
  if (axis >= s.size()) throw ContractError("axis " + std::to_string(axis) + " out of range for " + shape_str(s));
  AxisSplit a;
  for (std::size_t i = 0; i < axis; ++i) a.outer *= s[i];
  a.n = s[axis];
  for (std::size_t i = axis + 1; i < s.size(); ++i) a.inner *= s[i];
  return a;
}

inline Shape drop_axis(const Shape& s, std::size_t axis) {
  Shape out;
  for (std::size_t i = 0; i < s.size(); ++i)
    if (i != axis) out.push_back(s[i]);
  if (out.empty()) out.push_back(1);
  return out;
}

inline void require_same_shape(const char* op, const Shape& a, const Shape& b) {
  if (a != b) throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a) + " vs " + shape_str(b));
}

inline void require_rank(const char* op, const Shape& s, std::size_t r) {
  if (s.size() != r) {
    throw DimensionError(std::string(op) + ": expected rank " + std::to_string(r) + ", got " + shape_str(s));
  }
}

template <typename T>
void add_into(Tensor<T>& dst, const Tensor<T>& src) {
  for (std::size_t i = 0; i < dst.numel(); ++i) dst[i] += src[i];
}

/// Vectorized elementwise exp.
template <typename T>
void exp_inplace(T* p, std::size_t n) {
  Eigen::Map<Eigen::Array<T, Eigen::Dynamic, 1>> a(p, static_cast<Eigen::Index>(n));
  a = a.exp();
}

template <typename T>
void exp_inplace(Tensor<T>& t) {
  exp_inplace(t.ptr(), t.numel());
}

template <typename T>
T stable_sigmoid(T x) {
  if (x >= 0) return T(1) / (T(1) + std::exp(-x));
  const T e = std::exp(x);
  return e / (T(1) + e);
}

/// log(sigmoid(x)) without overflow.
template <typename T>
T log_sigmoid(T x) {
  return x >= 0 ? -std::log1p(std::exp(-x)) : x - std::log1p(std::exp(x));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  detail::require_same_shape("add", a.shape(), b.shape());
  Tensor<T> out = a.value();
  detail::add_into(out, b.value());
  return a.tape()->record("add", std::move(out), {a, b}, [a, b](const Tensor<T>& g, const Tensor<T>&) {
    if (a.requires_grad()) detail::add_into(a.tape()->grad(a), g);
    if (b.requires_grad()) detail::add_into(b.tape()->grad(b), g);
  });
}

template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  detail::require_same_shape("sub", a.shape(), b.shape());
  Tensor<T> out = a.value();
  const auto& bv = b.value();
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] -= bv[i];
  return a.tape()->record("sub", std::move(out), {a, b}, [a, b](const Tensor<T>& g, const Tensor<T>&) {
    if (a.requires_grad()) detail::add_into(a.tape()->grad(a), g);
    if (b.requires_grad()) {
      auto& gb = b.tape()->grad(b);
      for (std::size_t i = 0; i < g.numel(); ++i) gb[i] -= g[i];
    }
  });
}

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  detail::require_same_shape("mul", a.shape(), b.shape());
  Tensor<T> out = a.value();
  const auto& bv = b.value();
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] *= bv[i];
  return a.tape()->record("mul", std::move(out), {a, b}, [a, b](const Tensor<T>& g, const Tensor<T>&) {
    if (a.requires_grad()) {
      auto& ga = a.tape()->grad(a);
      const auto& bv = b.value();
      for (std::size_t i = 0; i < g.numel(); ++i) ga[i] += g[i] * bv[i];
    }
    if (b.requires_grad()) {
      auto& gb = b.tape()->grad(b);
      const auto& av = a.value();
      for (std::size_t i = 0; i < g.numel(); ++i) gb[i] += g[i] * av[i];
    }
  });
}

template <typename T>
Var<T> scale(const Var<T>& x, T s) {
  Tensor<T> out = x.value();
  for (auto& v : out.vec()) v *= s;
  return x.tape()->record("scale", std::move(out), {x}, [x, s](const Tensor<T>& g, const Tensor<T>&) {
    auto& gx = x.tape()->grad(x);
    for (std::size_t i = 0; i < g.numel(); ++i) gx[i] += g[i] * s;
  });
}

/// out[c, ...] = x[c, ...] * s[c]; s has one entry per leading-axis slice.
template <typename T>
Var<T> mul_channels(const Var<T>& x, const Var<T>& s) {
  const std::size_t c = x.dim(0);
  if (s.numel() != c) {
    throw DimensionError("mul_channels: " + shape_str(s.shape()) + " does not match channels of " +
                         shape_str(x.shape()));
  }
  const std::size_t plane = x.numel() / c;
  Tensor<T> out = x.value();
  const auto& sv = s.value();
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t p = 0; p < plane; ++p) out[ch * plane + p] *= sv[ch];
  return x.tape()->record("mul_channels", std::move(out), {x, s}, [x, s, c, plane](const Tensor<T>& g, const Tensor<T>&) {
    if (x.requires_grad()) {
      auto& gx = x.tape()->grad(x);
      const auto& sv = s.value();
      for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t p = 0; p < plane; ++p) gx[ch * plane + p] += g[ch * plane + p] * sv[ch];
    }
    if (s.requires_grad()) {
      auto& gs = s.tape()->grad(s);
      const auto& xv = x.value();
      for (std::size_t ch = 0; ch < c; ++ch) {
        T acc = 0;
        for (std::size_t p = 0; p < plane; ++p) acc += g[ch * plane + p] * xv[ch * plane + p];
        gs[ch] += acc;
      }
    }
  });
}

template <typename T>
Var<T> sigmoid(const Var<T>& x) {
  Tensor<T> out = x.value();
  for (auto& v : out.vec()) v = detail::stable_sigmoid(v);
  return x.tape()->record("sigmoid", std::move(out), {x}, [x](const Tensor<T>& g, const Tensor<T>& yv) {
    auto& gx = x.tape()->grad(x);
    for (std::size_t i = 0; i < g.numel(); ++i) gx[i] += g[i] * yv[i] * (T(1) - yv[i]);
  });
}

/// Exact (erf-based) GELU.
template <typename T>
Var<T> gelu(const Var<T>& x) {
  using Arr = Eigen::Array<T, Eigen::Dynamic, 1>;
  const auto& xv = x.value();
  const auto n = static_cast<Eigen::Index>(xv.numel());
  Eigen::Map<const Arr> xa(xv.ptr(), n);
  auto cdf = std::make_shared<Arr>(T(0.5) * (T(1) + (xa * T(std::numbers::sqrt2 / 2)).erf()));
  Tensor<T> out(xv.shape());
  Eigen::Map<Arr>(out.ptr(), n) = xa * *cdf;
  return x.tape()->record("gelu", std::move(out), {x}, [x, n, cdf](const Tensor<T>& g, const Tensor<T>&) {
    Eigen::Map<const Arr> xa(x.value().ptr(), n), ga(g.ptr(), n);
    const T inv_sqrt_2pi = T(std::numbers::inv_sqrtpi / std::numbers::sqrt2);
    Eigen::Map<Arr>(x.tape()->grad(x).ptr(), n) += ga * (*cdf + xa * inv_sqrt_2pi * (T(-0.5) * xa.square()).exp());
  });
}

// ---------------------------------------------------------------------------
// Linear algebra

template <typename T>
Var<T> matmul(const Var<T>& a, const Var<T>& b) {
  detail::require_rank("matmul", a.shape(), 2);
  detail::require_rank("matmul", b.shape(), 2);
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) {
    throw DimensionError("matmul: inner extents disagree, " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  }
  Tensor<T> out({m, n});
  detail::gemm(false, false, m, n, k, a.value().ptr(), b.value().ptr(), out.ptr(), false);
  return a.tape()->record("matmul", std::move(out), {a, b}, [a, b, m, n, k](const Tensor<T>& g, const Tensor<T>&) {
    if (a.requires_grad()) detail::gemm(false, true, m, k, n, g.ptr(), b.value().ptr(), a.tape()->grad(a).ptr(), true);
    if (b.requires_grad()) detail::gemm(true, false, k, n, m, a.value().ptr(), g.ptr(), b.tape()->grad(b).ptr(), true);
  });
}

/// x[L x in] * w[out x in]^T + bias[out].
template <typename T>
Var<T> linear(const Var<T>& x, const Var<T>& w, const Var<T>& bias) {
  detail::require_rank("linear", x.shape(), 2);
  detail::require_rank("linear", w.shape(), 2);
  const std::size_t rows = x.dim(0), in = x.dim(1), outw = w.dim(0);
  if (w.dim(1) != in || bias.numel() != outw) {
    throw DimensionError("linear: input " + shape_str(x.shape()) + " incompatible with weight " +
                         shape_str(w.shape()) + " / bias " + shape_str(bias.shape()));
  }
  Tensor<T> out({rows, outw});
  detail::gemm(false, true, rows, outw, in, x.value().ptr(), w.value().ptr(), out.ptr(), false);
  const auto& bv = bias.value();
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t o = 0; o < outw; ++o) out[r * outw + o] += bv[o];
  return x.tape()->record("linear", std::move(out), {x, w, bias}, [x, w, bias, rows, in, outw](const Tensor<T>& g, const Tensor<T>&) {
    if (x.requires_grad()) detail::gemm(false, false, rows, in, outw, g.ptr(), w.value().ptr(), x.tape()->grad(x).ptr(), true);
    if (w.requires_grad()) detail::gemm(true, false, outw, in, rows, g.ptr(), x.value().ptr(), w.tape()->grad(w).ptr(), true);
    if (bias.requires_grad()) {
      auto& gb = bias.tape()->grad(bias);
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t o = 0; o < outw; ++o) gb[o] += g[r * outw + o];
    }
  });
}

/// Per-pixel channel mixing: out[C_out x H x W] = w * x + b. Computed as the
/// same GEMM as matmul(w, reshape(x, C_in x HW)) followed by the bias add.
template <typename T>
Var<T> conv1x1(const Var<T>& x, const Var<T>& w, const Var<T>& bias) {
  detail::require_rank("conv1x1", x.shape(), 3);
  detail::require_rank("conv1x1", w.shape(), 2);
  const std::size_t cin = x.dim(0), hw = x.dim(1) * x.dim(2), cout = w.dim(0);
  if (w.dim(1) != cin || bias.numel() != cout) {
    throw DimensionError("conv1x1: input " + shape_str(x.shape()) + " incompatible with weight " +
                         shape_str(w.shape()) + " / bias " + shape_str(bias.shape()));
  }
  Tensor<T> out({cout, x.dim(1), x.dim(2)});
  detail::gemm(false, false, cout, hw, cin, w.value().ptr(), x.value().ptr(), out.ptr(), false);
  const auto& bv = bias.value();
  for (std::size_t o = 0; o < cout; ++o)
    for (std::size_t p = 0; p < hw; ++p) out[o * hw + p] += bv[o];
  return x.tape()->record("conv1x1", std::move(out), {x, w, bias}, [x, w, bias, cin, hw, cout](const Tensor<T>& g, const Tensor<T>&) {
    if (x.requires_grad()) detail::gemm(true, false, cin, hw, cout, w.value().ptr(), g.ptr(), x.tape()->grad(x).ptr(), true);
    if (w.requires_grad()) detail::gemm(false, true, cout, cin, hw, g.ptr(), x.value().ptr(), w.tape()->grad(w).ptr(), true);
    if (bias.requires_grad()) {
      auto& gb = bias.tape()->grad(bias);
      for (std::size_t o = 0; o < cout; ++o) {
        T acc = 0;
        for (std::size_t p = 0; p < hw; ++p) acc += g[o * hw + p];
        gb[o] += acc;
      }
    }
  });
}

namespace detail {

struct ConvGeom {
  std::size_t cin, h, w, k, stride, pad, oh, ow;
};

template <typename T>
void im2col(const T* x, const ConvGeom& g, T* cols) {
  const std::size_t plane = g.oh * g.ow;
  for (std::size_t c = 0; c < g.cin; ++c)
    for (std::size_t ki = 0; ki < g.k; ++ki)
      for (std::size_t kj = 0; kj < g.k; ++kj) {
        T* row = cols + ((c * g.k + ki) * g.k + kj) * plane;
        for (std::size_t oi = 0; oi < g.oh; ++oi) {
          const long ii = static_cast<long>(oi * g.stride + ki) - static_cast<long>(g.pad);
          for (std::size_t oj = 0; oj < g.ow; ++oj) {
            const long jj = static_cast<long>(oj * g.stride + kj) - static_cast<long>(g.pad);
            const bool inside = ii >= 0 && jj >= 0 && ii < static_cast<long>(g.h) && jj < static_cast<long>(g.w);
            row[oi * g.ow + oj] = inside ? x[(c * g.h + ii) * g.w + jj] : T(0);
          }
        }
      }
}

template <typename T>
void col2im_add(const T* cols, const ConvGeom& g, T* x) {
  const std::size_t plane = g.oh * g.ow;
  for (std::size_t c = 0; c < g.cin; ++c)
    for (std::size_t ki = 0; ki < g.k; ++ki)
      for (std::size_t kj = 0; kj < g.k; ++kj) {
        const T* row = cols + ((c * g.k + ki) * g.k + kj) * plane;
        for (std::size_t oi = 0; oi < g.oh; ++oi) {
          const long ii = static_cast<long>(oi * g.stride + ki) - static_cast<long>(g.pad);
          if (ii < 0 || ii >= static_cast<long>(g.h)) continue;
          for (std::size_t oj = 0; oj < g.ow; ++oj) {
            const long jj = static_cast<long>(oj * g.stride + kj) - static_cast<long>(g.pad);
            if (jj < 0 || jj >= static_cast<long>(g.w)) continue;
            x[(c * g.h + ii) * g.w + jj] += row[oi * g.ow + oj];
          }
        }
      }
}

}  // namespace detail

/// Dense k x k convolution (cross-correlation) with zero padding.
template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& w, const Var<T>& bias, std::size_t stride, std::size_t pad) {
  detail::require_rank("conv2d", x.shape(), 3);
  detail::require_rank("conv2d", w.shape(), 4);
  const std::size_t cout = w.dim(0), k = w.dim(2);
  if (w.dim(1) != x.dim(0) || w.dim(3) != k || bias.numel() != cout || stride == 0) {
    throw DimensionError("conv2d: input " + shape_str(x.shape()) + " incompatible with weight " +
                         shape_str(w.shape()));
  }
  if (x.dim(1) + 2 * pad < k || x.dim(2) + 2 * pad < k) {
    throw DimensionError("conv2d: kernel larger than padded input " + shape_str(x.shape()));
  }
  detail::ConvGeom geo{x.dim(0), x.dim(1), x.dim(2), k, stride, pad, (x.dim(1) + 2 * pad - k) / stride + 1,
                       (x.dim(2) + 2 * pad - k) / stride + 1};
  const std::size_t kk = geo.cin * k * k, plane = geo.oh * geo.ow;
  Buffer<T> cols(kk * plane);
  detail::im2col(x.value().ptr(), geo, cols.data());
  Tensor<T> out({cout, geo.oh, geo.ow});
  detail::gemm(false, false, cout, plane, kk, w.value().ptr(), cols.data(), out.ptr(), false);
  const auto& bv = bias.value();
  for (std::size_t o = 0; o < cout; ++o)
    for (std::size_t p = 0; p < plane; ++p) out[o * plane + p] += bv[o];
  return x.tape()->record("conv2d", std::move(out), {x, w, bias}, [x, w, bias, geo, cout, kk, plane](const Tensor<T>& g, const Tensor<T>&) {
    if (w.requires_grad()) {
      Buffer<T> c(kk * plane);
      detail::im2col(x.value().ptr(), geo, c.data());
      detail::gemm(false, true, cout, kk, plane, g.ptr(), c.data(), w.tape()->grad(w).ptr(), true);
    }
    if (x.requires_grad()) {
      Buffer<T> dcols(kk * plane);
      detail::gemm(true, false, kk, plane, cout, w.value().ptr(), g.ptr(), dcols.data(), false);
      detail::col2im_add(dcols.data(), geo, x.tape()->grad(x).ptr());
    }
    if (bias.requires_grad()) {
      auto& gb = bias.tape()->grad(bias);
      for (std::size_t o = 0; o < cout; ++o) {
        T acc = 0;
        for (std::size_t p = 0; p < plane; ++p) acc += g[o * plane + p];
        gb[o] += acc;
      }
    }
  });
}

namespace detail {

/// Copies a h x w plane into the interior of a zeroed (h+2) x (w+2) buffer.
template <typename T>
void pad_plane(const T* src, std::size_t h, std::size_t w, T* dst) {
  const std::size_t pw = w + 2;
  std::fill(dst, dst + (h + 2) * pw, T(0));
  for (std::size_t i = 0; i < h; ++i) std::copy(src + i * w, src + (i + 1) * w, dst + (i + 1) * pw + 1);
}

}  // namespace detail

/// Depthwise 3x3 cross-correlation, zero padding 1, no channel mixing.
template <typename T>
Var<T> dwconv3x3(const Var<T>& x, const Var<T>& k) {
  detail::require_rank("dwconv3x3", x.shape(), 3);
  const std::size_t c = x.dim(0), h = x.dim(1), w = x.dim(2);
  if (k.shape() != Shape{c, 3, 3}) {
    throw DimensionError("dwconv3x3: kernel " + shape_str(k.shape()) + " must be " + shape_str(Shape{c, 3, 3}));
  }
  Tensor<T> out({c, h, w});
  const T* xv = x.value().ptr();
  const T* kv = k.value().ptr();
  const std::size_t pw = w + 2;
  std::vector<T> pad((h + 2) * pw);
  for (std::size_t ch = 0; ch < c; ++ch) {
    detail::pad_plane(xv + ch * h * w, h, w, pad.data());
    const T* kp = kv + ch * 9;
    T* __restrict op = out.ptr() + ch * h * w;
    for (std::size_t i = 0; i < h; ++i) {
      const T* __restrict r0 = pad.data() + i * pw;
      const T* __restrict r1 = r0 + pw;
      const T* __restrict r2 = r1 + pw;
      T* __restrict orow = op + i * w;
      for (std::size_t j = 0; j < w; ++j) {
        orow[j] = kp[0] * r0[j] + kp[1] * r0[j + 1] + kp[2] * r0[j + 2] + kp[3] * r1[j] + kp[4] * r1[j + 1] +
                  kp[5] * r1[j + 2] + kp[6] * r2[j] + kp[7] * r2[j + 1] + kp[8] * r2[j + 2];
      }
    }
  }
  return x.tape()->record("dwconv3x3", std::move(out), {x, k}, [x, k, c, h, w](const Tensor<T>& g, const Tensor<T>&) {
    const bool gx_on = x.requires_grad(), gk_on = k.requires_grad();
    T* gx = gx_on ? x.tape()->grad(x).ptr() : nullptr;
    T* gk = gk_on ? k.tape()->grad(k).ptr() : nullptr;
    const T* xv = x.value().ptr();
    const T* kv = k.value().ptr();
    const std::size_t pw = w + 2;
    std::vector<T> pad((h + 2) * pw);
    for (std::size_t ch = 0; ch < c; ++ch) {
      const T* gp = g.ptr() + ch * h * w;
      if (gk_on) {
        // dk[di, dj] = sum_ij g[i, j] * xpad[i + di, j + dj]
        detail::pad_plane(xv + ch * h * w, h, w, pad.data());
        T acc[9] = {};
        for (std::size_t i = 0; i < h; ++i) {
          const T* __restrict grow = gp + i * w;
          for (std::size_t di = 0; di < 3; ++di) {
            const T* __restrict r = pad.data() + (i + di) * pw;
            T a0 = 0, a1 = 0, a2 = 0;
            for (std::size_t j = 0; j < w; ++j) {
              a0 += grow[j] * r[j];
              a1 += grow[j] * r[j + 1];
              a2 += grow[j] * r[j + 2];
            }
            acc[di * 3] += a0;
            acc[di * 3 + 1] += a1;
            acc[di * 3 + 2] += a2;
          }
        }
        for (std::size_t t = 0; t < 9; ++t) gk[ch * 9 + t] += acc[t];
      }
      if (gx_on) {
        // dx = full correlation of g with the flipped kernel.
        detail::pad_plane(gp, h, w, pad.data());
        const T* kp = kv + ch * 9;
        T* __restrict xrow_base = gx + ch * h * w;
        for (std::size_t i = 0; i < h; ++i) {
          const T* __restrict r0 = pad.data() + i * pw;
          const T* __restrict r1 = r0 + pw;
          const T* __restrict r2 = r1 + pw;
          T* __restrict orow = xrow_base + i * w;
          for (std::size_t j = 0; j < w; ++j) {
            orow[j] += kp[8] * r0[j] + kp[7] * r0[j + 1] + kp[6] * r0[j + 2] + kp[5] * r1[j] + kp[4] * r1[j + 1] +
                       kp[3] * r1[j + 2] + kp[2] * r2[j] + kp[1] * r2[j + 1] + kp[0] * r2[j + 2];
          }
        }
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Normalization and softmax

namespace detail {

/// Normalizes groups of `n` values spaced `stride` apart. Returns x_hat and
/// fills inv_std per group.
template <typename T>
struct NormStats {
  std::vector<T> xhat;
  std::vector<T> inv_std;
};

template <typename T, typename Index>
NormStats<T> normalize_groups(const Tensor<T>& x, std::size_t groups, std::size_t n, const Index& index, T eps) {
  NormStats<T> s{std::vector<T>(x.numel()), std::vector<T>(groups)};
  for (std::size_t gi = 0; gi < groups; ++gi) {
    T mean = 0;
    for (std::size_t j = 0; j < n; ++j) mean += x[index(gi, j)];
    mean /= static_cast<T>(n);
    T var = 0;
    for (std::size_t j = 0; j < n; ++j) {
      const T d = x[index(gi, j)] - mean;
      var += d * d;
    }
    var /= static_cast<T>(n);
    const T inv = T(1) / std::sqrt(var + eps);
    s.inv_std[gi] = inv;
    for (std::size_t j = 0; j < n; ++j) s.xhat[index(gi, j)] = (x[index(gi, j)] - mean) * inv;
  }
  return s;
}

/// dx for one group given dxhat: inv * (dxhat - mean(dxhat) - xhat * mean(dxhat * xhat)).
template <typename T, typename Index>
void normalize_backward(std::size_t groups, std::size_t n, const Index& index, const std::vector<T>& xhat,
                        const std::vector<T>& inv_std, const std::vector<T>& dxhat, T* gx) {
  for (std::size_t gi = 0; gi < groups; ++gi) {
    T m1 = 0, m2 = 0;
    for (std::size_t j = 0; j < n; ++j) {
      const std::size_t idx = index(gi, j);
      m1 += dxhat[idx];
      m2 += dxhat[idx] * xhat[idx];
    }
    m1 /= static_cast<T>(n);
    m2 /= static_cast<T>(n);
    for (std::size_t j = 0; j < n; ++j) {
      const std::size_t idx = index(gi, j);
      gx[idx] += inv_std[gi] * (dxhat[idx] - m1 - xhat[idx] * m2);
    }
  }
}

}  // namespace detail

/// Normalizes along `axis` with an affine (gamma, beta) of extent shape[axis].
template <typename T>
Var<T> layernorm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, std::size_t axis, T eps = T(1e-5)) {
  const auto sp = detail::split_axis(x.shape(), axis);
  if (gamma.numel() != sp.n || beta.numel() != sp.n) {
    throw DimensionError("layernorm: affine " + shape_str(gamma.shape()) + " does not match axis extent of " +
                         shape_str(x.shape()));
  }
  auto index = [sp](std::size_t gi, std::size_t j) {
    return ((gi / sp.inner) * sp.n + j) * sp.inner + gi % sp.inner;
  };
  auto st = std::make_shared<detail::NormStats<T>>(
      detail::normalize_groups<T>(x.value(), sp.outer * sp.inner, sp.n, index, eps));
  Tensor<T> out(x.shape());
  const auto& gv = gamma.value();
  const auto& bv = beta.value();
  for (std::size_t gi = 0; gi < sp.outer * sp.inner; ++gi)
    for (std::size_t j = 0; j < sp.n; ++j) {
      const std::size_t idx = index(gi, j);
      out[idx] = st->xhat[idx] * gv[j] + bv[j];
    }
  return x.tape()->record("layernorm", std::move(out), {x, gamma, beta}, [x, gamma, beta, sp, st, index](const Tensor<T>& g, const Tensor<T>&) {
    const std::size_t groups = sp.outer * sp.inner;
    if (gamma.requires_grad() || beta.requires_grad()) {
      auto& gg = gamma.tape()->grad(gamma);
      auto& gb = beta.tape()->grad(beta);
      for (std::size_t gi = 0; gi < groups; ++gi)
        for (std::size_t j = 0; j < sp.n; ++j) {
          const std::size_t idx = index(gi, j);
          gg[j] += g[idx] * st->xhat[idx];
          gb[j] += g[idx];
        }
    }
    if (x.requires_grad()) {
      std::vector<T> dxhat(g.numel());
      const auto& gv = gamma.value();
      for (std::size_t gi = 0; gi < groups; ++gi)
        for (std::size_t j = 0; j < sp.n; ++j) {
          const std::size_t idx = index(gi, j);
          dxhat[idx] = g[idx] * gv[j];
        }
      detail::normalize_backward<T>(groups, sp.n, index, st->xhat, st->inv_std, dxhat, x.tape()->grad(x).ptr());
    }
  });
}

/// Per-channel normalization over spatial positions of a C x H x W map, with
/// per-channel affine.
template <typename T>
Var<T> instance_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, T eps = T(1e-5)) {
  detail::require_rank("instance_norm", x.shape(), 3);
  const std::size_t c = x.dim(0), hw = x.dim(1) * x.dim(2);
  if (gamma.numel() != c || beta.numel() != c) {
    throw DimensionError("instance_norm: affine " + shape_str(gamma.shape()) + " does not match channels of " +
                         shape_str(x.shape()));
  }
  auto index = [hw](std::size_t gi, std::size_t j) { return gi * hw + j; };
  auto st = std::make_shared<detail::NormStats<T>>(detail::normalize_groups<T>(x.value(), c, hw, index, eps));
  Tensor<T> out(x.shape());
  const auto& gv = gamma.value();
  const auto& bv = beta.value();
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t p = 0; p < hw; ++p) out[ch * hw + p] = st->xhat[ch * hw + p] * gv[ch] + bv[ch];
  return x.tape()->record("instance_norm", std::move(out), {x, gamma, beta}, [x, gamma, beta, c, hw, st, index](const Tensor<T>& g, const Tensor<T>&) {
    if (gamma.requires_grad() || beta.requires_grad()) {
      auto& gg = gamma.tape()->grad(gamma);
      auto& gb = beta.tape()->grad(beta);
      for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t p = 0; p < hw; ++p) {
          gg[ch] += g[ch * hw + p] * st->xhat[ch * hw + p];
          gb[ch] += g[ch * hw + p];
        }
    }
    if (x.requires_grad()) {
      std::vector<T> dxhat(g.numel());
      const auto& gv = gamma.value();
      for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t p = 0; p < hw; ++p) dxhat[ch * hw + p] = g[ch * hw + p] * gv[ch];
      detail::normalize_backward<T>(c, hw, index, st->xhat, st->inv_std, dxhat, x.tape()->grad(x).ptr());
    }
  });
}

/// Max-subtracted softmax along `axis`.
template <typename T>
Var<T> softmax(const Var<T>& x, std::size_t axis) {
  const auto sp = detail::split_axis(x.shape(), axis);
  Tensor<T> out(x.shape());
  const auto& xv = x.value();
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t i = 0; i < sp.inner; ++i) {
      const std::size_t base = o * sp.n * sp.inner + i;
      T mx = -std::numeric_limits<T>::infinity();
      for (std::size_t j = 0; j < sp.n; ++j) mx = std::max(mx, xv[base + j * sp.inner]);
      for (std::size_t j = 0; j < sp.n; ++j) out[base + j * sp.inner] = xv[base + j * sp.inner] - mx;
    }
  detail::exp_inplace(out);
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t i = 0; i < sp.inner; ++i) {
      const std::size_t base = o * sp.n * sp.inner + i;
      T sum = 0;
      for (std::size_t j = 0; j < sp.n; ++j) sum += out[base + j * sp.inner];
      const T inv = T(1) / sum;
      for (std::size_t j = 0; j < sp.n; ++j) out[base + j * sp.inner] *= inv;
    }
  return x.tape()->record("softmax", std::move(out), {x}, [x, sp](const Tensor<T>& g, const Tensor<T>& yv) {
    auto& gx = x.tape()->grad(x);
    for (std::size_t o = 0; o < sp.outer; ++o)
      for (std::size_t i = 0; i < sp.inner; ++i) {
        const std::size_t base = o * sp.n * sp.inner + i;
        T dot = 0;
        for (std::size_t j = 0; j < sp.n; ++j) dot += g[base + j * sp.inner] * yv[base + j * sp.inner];
        for (std::size_t j = 0; j < sp.n; ++j) {
          const std::size_t idx = base + j * sp.inner;
          gx[idx] += yv[idx] * (g[idx] - dot);
        }
      }
  });
}

// ---------------------------------------------------------------------------
// Reductions

template <typename T>
Var<T> sum(const Var<T>& x, std::size_t axis) {
  const auto sp = detail::split_axis(x.shape(), axis);
  Tensor<T> out(detail::drop_axis(x.shape(), axis));
  const auto& xv = x.value();
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t j = 0; j < sp.n; ++j)
      for (std::size_t i = 0; i < sp.inner; ++i) out[o * sp.inner + i] += xv[(o * sp.n + j) * sp.inner + i];
  return x.tape()->record("sum", std::move(out), {x}, [x, sp](const Tensor<T>& g, const Tensor<T>&) {
    auto& gx = x.tape()->grad(x);
    for (std::size_t o = 0; o < sp.outer; ++o)
      for (std::size_t j = 0; j < sp.n; ++j)
        for (std::size_t i = 0; i < sp.inner; ++i) gx[(o * sp.n + j) * sp.inner + i] += g[o * sp.inner + i];
  });
}

template <typename T>
Var<T> mean(const Var<T>& x, std::size_t axis) {
  return scale(sum(x, axis), T(1) / static_cast<T>(x.dim(axis)));
}

/// Max along `axis`; the gradient goes to the first maximal entry.
template <typename T>
Var<T> max(const Var<T>& x, std::size_t axis) {
  const auto sp = detail::split_axis(x.shape(), axis);
  Tensor<T> out(detail::drop_axis(x.shape(), axis));
  std::vector<std::size_t> arg(sp.outer * sp.inner);
  const auto& xv = x.value();
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t i = 0; i < sp.inner; ++i) {
      std::size_t best = (o * sp.n) * sp.inner + i;
      for (std::size_t j = 1; j < sp.n; ++j) {
        const std::size_t idx = (o * sp.n + j) * sp.inner + i;
        if (xv[idx] > xv[best]) best = idx;
      }
      arg[o * sp.inner + i] = best;
      out[o * sp.inner + i] = xv[best];
    }
  return x.tape()->record("max", std::move(out), {x}, [x, arg](const Tensor<T>& g, const Tensor<T>&) {
    auto& gx = x.tape()->grad(x);
    for (std::size_t r = 0; r < arg.size(); ++r) gx[arg[r]] += g[r];
  });
}

template <typename T>
Var<T> sum_all(const Var<T>& x) {
  T acc = 0;
  for (auto v : x.value().data()) acc += v;
  return x.tape()->record("sum_all", Tensor<T>::scalar(acc), {x}, [x](const Tensor<T>& g, const Tensor<T>&) {
    auto& gx = x.tape()->grad(x);
    for (std::size_t i = 0; i < gx.numel(); ++i) gx[i] += g[0];
  });
}

template <typename T>
Var<T> mean_all(const Var<T>& x) {
  return scale(sum_all(x), T(1) / static_cast<T>(x.numel()));
}

// ---------------------------------------------------------------------------
// Shape manipulation

template <typename T>
Var<T> reshape(const Var<T>& x, Shape shape) {
  Tensor<T> out = x.value().reshaped(std::move(shape));
  return x.tape()->record("reshape", std::move(out), {x}, [x](const Tensor<T>& g, const Tensor<T>&) {
    detail::add_into(x.tape()->grad(x), g);
  });
}

template <typename T>
Var<T> transpose(const Var<T>& x) {
  detail::require_rank("transpose", x.shape(), 2);
  const std::size_t r = x.dim(0), c = x.dim(1);
  Tensor<T> out({c, r});
  const auto& xv = x.value();
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = xv[i * c + j];
  return x.tape()->record("transpose", std::move(out), {x}, [x, r, c](const Tensor<T>& g, const Tensor<T>&) {
    auto& gx = x.tape()->grad(x);
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) gx[i * c + j] += g[j * r + i];
  });
}

template <typename T>
Var<T> concat(const std::vector<Var<T>>& parts, std::size_t axis) {
  if (parts.empty()) throw ContractError("concat: no inputs");
  const Shape& ref = parts.front().shape();
  Shape out_shape = ref;
  out_shape.at(axis) = 0;
  for (const auto& p : parts) {
    if (p.shape().size() != ref.size()) throw DimensionError("concat: rank mismatch");
    for (std::size_t d = 0; d < ref.size(); ++d) {
      if (d != axis && p.shape()[d] != ref[d]) {
        throw DimensionError("concat: " + shape_str(p.shape()) + " incompatible with " + shape_str(ref));
      }
    }
    out_shape[axis] += p.dim(axis);
  }
  const auto sp = detail::split_axis(out_shape, axis);
  Tensor<T> out(out_shape);
  std::size_t offset = 0;
  std::vector<std::size_t> offsets;
  for (const auto& p : parts) {
    offsets.push_back(offset);
    const std::size_t chunk = p.dim(axis) * sp.inner;
    for (std::size_t o = 0; o < sp.outer; ++o)
      std::copy_n(p.value().ptr() + o * chunk, chunk, out.ptr() + o * sp.n * sp.inner + offset);
    offset += chunk;
  }
  Tape<T>* tape = parts.front().tape();
  return tape->record("concat", std::move(out), parts, [parts, offsets, sp, axis](const Tensor<T>& g, const Tensor<T>&) {
    for (std::size_t k = 0; k < parts.size(); ++k) {
      const auto& p = parts[k];
      if (!p.requires_grad()) continue;
      auto& gp = p.tape()->grad(p);
      const std::size_t chunk = p.dim(axis) * sp.inner;
      for (std::size_t o = 0; o < sp.outer; ++o) {
        const T* src = g.ptr() + o * sp.n * sp.inner + offsets[k];
        T* dst = gp.ptr() + o * chunk;
        for (std::size_t t = 0; t < chunk; ++t) dst[t] += src[t];
      }
    }
  });
}

/// Entries [start, start + len) along `axis`.
template <typename T>
Var<T> slice(const Var<T>& x, std::size_t axis, std::size_t start, std::size_t len) {
  const auto sp = detail::split_axis(x.shape(), axis);
  if (len == 0 || start + len > sp.n) {
    throw DimensionError("slice: range [" + std::to_string(start) + ", " + std::to_string(start + len) +
                         ") out of bounds for " + shape_str(x.shape()));
  }
  Shape s = x.shape();
  s[axis] = len;
  Tensor<T> out(s);
  for (std::size_t o = 0; o < sp.outer; ++o)
    std::copy_n(x.value().ptr() + (o * sp.n + start) * sp.inner, len * sp.inner, out.ptr() + o * len * sp.inner);
  return x.tape()->record("slice", std::move(out), {x}, [x, sp, start, len](const Tensor<T>& g, const Tensor<T>&) {
    auto& gx = x.tape()->grad(x);
    for (std::size_t o = 0; o < sp.outer; ++o)
      for (std::size_t t = 0; t < len * sp.inner; ++t) gx[(o * sp.n + start) * sp.inner + t] += g[o * len * sp.inner + t];
  });
}

// ---------------------------------------------------------------------------
// Spatial resampling

/// Bin (i, j) averages rows [floor(i*H/oh), ceil((i+1)*H/oh)) and the
/// matching columns.
template <typename T>
Var<T> adaptive_avg_pool2d(const Var<T>& x, std::size_t oh, std::size_t ow) {
  detail::require_rank("adaptive_avg_pool2d", x.shape(), 3);
  const std::size_t c = x.dim(0), h = x.dim(1), w = x.dim(2);
  if (oh < 1 || ow < 1 || oh > h || ow > w) {
    throw DimensionError("adaptive_avg_pool2d: output " + std::to_string(oh) + "x" + std::to_string(ow) +
                         " invalid for input " + shape_str(x.shape()));
  }
  auto lo = [](std::size_t i, std::size_t in, std::size_t out) { return (i * in) / out; };
  auto hi = [](std::size_t i, std::size_t in, std::size_t out) { return ((i + 1) * in + out - 1) / out; };
  Tensor<T> out({c, oh, ow});
  const auto& xv = x.value();
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t i = 0; i < oh; ++i)
      for (std::size_t j = 0; j < ow; ++j) {
        const std::size_t r0 = lo(i, h, oh), r1 = hi(i, h, oh), c0 = lo(j, w, ow), c1 = hi(j, w, ow);
        T acc = 0;
        for (std::size_t r = r0; r < r1; ++r)
          for (std::size_t q = c0; q < c1; ++q) acc += xv[(ch * h + r) * w + q];
        out[(ch * oh + i) * ow + j] = acc / static_cast<T>((r1 - r0) * (c1 - c0));
      }
  return x.tape()->record("adaptive_avg_pool2d", std::move(out), {x}, [x, c, h, w, oh, ow, lo, hi](const Tensor<T>& g, const Tensor<T>&) {
    auto& gx = x.tape()->grad(x);
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t i = 0; i < oh; ++i)
        for (std::size_t j = 0; j < ow; ++j) {
          const std::size_t r0 = lo(i, h, oh), r1 = hi(i, h, oh), c0 = lo(j, w, ow), c1 = hi(j, w, ow);
          const T share = g[(ch * oh + i) * ow + j] / static_cast<T>((r1 - r0) * (c1 - c0));
          for (std::size_t r = r0; r < r1; ++r)
            for (std::size_t q = c0; q < c1; ++q) gx[(ch * h + r) * w + q] += share;
        }
  });
}

namespace detail {

/// Source index in the input for output (c, i, j) of a pixel shuffle.
inline std::size_t shuffle_source(std::size_t c, std::size_t i, std::size_t j, std::size_t r, std::size_t h,
                                  std::size_t w) {
  return ((c * r * r + (i % r) * r + (j % r)) * h + i / r) * w + j / r;
}

}  // namespace detail

/// [C*r^2 x H x W] -> [C x rH x rW]; out[c, h*r+i, w*r+j] = in[c*r^2 + i*r + j, h, w].
template <typename T>
Var<T> pixel_shuffle(const Var<T>& x, std::size_t r) {
  detail::require_rank("pixel_shuffle", x.shape(), 3);
  if (r == 0 || x.dim(0) % (r * r) != 0) {
    throw DimensionError("pixel_shuffle: channels of " + shape_str(x.shape()) + " not divisible by r^2 = " +
                         std::to_string(r * r));
  }
  const std::size_t c = x.dim(0) / (r * r), h = x.dim(1), w = x.dim(2);
  Tensor<T> out({c, h * r, w * r});
  const auto& xv = x.value();
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t i = 0; i < h * r; ++i)
      for (std::size_t j = 0; j < w * r; ++j)
        out[(ch * h * r + i) * w * r + j] = xv[detail::shuffle_source(ch, i, j, r, h, w)];
  return x.tape()->record("pixel_shuffle", std::move(out), {x}, [x, c, h, w, r](const Tensor<T>& g, const Tensor<T>&) {
    auto& gx = x.tape()->grad(x);
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t i = 0; i < h * r; ++i)
        for (std::size_t j = 0; j < w * r; ++j)
          gx[detail::shuffle_source(ch, i, j, r, h, w)] += g[(ch * h * r + i) * w * r + j];
  });
}

/// Inverse rearrangement of pixel_shuffle: [C x rH x rW] -> [C*r^2 x H x W].
template <typename T>
Tensor<T> pixel_unshuffle(const Tensor<T>& y, std::size_t r) {
  detail::require_rank("pixel_unshuffle", y.shape(), 3);
  if (r == 0 || y.dim(1) % r != 0 || y.dim(2) % r != 0) {
    throw DimensionError("pixel_unshuffle: spatial extents of " + shape_str(y.shape()) + " not divisible by r");
  }
  const std::size_t c = y.dim(0), h = y.dim(1) / r, w = y.dim(2) / r;
  Tensor<T> out({c * r * r, h, w});
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t i = 0; i < h * r; ++i)
      for (std::size_t j = 0; j < w * r; ++j)
        out[detail::shuffle_source(ch, i, j, r, h, w)] = y[(ch * h * r + i) * w * r + j];
  return out;
}

namespace detail {

struct LerpTap {
  std::size_t i0, i1;
  double frac;
};

/// Half-pixel-centre sampling taps (align_corners = false).
inline std::vector<LerpTap> lerp_taps(std::size_t in, std::size_t out) {
  std::vector<LerpTap> taps(out);
  const double scale = static_cast<double>(in) / static_cast<double>(out);
  for (std::size_t o = 0; o < out; ++o) {
    double src = (static_cast<double>(o) + 0.5) * scale - 0.5;
    if (src < 0) src = 0;
    auto i0 = static_cast<std::size_t>(src);
    if (i0 > in - 1) i0 = in - 1;
    const std::size_t i1 = std::min(i0 + 1, in - 1);
    taps[o] = {i0, i1, src - static_cast<double>(i0)};
  }
  return taps;
}

}  // namespace detail

/// Nearest-neighbour resampling: out(i, j) = in(floor(i*H/oh), floor(j*W/ow)).
template <typename T>
Var<T> nearest_resize(const Var<T>& x, std::size_t oh, std::size_t ow) {
  detail::require_rank("nearest_resize", x.shape(), 3);
  if (oh == 0 || ow == 0) throw DimensionError("nearest_resize: zero output extent");
  const std::size_t c = x.dim(0), h = x.dim(1), w = x.dim(2);
  std::vector<std::size_t> src(c * oh * ow);
  Tensor<T> out({c, oh, ow});
  const auto& xv = x.value();
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t i = 0; i < oh; ++i)
      for (std::size_t j = 0; j < ow; ++j) {
        const std::size_t o = (ch * oh + i) * ow + j;
        src[o] = (ch * h + i * h / oh) * w + j * w / ow;
        out[o] = xv[src[o]];
      }
  return x.tape()->record("nearest_resize", std::move(out), {x}, [x, src = std::move(src)](const Tensor<T>& g, const Tensor<T>&) {
    auto& gx = x.tape()->grad(x);
    for (std::size_t o = 0; o < src.size(); ++o) gx[src[o]] += g[o];
  });
}

template <typename T>
Var<T> bilinear_resize(const Var<T>& x, std::size_t oh, std::size_t ow) {
  detail::require_rank("bilinear_resize", x.shape(), 3);
  if (oh == 0 || ow == 0) throw DimensionError("bilinear_resize: zero output extent");
  const std::size_t c = x.dim(0), h = x.dim(1), w = x.dim(2);
  const auto ty = detail::lerp_taps(h, oh);
  const auto tx = detail::lerp_taps(w, ow);
  Tensor<T> out({c, oh, ow});
  for (std::size_t ch = 0; ch < c; ++ch) {
    const T* xp = x.value().ptr() + ch * h * w;
    for (std::size_t i = 0; i < oh; ++i) {
      const T fy = static_cast<T>(ty[i].frac);
      for (std::size_t j = 0; j < ow; ++j) {
        const T fx = static_cast<T>(tx[j].frac);
        const T top = xp[ty[i].i0 * w + tx[j].i0] * (T(1) - fx) + xp[ty[i].i0 * w + tx[j].i1] * fx;
        const T bot = xp[ty[i].i1 * w + tx[j].i0] * (T(1) - fx) + xp[ty[i].i1 * w + tx[j].i1] * fx;
        out[(ch * oh + i) * ow + j] = top * (T(1) - fy) + bot * fy;
      }
    }
  }
  return x.tape()->record("bilinear_resize", std::move(out), {x}, [x, c, h, w, oh, ow, ty, tx](const Tensor<T>& g, const Tensor<T>&) {
    auto& gx = x.tape()->grad(x);
    for (std::size_t ch = 0; ch < c; ++ch) {
      T* gp = gx.ptr() + ch * h * w;
      for (std::size_t i = 0; i < oh; ++i) {
        const T fy = static_cast<T>(ty[i].frac);
        for (std::size_t j = 0; j < ow; ++j) {
          const T fx = static_cast<T>(tx[j].frac);
          const T v = g[(ch * oh + i) * ow + j];
          gp[ty[i].i0 * w + tx[j].i0] += v * (T(1) - fy) * (T(1) - fx);
          gp[ty[i].i0 * w + tx[j].i1] += v * (T(1) - fy) * fx;
          gp[ty[i].i1 * w + tx[j].i0] += v * fy * (T(1) - fx);
          gp[ty[i].i1 * w + tx[j].i1] += v * fy * fx;
        }
      }
    }
  });
}

}  // namespace ecenet
