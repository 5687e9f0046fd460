#pragma once

#include <cmath>
#include <numeric>
#include <random>
#include <vector>

#include "ecenet/ecenet.hpp"

namespace testutil {

using D = double;
using ecenet::Tensor;
using Mat = std::vector<std::vector<D>>;

inline Tensor<D> rand_t(ecenet::Shape s, std::uint64_t seed, D lo = -1, D hi = 1) {
  std::mt19937_64 rng(seed);
  return Tensor<D>::uniform(std::move(s), lo, hi, rng);
}

inline void randomize(ecenet::Parameter<D>& p, std::mt19937_64& rng, D lo = -0.5, D hi = 0.5) {
  p.value = Tensor<D>::uniform(p.value.shape(), lo, hi, rng);
}

template <typename Block>
void randomize_all(Block& b, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  b.visit([&](ecenet::Parameter<D>& p) { randomize(p, rng); });
}

template <typename Block>
void zero_all(Block& b) {
  b.visit([](ecenet::Parameter<D>& p) { p.value.fill(0); });
}

// Plain scalar reference math, written without the library's kernels.

inline D sigmoid(D x) { return 1 / (1 + std::exp(-x)); }
inline D gelu(D x) { return 0.5 * x * (1 + std::erf(x / std::sqrt(2.0))); }

inline Mat to_mat(const Tensor<D>& t) {
  Mat m(t.dim(0), std::vector<D>(t.dim(1)));
  for (std::size_t i = 0; i < t.dim(0); ++i)
    for (std::size_t j = 0; j < t.dim(1); ++j) m[i][j] = t[i * t.dim(1) + j];
  return m;
}

inline Tensor<D> from_mat(const Mat& m) {
  Tensor<D> t({m.size(), m[0].size()});
  for (std::size_t i = 0; i < m.size(); ++i)
    for (std::size_t j = 0; j < m[0].size(); ++j) t[i * m[0].size() + j] = m[i][j];
  return t;
}

/// rows of x [L x in] through weight [out x in] + bias.
inline Mat linear(const Mat& x, const Tensor<D>& w, const Tensor<D>& b) {
  const std::size_t out = w.dim(0), in = w.dim(1);
  Mat y(x.size(), std::vector<D>(out));
  for (std::size_t r = 0; r < x.size(); ++r)
    for (std::size_t o = 0; o < out; ++o) {
      D acc = b[o];
      for (std::size_t i = 0; i < in; ++i) acc += w[o * in + i] * x[r][i];
      y[r][o] = acc;
    }
  return y;
}

inline Mat map(Mat m, D (*f)(D)) {
  for (auto& r : m)
    for (auto& v : r) v = f(v);
  return m;
}

inline std::vector<D> softmax(const std::vector<D>& v) {
  D mx = v[0];
  for (auto x : v) mx = std::max(mx, x);
  std::vector<D> e(v.size());
  D z = 0;
  for (std::size_t i = 0; i < v.size(); ++i) z += e[i] = std::exp(v[i] - mx);
  for (auto& x : e) x /= z;
  return e;
}

inline std::vector<D> layernorm(const std::vector<D>& v, const Tensor<D>& gamma, const Tensor<D>& beta, D eps = 1e-5) {
  const D n = static_cast<D>(v.size());
  D m = 0, var = 0;
  for (auto x : v) m += x;
  m /= n;
  for (auto x : v) var += (x - m) * (x - m);
  var /= n;
  std::vector<D> out(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) out[i] = (v[i] - m) / std::sqrt(var + eps) * gamma[i] + beta[i];
  return out;
}

inline Mat layernorm_rows(const Mat& x, const Tensor<D>& gamma, const Tensor<D>& beta) {
  Mat y;
  for (const auto& r : x) y.push_back(layernorm(r, gamma, beta));
  return y;
}

/// Zero-padded 3x3 depthwise convolution of C planes laid out as [C][h*w].
inline Mat dwconv(const Mat& planes, const Tensor<D>& k, std::size_t h, std::size_t w) {
  Mat out(planes.size(), std::vector<D>(h * w, 0));
  for (std::size_t c = 0; c < planes.size(); ++c)
    for (long i = 0; i < static_cast<long>(h); ++i)
      for (long j = 0; j < static_cast<long>(w); ++j)
        for (long di = -1; di <= 1; ++di)
          for (long dj = -1; dj <= 1; ++dj) {
            const long ii = i + di, jj = j + dj;
            if (ii < 0 || jj < 0 || ii >= static_cast<long>(h) || jj >= static_cast<long>(w)) continue;
            out[c][i * w + j] += k[c * 9 + (di + 1) * 3 + (dj + 1)] * planes[c][ii * w + jj];
          }
  return out;
}

inline Mat transpose(const Mat& m) {
  Mat t(m[0].size(), std::vector<D>(m.size()));
  for (std::size_t i = 0; i < m.size(); ++i)
    for (std::size_t j = 0; j < m[0].size(); ++j) t[j][i] = m[i][j];
  return t;
}

inline D max_diff(const Mat& a, const Mat& b) {
  D worst = 0;
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t j = 0; j < a[i].size(); ++j) worst = std::max(worst, std::abs(a[i][j] - b[i][j]));
  return worst;
}

/// 3-D tensor [C x H x W] as C planes of H*W values.
inline Mat planes(const Tensor<D>& t) { return to_mat(t.reshaped({t.dim(0), t.numel() / t.dim(0)})); }

}  // namespace testutil
