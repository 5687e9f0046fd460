#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "ecenet/ops.hpp"

namespace ecenet {

inline constexpr std::uint8_t kIgnoreLabel = 255;

/// Class-index map, row-major H x W. kIgnoreLabel marks unlabeled pixels.
struct LabelMap {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<std::uint8_t> data;

  LabelMap() = default;
  LabelMap(std::size_t h, std::size_t w, std::uint8_t fill = 0) : height(h), width(w), data(h * w, fill) {}

  std::uint8_t& at(std::size_t i, std::size_t j) { return data[i * width + j]; }
  std::uint8_t at(std::size_t i, std::size_t j) const { return data[i * width + j]; }
  std::size_t size() const { return data.size(); }

  friend bool operator==(const LabelMap&, const LabelMap&) = default;
};

/// Nearest-neighbour downsampling: out(i, j) = in(floor(i*H/oh), floor(j*W/ow)).
inline LabelMap downsample_nearest(const LabelMap& gt, std::size_t oh, std::size_t ow) {
  LabelMap out(oh, ow);
  for (std::size_t i = 0; i < oh; ++i)
    for (std::size_t j = 0; j < ow; ++j) out.at(i, j) = gt.at(i * gt.height / oh, j * gt.width / ow);
  return out;
}

inline void check_labels(const LabelMap& gt, std::size_t n_classes) {
  for (auto v : gt.data) {
    if (v != kIgnoreLabel && v >= n_classes) {
      throw DataError("label " + std::to_string(v) + " outside [0, " + std::to_string(n_classes) + ")");
    }
  }
}

/// One-hot target [N x H x W] for a label map; ignored pixels are all-zero.
template <typename T>
Tensor<T> one_hot(const LabelMap& gt, std::size_t n_classes) {
  check_labels(gt, n_classes);
  Tensor<T> t({n_classes, gt.height, gt.width});
  const std::size_t hw = gt.size();
  for (std::size_t p = 0; p < hw; ++p)
    if (gt.data[p] != kIgnoreLabel) t[gt.data[p] * hw + p] = T(1);
  return t;
}

namespace detail {

inline void check_label_extent(const char* op, const Shape& logits, const LabelMap& gt) {
  if (logits.size() != 3 || logits[1] != gt.height || logits[2] != gt.width) {
    throw DimensionError(std::string(op) + ": logits " + shape_str(logits) + " vs labels " +
                         std::to_string(gt.height) + "x" + std::to_string(gt.width));
  }
}

}  // namespace detail

/// Mean over non-ignored pixels of -log softmax(logits)[gt]. Zero when every
/// pixel is ignored.
template <typename T>
Var<T> cross_entropy_loss(const Var<T>& logits, const LabelMap& gt) {
  detail::check_label_extent("cross_entropy_loss", logits.shape(), gt);
  const std::size_t n = logits.dim(0), hw = gt.size();
  check_labels(gt, n);
  const auto& x = logits.value();
  Buffer<T> prob(n * hw, T(0));
  T total = 0;
  std::size_t count = 0;
  std::vector<T> mx(hw);
  for (std::size_t p = 0; p < hw; ++p) {
    mx[p] = x[p];
    for (std::size_t c = 1; c < n; ++c) mx[p] = std::max(mx[p], x[c * hw + p]);
    for (std::size_t c = 0; c < n; ++c) prob[c * hw + p] = x[c * hw + p] - mx[p];
  }
  detail::exp_inplace(prob.data(), prob.size());
  for (std::size_t p = 0; p < hw; ++p) {
    T z = 0;
    for (std::size_t c = 0; c < n; ++c) z += prob[c * hw + p];
    for (std::size_t c = 0; c < n; ++c) prob[c * hw + p] /= z;
    if (gt.data[p] == kIgnoreLabel) continue;
    total += mx[p] + std::log(z) - x[gt.data[p] * hw + p];
    ++count;
  }
  const T inv = count ? T(1) / static_cast<T>(count) : T(0);
  return logits.tape()->record("cross_entropy_loss", Tensor<T>::scalar(total * inv), {logits},
                               [logits, gt, n, hw, inv, prob = std::move(prob)](const Tensor<T>& g, const Tensor<T>&) {
                                 auto& gx = logits.tape()->grad(logits);
                                 const T s = g[0] * inv;
                                 for (std::size_t p = 0; p < hw; ++p) {
                                   if (gt.data[p] == kIgnoreLabel) continue;
                                   for (std::size_t c = 0; c < n; ++c) gx[c * hw + p] += s * prob[c * hw + p];
                                   gx[gt.data[p] * hw + p] -= s;
                                 }
                               });
}

/// Per-pixel validity (1 = labeled) broadcast over the class axis.
template <typename T>
Tensor<T> valid_mask(const LabelMap& gt, std::size_t n_classes) {
  Tensor<T> m({n_classes, gt.height, gt.width});
  const std::size_t hw = gt.size();
  for (std::size_t c = 0; c < n_classes; ++c)
    for (std::size_t p = 0; p < hw; ++p) m[c * hw + p] = gt.data[p] == kIgnoreLabel ? T(0) : T(1);
  return m;
}

/// Sigmoid focal loss, mean over valid class-pixels of
/// -alpha_t * (1 - p_t)^gamma * log(p_t).
template <typename T>
Var<T> focal_loss(const Var<T>& logits, const Tensor<T>& target, const Tensor<T>& valid, T gamma = T(2),
                  T alpha = T(0.25)) {
  detail::require_same_shape("focal_loss", logits.shape(), target.shape());
  detail::require_same_shape("focal_loss", logits.shape(), valid.shape());
  const auto& x = logits.value();
  const std::size_t total = x.numel();
  T acc = 0, count = 0;
  std::vector<T> dx(total, T(0));
  for (std::size_t i = 0; i < total; ++i) {
    if (valid[i] == T(0)) continue;
    const bool pos = target[i] > T(0.5);
    const T s = pos ? T(1) : T(-1);
    const T a = pos ? alpha : T(1) - alpha;
    const T log_pt = detail::log_sigmoid(s * x[i]);
    const T pt = std::exp(log_pt);
    const T q = detail::stable_sigmoid(-s * x[i]);
    const T qg = std::pow(q, gamma);
    acc += -a * qg * log_pt;
    dx[i] = a * s * (gamma * pt * qg * log_pt - qg * q);
    count += 1;
  }
  const T inv = count > 0 ? T(1) / count : T(0);
  return logits.tape()->record("focal_loss", Tensor<T>::scalar(acc * inv), {logits},
                               [logits, inv, dx = std::move(dx)](const Tensor<T>& g, const Tensor<T>&) {
                                 auto& gx = logits.tape()->grad(logits);
                                 const T s = g[0] * inv;
                                 for (std::size_t i = 0; i < dx.size(); ++i) gx[i] += s * dx[i];
                               });
}

/// 1 - mean over classes of (2 sum(p*y) + eps) / (sum(p) + sum(y) + eps),
/// p = sigmoid(logits), sums over valid pixels.
template <typename T>
Var<T> dice_loss(const Var<T>& logits, const Tensor<T>& target, const Tensor<T>& valid, T eps = T(1)) {
  detail::require_same_shape("dice_loss", logits.shape(), target.shape());
  detail::require_same_shape("dice_loss", logits.shape(), valid.shape());
  const std::size_t n = logits.dim(0), hw = logits.numel() / n;
  const auto& x = logits.value();
  std::vector<T> p(x.numel());
  std::vector<T> inter(n, 0), denom(n, 0);
  T score = 0;
  for (std::size_t c = 0; c < n; ++c) {
    for (std::size_t k = 0; k < hw; ++k) {
      const std::size_t i = c * hw + k;
      p[i] = detail::stable_sigmoid(x[i]);
      if (valid[i] == T(0)) continue;
      inter[c] += p[i] * target[i];
      denom[c] += p[i] + target[i];
    }
    score += (T(2) * inter[c] + eps) / (denom[c] + eps);
  }
  const T loss = T(1) - score / static_cast<T>(n);
  return logits.tape()->record(
      "dice_loss", Tensor<T>::scalar(loss), {logits},
      [logits, target, valid, n, hw, eps, p = std::move(p), inter = std::move(inter),
       denom = std::move(denom)](const Tensor<T>& g, const Tensor<T>&) {
        auto& gx = logits.tape()->grad(logits);
        for (std::size_t c = 0; c < n; ++c) {
          const T d = denom[c] + eps;
          const T num = T(2) * inter[c] + eps;
          for (std::size_t k = 0; k < hw; ++k) {
            const std::size_t i = c * hw + k;
            if (valid[i] == T(0)) continue;
            const T dp = -(T(2) * target[i] * d - num) / (d * d) / static_cast<T>(n);
            gx[i] += g[0] * dp * p[i] * (T(1) - p[i]);
          }
        }
      });
}

}  // namespace ecenet
