#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <ostream>
#include <string>
#include <vector>

#include "ecenet/nn.hpp"

namespace ecenet {

/// Per-class mask logits [N x H x W] plus the stage they were produced at
/// (1..4, finest to coarsest).
template <typename T>
struct MaskStack {
  Var<T> logits;
  int stage = 0;

  std::size_t classes() const { return logits.dim(0); }
};

/// Pyramid side lengths for N classes: 1, 2, 4, ... while <= P_max, then
/// P_max itself, where P_max = max(1, round_half_up(alpha * sqrt(N))).
inline std::vector<std::size_t> pyramid_levels(double alpha, std::size_t n_classes) {
  if (!(alpha > 0)) throw ConfigError("pyramid_levels: alpha must be positive");
  if (n_classes == 0) throw ConfigError("pyramid_levels: need at least one class");
  const auto p_max = std::max<std::size_t>(
      1, static_cast<std::size_t>(std::floor(alpha * std::sqrt(static_cast<double>(n_classes)) + 0.5)));
  std::vector<std::size_t> levels;
  for (std::size_t s = 1; s <= p_max; s *= 2) levels.push_back(s);
  if (levels.back() != p_max) levels.push_back(p_max);
  return levels;
}

inline std::size_t pooled_width(const std::vector<std::size_t>& levels) {
  std::size_t d = 0;
  for (auto s : levels) d += s * s;
  return d;
}

/// Pyramid descriptor [N x D_pool] of a mask stack. A level larger than the
/// map is pooled at min(H, W) and replicated up to s x s so the descriptor
/// width stays D_pool at every resolution.
template <typename T>
Var<T> pyramid_descriptor(const Var<T>& logits, const std::vector<std::size_t>& levels) {
  detail::require_rank("ece_extract", logits.shape(), 3);
  const std::size_t n = logits.dim(0);
  const std::size_t side = std::min(logits.dim(1), logits.dim(2));
  std::vector<Var<T>> parts;
  for (auto s : levels) {
    const std::size_t eff = std::min(s, side);
    Var<T> pooled = adaptive_avg_pool2d(logits, eff, eff);
    if (eff != s) pooled = nearest_resize(pooled, s, s);
    parts.push_back(reshape(pooled, {n, s * s}));
  }
  return parts.size() == 1 ? parts.front() : concat(parts, 1);
}

/// Stage-4 mask head: phi2(phi1(x)), both 1x1 convolutions, no activation.
template <typename T>
struct MaskHead {
  nn::Conv1x1<T> phi1;
  nn::Conv1x1<T> phi2;

  MaskHead() = default;
  MaskHead(const std::string& name, std::size_t width, std::size_t n_classes, nn::Rng& rng)
      : phi1(name + ".phi1", width, width, rng), phi2(name + ".phi2", width, n_classes, rng) {}

  MaskStack<T> operator()(Tape<T>& tape, const Var<T>& x4) {
    detail::require_rank("mask_head", x4.shape(), 3);
    if (x4.dim(0) != phi1.weight.value.dim(1)) {
      throw DimensionError("mask_head: input " + shape_str(x4.shape()) + " does not match width " +
                           std::to_string(phi1.weight.value.dim(1)));
    }
    return MaskStack<T>{phi2(tape, phi1(tape, x4)), 4};
  }

  template <typename F>
  void visit(F&& f) {
    phi1.visit(f);
    phi2.visit(f);
  }
};

/// Explicit class extraction: pyramid-pool every class slice, then project
/// with one linear map psi shared across classes. Output [N x C].
template <typename T>
struct ClassExtractor {
  std::vector<std::size_t> levels;
  nn::Linear<T> psi;

  ClassExtractor() = default;
  ClassExtractor(const std::string& name, double alpha, std::size_t n_classes, std::size_t width, nn::Rng& rng)
      : levels(pyramid_levels(alpha, n_classes)), psi(name + ".psi", pooled_width(levels), width, rng) {}

  Var<T> operator()(Tape<T>& tape, const MaskStack<T>& m) {
    if (m.logits.numel() == 0 || m.classes() == 0) throw ContractError("ece_extract: empty mask stack");
    return psi(tape, pyramid_descriptor(m.logits, levels));
  }

  template <typename F>
  void visit(F&& f) {
    psi.visit(f);
  }
};

/// Per-pixel argmax over the class axis of [N x H x W]; ties go to the lower index.
template <typename T>
std::vector<std::uint8_t> argmax_labels(const Tensor<T>& logits) {
  detail::require_rank("argmax_labels", logits.shape(), 3);
  const std::size_t n = logits.dim(0), hw = logits.dim(1) * logits.dim(2);
  std::vector<std::uint8_t> labels(hw, 0);
  for (std::size_t p = 0; p < hw; ++p) {
    std::size_t best = 0;
    for (std::size_t c = 1; c < n; ++c)
      if (logits[c * hw + p] > logits[best * hw + p]) best = c;
    labels[p] = static_cast<std::uint8_t>(best);
  }
  return labels;
}

/// Binary graymap (P5) of argmax class indices; maxval = N - 1.
template <typename T>
void write_mask_pgm(std::ostream& os, const Tensor<T>& logits) {
  const std::size_t n = logits.dim(0);
  if (n < 2 || n > 256) throw ContractError("write_mask_pgm: class count must be in [2, 256]");
  const auto labels = argmax_labels(logits);
  os << "P5\n" << logits.dim(2) << ' ' << logits.dim(1) << '\n' << (n - 1) << '\n';
  os.write(reinterpret_cast<const char*>(labels.data()), static_cast<std::streamsize>(labels.size()));
}

}  // namespace ecenet
