#pragma once

#include <string>

#include "ecenet/nn.hpp"

namespace ecenet {

/// Diversity regularizer on the diverse branch [C' x H x W]:
///   1 - (1/C') * sum_k max_j softmax_k(y[j, :])[k]
/// where each channel is softmax-normalized over its spatial positions. The
/// max routes its gradient to the lowest-index maximal channel.
template <typename T>
Var<T> diversity_loss(const Var<T>& y) {
  detail::require_rank("diversity_loss", y.shape(), 3);
  const std::size_t c = y.dim(0), hw = y.dim(1) * y.dim(2);
  const auto& yv = y.value();
  Buffer<T> soft(c * hw);
  for (std::size_t j = 0; j < c; ++j) {
    const T* row = yv.ptr() + j * hw;
    T mx = row[0];
    for (std::size_t k = 1; k < hw; ++k) mx = std::max(mx, row[k]);
    for (std::size_t k = 0; k < hw; ++k) soft[j * hw + k] = row[k] - mx;
  }
  detail::exp_inplace(soft.data(), soft.size());
  for (std::size_t j = 0; j < c; ++j) {
    T total = 0;
    for (std::size_t k = 0; k < hw; ++k) total += soft[j * hw + k];
    for (std::size_t k = 0; k < hw; ++k) soft[j * hw + k] /= total;
  }
  std::vector<std::size_t> owner(hw, 0);
  T covered = 0;
  for (std::size_t k = 0; k < hw; ++k) {
    for (std::size_t j = 1; j < c; ++j)
      if (soft[j * hw + k] > soft[owner[k] * hw + k]) owner[k] = j;
    covered += soft[owner[k] * hw + k];
  }
  const T inv_c = T(1) / static_cast<T>(c);
  Tensor<T> out = Tensor<T>::scalar(T(1) - covered * inv_c);
  return y.tape()->record("diversity_loss", std::move(out), {y},
                          [y, c, hw, inv_c, soft = std::move(soft), owner = std::move(owner)](const Tensor<T>& g,
                                                                                              const Tensor<T>&) {
                            auto& gy = y.tape()->grad(y);
                            const T scale_ = -g[0] * inv_c;
                            // ds[j,k] = scale_ on owned entries; softmax backward per channel.
                            std::vector<T> dot(c, T(0));
                            for (std::size_t k = 0; k < hw; ++k) dot[owner[k]] += scale_ * soft[owner[k] * hw + k];
                            for (std::size_t j = 0; j < c; ++j)
                              for (std::size_t k = 0; k < hw; ++k) {
                                const T ds = owner[k] == j ? scale_ : T(0);
                                gy[j * hw + k] += soft[j * hw + k] * (ds - dot[j]);
                              }
                          });
}

template <typename T>
struct FROutput {
  Var<T> y;          ///< reconstructed features [C x H x W]
  Var<T> intrinsic;  ///< Y' [C/2 x H x W]
  Var<T> diverse;    ///< Y'' [C/2 x H x W], input of diversity_loss
};

/// Two-branch feature rebuild: intrinsic = norm(conv1x1(f)),
/// diverse = SE(dwconv3x3(intrinsic)), y = fuse(concat(intrinsic, diverse)).
template <typename T>
struct FeatureReconstruction {
  nn::Conv1x1<T> intrinsic;
  nn::NormAffine<T> norm;
  nn::DepthwiseConv<T> cheap;
  nn::SEBlock<T> se;
  nn::Conv1x1<T> fuse;

  FeatureReconstruction() = default;
  FeatureReconstruction(const std::string& name, std::size_t channels, nn::Rng& rng) {
    if (channels < 2 || channels % 2 != 0) {
      throw ConfigError("feature reconstruction needs an even channel count, got " + std::to_string(channels));
    }
    const std::size_t half = channels / 2;
    intrinsic = nn::Conv1x1<T>(name + ".intrinsic", channels, half, rng);
    norm = nn::NormAffine<T>(name + ".norm", half);
    cheap = nn::DepthwiseConv<T>(name + ".cheap", half, rng);
    se = nn::SEBlock<T>(name + ".se", half, rng);
    fuse = nn::Conv1x1<T>(name + ".fuse", channels, channels, rng);
  }

  std::size_t channels() const { return fuse.weight.value.dim(0); }

  FROutput<T> operator()(Tape<T>& tape, const Var<T>& f) {
    detail::require_rank("fr_forward", f.shape(), 3);
    if (f.dim(0) != channels()) {
      throw DimensionError("fr_forward: input " + shape_str(f.shape()) + " does not have " +
                           std::to_string(channels()) + " channels");
    }
    FROutput<T> out;
    out.intrinsic = norm.instance(tape, intrinsic(tape, f));
    out.diverse = se(tape, cheap(tape, out.intrinsic));
    out.y = fuse(tape, concat(std::vector<Var<T>>{out.intrinsic, out.diverse}, 0));
    return out;
  }

  template <typename F>
  void visit(F&& f) {
    intrinsic.visit(f);
    norm.visit(f);
    cheap.visit(f);
    se.visit(f);
    fuse.visit(f);
  }
};

}  // namespace ecenet
