#pragma once

#include <cmath>
#include <random>
#include <string>
#include <vector>

#include "ecenet/ops.hpp"

// Parameterized building blocks. Every block exposes visit(f), which calls
// f(Parameter<T>&) for each of its parameters in a fixed order; the
// optimizer and checkpoint code rely on that order being stable.

namespace ecenet::nn {

using Rng = std::mt19937_64;

/// Uniform in [-sqrt(1/fan_in), +sqrt(1/fan_in)].
template <typename T>
Tensor<T> fan_in_uniform(Shape shape, std::size_t fan_in, Rng& rng) {
  const T bound = std::sqrt(T(1) / static_cast<T>(fan_in));
  return Tensor<T>::uniform(std::move(shape), -bound, bound, rng);
}

/// Fully connected layer, weight [out x in].
template <typename T>
struct Linear {
  Parameter<T> weight;
  Parameter<T> bias;

  Linear() = default;
  Linear(const std::string& name, std::size_t in, std::size_t out, Rng& rng)
      : weight(name + ".weight", fan_in_uniform<T>({out, in}, in, rng)), bias(name + ".bias", Tensor<T>({out})) {}

  std::size_t in_features() const { return weight.value.dim(1); }
  std::size_t out_features() const { return weight.value.dim(0); }

  Var<T> operator()(Tape<T>& tape, const Var<T>& x) { return linear(x, tape.param(weight), tape.param(bias)); }

  void zero() {
    weight.value.fill(T(0));
    bias.value.fill(T(0));
  }

  template <typename F>
  void visit(F&& f) {
    f(weight);
    f(bias);
  }
};

/// Pointwise convolution, weight [out x in].
template <typename T>
struct Conv1x1 {
  Parameter<T> weight;
  Parameter<T> bias;

  Conv1x1() = default;
  Conv1x1(const std::string& name, std::size_t in, std::size_t out, Rng& rng)
      : weight(name + ".weight", fan_in_uniform<T>({out, in}, in, rng)), bias(name + ".bias", Tensor<T>({out})) {}

  Var<T> operator()(Tape<T>& tape, const Var<T>& x) { return conv1x1(x, tape.param(weight), tape.param(bias)); }

  void zero() {
    weight.value.fill(T(0));
    bias.value.fill(T(0));
  }

  template <typename F>
  void visit(F&& f) {
    f(weight);
    f(bias);
  }
};

/// Dense k x k convolution with stride and padding.
template <typename T>
struct Conv2d {
  Parameter<T> weight;
  Parameter<T> bias;
  std::size_t stride = 1;
  std::size_t pad = 0;

  Conv2d() = default;
  Conv2d(const std::string& name, std::size_t in, std::size_t out, std::size_t k, std::size_t stride_,
         std::size_t pad_, Rng& rng)
      : weight(name + ".weight", fan_in_uniform<T>({out, in, k, k}, in * k * k, rng)),
        bias(name + ".bias", Tensor<T>({out})),
        stride(stride_),
        pad(pad_) {}

  Var<T> operator()(Tape<T>& tape, const Var<T>& x) {
    return conv2d(x, tape.param(weight), tape.param(bias), stride, pad);
  }

  template <typename F>
  void visit(F&& f) {
    f(weight);
    f(bias);
  }
};

/// Depthwise 3x3 kernel set, one kernel per channel.
template <typename T>
struct DepthwiseConv {
  Parameter<T> kernel;

  DepthwiseConv() = default;
  DepthwiseConv(const std::string& name, std::size_t channels, Rng& rng)
      : kernel(name + ".kernel", fan_in_uniform<T>({channels, 3, 3}, 9, rng)) {}

  Var<T> operator()(Tape<T>& tape, const Var<T>& x) { return dwconv3x3(x, tape.param(kernel)); }

  template <typename F>
  void visit(F&& f) {
    f(kernel);
  }
};

/// Learned affine (gamma, beta) of a normalization layer.
template <typename T>
struct NormAffine {
  Parameter<T> gamma;
  Parameter<T> beta;

  NormAffine() = default;
  NormAffine(const std::string& name, std::size_t n)
      : gamma(name + ".gamma", Tensor<T>::ones({n})), beta(name + ".beta", Tensor<T>({n})) {}

  /// LayerNorm along `axis`.
  Var<T> layer(Tape<T>& tape, const Var<T>& x, std::size_t axis) {
    return layernorm(x, tape.param(gamma), tape.param(beta), axis);
  }

  /// Per-channel normalization over the spatial positions of a C x H x W map.
  Var<T> instance(Tape<T>& tape, const Var<T>& x) { return instance_norm(x, tape.param(gamma), tape.param(beta)); }

  void zero() {
    gamma.value.fill(T(0));
    beta.value.fill(T(0));
  }

  template <typename F>
  void visit(F&& f) {
    f(gamma);
    f(beta);
  }
};

// ---------------------------------------------------------------------------

/// Squeeze-and-excitation channel recalibration.
template <typename T>
struct SEBlock {
  static constexpr std::size_t kReduction = 4;

  Linear<T> reduce;
  Linear<T> expand;

  SEBlock() = default;
  SEBlock(const std::string& name, std::size_t channels, Rng& rng)
      : reduce(name + ".reduce", channels, std::max<std::size_t>(1, channels / kReduction), rng),
        expand(name + ".expand", std::max<std::size_t>(1, channels / kReduction), channels, rng) {}

  std::size_t channels() const { return reduce.in_features(); }

  /// Per-channel gate in (0, 1), shape [C].
  Var<T> gate(Tape<T>& tape, const Var<T>& x) {
    const std::size_t c = x.dim(0);
    if (c != channels()) {
      throw DimensionError("se_forward: input " + shape_str(x.shape()) + " has " + std::to_string(c) +
                           " channels, block expects " + std::to_string(channels()));
    }
    Var<T> pooled = mean(reshape(x, {c, x.numel() / c}), 1);
    Var<T> z = expand(tape, gelu(reduce(tape, reshape(pooled, {1, c}))));
    return reshape(sigmoid(z), {c});
  }

  Var<T> operator()(Tape<T>& tape, const Var<T>& x) { return mul_channels(x, gate(tape, x)); }

  template <typename F>
  void visit(F&& f) {
    reduce.visit(f);
    expand.visit(f);
  }
};

template <typename T>
struct AttentionResult {
  Var<T> out;                   ///< [L x C], after the output projection
  Var<T> sim;                   ///< [L x N], head-averaged QK^T / sqrt(d_k)
  std::vector<Var<T>> weights;  ///< per-head softmax(S), each [L x N]
};

/// Multi-head scaled dot-product cross attention.
template <typename T>
struct Attention {
  Linear<T> q, k, v, o;
  std::size_t heads = 1;

  Attention() = default;
  Attention(const std::string& name, std::size_t width, std::size_t heads_, Rng& rng)
      : q(name + ".q", width, width, rng),
        k(name + ".k", width, width, rng),
        v(name + ".v", width, width, rng),
        o(name + ".o", width, width, rng),
        heads(heads_) {
    if (heads == 0 || width % heads != 0) {
      throw ConfigError("attention width " + std::to_string(width) + " not divisible by " + std::to_string(heads) +
                        " heads");
    }
  }

  std::size_t width() const { return q.in_features(); }
  std::size_t head_dim() const { return width() / heads; }

  AttentionResult<T> operator()(Tape<T>& tape, const Var<T>& q_in, const Var<T>& kv_in) {
    detail::require_rank("scaled_attention", q_in.shape(), 2);
    detail::require_rank("scaled_attention", kv_in.shape(), 2);
    if (q_in.dim(1) != width() || kv_in.dim(1) != width()) {
      throw DimensionError("scaled_attention: inputs " + shape_str(q_in.shape()) + ", " + shape_str(kv_in.shape()) +
                           " do not match width " + std::to_string(width()));
    }
    const std::size_t dk = head_dim();
    const T inv_sqrt_dk = T(1) / std::sqrt(static_cast<T>(dk));
    Var<T> qs = q(tape, q_in);
    Var<T> ks = k(tape, kv_in);
    Var<T> vs = v(tape, kv_in);
    AttentionResult<T> res;
    std::vector<Var<T>> head_out;
    Var<T> sim_sum;
    for (std::size_t h = 0; h < heads; ++h) {
      Var<T> qh = heads == 1 ? qs : slice(qs, 1, h * dk, dk);
      Var<T> kh = heads == 1 ? ks : slice(ks, 1, h * dk, dk);
      Var<T> vh = heads == 1 ? vs : slice(vs, 1, h * dk, dk);
      Var<T> s = scale(matmul(qh, transpose(kh)), inv_sqrt_dk);
      Var<T> a = softmax(s, 1);
      res.weights.push_back(a);
      head_out.push_back(matmul(a, vh));
      sim_sum = h == 0 ? s : add(sim_sum, s);
    }
    res.sim = heads == 1 ? sim_sum : scale(sim_sum, T(1) / static_cast<T>(heads));
    res.out = o(tape, heads == 1 ? head_out.front() : concat(head_out, 1));
    return res;
  }

  template <typename F>
  void visit(F&& f) {
    q.visit(f);
    k.visit(f);
    v.visit(f);
    o.visit(f);
  }
};

/// Linear -> gelu -> depthwise 3x3 over the token grid -> gelu -> linear.
template <typename T>
struct MLPBlock {
  static constexpr std::size_t kHiddenRatio = 4;

  Linear<T> layer1;
  DepthwiseConv<T> dw;
  Linear<T> layer2;

  MLPBlock() = default;
  MLPBlock(const std::string& name, std::size_t width, Rng& rng)
      : layer1(name + ".fc1", width, width * kHiddenRatio, rng),
        dw(name + ".dw", width * kHiddenRatio, rng),
        layer2(name + ".fc2", width * kHiddenRatio, width, rng) {}

  Var<T> operator()(Tape<T>& tape, const Var<T>& x, std::size_t h, std::size_t w) {
    detail::require_rank("mlp_forward", x.shape(), 2);
    if (x.dim(0) != h * w) {
      throw DimensionError("mlp_forward: " + std::to_string(x.dim(0)) + " tokens do not form a " +
                           std::to_string(h) + "x" + std::to_string(w) + " grid");
    }
    Var<T> hidden = gelu(layer1(tape, x));
    const std::size_t hc = hidden.dim(1);
    Var<T> grid = reshape(transpose(hidden), {hc, h, w});
    Var<T> mixed = gelu(dw(tape, grid));
    return layer2(tape, transpose(reshape(mixed, {hc, h * w})));
  }

  template <typename F>
  void visit(F&& f) {
    layer1.visit(f);
    dw.visit(f);
    layer2.visit(f);
  }
};

/// Widens C channels to C * factor: the input followed by (factor - 1)
/// depthwise 3x3 transforms of it.
template <typename T>
struct GhostExpand {
  std::size_t factor = 1;
  DepthwiseConv<T> cheap;

  GhostExpand() = default;
  GhostExpand(const std::string& name, std::size_t channels, std::size_t factor_, Rng& rng) : factor(factor_) {
    if (factor == 0) throw ContractError("ghost_expand: factor must be at least 1");
    if (factor > 1) cheap = DepthwiseConv<T>(name + ".cheap", channels * (factor - 1), rng);
  }

  Var<T> operator()(Tape<T>& tape, const Var<T>& x) {
    if (factor == 1) return x;
    if (cheap.kernel.value.dim(0) != x.dim(0) * (factor - 1)) {
      throw DimensionError("ghost_expand: input " + shape_str(x.shape()) + " does not match kernel set " +
                           shape_str(cheap.kernel.value.shape()));
    }
    std::vector<Var<T>> copies(factor - 1, x);
    Var<T> ghosts = cheap(tape, factor == 2 ? x : concat(copies, 0));
    return concat(std::vector<Var<T>>{x, ghosts}, 0);
  }

  template <typename F>
  void visit(F&& f) {
    if (factor > 1) cheap.visit(f);
  }
};

}  // namespace ecenet::nn
