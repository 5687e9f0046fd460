#pragma once

#include <string>

#include "ecenet/class_extraction.hpp"

namespace ecenet {

/// How refreshed class embeddings are merged into the previous ones.
enum class UpdaterMode {
  kGated,      ///< g + sigmoid(psi1(phi3(g_hat) * phi4(g))) * psi2(g_hat)
  kNaivePlus,  ///< g + psi2(g_hat)
};

/// Default head count: one head per 32 channels (8 heads at width 256).
inline std::size_t default_heads(std::size_t width) {
  return width >= 32 && width % 32 == 0 ? width / 32 : 1;
}

/// [L x N] similarity -> [N x h x w] mask logits; element (n, i, j) = sim[i*w + j, n].
template <typename T>
Var<T> similarity_to_mask(const Var<T>& sim, std::size_t h, std::size_t w) {
  detail::require_rank("similarity_to_mask", sim.shape(), 2);
  if (sim.dim(0) != h * w) {
    throw DimensionError("similarity_to_mask: " + std::to_string(sim.dim(0)) + " rows do not form a " +
                         std::to_string(h) + "x" + std::to_string(w) + " grid");
  }
  return reshape(transpose(sim), {sim.dim(1), h, w});
}

template <typename T>
struct SemanticsAttentionOutput {
  Var<T> enhanced;  ///< [L x C]
  Var<T> sim;       ///< [L x N]
  std::vector<Var<T>> weights;
};

template <typename T>
struct SAUStepOutput {
  Var<T> enhanced;
  MaskStack<T> new_mask;
  Var<T> updated_g;
  Var<T> sim;
};

/// One semantics-attention + class-updater block. Features are queries,
/// class embeddings are keys and values.
template <typename T>
struct SemanticsAttentionUpdater {
  nn::NormAffine<T> norm_x;
  nn::NormAffine<T> norm_g;
  nn::Attention<T> attention;
  nn::NormAffine<T> norm_mlp;
  nn::MLPBlock<T> mlp;
  nn::Linear<T> phi3, phi4, psi1, psi2;
  nn::NormAffine<T> psi1_norm, psi2_norm;
  UpdaterMode mode = UpdaterMode::kGated;

  SemanticsAttentionUpdater() = default;
  SemanticsAttentionUpdater(const std::string& name, std::size_t width, std::size_t heads, nn::Rng& rng,
                            UpdaterMode mode_ = UpdaterMode::kGated)
      : norm_x(name + ".norm_x", width),
        norm_g(name + ".norm_g", width),
        attention(name + ".attn", width, heads, rng),
        norm_mlp(name + ".norm_mlp", width),
        mlp(name + ".mlp", width, rng),
        phi3(name + ".phi3", width, width, rng),
        phi4(name + ".phi4", width, width, rng),
        psi1(name + ".psi1", width, width, rng),
        psi2(name + ".psi2", width, width, rng),
        psi1_norm(name + ".psi1_norm", width),
        psi2_norm(name + ".psi2_norm", width),
        mode(mode_) {
    // Each step starts as the identity on class embeddings.
    psi2.zero();
  }

  std::size_t width() const { return attention.width(); }

  SemanticsAttentionOutput<T> attend(Tape<T>& tape, const Var<T>& x, const Var<T>& g, std::size_t h, std::size_t w) {
    detail::require_rank("semantics_attention", x.shape(), 2);
    if (x.dim(0) != h * w) {
      throw DimensionError("semantics_attention: " + std::to_string(x.dim(0)) + " tokens do not form a " +
                           std::to_string(h) + "x" + std::to_string(w) + " grid");
    }
    if (g.dim(0) == 0 || x.dim(0) == 0) throw ContractError("semantics_attention: empty queries or keys");
    auto att = attention(tape, norm_x.layer(tape, x, 1), norm_g.layer(tape, g, 1));
    Var<T> x1 = add(x, att.out);
    Var<T> enhanced = add(x1, mlp(tape, norm_mlp.layer(tape, x1, 1), h, w));
    return {enhanced, att.sim, std::move(att.weights)};
  }

  Var<T> update(Tape<T>& tape, const Var<T>& g, const Var<T>& g_hat) {
    detail::require_same_shape("class_update", g.shape(), g_hat.shape());
    Var<T> proposal = psi2_norm.layer(tape, psi2(tape, g_hat), 1);
    if (mode == UpdaterMode::kNaivePlus) return add(proposal, g);
    Var<T> fused = mul(phi3(tape, g_hat), phi4(tape, g));
    Var<T> gate = sigmoid(psi1_norm.layer(tape, psi1(tape, fused), 1));
    return add(mul(gate, proposal), g);
  }

  SAUStepOutput<T> step(Tape<T>& tape, const Var<T>& x_prev, const Var<T>& g, ClassExtractor<T>& ece, std::size_t h,
                        std::size_t w, int stage) {
    auto att = attend(tape, x_prev, g, h, w);
    MaskStack<T> mask{similarity_to_mask(att.sim, h, w), stage};
    Var<T> g_hat = ece(tape, mask);
    return {att.enhanced, mask, update(tape, g, g_hat), att.sim};
  }

  template <typename F>
  void visit(F&& f) {
    norm_x.visit(f);
    norm_g.visit(f);
    attention.visit(f);
    norm_mlp.visit(f);
    mlp.visit(f);
    phi3.visit(f);
    phi4.visit(f);
    psi1.visit(f);
    psi2.visit(f);
    psi1_norm.visit(f);
    psi2_norm.visit(f);
  }
};

}  // namespace ecenet
