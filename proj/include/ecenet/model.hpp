#pragma once

#include <array>
#include <string>
#include <vector>

#include "ecenet/class_extraction.hpp"
#include "ecenet/feature_reconstruction.hpp"
#include "ecenet/losses.hpp"
#include "ecenet/semantics_attention.hpp"

namespace ecenet {

inline constexpr std::size_t kStages = 4;

struct EncoderConfig {
  std::size_t patch = 4;
  std::array<std::size_t, kStages> widths{32, 64, 128, 256};
  std::size_t blocks_per_stage = 1;
};

struct ModelConfig {
  std::size_t n_classes = 4;
  double alpha = 1.0;
  std::size_t width = 64;  ///< unified channel width C
  std::size_t heads = 0;   ///< 0 picks default_heads(width)
  EncoderConfig encoder;
  bool use_fr = true;
  UpdaterMode updater = UpdaterMode::kGated;
};

struct LossWeights {
  double lambda_div = 0.2;
  double lambda_focal = 1.0;
  double lambda_dice = 1.0;
  double focal_gamma = 2.0;
  double focal_alpha = 0.25;
};

/// Backbone features F1..F4 at 1/4, 1/8, 1/16, 1/32 of the input.
template <typename T>
struct StageFeatures {
  std::array<Var<T>, kStages> f;
};

/// Stand-in backbone: stride-4 patch stem, then stride-2 patch merging per
/// stage. Every block is conv + channel LayerNorm + gelu; stage blocks are
/// residual depthwise-then-pointwise units.
template <typename T>
struct ToyEncoder {
  struct Block {
    nn::DepthwiseConv<T> dw;
    nn::Conv1x1<T> pw;
    nn::NormAffine<T> norm;

    template <typename F>
    void visit(F&& f) {
      dw.visit(f);
      pw.visit(f);
      norm.visit(f);
    }
  };

  EncoderConfig cfg;
  std::array<nn::Conv2d<T>, kStages> down;
  std::array<nn::NormAffine<T>, kStages> down_norm;
  std::array<std::vector<Block>, kStages> blocks;

  ToyEncoder() = default;
  ToyEncoder(const EncoderConfig& c, nn::Rng& rng) : cfg(c) {
    std::size_t in = 3;
    for (std::size_t s = 0; s < kStages; ++s) {
      const std::string name = "encoder.stage" + std::to_string(s + 1);
      const std::size_t k = s == 0 ? cfg.patch : 2;
      down[s] = nn::Conv2d<T>(name + ".down", in, cfg.widths[s], k, k, 0, rng);
      down_norm[s] = nn::NormAffine<T>(name + ".down_norm", cfg.widths[s]);
      for (std::size_t b = 0; b < cfg.blocks_per_stage; ++b) {
        const std::string bn = name + ".block" + std::to_string(b);
        blocks[s].push_back(Block{nn::DepthwiseConv<T>(bn + ".dw", cfg.widths[s], rng),
                                  nn::Conv1x1<T>(bn + ".pw", cfg.widths[s], cfg.widths[s], rng),
                                  nn::NormAffine<T>(bn + ".norm", cfg.widths[s])});
      }
      in = cfg.widths[s];
    }
  }

  StageFeatures<T> operator()(Tape<T>& tape, const Var<T>& image) {
    detail::require_rank("toy_encoder", image.shape(), 3);
    const std::size_t stride = cfg.patch << (kStages - 1);
    if (image.dim(0) != 3 || image.dim(1) % stride != 0 || image.dim(2) % stride != 0) {
      throw DimensionError("toy_encoder: image " + shape_str(image.shape()) + " must be 3 x H x W with H, W divisible by " +
                           std::to_string(stride));
    }
    StageFeatures<T> out;
    Var<T> x = image;
    for (std::size_t s = 0; s < kStages; ++s) {
      x = gelu(down_norm[s].layer(tape, down[s](tape, x), 0));
      for (auto& b : blocks[s]) x = add(x, gelu(b.norm.layer(tape, b.pw(tape, b.dw(tape, x)), 0)));
      out.f[s] = x;
    }
    return out;
  }

  template <typename F>
  void visit(F&& f) {
    for (std::size_t s = 0; s < kStages; ++s) {
      down[s].visit(f);
      down_norm[s].visit(f);
      for (auto& b : blocks[s]) b.visit(f);
    }
  }
};

template <typename T>
struct ModelOutput {
  Var<T> seg_logits;     ///< [N x H x W]
  Var<T> base_logits;    ///< [N x H/4 x W/4], aggregation head only
  Var<T> summed_mask;    ///< [N x H/4 x W/4]
  Var<T> class_probs;    ///< [N x N], rows sum to one
  Var<T> enhancement;    ///< class_probs^T * summed_mask, [N x H/4 x W/4]
  std::vector<Var<T>> div_losses;             ///< one per stage; empty without FR
  std::array<MaskStack<T>, kStages> masks;    ///< index s holds stage s+1
  std::array<Var<T>, kStages> unified;        ///< X1..X4
  std::array<Var<T>, kStages> enhanced;       ///< stage features fed to aggregation, C x H_i x W_i
  Var<T> g;                                   ///< final class embeddings [N x C]
};

template <typename T>
struct LossBreakdown {
  Var<T> total;
  double ce = 0;
  double mask = 0;
  double div = 0;
};

template <typename T>
class ECENet {
 public:
  ModelConfig cfg;
  ToyEncoder<T> encoder;
  std::array<FeatureReconstruction<T>, kStages> fr;
  std::array<nn::Conv1x1<T>, kStages> unify;
  MaskHead<T> mask_head;
  ClassExtractor<T> ece;
  std::array<SemanticsAttentionUpdater<T>, kStages - 1> sau;  ///< index s serves stage s+1
  std::array<nn::GhostExpand<T>, kStages> ghost;
  nn::Conv1x1<T> aggregate;
  nn::Linear<T> classifier;

  ECENet() = default;

  ECENet(const ModelConfig& c, std::uint64_t seed) : cfg(c) {
    if (cfg.n_classes < 2) throw ConfigError("model needs at least two classes");
    if (cfg.width == 0) throw ConfigError("unified width must be positive");
    for (auto w : cfg.encoder.widths) {
      if (w == 0 || w % 2 != 0) throw ConfigError("encoder widths must be even, got " + std::to_string(w));
    }
    nn::Rng rng(seed);
    const std::size_t heads = cfg.heads ? cfg.heads : default_heads(cfg.width);
    encoder = ToyEncoder<T>(cfg.encoder, rng);
    for (std::size_t s = 0; s < kStages; ++s) {
      const std::string tag = std::to_string(s + 1);
      if (cfg.use_fr) fr[s] = FeatureReconstruction<T>("fr" + tag, cfg.encoder.widths[s], rng);
      unify[s] = nn::Conv1x1<T>("unify" + tag, cfg.encoder.widths[s], cfg.width, rng);
    }
    mask_head = MaskHead<T>("mask_head", cfg.width, cfg.n_classes, rng);
    ece = ClassExtractor<T>("ece", cfg.alpha, cfg.n_classes, cfg.width, rng);
    for (std::size_t s = 0; s + 1 < kStages; ++s) {
      sau[s] = SemanticsAttentionUpdater<T>("sau" + std::to_string(s + 1), cfg.width, heads, rng, cfg.updater);
    }
    for (std::size_t s = 0; s < kStages; ++s) {
      const std::size_t r = std::size_t{1} << s;
      ghost[s] = nn::GhostExpand<T>("ghost" + std::to_string(s + 1), cfg.width, r * r, rng);
    }
    aggregate = nn::Conv1x1<T>("aggregate", cfg.width * kStages, cfg.n_classes, rng);
    classifier = nn::Linear<T>("classifier", cfg.width, cfg.n_classes, rng);
  }

  ModelOutput<T> forward(Tape<T>& tape, const Tensor<T>& image) { return forward(tape, tape.constant(image)); }

  ModelOutput<T> forward(Tape<T>& tape, const Var<T>& image) {
    ModelOutput<T> out;
    StageFeatures<T> feats = encoder(tape, image);
    for (std::size_t s = 0; s < kStages; ++s) {
      Var<T> y = feats.f[s];
      if (cfg.use_fr) {
        auto r = fr[s](tape, y);
        out.div_losses.push_back(diversity_loss(r.diverse));
        y = r.y;
      }
      out.unified[s] = unify[s](tape, y);
    }

    out.masks[3] = mask_head(tape, out.unified[3]);
    Var<T> g = ece(tape, out.masks[3]);
    out.enhanced[3] = out.unified[3];
    for (std::size_t s = kStages - 1; s-- > 0;) {
      const Var<T>& x = out.unified[s];
      const std::size_t c = x.dim(0), h = x.dim(1), w = x.dim(2);
      Var<T> tokens = transpose(reshape(x, {c, h * w}));
      auto step = sau[s].step(tape, tokens, g, ece, h, w, static_cast<int>(s + 1));
      out.enhanced[s] = reshape(transpose(step.enhanced), {c, h, w});
      out.masks[s] = step.new_mask;
      g = step.updated_g;
    }
    out.g = g;

    const std::size_t h4 = out.unified[0].dim(1), w4 = out.unified[0].dim(2);
    std::vector<Var<T>> ups;
    for (std::size_t s = 0; s < kStages; ++s) {
      const std::size_t r = std::size_t{1} << s;
      ups.push_back(r == 1 ? out.enhanced[s] : pixel_shuffle(ghost[s](tape, out.enhanced[s]), r));
    }
    out.base_logits = aggregate(tape, concat(ups, 0));

    Var<T> summed;
    for (std::size_t s = 0; s < kStages; ++s) {
      const Var<T>& m = out.masks[s].logits;
      Var<T> resized = m.dim(1) == h4 && m.dim(2) == w4 ? m : bilinear_resize(m, h4, w4);
      summed = s == 0 ? resized : add(summed, resized);
    }
    out.summed_mask = summed;

    const std::size_t n = cfg.n_classes;
    out.class_probs = softmax(classifier(tape, g), 1);
    out.enhancement = reshape(matmul(transpose(out.class_probs), reshape(summed, {n, h4 * w4})), {n, h4, w4});
    out.seg_logits = bilinear_resize(add(out.base_logits, out.enhancement), image.dim(1), image.dim(2));
    return out;
  }

  /// CE(seg_logits) + lambda_focal * focal + lambda_dice * dice on the summed
  /// masks at 1/4 resolution + lambda_div * mean of the per-stage diversity losses.
  LossBreakdown<T> loss(const ModelOutput<T>& out, const LabelMap& gt, const LossWeights& lw) const {
    LossBreakdown<T> res;
    Var<T> ce = cross_entropy_loss(out.seg_logits, gt);
    res.ce = static_cast<double>(ce.value()[0]);
    Var<T> total = ce;

    const std::size_t n = cfg.n_classes;
    if (lw.lambda_focal > 0 || lw.lambda_dice > 0) {
      const LabelMap gt4 = downsample_nearest(gt, out.summed_mask.dim(1), out.summed_mask.dim(2));
      const Tensor<T> target = one_hot<T>(gt4, n);
      const Tensor<T> valid = valid_mask<T>(gt4, n);
      Var<T> mask_loss;
      bool have = false;
      if (lw.lambda_focal > 0) {
        mask_loss = scale(focal_loss(out.summed_mask, target, valid, static_cast<T>(lw.focal_gamma),
                                     static_cast<T>(lw.focal_alpha)),
                          static_cast<T>(lw.lambda_focal));
        have = true;
      }
      if (lw.lambda_dice > 0) {
        Var<T> d = scale(dice_loss(out.summed_mask, target, valid), static_cast<T>(lw.lambda_dice));
        mask_loss = have ? add(mask_loss, d) : d;
      }
      res.mask = static_cast<double>(mask_loss.value()[0]);
      total = add(total, mask_loss);
    }

    if (!out.div_losses.empty()) {
      Var<T> div_sum = out.div_losses.front();
      for (std::size_t s = 1; s < out.div_losses.size(); ++s) div_sum = add(div_sum, out.div_losses[s]);
      Var<T> div_mean = scale(div_sum, T(1) / static_cast<T>(out.div_losses.size()));
      res.div = static_cast<double>(div_mean.value()[0]);
      if (lw.lambda_div > 0) total = add(total, scale(div_mean, static_cast<T>(lw.lambda_div)));
    }
    res.total = total;
    return res;
  }

  template <typename F>
  void visit(F&& f) {
    encoder.visit(f);
    if (cfg.use_fr)
      for (auto& b : fr) b.visit(f);
    for (auto& u : unify) u.visit(f);
    mask_head.visit(f);
    ece.visit(f);
    for (auto& s : sau) s.visit(f);
    for (auto& gh : ghost) gh.visit(f);
    aggregate.visit(f);
    classifier.visit(f);
  }

  std::vector<Parameter<T>*> parameters() {
    std::vector<Parameter<T>*> ps;
    visit([&](Parameter<T>& p) { ps.push_back(&p); });
    return ps;
  }

  std::size_t parameter_count() {
    std::size_t n = 0;
    visit([&](Parameter<T>& p) { n += p.value.numel(); });
    return n;
  }
};

}  // namespace ecenet
