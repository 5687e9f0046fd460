#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "ecenet/grad_check.hpp"
#include "ecenet/model.hpp"

// Finite-difference checks over every differentiable op and block, in double
// precision. Shared by the CLI `gradcheck` command and the test suites.

namespace ecenet {

inline constexpr double kOpGradTolerance = 1e-6;
inline constexpr double kModelGradTolerance = 1e-4;

struct GradCheckCase {
  std::string name;
  std::function<double(std::uint64_t seed)> run;  ///< max relative error for one seed
};

struct GradCheckReport {
  std::string name;
  double max_error = 0;
};

namespace gc {

using D = double;
using Vars = std::vector<Var<D>>;
using Rng = std::mt19937_64;

/// Fixed, index-dependent weights so the scalar probe sees every output.
inline Var<D> probe(Tape<D>& tape, const Var<D>& y) {
  Tensor<D> w(y.shape());
  for (std::size_t i = 0; i < w.numel(); ++i) w[i] = std::cos(1.3 * static_cast<double>(i) + 0.5);
  return sum_all(mul(y, tape.constant(std::move(w))));
}

inline Tensor<D> rand(Shape s, Rng& rng, D lo = -1, D hi = 1) { return Tensor<D>::uniform(std::move(s), lo, hi, rng); }

/// Checks `f` against each input in turn, the others held constant.
inline double check_inputs(const std::vector<Tensor<D>>& inputs, const std::function<Var<D>(Tape<D>&, const Vars&)>& f) {
  double worst = 0;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    TapeFn<D> g = [&](Tape<D>& tape, const Var<D>& xi) {
      Vars vs;
      for (std::size_t j = 0; j < inputs.size(); ++j) vs.push_back(j == i ? xi : tape.constant(inputs[j]));
      return probe(tape, f(tape, vs));
    };
    worst = std::max(worst, grad_check<D>(g, inputs[i]));
  }
  return worst;
}

/// Inputs plus every parameter reachable through `visit`.
template <typename Block>
double check_block(Block& block, const std::vector<Tensor<D>>& inputs,
                   const std::function<Var<D>(Tape<D>&, Block&, const Vars&)>& f) {
  double worst = check_inputs(inputs, [&](Tape<D>& tape, const Vars& vs) { return f(tape, block, vs); });
  block.visit([&](Parameter<D>& p) {
    std::function<Var<D>(Tape<D>&)> g = [&](Tape<D>& tape) {
      Vars vs;
      for (const auto& t : inputs) vs.push_back(tape.constant(t));
      return probe(tape, f(tape, block, vs));
    };
    worst = std::max(worst, grad_check_param<D>(g, p));
  });
  return worst;
}

/// Randomizes every parameter so zero-initialized ones are exercised too.
template <typename Block>
void jitter(Block& block, Rng& rng) {
  block.visit([&](Parameter<D>& p) { p.value = rand(p.value.shape(), rng, -0.5, 0.5); });
}

inline GradCheckCase op(std::string name, std::function<std::vector<Tensor<D>>(Rng&)> make,
                        std::function<Var<D>(Tape<D>&, const Vars&)> f) {
  return {std::move(name), [make, f](std::uint64_t seed) {
            Rng rng(seed);
            return check_inputs(make(rng), f);
          }};
}

}  // namespace gc

/// Every tensor op, loss and block with a hand-written backward.
inline std::vector<GradCheckCase> gradcheck_cases() {
  using namespace gc;
  std::vector<GradCheckCase> c;
  auto shapes = [](std::vector<Shape> ss, D lo = -1, D hi = 1) {
    return [ss, lo, hi](Rng& rng) {
      std::vector<Tensor<D>> out;
      for (const auto& s : ss) out.push_back(rand(s, rng, lo, hi));
      return out;
    };
  };

  c.push_back(op("add", shapes({{2, 3, 4}, {2, 3, 4}}), [](Tape<D>&, const Vars& v) { return add(v[0], v[1]); }));
  c.push_back(op("sub", shapes({{2, 3, 4}, {2, 3, 4}}), [](Tape<D>&, const Vars& v) { return sub(v[0], v[1]); }));
  c.push_back(op("mul", shapes({{2, 3, 4}, {2, 3, 4}}), [](Tape<D>&, const Vars& v) { return mul(v[0], v[1]); }));
  c.push_back(op("scale", shapes({{3, 4}}), [](Tape<D>&, const Vars& v) { return scale(v[0], -1.7); }));
  c.push_back(op("mul_channels", shapes({{3, 2, 2}, {3}}),
                 [](Tape<D>&, const Vars& v) { return mul_channels(v[0], v[1]); }));
  c.push_back(op("sigmoid", shapes({{2, 3, 3}}, -4, 4), [](Tape<D>&, const Vars& v) { return sigmoid(v[0]); }));
  c.push_back(op("gelu", shapes({{2, 3, 3}}, -3, 3), [](Tape<D>&, const Vars& v) { return gelu(v[0]); }));
  c.push_back(op("matmul", shapes({{3, 4}, {4, 2}}), [](Tape<D>&, const Vars& v) { return matmul(v[0], v[1]); }));
  c.push_back(op("linear", shapes({{3, 4}, {5, 4}, {5}}),
                 [](Tape<D>&, const Vars& v) { return linear(v[0], v[1], v[2]); }));
  c.push_back(op("conv1x1", shapes({{3, 2, 3}, {4, 3}, {4}}),
                 [](Tape<D>&, const Vars& v) { return conv1x1(v[0], v[1], v[2]); }));
  c.push_back(op("conv2d", shapes({{2, 5, 5}, {3, 2, 3, 3}, {3}}),
                 [](Tape<D>&, const Vars& v) { return conv2d(v[0], v[1], v[2], 2, 1); }));
  c.push_back(op("conv2d_patch", shapes({{2, 4, 4}, {3, 2, 2, 2}, {3}}),
                 [](Tape<D>&, const Vars& v) { return conv2d(v[0], v[1], v[2], 2, 0); }));
  c.push_back(op("dwconv3x3", shapes({{2, 4, 3}, {2, 3, 3}}),
                 [](Tape<D>&, const Vars& v) { return dwconv3x3(v[0], v[1]); }));
  c.push_back(op("dwconv3x3_1x1", shapes({{3, 1, 1}, {3, 3, 3}}),
                 [](Tape<D>&, const Vars& v) { return dwconv3x3(v[0], v[1]); }));
  c.push_back(op("layernorm_last", shapes({{3, 5}, {5}, {5}}),
                 [](Tape<D>&, const Vars& v) { return layernorm(v[0], v[1], v[2], 1); }));
  c.push_back(op("layernorm_channel", shapes({{4, 3, 2}, {4}, {4}}),
                 [](Tape<D>&, const Vars& v) { return layernorm(v[0], v[1], v[2], 0); }));
  c.push_back(op("instance_norm", shapes({{3, 3, 4}, {3}, {3}}),
                 [](Tape<D>&, const Vars& v) { return instance_norm(v[0], v[1], v[2]); }));
  c.push_back(op("softmax_0", shapes({{4, 3}}, -2, 2), [](Tape<D>&, const Vars& v) { return softmax(v[0], 0); }));
  c.push_back(op("softmax_1", shapes({{3, 5}}, -2, 2), [](Tape<D>&, const Vars& v) { return softmax(v[0], 1); }));
  c.push_back(op("sum_axis", shapes({{2, 3, 4}}), [](Tape<D>&, const Vars& v) { return sum(v[0], 1); }));
  c.push_back(op("mean_axis", shapes({{2, 3, 4}}), [](Tape<D>&, const Vars& v) { return mean(v[0], 2); }));
  c.push_back(op("max_axis", shapes({{2, 3, 4}}), [](Tape<D>&, const Vars& v) { return max(v[0], 0); }));
  c.push_back(op("sum_all", shapes({{2, 3}}), [](Tape<D>&, const Vars& v) { return sum_all(v[0]); }));
  c.push_back(op("mean_all", shapes({{2, 3}}), [](Tape<D>&, const Vars& v) { return mean_all(v[0]); }));
  c.push_back(op("reshape", shapes({{2, 3, 4}}), [](Tape<D>&, const Vars& v) { return reshape(v[0], {4, 6}); }));
  c.push_back(op("transpose", shapes({{3, 5}}), [](Tape<D>&, const Vars& v) { return transpose(v[0]); }));
  c.push_back(op("concat_0", shapes({{2, 3, 2}, {1, 3, 2}}),
                 [](Tape<D>&, const Vars& v) { return concat(Vars{v[0], v[1]}, 0); }));
  c.push_back(op("concat_1", shapes({{2, 3}, {2, 1}, {2, 2}}),
                 [](Tape<D>&, const Vars& v) { return concat(Vars{v[0], v[1], v[2]}, 1); }));
  c.push_back(op("slice", shapes({{3, 5}}), [](Tape<D>&, const Vars& v) { return slice(v[0], 1, 1, 3); }));
  c.push_back(op("adaptive_avg_pool2d", shapes({{2, 5, 7}}),
                 [](Tape<D>&, const Vars& v) { return adaptive_avg_pool2d(v[0], 3, 2); }));
  c.push_back(op("pixel_shuffle", shapes({{8, 2, 3}}), [](Tape<D>&, const Vars& v) { return pixel_shuffle(v[0], 2); }));
  c.push_back(op("nearest_resize", shapes({{2, 3, 3}}),
                 [](Tape<D>&, const Vars& v) { return nearest_resize(v[0], 5, 4); }));
  c.push_back(op("bilinear_up", shapes({{2, 3, 4}}),
                 [](Tape<D>&, const Vars& v) { return bilinear_resize(v[0], 5, 7); }));
  c.push_back(op("bilinear_down", shapes({{2, 6, 6}}),
                 [](Tape<D>&, const Vars& v) { return bilinear_resize(v[0], 4, 3); }));

  // Losses take fixed targets drawn from the same seed.
  c.push_back({"cross_entropy_loss", [](std::uint64_t seed) {
                 Rng rng(seed);
                 LabelMap gt(3, 4);
                 for (auto& v : gt.data) v = static_cast<std::uint8_t>(rng() % 3);
                 gt.data[5] = kIgnoreLabel;
                 return check_inputs({rand({3, 3, 4}, rng, -2, 2)},
                                     [&](Tape<D>&, const Vars& v) { return cross_entropy_loss(v[0], gt); });
               }});
  c.push_back({"focal_loss", [](std::uint64_t seed) {
                 Rng rng(seed);
                 LabelMap gt(3, 3);
                 for (auto& v : gt.data) v = static_cast<std::uint8_t>(rng() % 3);
                 gt.data[4] = kIgnoreLabel;
                 const auto target = one_hot<D>(gt, 3);
                 const auto valid = valid_mask<D>(gt, 3);
                 return check_inputs({rand({3, 3, 3}, rng, -3, 3)},
                                     [&](Tape<D>&, const Vars& v) { return focal_loss(v[0], target, valid, 2.0, 0.25); });
               }});
  c.push_back({"dice_loss", [](std::uint64_t seed) {
                 Rng rng(seed);
                 LabelMap gt(3, 3);
                 for (auto& v : gt.data) v = static_cast<std::uint8_t>(rng() % 3);
                 gt.data[0] = kIgnoreLabel;
                 const auto target = one_hot<D>(gt, 3);
                 const auto valid = valid_mask<D>(gt, 3);
                 return check_inputs({rand({3, 3, 3}, rng, -3, 3)},
                                     [&](Tape<D>&, const Vars& v) { return dice_loss(v[0], target, valid); });
               }});
  c.push_back(op("diversity_loss", shapes({{4, 3, 3}}, -2, 2),
                 [](Tape<D>&, const Vars& v) { return diversity_loss(v[0]); }));

  // Blocks: inputs and every parameter.
  c.push_back({"Linear", [](std::uint64_t seed) {
                 Rng rng(seed);
                 nn::Linear<D> b("l", 4, 3, rng);
                 jitter(b, rng);
                 return check_block<nn::Linear<D>>(b, {rand({2, 4}, rng)},
                                                   [](Tape<D>& t, auto& blk, const Vars& v) { return blk(t, v[0]); });
               }});
  c.push_back({"Conv1x1", [](std::uint64_t seed) {
                 Rng rng(seed);
                 nn::Conv1x1<D> b("c", 3, 2, rng);
                 jitter(b, rng);
                 return check_block<nn::Conv1x1<D>>(b, {rand({3, 2, 2}, rng)},
                                                    [](Tape<D>& t, auto& blk, const Vars& v) { return blk(t, v[0]); });
               }});
  c.push_back({"Conv2d", [](std::uint64_t seed) {
                 Rng rng(seed);
                 nn::Conv2d<D> b("c", 2, 3, 3, 1, 1, rng);
                 jitter(b, rng);
                 return check_block<nn::Conv2d<D>>(b, {rand({2, 4, 3}, rng)},
                                                   [](Tape<D>& t, auto& blk, const Vars& v) { return blk(t, v[0]); });
               }});
  c.push_back({"DepthwiseConv", [](std::uint64_t seed) {
                 Rng rng(seed);
                 nn::DepthwiseConv<D> b("d", 2, rng);
                 return check_block<nn::DepthwiseConv<D>>(
                     b, {rand({2, 3, 3}, rng)}, [](Tape<D>& t, auto& blk, const Vars& v) { return blk(t, v[0]); });
               }});
  c.push_back({"NormAffine.layer", [](std::uint64_t seed) {
                 Rng rng(seed);
                 nn::NormAffine<D> b("n", 4);
                 jitter(b, rng);
                 return check_block<nn::NormAffine<D>>(
                     b, {rand({3, 4}, rng)}, [](Tape<D>& t, auto& blk, const Vars& v) { return blk.layer(t, v[0], 1); });
               }});
  c.push_back({"NormAffine.instance", [](std::uint64_t seed) {
                 Rng rng(seed);
                 nn::NormAffine<D> b("n", 2);
                 jitter(b, rng);
                 return check_block<nn::NormAffine<D>>(
                     b, {rand({2, 3, 3}, rng)}, [](Tape<D>& t, auto& blk, const Vars& v) { return blk.instance(t, v[0]); });
               }});
  c.push_back({"SEBlock", [](std::uint64_t seed) {
                 Rng rng(seed);
                 nn::SEBlock<D> b("se", 8, rng);
                 jitter(b, rng);
                 return check_block<nn::SEBlock<D>>(b, {rand({8, 2, 2}, rng)},
                                                    [](Tape<D>& t, auto& blk, const Vars& v) { return blk(t, v[0]); });
               }});
  c.push_back({"Attention", [](std::uint64_t seed) {
                 Rng rng(seed);
                 nn::Attention<D> b("a", 8, 2, rng);
                 return check_block<nn::Attention<D>>(b, {rand({5, 8}, rng), rand({3, 8}, rng)},
                                                      [](Tape<D>& t, auto& blk, const Vars& v) {
                                                        auto r = blk(t, v[0], v[1]);
                                                        return add(sum_all(r.out), scale(sum_all(r.sim), 0.5));
                                                      });
               }});
  c.push_back({"MLPBlock", [](std::uint64_t seed) {
                 Rng rng(seed);
                 nn::MLPBlock<D> b("m", 4, rng);
                 return check_block<nn::MLPBlock<D>>(b, {rand({6, 4}, rng)},
                                                     [](Tape<D>& t, auto& blk, const Vars& v) { return blk(t, v[0], 2, 3); });
               }});
  c.push_back({"GhostExpand", [](std::uint64_t seed) {
                 Rng rng(seed);
                 nn::GhostExpand<D> b("g", 3, 4, rng);
                 return check_block<nn::GhostExpand<D>>(b, {rand({3, 2, 2}, rng)},
                                                        [](Tape<D>& t, auto& blk, const Vars& v) { return blk(t, v[0]); });
               }});
  c.push_back({"FeatureReconstruction", [](std::uint64_t seed) {
                 Rng rng(seed);
                 FeatureReconstruction<D> b("fr", 4, rng);
                 jitter(b, rng);
                 return check_block<FeatureReconstruction<D>>(b, {rand({4, 3, 3}, rng)},
                                                              [](Tape<D>& t, auto& blk, const Vars& v) {
                                                                auto r = blk(t, v[0]);
                                                                return add(sum_all(r.y), diversity_loss(r.diverse));
                                                              });
               }});
  c.push_back({"ClassExtractor", [](std::uint64_t seed) {
                 Rng rng(seed);
                 ClassExtractor<D> b("ece", 1.0, 5, 3, rng);
                 return check_block<ClassExtractor<D>>(b, {rand({5, 3, 4}, rng)},
                                                       [](Tape<D>& t, auto& blk, const Vars& v) {
                                                         return blk(t, MaskStack<D>{v[0], 2});
                                                       });
               }});
  c.push_back({"SemanticsAttentionUpdater", [](std::uint64_t seed) {
                 Rng rng(seed);
                 SemanticsAttentionUpdater<D> b("sau", 4, 2, rng);
                 ClassExtractor<D> ece("ece", 1.0, 3, 4, rng);
                 jitter(b, rng);
                 return check_block<SemanticsAttentionUpdater<D>>(
                     b, {rand({6, 4}, rng), rand({3, 4}, rng)}, [&](Tape<D>& t, auto& blk, const Vars& v) {
                       auto r = blk.step(t, v[0], v[1], ece, 2, 3, 2);
                       return add(sum_all(r.enhanced), sum_all(r.updated_g));
                     });
               }});
  return c;
}

/// Runs every case over `seeds` seeds (0..seeds-1) and keeps the worst error.
inline std::vector<GradCheckReport> run_gradcheck_suite(std::size_t seeds = 10) {
  std::vector<GradCheckReport> out;
  for (const auto& cs : gradcheck_cases()) {
    GradCheckReport r{cs.name, 0};
    for (std::size_t s = 0; s < seeds; ++s) r.max_error = std::max(r.max_error, cs.run(1000 + s));
    out.push_back(r);
  }
  return out;
}

/// Narrow model for the end-to-end check: 4 classes, width 16.
inline ModelConfig micro_model_config() {
  ModelConfig cfg;
  cfg.n_classes = 4;
  cfg.width = 16;
  cfg.encoder.widths = {8, 8, 8, 8};
  return cfg;
}

/// Full training loss of the micro model on one 64x64 image: checks the image
/// gradient and `samples_per_param` random coordinates of every parameter.
inline double model_gradcheck(std::uint64_t seed, std::size_t samples_per_param = 3) {
  using D = double;
  const ModelConfig cfg = micro_model_config();
  ECENet<D> model(cfg, seed);
  std::mt19937_64 rng(seed + 17);
  // Move every parameter off its initialization (zero psi2, unit norms).
  model.visit([&](Parameter<D>& p) {
    for (std::size_t i = 0; i < p.value.numel(); ++i)
      p.value[i] += std::uniform_real_distribution<D>(-0.1, 0.1)(rng);
  });
  const std::size_t size = 64;
  Tensor<D> image = Tensor<D>::uniform({3, size, size}, 0.0, 1.0, rng);
  LabelMap gt(size, size);
  for (std::size_t i = 0; i < size; ++i)
    for (std::size_t j = 0; j < size; ++j)
      gt.at(i, j) = static_cast<std::uint8_t>((i / 21 + j / 26) % cfg.n_classes);
  gt.at(0, 0) = kIgnoreLabel;
  const LossWeights lw;

  auto loss_of = [&](Tape<D>& tape, const Var<D>& img) { return model.loss(model.forward(tape, img), gt, lw).total; };

  for (auto* p : model.parameters()) p->zero_grad();
  Parameter<D> img_param("image", image);
  img_param.zero_grad();
  {
    Tape<D> tape;
    tape.backward(loss_of(tape, tape.param(img_param)));
  }
  auto eval = [&]() {
    Tape<D> tape(false);
    return static_cast<D>(loss_of(tape, tape.constant(img_param.value)).value()[0]);
  };
  const D eps = 1e-5;
  D worst = 0;
  auto probe_coord = [&](Parameter<D>& p, std::size_t i) {
    const D orig = p.value[i];
    p.value[i] = orig + eps;
    const D up = eval();
    p.value[i] = orig - eps;
    const D down = eval();
    p.value[i] = orig;
    const D numeric = (up - down) / (2 * eps);
    worst = std::max(worst, std::abs(p.grad[i] - numeric) / std::max<D>(1, std::abs(numeric)));
  };
  for (std::size_t k = 0; k < 2 * samples_per_param; ++k) probe_coord(img_param, rng() % img_param.value.numel());
  for (auto* p : model.parameters())
    for (std::size_t k = 0; k < samples_per_param; ++k) probe_coord(*p, rng() % p->value.numel());
  return worst;
}

}  // namespace ecenet
