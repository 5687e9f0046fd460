#include <gtest/gtest.h>

#include "test_util.hpp"

using namespace ecenet;
using namespace testutil;

namespace {

struct Fixture {
  nn::Rng rng;
  SemanticsAttentionUpdater<D> sau;
  ClassExtractor<D> ece;

  Fixture(std::size_t width, std::size_t heads, std::size_t n_classes, std::uint64_t seed,
          UpdaterMode mode = UpdaterMode::kGated)
      : rng(seed), sau("sau", width, heads, rng, mode), ece("ece", 1.0, n_classes, width, rng) {}
};

Mat attend_oracle(SemanticsAttentionUpdater<D>& s, const Mat& x, const Mat& g, std::size_t h, std::size_t w,
                  Mat* sim_out) {
  auto& a = s.attention;
  const auto xn = layernorm_rows(x, s.norm_x.gamma.value, s.norm_x.beta.value);
  const auto gn = layernorm_rows(g, s.norm_g.gamma.value, s.norm_g.beta.value);
  const auto q = linear(xn, a.q.weight.value, a.q.bias.value);
  const auto k = linear(gn, a.k.weight.value, a.k.bias.value);
  const auto v = linear(gn, a.v.weight.value, a.v.bias.value);
  const std::size_t c = q[0].size();
  Mat mixed(q.size(), std::vector<D>(c, 0)), sim(q.size(), std::vector<D>(k.size()));
  for (std::size_t l = 0; l < q.size(); ++l) {
    for (std::size_t n = 0; n < k.size(); ++n) {
      D d = 0;
      for (std::size_t j = 0; j < c; ++j) d += q[l][j] * k[n][j];
      sim[l][n] = d / std::sqrt(static_cast<D>(c));
    }
    const auto p = softmax(sim[l]);
    for (std::size_t n = 0; n < k.size(); ++n)
      for (std::size_t j = 0; j < c; ++j) mixed[l][j] += p[n] * v[n][j];
  }
  const auto att = linear(mixed, a.o.weight.value, a.o.bias.value);
  Mat x1 = x;
  for (std::size_t l = 0; l < x.size(); ++l)
    for (std::size_t j = 0; j < c; ++j) x1[l][j] += att[l][j];
  const auto x1n = layernorm_rows(x1, s.norm_mlp.gamma.value, s.norm_mlp.beta.value);
  const auto hid = map(linear(x1n, s.mlp.layer1.weight.value, s.mlp.layer1.bias.value), gelu);
  const auto mix = map(dwconv(transpose(hid), s.mlp.dw.kernel.value, h, w), gelu);
  const auto mlp = linear(transpose(mix), s.mlp.layer2.weight.value, s.mlp.layer2.bias.value);
  Mat out = x1;
  for (std::size_t l = 0; l < x.size(); ++l)
    for (std::size_t j = 0; j < c; ++j) out[l][j] += mlp[l][j];
  if (sim_out != nullptr) *sim_out = sim;
  return out;
}

Mat update_oracle(SemanticsAttentionUpdater<D>& s, const Mat& g, const Mat& gh) {
  const auto proposal =
      layernorm_rows(linear(gh, s.psi2.weight.value, s.psi2.bias.value), s.psi2_norm.gamma.value, s.psi2_norm.beta.value);
  const auto a = linear(gh, s.phi3.weight.value, s.phi3.bias.value);
  const auto b = linear(g, s.phi4.weight.value, s.phi4.bias.value);
  Mat fused = a;
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t j = 0; j < a[i].size(); ++j) fused[i][j] *= b[i][j];
  const auto gate = map(layernorm_rows(linear(fused, s.psi1.weight.value, s.psi1.bias.value), s.psi1_norm.gamma.value,
                                       s.psi1_norm.beta.value),
                        sigmoid);
  Mat out = g;
  for (std::size_t i = 0; i < g.size(); ++i)
    for (std::size_t j = 0; j < g[i].size(); ++j) out[i][j] += gate[i][j] * proposal[i][j];
  return out;
}

Tensor<D> permute_rows(const Tensor<D>& t, const std::vector<std::size_t>& perm) {
  const std::size_t row = t.numel() / t.dim(0);
  Tensor<D> out(t.shape());
  for (std::size_t r = 0; r < perm.size(); ++r)
    for (std::size_t k = 0; k < row; ++k) out[r * row + k] = t[perm[r] * row + k];
  return out;
}

}  // namespace

TEST(SemanticsAttention, ZeroBlocksLeaveFeaturesUnchanged) {
  Fixture f(8, 1, 3, 1);
  zero_all(f.sau.attention);
  zero_all(f.sau.mlp);
  auto x = rand_t({4, 8}, 2);
  Tape<D> tape;
  auto out = f.sau.attend(tape, tape.constant(x), tape.constant(rand_t({3, 8}, 3)), 2, 2);
  EXPECT_EQ(out.enhanced.value(), x);
}

TEST(SemanticsAttention, IdenticalEmbeddingsGiveIdenticalAttentionRows) {
  Fixture f(8, 2, 3, 4);
  randomize_all(f.sau.attention, 5);
  auto row = rand_t({1, 8}, 6);
  Tensor<D> g({3, 8});
  for (std::size_t n = 0; n < 3; ++n)
    for (std::size_t d = 0; d < 8; ++d) g.at(n, d) = row[d];
  Tape<D> tape;
  auto res = f.sau.attention(tape, tape.constant(rand_t({4, 8}, 7)), tape.constant(g));
  const auto out = to_mat(res.out.value());
  for (std::size_t l = 1; l < 4; ++l)
    for (std::size_t d = 0; d < 8; ++d) EXPECT_NEAR(out[l][d], out[0][d], 1e-12);
  const auto sim = to_mat(res.sim.value());
  for (const auto& r : sim)
    for (std::size_t n = 1; n < 3; ++n) EXPECT_EQ(r[n], r[0]);
}

TEST(SemanticsAttention, MatchesScalarOracle) {
  Fixture f(8, 1, 3, 8);
  randomize_all(f.sau, 9);
  auto x = rand_t({4, 8}, 10);
  auto g = rand_t({3, 8}, 11);
  Mat sim;
  const auto expect = attend_oracle(f.sau, to_mat(x), to_mat(g), 2, 2, &sim);
  Tape<D> tape;
  auto out = f.sau.attend(tape, tape.constant(x), tape.constant(g), 2, 2);
  EXPECT_LT(max_diff(to_mat(out.enhanced.value()), expect), 1e-12);
  EXPECT_LT(max_diff(to_mat(out.sim.value()), sim), 1e-12);
}

TEST(SemanticsAttention, GridMismatchThrows) {
  Fixture f(8, 1, 3, 12);
  Tape<D> tape;
  EXPECT_THROW(f.sau.attend(tape, tape.constant(Tensor<D>({5, 8})), tape.constant(Tensor<D>({3, 8})), 2, 2),
               DimensionError);
}

TEST(SimilarityToMask, SingleTokenAndIndexIdentity) {
  Tape<D> tape;
  auto one = rand_t({1, 3}, 13);
  auto m1 = similarity_to_mask(tape.constant(one), 1, 1).value();
  EXPECT_EQ(m1.shape(), (Shape{3, 1, 1}));
  for (std::size_t n = 0; n < 3; ++n) EXPECT_EQ(m1[n], one[n]);

  auto sim = rand_t({4, 3}, 14);
  auto m = similarity_to_mask(tape.constant(sim), 2, 2).value();
  for (std::size_t n = 0; n < 3; ++n)
    for (std::size_t i = 0; i < 2; ++i)
      for (std::size_t j = 0; j < 2; ++j) EXPECT_EQ(m.at(n, i, j), sim.at(i * 2 + j, n));
}

TEST(SimilarityToMask, RoundTripIsExact) {
  Tape<D> tape;
  auto sim = rand_t({6, 5}, 15);
  auto m = similarity_to_mask(tape.constant(sim), 2, 3);
  auto back = transpose(reshape(m, {5, 6})).value();
  EXPECT_EQ(back, sim);
  EXPECT_THROW(similarity_to_mask(tape.constant(sim), 2, 2), DimensionError);
}

TEST(ClassUpdate, ZeroProjectionIsIdentity) {
  Fixture f(8, 1, 3, 16);
  auto g = rand_t({3, 8}, 17);
  Tape<D> tape;
  EXPECT_EQ(f.sau.update(tape, tape.constant(g), tape.constant(rand_t({3, 8}, 18))).value(), g);
}

TEST(ClassUpdate, SaturatedGateLeavesEmbeddingsUnchanged) {
  Fixture f(8, 1, 3, 19);
  randomize_all(f.sau, 20);
  f.sau.psi1_norm.gamma.value.fill(0);
  f.sau.psi1_norm.beta.value.fill(-30);
  auto g = rand_t({3, 8}, 21);
  Tape<D> tape;
  auto out = f.sau.update(tape, tape.constant(g), tape.constant(rand_t({3, 8}, 22))).value();
  EXPECT_LT(max_abs_diff(out, g), 1e-9);
}

TEST(ClassUpdate, MatchesScalarOracle) {
  Fixture f(8, 1, 3, 23);
  randomize_all(f.sau, 24);
  auto g = rand_t({3, 8}, 25);
  auto gh = rand_t({3, 8}, 26);
  Tape<D> tape;
  auto out = f.sau.update(tape, tape.constant(g), tape.constant(gh)).value();
  EXPECT_LT(max_diff(to_mat(out), update_oracle(f.sau, to_mat(g), to_mat(gh))), 1e-12);
}

TEST(ClassUpdate, NaivePlusAddsNormalizedProjection) {
  Fixture f(8, 1, 3, 27, UpdaterMode::kNaivePlus);
  randomize_all(f.sau, 28);
  auto g = rand_t({3, 8}, 29);
  auto gh = rand_t({3, 8}, 30);
  const auto proposal = layernorm_rows(linear(to_mat(gh), f.sau.psi2.weight.value, f.sau.psi2.bias.value),
                                       f.sau.psi2_norm.gamma.value, f.sau.psi2_norm.beta.value);
  Tape<D> tape;
  const auto out = to_mat(f.sau.update(tape, tape.constant(g), tape.constant(gh)).value());
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 8; ++j) EXPECT_NEAR(out[i][j], g.at(i, j) + proposal[i][j], 1e-12);
}

TEST(ClassUpdate, ShapeMismatchThrows) {
  Fixture f(8, 1, 3, 31);
  Tape<D> tape;
  EXPECT_THROW(f.sau.update(tape, tape.constant(Tensor<D>({3, 8})), tape.constant(Tensor<D>({2, 8}))), DimensionError);
}

TEST(SAUStep, DefaultInitIsIdentityOnEmbeddings) {
  Fixture f(16, 2, 4, 32);
  auto x = rand_t({16, 16}, 33);
  auto g = rand_t({4, 16}, 34);
  Tape<D> tape;
  auto out = f.sau.step(tape, tape.constant(x), tape.constant(g), f.ece, 4, 4, 3);
  EXPECT_EQ(out.updated_g.value(), g);
  EXPECT_EQ(out.new_mask.logits.shape(), (Shape{4, 4, 4}));
  EXPECT_EQ(out.new_mask.stage, 3);
  EXPECT_EQ(out.enhanced.shape(), (Shape{16, 16}));
}

TEST(SAUStep, AllZeroParameters) {
  Fixture f(8, 1, 3, 35);
  zero_all(f.sau);
  zero_all(f.ece);
  auto x = rand_t({4, 8}, 36);
  auto g = rand_t({3, 8}, 37);
  Tape<D> tape;
  auto out = f.sau.step(tape, tape.constant(x), tape.constant(g), f.ece, 2, 2, 2);
  EXPECT_EQ(out.enhanced.value(), x);
  EXPECT_EQ(out.new_mask.logits.value(), Tensor<D>({3, 2, 2}));
  EXPECT_EQ(out.updated_g.value(), g);
}

TEST(SAUStep, MatchesComposedOracles) {
  Fixture f(8, 1, 3, 38);
  randomize_all(f.sau, 39);
  randomize_all(f.ece, 40);
  auto x = rand_t({4, 8}, 41);
  auto g = rand_t({3, 8}, 42);
  Mat sim;
  const auto enhanced = attend_oracle(f.sau, to_mat(x), to_mat(g), 2, 2, &sim);
  // Levels {1, 2} on a 2x2 mask: global mean, then the four pixels.
  Mat desc;
  for (std::size_t n = 0; n < 3; ++n) {
    const D mean = (sim[0][n] + sim[1][n] + sim[2][n] + sim[3][n]) / 4;
    desc.push_back({mean, sim[0][n], sim[1][n], sim[2][n], sim[3][n]});
  }
  const auto g_hat = linear(desc, f.ece.psi.weight.value, f.ece.psi.bias.value);
  const auto updated = update_oracle(f.sau, to_mat(g), g_hat);
  Tape<D> tape;
  auto out = f.sau.step(tape, tape.constant(x), tape.constant(g), f.ece, 2, 2, 1);
  EXPECT_LT(max_diff(to_mat(out.enhanced.value()), enhanced), 1e-12);
  EXPECT_LT(max_diff(to_mat(out.updated_g.value()), updated), 1e-12);
}

TEST(SAUStep, JointClassPermutationEquivariance) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    Fixture f(16, 2, 5, 100 + seed);
    randomize_all(f.sau, 200 + seed);
    randomize_all(f.ece, 300 + seed);
    auto x = rand_t({16, 16}, 400 + seed);
    auto g = rand_t({5, 16}, 500 + seed);
    std::vector<std::size_t> perm(5);
    std::iota(perm.begin(), perm.end(), 0);
    std::mt19937_64 prng(seed);
    std::shuffle(perm.begin(), perm.end(), prng);

    Tape<D> tape;
    auto a = f.sau.step(tape, tape.constant(x), tape.constant(g), f.ece, 4, 4, 3);
    auto b = f.sau.step(tape, tape.constant(x), tape.constant(permute_rows(g, perm)), f.ece, 4, 4, 3);
    EXPECT_LT(max_abs_diff(a.enhanced.value(), b.enhanced.value()), 1e-9);
    EXPECT_LT(max_abs_diff(permute_rows(a.new_mask.logits.value(), perm), b.new_mask.logits.value()), 1e-9);
    EXPECT_LT(max_abs_diff(permute_rows(a.updated_g.value(), perm), b.updated_g.value()), 1e-9);
    for (std::size_t l = 0; l < 16; ++l)
      for (std::size_t n = 0; n < 5; ++n) EXPECT_NEAR(b.sim.value().at(l, n), a.sim.value().at(l, perm[n]), 1e-9);
  }
}

TEST(SAUStep, DefaultHeads) {
  EXPECT_EQ(default_heads(256), 8u);
  EXPECT_EQ(default_heads(64), 2u);
  EXPECT_EQ(default_heads(16), 1u);
  EXPECT_EQ(default_heads(48), 1u);
}
