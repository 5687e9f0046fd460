#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include <unistd.h>

#include "test_util.hpp"

using namespace ecenet;
namespace fs = std::filesystem;

namespace {

TrainConfig tiny_config() {
  TrainConfig cfg;
  cfg.seed = 5;
  cfg.image_size = 32;
  cfg.model.n_classes = 3;
  cfg.model.width = 16;
  cfg.model.encoder.widths = {8, 8, 8, 8};
  cfg.steps = 3;
  cfg.batch_size = 2;
  cfg.eval_interval = 2;
  cfg.eval_samples = 2;
  cfg.warmup_steps = 1;
  return cfg;
}

fs::path temp_dir(const std::string& tag) {
  auto p = fs::temp_directory_path() / ("ecenet_test_" + tag + "_" + std::to_string(::getpid()));
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

/// mIoU from explicit pixel sets, one class at a time.
double brute_force_miou(const std::vector<std::uint8_t>& gt, const std::vector<std::uint8_t>& pred, std::size_t n) {
  double sum = 0;
  std::size_t k = 0;
  for (std::size_t c = 0; c < n; ++c) {
    std::set<std::size_t> g, p;
    for (std::size_t i = 0; i < gt.size(); ++i) {
      if (gt[i] == kIgnoreLabel) continue;
      if (gt[i] == c) g.insert(i);
      if (pred[i] == c) p.insert(i);
    }
    if (g.empty()) continue;
    std::set<std::size_t> inter, uni = g;
    for (auto i : p) (g.count(i) ? inter : uni).insert(i);
    sum += static_cast<double>(inter.size()) / static_cast<double>(uni.size());
    ++k;
  }
  return sum / static_cast<double>(k);
}

}  // namespace

TEST(Generator, DeterministicInSeed) {
  auto a = gen_shapes<float>(3, 5, 64, 4);
  auto b = gen_shapes<float>(3, 5, 64, 4);
  auto c = gen_shapes<float>(4, 5, 64, 4);
  ASSERT_EQ(a.size(), 5u);
  bool differs = false;
  for (std::size_t i = 0; i < 5; ++i) {
    EXPECT_EQ(a[i].image, b[i].image);
    EXPECT_EQ(a[i].gt, b[i].gt);
    differs = differs || !(a[i].gt == c[i].gt);
  }
  EXPECT_TRUE(differs);
  EXPECT_TRUE(gen_shapes<float>(3, 0, 64, 4).empty());
}

TEST(Generator, SampleIndependentOfCount) {
  auto few = gen_shapes<float>(9, 2, 32, 4);
  auto many = gen_shapes<float>(9, 6, 32, 4);
  EXPECT_EQ(few[1].image, many[1].image);
  EXPECT_EQ(few[1].image, gen_sample<float>(9, 1, 32, 4).image);
}

TEST(Generator, ValueRangesAndForeground) {
  for (const auto& s : gen_shapes<float>(11, 50, 64, 5)) {
    EXPECT_EQ(s.image.shape(), (Shape{3, 64, 64}));
    for (auto v : s.image.data()) {
      EXPECT_GE(v, 0.f);
      EXPECT_LE(v, 1.f);
    }
    bool fg = false;
    for (auto v : s.gt.data) {
      EXPECT_LT(v, 5);
      fg = fg || v != 0;
    }
    EXPECT_TRUE(fg);
  }
}

TEST(Generator, EveryClassInAtLeastFivePercentOfSamples) {
  std::vector<std::size_t> seen(4, 0);
  for (std::size_t i = 0; i < 1000; ++i) {
    const auto s = gen_sample<float>(21, i, 64, 4);
    std::vector<bool> has(4, false);
    for (auto v : s.gt.data) has[v] = true;
    for (std::size_t c = 0; c < 4; ++c) seen[c] += has[c];
  }
  for (std::size_t c = 0; c < 4; ++c) EXPECT_GE(seen[c], 50u) << "class " << c;
}

TEST(Generator, RejectsTooFewClasses) { EXPECT_THROW(gen_shapes<float>(0, 1, 64, 1), ConfigError); }

TEST(Dataset, SaveLoadRoundTrip) {
  const auto dir = temp_dir("ds");
  auto data = gen_shapes<float>(2, 3, 32, 4);
  save_dataset(dir.string(), data);
  EXPECT_TRUE(fs::exists(dir / "image_00000.tnsr"));
  EXPECT_TRUE(fs::exists(dir / "label_00002.tnsr"));
  auto back = load_dataset<float>(dir.string());
  ASSERT_EQ(back.size(), 3u);
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_EQ(back[i].image, data[i].image);
    EXPECT_EQ(back[i].gt, data[i].gt);
  }
  fs::remove(dir / "label_00001.tnsr");
  EXPECT_THROW(load_dataset<float>(dir.string()), DataError);
  fs::remove_all(dir);
}

TEST(Dataset, NonIntegralLabelIsDataError) {
  EXPECT_THROW(label_map(Tensor<float>({1, 2}, {0.f, 1.5f})), DataError);
  EXPECT_THROW(label_map(Tensor<float>({1, 2}, {0.f, 256.f})), DataError);
}

TEST(Miou, HandCase) {
  ConfusionMatrix cm(2);
  cm.add({0, 0, 1, 1}, {0, 1, 1, 1});
  EXPECT_EQ(cm.at(0, 0), 1u);
  EXPECT_EQ(cm.at(0, 1), 1u);
  EXPECT_EQ(cm.at(1, 1), 2u);
  EXPECT_DOUBLE_EQ(cm.iou(0), 0.5);
  EXPECT_DOUBLE_EQ(cm.iou(1), 2.0 / 3.0);
  EXPECT_DOUBLE_EQ(cm.miou(), 7.0 / 12.0);
}

TEST(Miou, PerfectAndDisjoint) {
  ConfusionMatrix perfect(3), disjoint(3);
  perfect.add({0, 1, 2, 2}, {0, 1, 2, 2});
  disjoint.add({0, 1, 2, 2}, {1, 2, 0, 0});
  EXPECT_EQ(perfect.miou(), 1.0);
  EXPECT_EQ(disjoint.miou(), 0.0);
}

TEST(Miou, MatchesBruteForceOnRandomMaps) {
  std::mt19937_64 rng(1);
  for (int trial = 0; trial < 10; ++trial) {
    const std::size_t n = 2 + rng() % 4, size = 3 + rng() % 6;
    std::vector<std::uint8_t> gt(size * size), pred(size * size);
    for (std::size_t i = 0; i < gt.size(); ++i) {
      gt[i] = rng() % 10 == 0 ? kIgnoreLabel : static_cast<std::uint8_t>(rng() % n);
      pred[i] = static_cast<std::uint8_t>(rng() % n);
    }
    gt[0] = 0;
    ConfusionMatrix cm(n);
    cm.add(gt, pred);
    EXPECT_EQ(cm.miou(), brute_force_miou(gt, pred, n)) << "trial " << trial;
  }
}

TEST(Miou, IgnoreAndAbsentClasses) {
  ConfusionMatrix cm(3);
  cm.add({0, kIgnoreLabel, 0, 1}, {0, 2, 1, 1});
  EXPECT_EQ(cm.total(), 3u);
  EXPECT_FALSE(cm.present(2));
  EXPECT_DOUBLE_EQ(cm.miou(), (0.5 + 0.5) / 2);
}

TEST(Miou, OrderInvariantAndMergeable) {
  ConfusionMatrix a(3), b(3), parts(3), second(3);
  a.add({0, 1, 2}, {0, 2, 2});
  a.add({2, 2, 1}, {2, 1, 1});
  b.add({2, 2, 1}, {2, 1, 1});
  b.add({0, 1, 2}, {0, 2, 2});
  EXPECT_EQ(a, b);
  parts.add({0, 1, 2}, {0, 2, 2});
  second.add({2, 2, 1}, {2, 1, 1});
  parts.merge(second);
  EXPECT_EQ(parts, a);
}

TEST(Miou, Errors) {
  ConfusionMatrix cm(2);
  EXPECT_THROW(cm.add({0, 2}, {0, 0}), DataError);
  EXPECT_THROW(cm.add({0}, {0, 0}), DimensionError);
  EXPECT_THROW(cm.miou(), ContractError);
  EXPECT_THROW(ConfusionMatrix(0), ContractError);
}

TEST(Evaluate, EmptyDatasetAndBadLabels) {
  ECENet<float> model(tiny_config().model, 0);
  EXPECT_THROW(evaluate(model, std::vector<SegSample<float>>{}), ContractError);
  auto data = gen_shapes<float>(0, 1, 32, 3);
  data[0].gt.data[5] = 7;
  EXPECT_THROW(evaluate(model, data), DataError);
}

TEST(Evaluate, SampleOrderDoesNotMatter) {
  ECENet<float> model(tiny_config().model, 1);
  auto data = gen_shapes<float>(4, 4, 32, 3);
  auto reversed = std::vector<SegSample<float>>(data.rbegin(), data.rend());
  EXPECT_EQ(evaluate(model, data).confusion, evaluate(model, reversed).confusion);
}

TEST(Config, RoundTripAndHash) {
  TrainConfig cfg = tiny_config();
  cfg.model.updater = UpdaterMode::kNaivePlus;
  cfg.model.use_fr = false;
  cfg.loss.lambda_div = 0.125;
  const std::string text = to_text(cfg);
  const TrainConfig back = parse_config(text);
  EXPECT_EQ(to_text(back), text);
  EXPECT_EQ(config_hash(back), config_hash(cfg));
  cfg.lr = 1e-3;
  EXPECT_NE(config_hash(back), config_hash(cfg));
}

TEST(Config, CommentsBlankLinesAndDefaults) {
  const TrainConfig cfg = parse_config("# run\n\nseed = 42   # trailing\n  steps=10\nencoder_widths = 16, 16, 32, 32\n");
  EXPECT_EQ(cfg.seed, 42u);
  EXPECT_EQ(cfg.steps, 10u);
  EXPECT_EQ(cfg.model.encoder.widths, (std::array<std::size_t, 4>{16, 16, 32, 32}));
  EXPECT_EQ(cfg.batch_size, TrainConfig{}.batch_size);
}

TEST(Config, Errors) {
  EXPECT_THROW(parse_config("colour = red\n"), ConfigError);
  EXPECT_THROW(parse_config("seed = 1\nseed = 2\n"), ConfigError);
  EXPECT_THROW(parse_config("seed 1\n"), ConfigError);
  EXPECT_THROW(parse_config("steps = -3\n"), ConfigError);
  EXPECT_THROW(parse_config("image_size = 48\n"), ConfigError);
  EXPECT_THROW(parse_config("alpha = 0\n"), ConfigError);
  EXPECT_THROW(parse_config("updater = sometimes\n"), ConfigError);
  try {
    parse_config("seed = 1\nbogus = 2\n");
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("line 2"), std::string::npos) << e.what();
  }
}

TEST(CheckpointFile, ByteLayout) {
  Checkpoint ck;
  ck.step = 3;
  ck.params = {{"w", Tensor<float>({2}, {1.f, -2.f})}};
  ck.moments = {{"m/w", Tensor<float>({2}, {0.5f, 0.25f})}};
  ck.config_hash = 0x0102030405060708ULL;
  std::stringstream ss;
  write_checkpoint(ss, ck);
  const std::string b = ss.str();
  // magic, version, step, count, [u16 len, "w", u8 rank, u32 extent, 2 floats], count, [.. "m/w" ..], hash
  const std::size_t entry_w = 2 + 1 + 1 + 4 + 8, entry_m = 2 + 3 + 1 + 4 + 8;
  ASSERT_EQ(b.size(), 4 + 4 + 4 + 4 + entry_w + 4 + entry_m + 8);
  EXPECT_EQ(b.substr(0, 4), "ECEN");
  EXPECT_EQ(b[4], 1);
  EXPECT_EQ(b[8], 3);
  EXPECT_EQ(b[12], 1);
  EXPECT_EQ(b[16], 1);
  EXPECT_EQ(b[17], 0);
  EXPECT_EQ(b[18], 'w');
  EXPECT_EQ(b[19], 1);
  EXPECT_EQ(b[20], 2);
  EXPECT_EQ(static_cast<unsigned char>(b[b.size() - 8]), 0x08);
  EXPECT_EQ(static_cast<unsigned char>(b[b.size() - 1]), 0x01);
  EXPECT_EQ(read_checkpoint(ss), ck);
}

TEST(CheckpointFile, CorruptInputIsDataError) {
  std::stringstream bad("NOPE");
  EXPECT_THROW(read_checkpoint(bad), DataError);
  Checkpoint ck;
  ck.params = {{"w", Tensor<float>({4})}};
  std::stringstream ss;
  write_checkpoint(ss, ck);
  std::stringstream cut(ss.str().substr(0, 25));
  EXPECT_THROW(read_checkpoint(cut), DataError);
}

TEST(AdamWOptimizer, OneStepMatchesFormula) {
  Parameter<float> p("p", Tensor<float>({3}, {1.f, -2.f, 0.5f}));
  p.grad = Tensor<float>({3}, {0.1f, -0.4f, 0.f});
  AdamW opt({&p}, 0.9, 0.999, 0.01);
  opt.step(0.01);
  const double init[3] = {1, -2, 0.5}, grad[3] = {0.1, -0.4, 0};
  for (int i = 0; i < 3; ++i) {
    const double m = 0.1 * grad[i] / 0.1, v = 0.001 * grad[i] * grad[i] / 0.001;
    const double expect = init[i] - 0.01 * (m / (std::sqrt(v) + 1e-8)) - 0.01 * 0.01 * init[i];
    EXPECT_NEAR(p.value[i], expect, 1e-6) << i;
  }
  EXPECT_EQ(opt.steps_taken(), 1u);
}

TEST(AdamWOptimizer, ZeroLearningRateChangesNothing) {
  Parameter<float> p("p", Tensor<float>({2}, {1.f, 2.f}));
  p.grad = Tensor<float>({2}, {3.f, -1.f});
  AdamW opt({&p}, 0.9, 0.999, 0.1);
  for (int i = 0; i < 5; ++i) opt.step(0.0);
  EXPECT_EQ(p.value, (Tensor<float>({2}, {1.f, 2.f})));
}

TEST(Schedule, LinearWarmupThenFlat) {
  TrainConfig cfg;
  cfg.lr = 1e-3;
  cfg.warmup_steps = 4;
  EXPECT_DOUBLE_EQ(scheduled_lr(cfg, 1), 2.5e-4);
  EXPECT_DOUBLE_EQ(scheduled_lr(cfg, 4), 1e-3);
  EXPECT_DOUBLE_EQ(scheduled_lr(cfg, 100), 1e-3);
}

TEST(Training, ZeroStepsKeepsInitialization) {
  TrainConfig cfg = tiny_config();
  cfg.steps = 0;
  Trainer t(cfg);
  t.run();
  ECENet<float> fresh(cfg.model, cfg.seed);
  EXPECT_EQ(t.checkpoint().params, capture_parameters(fresh));
}

TEST(Training, ZeroLearningRateKeepsParameters) {
  TrainConfig cfg = tiny_config();
  cfg.lr = 0;
  Trainer t(cfg);
  t.run();
  ECENet<float> fresh(cfg.model, cfg.seed);
  EXPECT_EQ(t.checkpoint().params, capture_parameters(fresh));
}

TEST(Training, BitReproducibleAndLogged) {
  std::ostringstream la, lb;
  Trainer a(tiny_config()), b(tiny_config());
  const auto ra = a.run(&la);
  const auto rb = b.run(&lb);
  EXPECT_EQ(la.str(), lb.str());
  EXPECT_EQ(a.checkpoint(), b.checkpoint());
  EXPECT_EQ(ra.miou, rb.miou);
  EXPECT_NE(a.checkpoint().params, capture_parameters(*std::make_unique<ECENet<float>>(tiny_config().model, 5)));

  std::istringstream lines(la.str());
  std::string line;
  std::vector<std::string> all;
  while (std::getline(lines, line)) all.push_back(line);
  ASSERT_EQ(all.size(), 3u);
  EXPECT_EQ(all[0].rfind("step=1 loss=", 0), 0u);
  EXPECT_NE(all[0].find(" ce="), std::string::npos);
  EXPECT_NE(all[0].find(" mask="), std::string::npos);
  EXPECT_NE(all[0].find(" div="), std::string::npos);
  EXPECT_EQ(all[0].substr(all[0].size() - 6), "miou=-");
  EXPECT_EQ(all[1].find("miou=-"), std::string::npos);
  EXPECT_EQ(all[2].find("miou=-"), std::string::npos);
}

TEST(Training, ResumeFromCheckpointMatchesUninterrupted) {
  TrainConfig cfg = tiny_config();
  cfg.steps = 4;
  Trainer full(cfg);
  full.run();

  Trainer first(cfg);
  first.train_step();
  first.train_step();
  std::stringstream ss;
  write_checkpoint(ss, first.checkpoint());
  Trainer resumed(cfg);
  resumed.restore(read_checkpoint(ss));
  resumed.run();
  EXPECT_EQ(resumed.checkpoint(), full.checkpoint());
}

TEST(Training, RestoreRejectsForeignConfig) {
  Trainer a(tiny_config());
  TrainConfig other = tiny_config();
  other.lr = 1e-2;
  Trainer b(other);
  EXPECT_THROW(b.restore(a.checkpoint()), DataError);
  EXPECT_THROW(load_model(other, a.checkpoint()), DataError);
}

TEST(Training, NonFiniteLossNamesTheTensor) {
  Trainer t(tiny_config());
  t.model().classifier.bias.value[0] = std::numeric_limits<float>::quiet_NaN();
  try {
    t.train_step();
    FAIL() << "expected NumericalError";
  } catch (const NumericalError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("step 1"), std::string::npos) << msg;
    EXPECT_NE(msg.find("classifier.bias"), std::string::npos) << msg;
  }
}

TEST(Training, LogLineFormat) {
  StepStats s{12, 1.5, 0.25, 0.125, 0.75, 0.5};
  EXPECT_EQ(format_log_line(s), "step=12 loss=1.500000 ce=0.250000 mask=0.125000 div=0.750000 miou=0.500000");
  s.miou = -1;
  EXPECT_EQ(format_log_line(s), "step=12 loss=1.500000 ce=0.250000 mask=0.125000 div=0.750000 miou=-");
}
