// ecenet command-line tool: data generation, training, evaluation,
// gradient checks and mask export.

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

#include "CLI11.hpp"
#include "ecenet/ecenet.hpp"

namespace fs = std::filesystem;
using namespace ecenet;

namespace {

enum Exit { kOk = 0, kUsage = 1, kData = 2, kNumerical = 3 };

std::uint64_t env_seed() {
  const char* s = std::getenv("ECENET_SEED");
  if (s == nullptr || *s == '\0') return 0;
  try {
    return detail::parse_number<std::uint64_t>("ECENET_SEED", s);
  } catch (const ConfigError&) {
    throw ConfigError(std::string("ECENET_SEED is not an unsigned integer: '") + s + "'");
  }
}

/// The config stored next to a checkpoint, unless one is given explicitly.
TrainConfig config_for(const std::string& checkpoint, const std::string& explicit_config) {
  const std::string path =
      explicit_config.empty() ? (fs::path(checkpoint).parent_path() / "config.txt").string() : explicit_config;
  if (!fs::exists(path)) throw DataError("no config found for checkpoint (looked for " + path + ")");
  return load_config(path);
}

ECENet<float> model_from(const std::string& checkpoint, const std::string& explicit_config) {
  return load_model(config_for(checkpoint, explicit_config), load_checkpoint(checkpoint));
}

int gen_data(std::uint64_t seed, std::size_t count, std::size_t size, std::size_t classes, const std::string& out) {
  save_dataset(out, gen_shapes<float>(seed, count, size, classes));
  std::cout << "wrote " << count << " samples to " << out << "\n";
  return kOk;
}

int train_cmd(const std::string& config_path, const std::string& out) {
  TrainConfig defaults;
  defaults.seed = env_seed();
  const TrainConfig cfg = load_config(config_path, defaults);
  fs::create_directories(out);
  {
    std::ofstream os(fs::path(out) / "config.txt");
    os << to_text(cfg);
  }
  std::ofstream log(fs::path(out) / "metrics.log", std::ios::app);
  if (!log) throw DataError("cannot open metrics log in " + out);
  Trainer trainer(cfg);
  const EvalResult res = trainer.run(&log);
  save_checkpoint((fs::path(out) / "checkpoint.ecen").string(), trainer.checkpoint());
  std::printf("steps %zu\nmIoU %.4f\n", trainer.step(), res.miou);
  return kOk;
}

int eval_cmd(const std::string& checkpoint, const std::string& data, const std::string& config) {
  ECENet<float> model = model_from(checkpoint, config);
  const auto samples = load_dataset<float>(data);
  const EvalResult res = evaluate(model, samples);
  std::printf("class IoU\n");
  for (std::size_t c = 0; c < res.iou.size(); ++c) {
    if (res.present[c]) {
      std::printf("%5zu %.4f\n", c, res.iou[c]);
    } else {
      std::printf("%5zu -\n", c);
    }
  }
  std::printf("mIoU %.4f\n", res.miou);
  return kOk;
}

int gradcheck_cmd(bool full) {
  bool ok = true;
  for (const auto& r : run_gradcheck_suite()) {
    const bool pass = r.max_error < kOpGradTolerance;
    ok = ok && pass;
    std::printf("%-28s %.3e %s\n", r.name.c_str(), r.max_error, pass ? "ok" : "FAIL");
  }
  if (full) {
    double worst = 0;
    for (std::uint64_t seed = 0; seed < 2; ++seed) worst = std::max(worst, model_gradcheck(seed));
    const bool pass = worst < kModelGradTolerance;
    ok = ok && pass;
    std::printf("%-28s %.3e %s\n", "model", worst, pass ? "ok" : "FAIL");
  }
  return ok ? kOk : kNumerical;
}

int export_cmd(const std::string& checkpoint, const std::string& image, const std::string& out,
               const std::string& config) {
  ECENet<float> model = model_from(checkpoint, config);
  const Tensor<float> img = load_tensor<float>(image);
  if (img.rank() != 3 || img.dim(0) != 3) throw DimensionError("image must be 3 x H x W, got " + shape_str(img.shape()));
  Tape<float> tape(false);
  const auto res = model.forward(tape, img);
  std::ofstream os(out, std::ios::binary);
  if (!os) throw DataError("cannot open " + out + " for writing");
  write_mask_pgm(os, res.seg_logits.value());
  std::cout << "wrote " << out << "\n";
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
#if defined(__GLIBC__)
  // Keep freed activation buffers in the heap between training steps.
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
#endif
  CLI::App app{"ECENet segmentation decoder: data, training, evaluation and checks"};
  app.require_subcommand(1, 1);

  std::uint64_t seed = 0;
  std::size_t count = 0, size = 64, classes = 4;
  std::string out, config, checkpoint, data, image;
  bool full = false;

  auto* gen = app.add_subcommand("gen-data", "Write synthetic image/label pairs as TNSR files");
  gen->add_option("--seed", seed, "Generator seed (default: ECENET_SEED or 0)");
  gen->add_option("--count", count, "Number of samples")->required();
  gen->add_option("--size", size, "Image side length")->capture_default_str();
  gen->add_option("--classes", classes, "Number of classes including background")->capture_default_str();
  gen->add_option("--out", out, "Output directory")->required();

  auto* train = app.add_subcommand("train", "Train a model from a config file");
  train->add_option("--config", config, "Config file (key = value)")->required()->check(CLI::ExistingFile);
  train->add_option("--out", out, "Run directory for checkpoint, config and metric log")->required();

  auto* eval = app.add_subcommand("eval", "Per-class IoU and mIoU of a checkpoint on a dataset");
  eval->add_option("--checkpoint", checkpoint, "Checkpoint file")->required()->check(CLI::ExistingFile);
  eval->add_option("--data", data, "Dataset directory")->required();
  eval->add_option("--config", config, "Config file (default: config.txt next to the checkpoint)");

  auto* grad = app.add_subcommand("gradcheck", "Finite-difference gradient checks");
  grad->add_flag("--full", full, "Also check the full model loss");

  auto* exp = app.add_subcommand("export-masks", "Write the argmax class map of one image as a PGM");
  exp->add_option("--checkpoint", checkpoint, "Checkpoint file")->required()->check(CLI::ExistingFile);
  exp->add_option("--image", image, "Input image (TNSR, 3 x H x W)")->required()->check(CLI::ExistingFile);
  exp->add_option("--out", out, "Output PGM file")->required();
  exp->add_option("--config", config, "Config file (default: config.txt next to the checkpoint)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: " << e.what() << "\n\n" << app.help();
    return kUsage;
  }

  try {
    if (*gen) return gen_data(gen->count("--seed") ? seed : env_seed(), count, size, classes, out);
    if (*train) return train_cmd(config, out);
    if (*eval) return eval_cmd(checkpoint, data, config);
    if (*grad) return gradcheck_cmd(full);
    if (*exp) return export_cmd(checkpoint, image, out, config);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kUsage;
  } catch (const NumericalError& e) {
    std::cerr << "numerical error: " << e.what() << "\n";
    return kNumerical;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kData;
  }
  return kUsage;
}
