#pragma once

#include <charconv>
#include <cstdint>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "ecenet/model.hpp"

namespace ecenet {

/// Everything a training run depends on.
struct TrainConfig {
  std::uint64_t seed = 0;
  std::size_t image_size = 64;
  ModelConfig model;
  LossWeights loss;
  double lr = 3e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double weight_decay = 0.01;
  std::size_t warmup_steps = 100;
  std::size_t steps = 2000;
  std::size_t batch_size = 8;
  std::size_t eval_interval = 500;  ///< 0 evaluates only at the end
  std::size_t eval_samples = 64;

  void validate() const {
    if (image_size == 0 || image_size % 32 != 0) {
      throw ConfigError("image_size must be a positive multiple of 32, got " + std::to_string(image_size));
    }
    if (!(model.alpha > 0)) throw ConfigError("alpha must be positive");
    if (model.n_classes < 2 || model.n_classes > 255) throw ConfigError("classes must be in [2, 255]");
    if (batch_size == 0) throw ConfigError("batch_size must be positive");
    if (eval_samples == 0) throw ConfigError("eval_samples must be positive");
    if (!(lr >= 0)) throw ConfigError("lr must be non-negative");
    if (!(beta1 >= 0 && beta1 < 1 && beta2 >= 0 && beta2 < 1)) throw ConfigError("betas must be in [0, 1)");
    if (!(weight_decay >= 0)) throw ConfigError("weight_decay must be non-negative");
    if (model.encoder.patch != 4) throw ConfigError("encoder patch must be 4");
  }
};

namespace detail {

inline std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

inline std::string format_double(double v) {
  char buf[64];
  auto [end, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, end);
}

template <typename U>
U parse_number(const std::string& key, const std::string& text) {
  U v{};
  auto [end, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
  if (ec != std::errc() || end != text.data() + text.size()) {
    throw ConfigError("bad value for " + key + ": '" + text + "'");
  }
  return v;
}

inline bool parse_bool(const std::string& key, const std::string& text) {
  if (text == "true" || text == "1") return true;
  if (text == "false" || text == "0") return false;
  throw ConfigError("bad value for " + key + ": '" + text + "' (expected true or false)");
}

/// One config key: how to print it and how to set it.
struct ConfigField {
  std::function<std::string(const TrainConfig&)> get;
  std::function<void(TrainConfig&, const std::string&)> set;
};

template <typename U>
ConfigField number_field(U TrainConfig::*member) {
  return {[member](const TrainConfig& c) {
            if constexpr (std::is_floating_point_v<U>) {
              return format_double(c.*member);
            } else {
              return std::to_string(c.*member);
            }
          },
          [member](TrainConfig& c, const std::string& v) { c.*member = parse_number<U>("value", v); }};
}

template <typename S, typename U>
ConfigField nested_field(S TrainConfig::*outer, U S::*member) {
  return {[outer, member](const TrainConfig& c) {
            if constexpr (std::is_same_v<U, bool>) {
              return std::string((c.*outer).*member ? "true" : "false");
            } else if constexpr (std::is_floating_point_v<U>) {
              return format_double((c.*outer).*member);
            } else {
              return std::to_string((c.*outer).*member);
            }
          },
          [outer, member](TrainConfig& c, const std::string& v) {
            if constexpr (std::is_same_v<U, bool>) {
              (c.*outer).*member = parse_bool("value", v);
            } else {
              (c.*outer).*member = parse_number<U>("value", v);
            }
          }};
}

/// Keys in canonical order.
inline const std::vector<std::pair<std::string, ConfigField>>& config_fields() {
  static const std::vector<std::pair<std::string, ConfigField>> fields = [] {
    std::vector<std::pair<std::string, ConfigField>> f;
    f.emplace_back("seed", number_field(&TrainConfig::seed));
    f.emplace_back("image_size", number_field(&TrainConfig::image_size));
    f.emplace_back("classes", nested_field(&TrainConfig::model, &ModelConfig::n_classes));
    f.emplace_back("alpha", nested_field(&TrainConfig::model, &ModelConfig::alpha));
    f.emplace_back("width", nested_field(&TrainConfig::model, &ModelConfig::width));
    f.emplace_back("heads", nested_field(&TrainConfig::model, &ModelConfig::heads));
    f.emplace_back("encoder_widths",
                   ConfigField{[](const TrainConfig& c) {
                                 std::string s;
                                 for (std::size_t i = 0; i < kStages; ++i) {
                                   if (i) s += ',';
                                   s += std::to_string(c.model.encoder.widths[i]);
                                 }
                                 return s;
                               },
                               [](TrainConfig& c, const std::string& v) {
                                 std::stringstream ss(v);
                                 std::string item;
                                 std::size_t i = 0;
                                 while (std::getline(ss, item, ',')) {
                                   if (i == kStages) throw ConfigError("encoder_widths needs exactly 4 values");
                                   c.model.encoder.widths[i++] = parse_number<std::size_t>("encoder_widths", trim(item));
                                 }
                                 if (i != kStages) throw ConfigError("encoder_widths needs exactly 4 values");
                               }});
    f.emplace_back("encoder_blocks", ConfigField{[](const TrainConfig& c) {
                                                   return std::to_string(c.model.encoder.blocks_per_stage);
                                                 },
                                                 [](TrainConfig& c, const std::string& v) {
                                                   c.model.encoder.blocks_per_stage =
                                                       parse_number<std::size_t>("encoder_blocks", v);
                                                 }});
    f.emplace_back("use_fr", nested_field(&TrainConfig::model, &ModelConfig::use_fr));
    f.emplace_back("updater", ConfigField{[](const TrainConfig& c) {
                                            return std::string(c.model.updater == UpdaterMode::kGated ? "gated"
                                                                                                      : "plus");
                                          },
                                          [](TrainConfig& c, const std::string& v) {
                                            if (v == "gated") {
                                              c.model.updater = UpdaterMode::kGated;
                                            } else if (v == "plus") {
                                              c.model.updater = UpdaterMode::kNaivePlus;
                                            } else {
                                              throw ConfigError("updater must be gated or plus, got '" + v + "'");
                                            }
                                          }});
    f.emplace_back("lambda_div", nested_field(&TrainConfig::loss, &LossWeights::lambda_div));
    f.emplace_back("lambda_focal", nested_field(&TrainConfig::loss, &LossWeights::lambda_focal));
    f.emplace_back("lambda_dice", nested_field(&TrainConfig::loss, &LossWeights::lambda_dice));
    f.emplace_back("focal_gamma", nested_field(&TrainConfig::loss, &LossWeights::focal_gamma));
    f.emplace_back("focal_alpha", nested_field(&TrainConfig::loss, &LossWeights::focal_alpha));
    f.emplace_back("lr", number_field(&TrainConfig::lr));
    f.emplace_back("beta1", number_field(&TrainConfig::beta1));
    f.emplace_back("beta2", number_field(&TrainConfig::beta2));
    f.emplace_back("weight_decay", number_field(&TrainConfig::weight_decay));
    f.emplace_back("warmup_steps", number_field(&TrainConfig::warmup_steps));
    f.emplace_back("steps", number_field(&TrainConfig::steps));
    f.emplace_back("batch_size", number_field(&TrainConfig::batch_size));
    f.emplace_back("eval_interval", number_field(&TrainConfig::eval_interval));
    f.emplace_back("eval_samples", number_field(&TrainConfig::eval_samples));
    return f;
  }();
  return fields;
}

}  // namespace detail

/// Canonical `key = value` text, one line per key in a fixed order.
inline std::string to_text(const TrainConfig& cfg) {
  std::string out;
  for (const auto& [key, field] : detail::config_fields()) out += key + " = " + field.get(cfg) + "\n";
  return out;
}

/// Parses `key = value` lines. `#` starts a comment; blank lines are
/// ignored; unknown or repeated keys are errors. Missing keys keep defaults.
inline TrainConfig parse_config(std::string_view text, TrainConfig cfg = {}) {
  std::map<std::string, const detail::ConfigField*> index;
  for (const auto& [key, field] : detail::config_fields()) index[key] = &field;
  std::map<std::string, std::size_t> seen;
  std::size_t line_no = 0;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    auto nl = text.find('\n', pos);
    if (nl == std::string_view::npos) nl = text.size();
    std::string_view line = text.substr(pos, nl - pos);
    pos = nl + 1;
    ++line_no;
    if (auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
    const std::string body = detail::trim(line);
    if (body.empty()) continue;
    const auto eq = body.find('=');
    const std::string where = "config line " + std::to_string(line_no) + ": ";
    if (eq == std::string::npos) throw ConfigError(where + "expected 'key = value'");
    const std::string key = detail::trim(std::string_view(body).substr(0, eq));
    const std::string value = detail::trim(std::string_view(body).substr(eq + 1));
    auto it = index.find(key);
    if (it == index.end()) throw ConfigError(where + "unknown key '" + key + "'");
    if (seen.count(key)) throw ConfigError(where + "duplicate key '" + key + "'");
    seen[key] = line_no;
    try {
      it->second->set(cfg, value);
    } catch (const ConfigError& e) {
      throw ConfigError(where + key + ": " + e.what());
    }
  }
  cfg.validate();
  return cfg;
}

inline TrainConfig load_config(const std::string& path, TrainConfig defaults = {}) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot open config " + path);
  std::stringstream ss;
  ss << is.rdbuf();
  return parse_config(ss.str(), std::move(defaults));
}

/// 64-bit FNV-1a.
inline std::uint64_t fnv1a(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

/// Hash of the canonical config text; stored in checkpoints.
inline std::uint64_t config_hash(const TrainConfig& cfg) { return fnv1a(to_text(cfg)); }

}  // namespace ecenet
