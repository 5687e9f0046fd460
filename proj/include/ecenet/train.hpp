#pragma once

#include <cmath>
#include <cstdio>
#include <map>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "ecenet/checkpoint.hpp"
#include "ecenet/config.hpp"
#include "ecenet/data.hpp"
#include "ecenet/metrics.hpp"
#include "ecenet/model.hpp"

namespace ecenet {

/// Adam with decoupled weight decay:
///   p <- p - lr * (m_hat / (sqrt(v_hat) + eps) + wd * p)
class AdamW {
 public:
  AdamW(std::vector<Parameter<float>*> params, double beta1, double beta2, double weight_decay, double eps = 1e-8)
      : params_(std::move(params)), beta1_(beta1), beta2_(beta2), wd_(weight_decay), eps_(eps) {
    for (auto* p : params_) {
      m_.emplace_back(p->value.shape());
      v_.emplace_back(p->value.shape());
    }
  }

  AdamW(const AdamW&) = delete;
  AdamW& operator=(const AdamW&) = delete;

  std::size_t steps_taken() const { return t_; }

  void step(double lr) {
    ++t_;
    const double bc1 = 1 - std::pow(beta1_, static_cast<double>(t_));
    const double bc2 = 1 - std::pow(beta2_, static_cast<double>(t_));
    const float b1 = static_cast<float>(beta1_), b2 = static_cast<float>(beta2_);
    const float step_size = static_cast<float>(lr / bc1);
    const float inv_bc2 = static_cast<float>(1 / bc2);
    const float decay = static_cast<float>(lr * wd_);
    const float eps = static_cast<float>(eps_);
    for (std::size_t k = 0; k < params_.size(); ++k) {
      auto& p = *params_[k];
      float* m = m_[k].ptr();
      float* v = v_[k].ptr();
      for (std::size_t i = 0; i < p.value.numel(); ++i) {
        const float g = p.grad[i];
        m[i] = b1 * m[i] + (1 - b1) * g;
        v[i] = b2 * v[i] + (1 - b2) * g * g;
        p.value[i] -= step_size * m[i] / (std::sqrt(v[i] * inv_bc2) + eps) + decay * p.value[i];
      }
    }
  }

  /// First and second moments as "m/<name>" and "v/<name>" entries.
  std::vector<NamedTensor> moments() const {
    std::vector<NamedTensor> out;
    for (std::size_t k = 0; k < params_.size(); ++k) out.push_back({"m/" + params_[k]->name, m_[k]});
    for (std::size_t k = 0; k < params_.size(); ++k) out.push_back({"v/" + params_[k]->name, v_[k]});
    return out;
  }

  void load_moments(const std::vector<NamedTensor>& entries, std::size_t steps_taken) {
    std::map<std::string, const Tensor<float>*> by_name;
    for (const auto& e : entries) by_name[e.name] = &e.value;
    for (std::size_t k = 0; k < params_.size(); ++k) {
      for (auto [prefix, dst] : {std::pair{"m/", &m_[k]}, std::pair{"v/", &v_[k]}}) {
        auto it = by_name.find(std::string(prefix) + params_[k]->name);
        if (it == by_name.end()) throw DataError("checkpoint: missing moment " + std::string(prefix) + params_[k]->name);
        if (it->second->shape() != dst->shape()) throw DataError("checkpoint: moment shape mismatch for " + it->first);
        *dst = *it->second;
      }
    }
    t_ = steps_taken;
  }

 private:
  std::vector<Parameter<float>*> params_;
  std::vector<Tensor<float>> m_, v_;
  double beta1_, beta2_, wd_, eps_;
  std::size_t t_ = 0;
};

/// Learning rate for update number `step` (1-based): linear warmup, then flat.
inline double scheduled_lr(const TrainConfig& cfg, std::size_t step) {
  if (cfg.warmup_steps == 0 || step >= cfg.warmup_steps) return cfg.lr;
  return cfg.lr * static_cast<double>(step) / static_cast<double>(cfg.warmup_steps);
}

/// Argmax segmentation of every sample against its ground truth.
template <typename T>
EvalResult evaluate(ECENet<T>& model, const std::vector<SegSample<T>>& data) {
  if (data.empty()) throw ContractError("evaluate: empty dataset");
  ConfusionMatrix cm(model.cfg.n_classes);
  for (const auto& s : data) {
    check_labels(s.gt, model.cfg.n_classes);
    Tape<T> tape(false);
    auto out = model.forward(tape, s.image);
    if (out.seg_logits.dim(1) != s.gt.height || out.seg_logits.dim(2) != s.gt.width) {
      throw DimensionError("evaluate: prediction and label sizes differ");
    }
    cm.add(s.gt.data, argmax_labels(out.seg_logits.value()));
  }
  return summarize(cm);
}

struct StepStats {
  std::size_t step = 0;
  double loss = 0, ce = 0, mask = 0, div = 0;
  double miou = -1;  ///< negative when no evaluation ran at this step
};

/// `step=<n> loss=<f> ce=<f> mask=<f> div=<f> miou=<f or ->`
inline std::string format_log_line(const StepStats& s) {
  char buf[192];
  std::snprintf(buf, sizeof(buf), "step=%zu loss=%.6f ce=%.6f mask=%.6f div=%.6f miou=", s.step, s.loss, s.ce, s.mask,
                s.div);
  std::string line(buf);
  if (s.miou >= 0) {
    std::snprintf(buf, sizeof(buf), "%.6f", s.miou);
    line += buf;
  } else {
    line += "-";
  }
  return line;
}

/// Owns the model and optimizer for one run. Training samples are drawn
/// from the config seed's stream; held-out samples from heldout_seed().
class Trainer {
 public:
  explicit Trainer(const TrainConfig& cfg)
      : cfg_((cfg.validate(), cfg)),
        model_(cfg_.model, cfg_.seed),
        opt_(model_.parameters(), cfg_.beta1, cfg_.beta2, cfg_.weight_decay),
        heldout_(gen_shapes<float>(heldout_seed(cfg_.seed), cfg_.eval_samples, cfg_.image_size, cfg_.model.n_classes)) {}

  Trainer(const Trainer&) = delete;
  Trainer& operator=(const Trainer&) = delete;

  const TrainConfig& config() const { return cfg_; }
  ECENet<float>& model() { return model_; }
  std::size_t step() const { return step_; }
  const std::vector<SegSample<float>>& heldout() const { return heldout_; }

  /// One optimizer update on a fresh batch.
  StepStats train_step() {
    const std::size_t next = step_ + 1;
    StepStats st;
    st.step = next;
    for (auto* p : model_.parameters()) p->zero_grad();
    const float inv_b = 1.0f / static_cast<float>(cfg_.batch_size);
    for (std::size_t b = 0; b < cfg_.batch_size; ++b) {
      const auto sample = gen_sample<float>(cfg_.seed, step_ * cfg_.batch_size + b, cfg_.image_size,
                                            cfg_.model.n_classes);
      Tape<float> tape;
      auto out = model_.forward(tape, sample.image);
      auto loss = model_.loss(out, sample.gt, cfg_.loss);
      const double value = static_cast<double>(loss.total.value()[0]);
      if (!std::isfinite(value)) {
        throw NumericalError("non-finite loss at step " + std::to_string(next) + "; first non-finite tensor: " +
                             tape.first_non_finite());
      }
      st.loss += value * inv_b;
      st.ce += loss.ce * inv_b;
      st.mask += loss.mask * inv_b;
      st.div += loss.div * inv_b;
      tape.backward(scale(loss.total, inv_b));
    }
    opt_.step(scheduled_lr(cfg_, next));
    step_ = next;
    return st;
  }

  EvalResult evaluate_heldout() { return evaluate(model_, heldout_); }

  /// Runs until `cfg.steps`, writing one log line per step. Returns the
  /// final held-out evaluation.
  EvalResult run(std::ostream* log = nullptr) {
    std::optional<EvalResult> last;
    while (step_ < cfg_.steps) {
      StepStats st = train_step();
      const bool final_step = step_ == cfg_.steps;
      if (final_step || (cfg_.eval_interval && step_ % cfg_.eval_interval == 0)) {
        last = evaluate_heldout();
        st.miou = last->miou;
      }
      if (log) *log << format_log_line(st) << '\n' << std::flush;
    }
    return last ? *last : evaluate_heldout();
  }

  Checkpoint checkpoint() {
    Checkpoint ck;
    ck.step = static_cast<std::uint32_t>(step_);
    ck.params = capture_parameters(model_);
    ck.moments = opt_.moments();
    ck.config_hash = config_hash(cfg_);
    return ck;
  }

  void restore(const Checkpoint& ck) {
    if (ck.config_hash != config_hash(cfg_)) throw DataError("checkpoint was written for a different config");
    restore_parameters(model_, ck.params);
    opt_.load_moments(ck.moments, ck.step);
    step_ = ck.step;
  }

 private:
  TrainConfig cfg_;
  ECENet<float> model_;
  AdamW opt_;
  std::vector<SegSample<float>> heldout_;
  std::size_t step_ = 0;
};

/// Model rebuilt from a checkpoint and the config it was trained with.
inline ECENet<float> load_model(const TrainConfig& cfg, const Checkpoint& ck) {
  if (ck.config_hash != config_hash(cfg)) throw DataError("checkpoint was written for a different config");
  ECENet<float> model(cfg.model, cfg.seed);
  restore_parameters(model, ck.params);
  return model;
}

}  // namespace ecenet
