#pragma once

#include <deque>
#include <functional>
#include <string>
#include <vector>

#include "ecenet/tensor.hpp"

namespace ecenet {

/// Trainable leaf. Lives across training steps; tapes read its value and
/// accumulate into its gradient.
template <typename T>
struct Parameter {
  std::string name;
  Tensor<T> value;
  Tensor<T> grad;

  Parameter() = default;
  Parameter(std::string n, Tensor<T> v) : name(std::move(n)), value(std::move(v)), grad(value.shape()) {}

  void zero_grad() {
    if (grad.shape() != value.shape()) grad = Tensor<T>(value.shape());
    grad.fill(T(0));
  }
};

template <typename T>
class Tape;

/// Handle to a value recorded on a tape.
template <typename T>
class Var {
 public:
  Var() = default;
  Var(Tape<T>* tape, std::size_t id) : tape_(tape), id_(id) {}

  const Tensor<T>& value() const;
  const Shape& shape() const { return value().shape(); }
  std::size_t dim(std::size_t i) const { return value().dim(i); }
  std::size_t numel() const { return value().numel(); }
  bool requires_grad() const;

  Tape<T>* tape() const { return tape_; }
  std::size_t id() const { return id_; }

 private:
  Tape<T>* tape_ = nullptr;
  std::size_t id_ = 0;
};

/// Reverse-mode tape. Nodes are appended in execution order, so walking them
/// backwards is a valid backpropagation order. One tape per thread of work.
template <typename T>
class Tape {
 public:
  /// Receives the node's accumulated output gradient and its forward value.
  using BackwardFn = std::function<void(const Tensor<T>& grad_out, const Tensor<T>& out)>;

  Tape() = default;
  explicit Tape(bool grad_enabled) : grad_enabled_(grad_enabled) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool grad_enabled() const { return grad_enabled_; }

  Var<T> constant(Tensor<T> value) { return push(std::move(value), false, nullptr, {}, "constant"); }

  /// Leaf bound to a trainable parameter; backward() accumulates into p.grad.
  Var<T> param(Parameter<T>& p) {
    if (!grad_enabled_) return push(p.value, false, nullptr, {}, "param");
    return push(p.value, true, &p, {}, "param");
  }

  /// Records an operation result. `backward` is kept only when some parent
  /// requires a gradient.
  Var<T> record(const char* op, Tensor<T> value, std::initializer_list<Var<T>> parents, BackwardFn backward) {
    bool rg = false;
    for (const auto& p : parents) rg = rg || p.requires_grad();
    return push(std::move(value), rg, nullptr, rg ? std::move(backward) : BackwardFn{}, op);
  }

  Var<T> record(const char* op, Tensor<T> value, const std::vector<Var<T>>& parents, BackwardFn backward) {
    bool rg = false;
    for (const auto& p : parents) rg = rg || p.requires_grad();
    return push(std::move(value), rg, nullptr, rg ? std::move(backward) : BackwardFn{}, op);
  }

  const Tensor<T>& value(std::size_t id) const { return nodes_.at(id).value; }
  bool requires_grad(std::size_t id) const { return nodes_.at(id).requires_grad; }

  /// Gradient buffer of a node, zero-allocated on first use. Backward
  /// functions add into it.
  Tensor<T>& grad(const Var<T>& v) {
    auto& n = nodes_.at(v.id());
    if (n.grad.empty()) n.grad = Tensor<T>(n.value.shape());
    return n.grad;
  }

  std::size_t size() const { return nodes_.size(); }

  /// Describes the earliest recorded value holding NaN/Inf, or "" if none.
  std::string first_non_finite() const {
    for (std::size_t i = 0; i < nodes_.size(); ++i) {
      const auto& n = nodes_[i];
      if (!n.value.all_finite()) {
        std::string what = "node " + std::to_string(i) + " (" + n.op;
        if (n.param != nullptr) what += " " + n.param->name;
        return what + ", shape " + shape_str(n.value.shape()) + ")";
      }
    }
    return {};
  }

  /// Propagates d(loss)/d(node) to every trainable leaf and consumes the tape.
  void backward(const Var<T>& loss) {
    if (loss.tape() != this) throw ContractError("backward: loss was recorded on a different tape");
    if (loss.numel() != 1) throw ContractError("backward: loss must be a scalar, got shape " + shape_str(loss.shape()));
    if (!requires_grad(loss.id())) {
      nodes_.clear();
      return;
    }
    grad(loss).fill(T(1));
    for (std::size_t i = nodes_.size(); i-- > 0;) {
      auto& n = nodes_[i];
      if (n.grad.empty()) continue;
      if (n.param != nullptr) {
        auto& pg = n.param->grad;
        if (pg.shape() != n.value.shape()) pg = Tensor<T>(n.value.shape());
        for (std::size_t k = 0; k < pg.numel(); ++k) pg[k] += n.grad[k];
      } else if (n.backward) {
        n.backward(n.grad, n.value);
      }
      n.grad = Tensor<T>();
      n.backward = nullptr;
    }
    nodes_.clear();
  }

 private:
  struct Node {
    Tensor<T> value;
    Tensor<T> grad;
    bool requires_grad = false;
    Parameter<T>* param = nullptr;
    BackwardFn backward;
    const char* op = "";
  };

  Var<T> push(Tensor<T> value, bool rg, Parameter<T>* p, BackwardFn fn, const char* op) {
    rg = rg && grad_enabled_;
    nodes_.push_back(Node{std::move(value), Tensor<T>(), rg, p, rg ? std::move(fn) : BackwardFn{}, op});
    return Var<T>(this, nodes_.size() - 1);
  }

  std::deque<Node> nodes_;
  bool grad_enabled_ = true;
};

template <typename T>
const Tensor<T>& Var<T>::value() const {
  return tape_->value(id_);
}

template <typename T>
bool Var<T>::requires_grad() const {
  return tape_->requires_grad(id_);
}

}  // namespace ecenet
