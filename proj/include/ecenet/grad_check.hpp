#pragma once

#include <algorithm>
#include <cmath>
#include <functional>

#include "ecenet/tape.hpp"

namespace ecenet {

/// Scalar-valued function of one tensor, evaluated on a caller-provided tape.
template <typename T>
using TapeFn = std::function<Var<T>(Tape<T>&, const Var<T>&)>;

/// Max over coordinates of |analytic - central difference| / max(1, |central difference|).
template <typename T>
T grad_check(const TapeFn<T>& f, const Tensor<T>& x, T eps = T(1e-5)) {
  Parameter<T> p("x", x);
  p.zero_grad();
  {
    Tape<T> tape;
    Var<T> y = f(tape, tape.param(p));
    if (y.numel() != 1) throw ContractError("grad_check: function must be scalar-valued, got " + shape_str(y.shape()));
    tape.backward(y);
  }
  auto eval = [&](const Tensor<T>& at) {
    Tape<T> tape(false);
    return f(tape, tape.constant(at)).value()[0];
  };
  T worst = 0;
  Tensor<T> probe = x;
  for (std::size_t i = 0; i < x.numel(); ++i) {
    const T orig = probe[i];
    probe[i] = orig + eps;
    const T up = eval(probe);
    probe[i] = orig - eps;
    const T down = eval(probe);
    probe[i] = orig;
    const T numeric = (up - down) / (T(2) * eps);
    worst = std::max(worst, std::abs(p.grad[i] - numeric) / std::max(T(1), std::abs(numeric)));
  }
  return worst;
}

/// Same measure with respect to a parameter already wired into `f`'s model.
/// `f` must read `p.value` every time it is called.
template <typename T>
T grad_check_param(const std::function<Var<T>(Tape<T>&)>& f, Parameter<T>& p, T eps = T(1e-5)) {
  p.zero_grad();
  {
    Tape<T> tape;
    Var<T> y = f(tape);
    if (y.numel() != 1) throw ContractError("grad_check: function must be scalar-valued, got " + shape_str(y.shape()));
    tape.backward(y);
  }
  const Tensor<T> analytic = p.grad;
  auto eval = [&]() {
    Tape<T> tape(false);
    return f(tape).value()[0];
  };
  T worst = 0;
  for (std::size_t i = 0; i < p.value.numel(); ++i) {
    const T orig = p.value[i];
    p.value[i] = orig + eps;
    const T up = eval();
    p.value[i] = orig - eps;
    const T down = eval();
    p.value[i] = orig;
    const T numeric = (up - down) / (T(2) * eps);
    worst = std::max(worst, std::abs(analytic[i] - numeric) / std::max(T(1), std::abs(numeric)));
  }
  return worst;
}

}  // namespace ecenet
