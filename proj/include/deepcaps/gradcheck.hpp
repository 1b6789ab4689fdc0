#pragma once

#include <algorithm>
#include <cmath>
#include <functional>

#include "deepcaps/autograd.hpp"

namespace deepcaps {

// Max over elements of |analytic - numeric| / max(|analytic|, |numeric|, 1e-8),
// where numeric is the central difference (f(x+eps) - f(x-eps)) / (2 eps).
// `f` must map x to a scalar DTensor.
template <typename T>
T grad_check(const std::function<DTensor<T>(const DTensor<T>&)>& f, const Tensor<T>& x, T eps) {
  Tensor<T> analytic;
  {
    Tape<T> tape;
    TapeScope<T> scope(tape);
    DTensor<T> input(x, true);
    DTensor<T> out = f(input);
    if (out.numel() != 1) throw GradientError("grad_check: function must be scalar-valued");
    if (!all_finite(out.value())) throw GradientError("grad_check: non-finite function value");
    if (!out.requires_grad()) {
      analytic = Tensor<T>(x.shape());
    } else {
      tape.backward(out);
      analytic = input.has_grad() ? input.grad() : Tensor<T>(x.shape());
    }
  }
  if (!all_finite(analytic)) throw GradientError("grad_check: non-finite analytic gradient");

  auto eval = [&](const Tensor<T>& at) {
    const T v = f(DTensor<T>(at, false)).value()[0];
    if (!std::isfinite(v)) throw GradientError("grad_check: non-finite function value under perturbation");
    return v;
  };

  T worst = 0;
  Tensor<T> probe = x;
  for (std::size_t i = 0; i < x.numel(); ++i) {
    const T saved = probe[i];
    probe[i] = saved + eps;
    const T up = eval(probe);
    probe[i] = saved - eps;
    const T down = eval(probe);
    probe[i] = saved;
    const T numeric = (up - down) / (T(2) * eps);
    const T denom = std::max({std::abs(analytic[i]), std::abs(numeric), T(1e-8)});
    worst = std::max(worst, std::abs(analytic[i] - numeric) / denom);
  }
  return worst;
}

}  // namespace deepcaps
