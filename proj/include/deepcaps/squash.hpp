#pragma once

#include "deepcaps/autograd.hpp"

namespace deepcaps {

// Guard added to |s|^2 under the square root so squash is smooth at 0.
inline constexpr double kSquashEpsilon = 1e-8;

// v = |s|^2 / (1 + |s|^2) * s / sqrt(|s|^2 + eps), applied to every vector
// along the last axis. Output norms lie in [0, 1); the Jacobian at s = 0 is 0.
template <typename T>
DTensor<T> squash(const DTensor<T>& s);

template <typename T>
Tensor<T> squash_values(const Tensor<T>& s);

// grad_s += J_squash(s)^T grad_v, row by row over the last axis.
template <typename T>
void squash_backward(const Tensor<T>& s, const Tensor<T>& grad_v, Tensor<T>& grad_s);

}  // namespace deepcaps
