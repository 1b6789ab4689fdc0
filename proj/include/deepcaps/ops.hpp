#pragma once

#include <array>
#include <cstddef>
#include <vector>

#include "deepcaps/autograd.hpp"

namespace deepcaps {

// Differentiable tensor operations. All ops are templated on the scalar
// type and instantiated for float and double.

enum class Padding { Same, Valid };
enum class Mode { Train, Infer };

// ---- elementwise -----------------------------------------------------------

template <typename T> DTensor<T> add(const DTensor<T>& a, const DTensor<T>& b);
template <typename T> DTensor<T> sub(const DTensor<T>& a, const DTensor<T>& b);
template <typename T> DTensor<T> mul(const DTensor<T>& a, const DTensor<T>& b);
template <typename T> DTensor<T> scale(const DTensor<T>& a, T factor);
template <typename T> DTensor<T> relu(const DTensor<T>& x);
template <typename T> DTensor<T> sigmoid(const DTensor<T>& x);
// Adds `bias` (1-D, length = last extent) along the last axis.
template <typename T> DTensor<T> add_bias(const DTensor<T>& x, const DTensor<T>& bias);
// Stops gradient flow; the result is a constant with the same value.
template <typename T> DTensor<T> detach(const DTensor<T>& x);

// ---- shape -----------------------------------------------------------------

template <typename T> DTensor<T> reshape(const DTensor<T>& x, Shape shape);
template <typename T> DTensor<T> transpose(const DTensor<T>& x, const std::vector<std::size_t>& perm);
template <typename T> DTensor<T> slice(const DTensor<T>& x, std::size_t axis, std::size_t begin, std::size_t end);
template <typename T> DTensor<T> concat(const std::vector<DTensor<T>>& parts, std::size_t axis);
// Inserts a new axis at `axis` and repeats the input `count` times along it.
template <typename T> DTensor<T> expand(const DTensor<T>& x, std::size_t axis, std::size_t count);

// ---- reductions ------------------------------------------------------------

template <typename T> DTensor<T> sum(const DTensor<T>& x);
template <typename T> DTensor<T> mean(const DTensor<T>& x);
// Removes `axis` by summation.
template <typename T> DTensor<T> sum_axis(const DTensor<T>& x, std::size_t axis);
// Euclidean norm over the last axis, which is removed. The gradient at a zero
// vector is taken as zero.
template <typename T> DTensor<T> norm_last(const DTensor<T>& x);

// ---- linear algebra / nn ---------------------------------------------------

template <typename T> DTensor<T> matmul(const DTensor<T>& a, const DTensor<T>& b);
// Max-subtracted softmax along `axis`.
template <typename T> DTensor<T> softmax_axis(const DTensor<T>& x, std::size_t axis);

// x: [N,H,W,Cin], kernel: [kh,kw,Cin,Cout] -> [N,H',W',Cout]. Cross-correlation;
// "same" padding puts the odd padding element on the trailing edge.
template <typename T>
DTensor<T> conv2d(const DTensor<T>& x, const DTensor<T>& kernel, std::size_t stride, Padding padding);

// x: [N,D,H,W,Cin], kernel: [kd,kh,kw,Cin,Cout] -> [N,D',H',W',Cout].
template <typename T>
DTensor<T> conv3d(const DTensor<T>& x, const DTensor<T>& kernel, std::array<std::size_t, 3> strides,
                  Padding padding);

// Adjoint of conv2d with respect to its input. x: [N,H,W,Cin],
// kernel: [kh,kw,Cout,Cin] -> [N,H*stride,W*stride,Cout] for same padding,
// [N,(H-1)*stride+kh,...] for valid.
template <typename T>
DTensor<T> conv_transpose2d(const DTensor<T>& x, const DTensor<T>& kernel, std::size_t stride,
                            Padding padding);

template <typename T>
struct BatchNormStats {
  Tensor<T> running_mean;
  Tensor<T> running_var;
  T momentum = T(0.9);  // running = momentum * running + (1 - momentum) * batch
  T eps = T(1e-5);

  explicit BatchNormStats(std::size_t channels = 1)
      : running_mean(Shape{channels}, T(0)), running_var(Shape{channels}, T(1)) {}
};

// Normalises every axis except the last (channels-last).
template <typename T>
DTensor<T> batchnorm(const DTensor<T>& x, const DTensor<T>& gamma, const DTensor<T>& beta,
                     BatchNormStats<T>& stats, Mode mode);

// ---- plain (non-recorded) helpers -----------------------------------------

// Output spatial extent of a convolution along one axis.
std::size_t conv_output_extent(std::size_t in, std::size_t kernel, std::size_t stride,
                               Padding padding, std::size_t axis);

template <typename T>
Tensor<T> softmax_values(const Tensor<T>& x, std::size_t axis);

}  // namespace deepcaps
