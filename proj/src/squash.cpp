#include "deepcaps/squash.hpp"

#include <cmath>

namespace deepcaps {

namespace {

template <typename T>
std::size_t last_extent(const Shape& s) {
  if (s.rank() == 0) throw ShapeError("squash: scalar input");
  return s[s.rank() - 1];
}

}  // namespace

template <typename T>
Tensor<T> squash_values(const Tensor<T>& s) {
  const std::size_t d = last_extent<T>(s.shape());
  const std::size_t rows = s.numel() / d;
  const T eps = static_cast<T>(kSquashEpsilon);
  Tensor<T> v(s.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const T* in = s.ptr() + r * d;
    T n2 = 0;
    for (std::size_t k = 0; k < d; ++k) n2 += in[k] * in[k];
    const T factor = n2 / ((T(1) + n2) * std::sqrt(n2 + eps));
    T* out = v.ptr() + r * d;
    for (std::size_t k = 0; k < d; ++k) out[k] = factor * in[k];
  }
  return v;
}

template <typename T>
void squash_backward(const Tensor<T>& s, const Tensor<T>& grad_v, Tensor<T>& grad_s) {
  const std::size_t d = last_extent<T>(s.shape());
  const std::size_t rows = s.numel() / d;
  const T eps = static_cast<T>(kSquashEpsilon);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* in = s.ptr() + r * d;
    const T* g = grad_v.ptr() + r * d;
    T n2 = 0, gs = 0;
    for (std::size_t k = 0; k < d; ++k) {
      n2 += in[k] * in[k];
      gs += g[k] * in[k];
    }
    const T root = std::sqrt(n2 + eps);
    const T onep = T(1) + n2;
    const T f = n2 / (onep * root);
    // df/d(n2), written without dividing by n2 so it is finite at 0.
    const T df = ((n2 + eps) - n2 * onep / T(2)) / (onep * onep * (n2 + eps) * root);
    T* out = grad_s.ptr() + r * d;
    for (std::size_t k = 0; k < d; ++k) out[k] += f * g[k] + T(2) * df * in[k] * gs;
  }
}

template <typename T>
DTensor<T> squash(const DTensor<T>& s) {
  return detail::finish(squash_values(s.value()), detail::should_record({&s}), [s](const Tensor<T>& g) {
    squash_backward(s.value(), g, detail::grad_of(s));
  });
}

template DTensor<float> squash(const DTensor<float>&);
template DTensor<double> squash(const DTensor<double>&);
template Tensor<float> squash_values(const Tensor<float>&);
template Tensor<double> squash_values(const Tensor<double>&);
template void squash_backward(const Tensor<float>&, const Tensor<float>&, Tensor<float>&);
template void squash_backward(const Tensor<double>&, const Tensor<double>&, Tensor<double>&);

}  // namespace deepcaps
