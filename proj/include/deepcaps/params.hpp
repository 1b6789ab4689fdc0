#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "deepcaps/autograd.hpp"
#include "deepcaps/random.hpp"

namespace deepcaps {

// Ordered view over a model's trainable parameters and non-trainable buffers
// (batch-norm running statistics). Declaration order is the checkpoint order.
template <typename T>
class ParamRegistry {
 public:
  struct Param {
    std::string name;
    DTensor<T> tensor;
  };
  struct Buffer {
    std::string name;
    Tensor<T>* tensor;
  };

  void add_param(std::string name, const DTensor<T>& t) { params_.push_back({std::move(name), t}); }
  void add_buffer(std::string name, Tensor<T>* t) { buffers_.push_back({std::move(name), t}); }

  const std::vector<Param>& params() const { return params_; }
  const std::vector<Buffer>& buffers() const { return buffers_; }

  std::size_t trainable_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.tensor.numel();
    return n;
  }

  void zero_grad() {
    for (auto& p : params_) p.tensor.zero_grad();
  }

 private:
  std::vector<Param> params_;
  std::vector<Buffer> buffers_;
};

// Uniform in +-sqrt(6 / (fan_in + fan_out)).
template <typename T>
Tensor<T> glorot_uniform(Shape shape, std::size_t fan_in, std::size_t fan_out, Rng& rng) {
  Tensor<T> t(std::move(shape));
  const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  for (auto& v : t.data()) v = static_cast<T>(rng.uniform(-limit, limit));
  return t;
}

}  // namespace deepcaps
