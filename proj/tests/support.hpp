#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include <unistd.h>

#include "deepcaps/gradcheck.hpp"
#include "deepcaps/params.hpp"
#include "deepcaps/ops.hpp"
#include "deepcaps/random.hpp"

namespace testing {

using namespace deepcaps;

// Scratch directory removed on destruction.
struct TempDir {
  std::filesystem::path path;
  TempDir() {
    static std::atomic<int> counter{0};
    path = std::filesystem::temp_directory_path() /
           ("deepcaps_test_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    std::filesystem::create_directories(path);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  ~TempDir() { std::filesystem::remove_all(path); }
  std::filesystem::path operator/(const std::string& name) const { return path / name; }
};

template <typename T = double>
Tensor<T> random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor<T> t(std::move(shape));
  for (auto& v : t.data()) v = static_cast<T>(rng.uniform(lo, hi));
  return t;
}

// sum(y * weights): a scalar whose gradient w.r.t. y is `weights`, so every
// output element contributes a distinct amount.
template <typename T>
DTensor<T> probe(const DTensor<T>& y, const Tensor<T>& weights) {
  return sum(mul(y, DTensor<T>(weights)));
}

// grad_check of x -> probe(f(x), R) with a fresh random R.
template <typename T = double>
T check(const std::function<DTensor<T>(const DTensor<T>&)>& f, const Tensor<T>& x, Rng& rng, T eps = T(1e-6)) {
  const Shape out_shape = f(DTensor<T>(x)).shape();
  const Tensor<T> weights = random_tensor<T>(out_shape, rng);
  return grad_check<T>([&](const DTensor<T>& in) { return probe(f(in), weights); }, x, eps);
}

struct ParamError {
  std::string name;
  double worst = 0;         // max relative error
  double analytic_max = 0;  // max |analytic|
  double numeric_max = 0;   // max |numeric|
};

// Tape gradient of `loss` w.r.t. every registered parameter against central
// differences of the same scalar.
template <typename T>
std::vector<ParamError> param_errors(ParamRegistry<T>& reg, const std::function<DTensor<T>()>& loss, double eps) {
  reg.zero_grad();
  {
    Tape<T> tape;
    TapeScope<T> scope(tape);
    tape.backward(loss());
  }
  std::vector<ParamError> out;
  for (const auto& p : reg.params()) {
    DTensor<T> handle = p.tensor;
    const Tensor<T> analytic = handle.has_grad() ? handle.grad() : Tensor<T>(handle.shape());
    ParamError e{p.name};
    for (std::size_t i = 0; i < handle.numel(); ++i) {
      const T w = handle.value()[i];
      handle.mutable_value()[i] = w + T(eps);
      const double up = loss().value()[0];
      handle.mutable_value()[i] = w - T(eps);
      const double down = loss().value()[0];
      handle.mutable_value()[i] = w;
      const double numeric = (up - down) / (2 * eps);
      const double a = analytic[i];
      e.worst = std::max(e.worst, std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), 1e-8}));
      e.analytic_max = std::max(e.analytic_max, std::abs(a));
      e.numeric_max = std::max(e.numeric_max, std::abs(numeric));
    }
    out.push_back(e);
  }
  return out;
}

}  // namespace testing
