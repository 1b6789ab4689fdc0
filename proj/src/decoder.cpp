#include "deepcaps/decoder.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace deepcaps {

DecoderKind parse_decoder_kind(const std::string& name) {
  if (name == "fc") return DecoderKind::FullyConnected;
  if (name == "deconv") return DecoderKind::Deconv;
  throw ConfigError("unknown decoder kind '" + name + "' (expected fc|deconv)");
}

std::string to_string(DecoderKind kind) { return kind == DecoderKind::FullyConnected ? "fc" : "deconv"; }

PerturbMode parse_perturb_mode(const std::string& name) {
  if (name == "replace") return PerturbMode::Replace;
  if (name == "offset") return PerturbMode::Offset;
  throw ConfigError("unknown perturbation mode '" + name + "' (expected replace|offset)");
}

template <typename T>
Decoder<T>::Decoder(const DecoderConfig& config, Rng& rng) : config_(config) {
  if (config.input_dim == 0 || config.out_h == 0 || config.out_w == 0 || config.out_c == 0) {
    throw ConfigError("decoder: input and output extents must be >= 1");
  }
  auto dense = [&](std::size_t in, std::size_t out) {
    weights_.emplace_back(glorot_uniform<T>(Shape{in, out}, in, out, rng), true);
    biases_.emplace_back(Tensor<T>(Shape{out}), true);
  };
  if (config.kind == DecoderKind::FullyConnected) {
    std::size_t in = config.input_dim;
    for (std::size_t width : config.hidden) {
      if (width == 0) throw ConfigError("decoder: hidden width must be >= 1");
      dense(in, width);
      in = width;
    }
    dense(in, config.out_h * config.out_w * config.out_c);
    return;
  }
  if (config.channels.empty()) throw ConfigError("decoder: deconv decoder needs at least one channel entry");
  const std::size_t expected = config.base << config.channels.size();
  if (config.out_h != expected || config.out_w != expected) {
    throw ConfigError("decoder: base " + std::to_string(config.base) + " with " +
                      std::to_string(config.channels.size()) + " stride-2 stages gives " + std::to_string(expected) +
                      "x" + std::to_string(expected) + ", output is " + std::to_string(config.out_h) + "x" +
                      std::to_string(config.out_w));
  }
  dense(config.input_dim, config.base * config.base * config.channels.front());
  const std::size_t k = config.kernel;
  for (std::size_t s = 0; s < config.channels.size(); ++s) {
    const std::size_t cin = config.channels[s];
    const std::size_t cout = s + 1 < config.channels.size() ? config.channels[s + 1] : config.out_c;
    weights_.emplace_back(glorot_uniform<T>(Shape{k, k, cout, cin}, k * k * cin, k * k * cout, rng), true);
    biases_.emplace_back(Tensor<T>(Shape{cout}), true);
  }
}

template <typename T>
DTensor<T> Decoder<T>::decode(const DTensor<T>& v) const {
  if (v.shape().rank() != 2 || v.dim(1) != config_.input_dim) {
    throw ShapeError("decode: expected [N," + std::to_string(config_.input_dim) + "], got " + v.shape().str());
  }
  const std::size_t N = v.dim(0);
  DTensor<T> h = v;
  if (config_.kind == DecoderKind::FullyConnected) {
    for (std::size_t l = 0; l < weights_.size(); ++l) {
      h = add_bias(matmul(h, weights_[l]), biases_[l]);
      h = l + 1 < weights_.size() ? relu(h) : sigmoid(h);
    }
    return reshape(h, Shape{N, config_.out_h, config_.out_w, config_.out_c});
  }
  h = relu(add_bias(matmul(h, weights_[0]), biases_[0]));
  h = reshape(h, Shape{N, config_.base, config_.base, config_.channels.front()});
  for (std::size_t l = 1; l < weights_.size(); ++l) {
    h = add_bias(conv_transpose2d(h, weights_[l], 2, Padding::Same), biases_[l]);
    h = l + 1 < weights_.size() ? relu(h) : sigmoid(h);
  }
  return h;
}

template <typename T>
void Decoder<T>::collect(const std::string& prefix, ParamRegistry<T>& registry) {
  for (std::size_t l = 0; l < weights_.size(); ++l) {
    registry.add_param(prefix + ".w" + std::to_string(l), weights_[l]);
    registry.add_param(prefix + ".b" + std::to_string(l), biases_[l]);
  }
}

template <typename T>
MaskResult<T> mask_winner(const DTensor<T>& class_caps, const Tensor<T>* labels) {
  const Shape& s = class_caps.shape();
  if (s.rank() != 3) throw ShapeError("mask_winner: class capsules must be [N,C,d], got " + s.str());
  const std::size_t N = s[0], C = s[1], d = s[2];
  if (labels && labels->shape() != Shape{N, C}) {
    throw ShapeError("mask_winner: labels " + labels->shape().str() + " do not match [N,C] of " + s.str());
  }
  MaskResult<T> result;
  const Tensor<T>& caps = class_caps.value();
  Tensor<T> out(Shape{N, d});
  for (std::size_t n = 0; n < N; ++n) {
    std::size_t best = 0;
    T best_norm = -1;
    std::vector<T> norms(C);
    for (std::size_t c = 0; c < C; ++c) {
      T acc = 0;
      for (std::size_t k = 0; k < d; ++k) acc += caps[(n * C + c) * d + k] * caps[(n * C + c) * d + k];
      norms[c] = std::sqrt(acc);
    }
    if (labels) {
      for (std::size_t c = 0; c < C; ++c) {
        if ((*labels)[n * C + c] == T(1)) {
          best = c;
          break;
        }
      }
    } else {
      for (std::size_t c = 0; c < C; ++c) {
        if (norms[c] > best_norm) {
          best_norm = norms[c];
          best = c;
        }
      }
    }
    result.class_ids.push_back(static_cast<int>(best));
    result.norms.push_back(norms[best]);
    std::copy_n(caps.ptr() + (n * C + best) * d, d, out.ptr() + n * d);
  }
  std::vector<int> ids = result.class_ids;
  result.vectors = detail::finish(std::move(out), detail::should_record({&class_caps}),
                                  [class_caps, ids, C, d](const Tensor<T>& g) {
                                    Tensor<T>& gc = detail::grad_of(class_caps);
                                    for (std::size_t n = 0; n < ids.size(); ++n) {
                                      T* dst = gc.ptr() + (n * C + static_cast<std::size_t>(ids[n])) * d;
                                      for (std::size_t k = 0; k < d; ++k) dst[k] += g[n * d + k];
                                    }
                                  });
  return result;
}

std::vector<double> sweep_values(double lo, double hi, std::size_t steps) {
  if (steps == 0) throw ValueError("perturbation sweep: steps must be >= 1");
  if (lo > hi) throw ValueError("perturbation sweep: lo > hi");
  std::vector<double> values(steps);
  if (steps == 1) {
    values[0] = 0.5 * (lo + hi);
    return values;
  }
  for (std::size_t i = 0; i < steps; ++i) {
    values[i] = lo + (hi - lo) * static_cast<double>(i) / static_cast<double>(steps - 1);
  }
  return values;
}

template <typename T>
Tensor<T> perturb_sweep(const Decoder<T>& decoder, const Tensor<T>& v, std::size_t dim, double lo, double hi,
                        std::size_t steps, PerturbMode mode) {
  const std::size_t d = v.numel();
  if (d != decoder.config().input_dim) {
    throw ShapeError("perturb_sweep: activity vector has " + std::to_string(d) + " entries, decoder expects " +
                     std::to_string(decoder.config().input_dim));
  }
  if (dim >= d) {
    throw ValueError("perturb_sweep: dimension " + std::to_string(dim + 1) + " (1-indexed) outside 1.." +
                     std::to_string(d));
  }
  const std::vector<double> values = sweep_values(lo, hi, steps);
  Tensor<T> batch(Shape{steps, d});
  for (std::size_t s = 0; s < steps; ++s) {
    std::copy_n(v.ptr(), d, batch.ptr() + s * d);
    const T value = static_cast<T>(values[s]);
    batch[s * d + dim] = mode == PerturbMode::Replace ? value : v[dim] + value;
  }
  return decoder.decode(DTensor<T>(std::move(batch))).value();
}

template <typename T>
std::vector<std::pair<std::size_t, double>> variance_rank(const Tensor<T>& vectors) {
  if (vectors.rank() != 2) throw ShapeError("variance_rank: expected [S,d], got " + vectors.shape().str());
  const std::size_t S = vectors.dim(0), d = vectors.dim(1);
  if (S == 0) throw ValueError("variance_rank: no activity vectors");
  std::vector<std::pair<std::size_t, double>> ranked(d);
  for (std::size_t k = 0; k < d; ++k) {
    double mean = 0;
    for (std::size_t s = 0; s < S; ++s) mean += static_cast<double>(vectors[s * d + k]);
    mean /= static_cast<double>(S);
    double ss = 0;
    for (std::size_t s = 0; s < S; ++s) {
      const double dv = static_cast<double>(vectors[s * d + k]) - mean;
      ss += dv * dv;
    }
    ranked[k] = {k, S > 1 ? ss / static_cast<double>(S - 1) : 0.0};
  }
  std::stable_sort(ranked.begin(), ranked.end(),
                   [](const auto& a, const auto& b) { return a.second > b.second; });
  return ranked;
}

#define DEEPCAPS_INSTANTIATE_DECODER(T)                                                                      \
  template class Decoder<T>;                                                                                 \
  template MaskResult<T> mask_winner(const DTensor<T>&, const Tensor<T>*);                                   \
  template Tensor<T> perturb_sweep(const Decoder<T>&, const Tensor<T>&, std::size_t, double, double, std::size_t, \
                                   PerturbMode);                                                             \
  template std::vector<std::pair<std::size_t, double>> variance_rank(const Tensor<T>&);

DEEPCAPS_INSTANTIATE_DECODER(float)
DEEPCAPS_INSTANTIATE_DECODER(double)

}  // namespace deepcaps
