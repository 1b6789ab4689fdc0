#pragma once

#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "deepcaps/ops.hpp"
#include "deepcaps/params.hpp"

namespace deepcaps {

enum class DecoderKind { FullyConnected, Deconv };

DecoderKind parse_decoder_kind(const std::string& name);
std::string to_string(DecoderKind kind);

// One parameter set shared by every class. The decoder sees only the
// winning capsule's activity vector, never the class identity.
struct DecoderConfig {
  DecoderKind kind = DecoderKind::FullyConnected;
  std::size_t input_dim = 32;
  // FullyConnected: hidden widths, ReLU between, sigmoid output.
  std::vector<std::size_t> hidden = {512, 1024};
  // Deconv: dense layer to a base x base x channels[0] map, then one
  // stride-2 transposed convolution per channel step (the last one to the
  // image channels), so out_h == base * 2^channels.size().
  std::size_t base = 4;
  std::vector<std::size_t> channels = {64, 64, 32, 16};
  std::size_t kernel = 3;
  std::size_t out_h = 28, out_w = 28, out_c = 1;
};

template <typename T>
class Decoder {
 public:
  Decoder(const DecoderConfig& config, Rng& rng);

  // v: [N, d] -> images [N, out_h, out_w, out_c], pixels in (0, 1).
  DTensor<T> decode(const DTensor<T>& v) const;

  void collect(const std::string& prefix, ParamRegistry<T>& registry);
  const DecoderConfig& config() const { return config_; }

 private:
  DecoderConfig config_;
  std::vector<DTensor<T>> weights_, biases_;
};

// Winning capsule per sample.
template <typename T>
struct MaskResult {
  DTensor<T> vectors;  // [N, d], differentiable w.r.t. the class capsules
  std::vector<int> class_ids;
  std::vector<T> norms;
};

// With labels (one-hot [N,C]) selects the true class, otherwise the class with
// the largest capsule norm; ties resolve to the lowest class index.
template <typename T>
MaskResult<T> mask_winner(const DTensor<T>& class_caps, const Tensor<T>* labels = nullptr);

enum class PerturbMode { Replace, Offset };

PerturbMode parse_perturb_mode(const std::string& name);

// k evenly spaced values in [lo, hi]; for k == 1 the midpoint.
std::vector<double> sweep_values(double lo, double hi, std::size_t steps);

// Decodes `v` with v[dim] set to (Replace) or shifted by (Offset) each of
// `steps` evenly spaced values in [lo, hi]. Returns [steps, H, W, C].
template <typename T>
Tensor<T> perturb_sweep(const Decoder<T>& decoder, const Tensor<T>& v, std::size_t dim, double lo, double hi,
                        std::size_t steps, PerturbMode mode = PerturbMode::Offset);

// Unbiased per-dimension variance of `vectors` ([S, d]), returned as
// (dim, variance) pairs sorted by variance descending (ties by dim).
template <typename T>
std::vector<std::pair<std::size_t, double>> variance_rank(const Tensor<T>& vectors);

}  // namespace deepcaps
