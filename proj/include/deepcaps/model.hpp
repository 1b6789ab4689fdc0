#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "deepcaps/capsule_layers.hpp"
#include "deepcaps/decoder.hpp"

namespace deepcaps {

// Plain convolution in front of the first capsule cell:
// conv -> bias -> (batch norm) -> relu, then viewed as capsules of
// `capsule_dim` (channels / capsule_dim types).
struct StemSpec {
  std::size_t kernel = 3;
  std::size_t channels = 128;
  std::size_t capsule_dim = 1;
  bool batchnorm = true;
};

enum class TransformSharing { PerInput, PerType };

struct ClassCapsSpec {
  std::vector<std::size_t> inputs;  // cells whose flattened outputs are concatenated; empty = last cell
  std::size_t dim = 32;
  int routing_iterations = 3;
  TransformSharing sharing = TransformSharing::PerInput;
};

enum class MaskSource { Label, Prediction };

struct ArchitectureSpec {
  std::size_t height = 28, width = 28, channels = 1;
  std::size_t classes = 10;
  StemSpec stem;
  std::vector<CellSpec> cells;
  ClassCapsSpec class_caps;
  LayerOptions options;
  DecoderConfig decoder;
  // Which capsule feeds the decoder during training.
  MaskSource train_mask = MaskSource::Label;
};

struct LayerInfo {
  std::string name;
  std::string output;  // shape of the layer output for one sample
  std::size_t params = 0;
};

template <typename T>
class Model {
 public:
  Model(const ArchitectureSpec& spec, std::uint64_t seed);
  Model(const Model&) = delete;
  Model& operator=(const Model&) = delete;

  struct Output {
    DTensor<T> class_caps;  // [N, C, d]
    DTensor<T> norms;       // [N, C]
  };

  // images: [N, H, W, C]
  Output forward(const DTensor<T>& images, Mode mode);

  // Decoder input chosen by labels (training) or by the largest norm.
  DTensor<T> reconstruct(const DTensor<T>& class_caps, const Tensor<T>* labels);

  const ArchitectureSpec& spec() const { return spec_; }
  ParamRegistry<T>& registry() { return registry_; }
  const ParamRegistry<T>& registry() const { return registry_; }
  std::size_t parameter_count() const { return registry_.trainable_count(); }
  std::vector<LayerInfo> layer_table() const;

  std::vector<CapsuleCell<T>>& cells() { return cells_; }
  ClassCaps<T>& class_caps() { return *class_caps_; }
  Decoder<T>& decoder() { return *decoder_; }

 private:
  ArchitectureSpec spec_;
  DTensor<T> stem_kernel_, stem_bias_, stem_gamma_, stem_beta_;
  BatchNormStats<T> stem_stats_;
  std::vector<CapsuleCell<T>> cells_;
  std::vector<std::size_t> class_inputs_;
  std::unique_ptr<ClassCaps<T>> class_caps_;
  std::unique_ptr<Decoder<T>> decoder_;
  ParamRegistry<T> registry_;
  std::vector<LayerInfo> layers_;
};

}  // namespace deepcaps
