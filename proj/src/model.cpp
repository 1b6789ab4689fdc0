#include "deepcaps/model.hpp"

#include <sstream>

namespace deepcaps {

namespace {

std::string grid_str(std::size_t h, std::size_t w, std::size_t types, std::size_t dim) {
  std::ostringstream os;
  os << "[" << h << "," << w << "," << types << "," << dim << "]";
  return os.str();
}

}  // namespace

template <typename T>
Model<T>::Model(const ArchitectureSpec& spec, std::uint64_t seed) : spec_(spec) {
  Rng rng(seed);
  const StemSpec& stem = spec.stem;
  if (spec.height == 0 || spec.width == 0 || spec.channels == 0) throw ConfigError("model: input extents must be >= 1");
  if (spec.classes == 0) throw ConfigError("model: classes must be >= 1");
  if (stem.kernel == 0 || stem.channels == 0 || stem.capsule_dim == 0 || stem.channels % stem.capsule_dim != 0) {
    throw ConfigError("stem: channels " + std::to_string(stem.channels) + " must be a positive multiple of capsule_dim " +
                      std::to_string(stem.capsule_dim));
  }
  if (spec.cells.empty()) throw ConfigError("model: at least one capsule cell is required");

  const std::size_t k = stem.kernel, cin = spec.channels, cout = stem.channels;
  stem_kernel_ = DTensor<T>(glorot_uniform<T>(Shape{k, k, cin, cout}, k * k * cin, k * k * cout, rng), true);
  stem_bias_ = DTensor<T>(Tensor<T>(Shape{cout}), true);
  if (stem.batchnorm) {
    stem_gamma_ = DTensor<T>(Tensor<T>(Shape{cout}, T(1)), true);
    stem_beta_ = DTensor<T>(Tensor<T>(Shape{cout}), true);
    stem_stats_ = BatchNormStats<T>(cout);
  }
  const std::size_t stem_params = k * k * cin * cout + cout * (stem.batchnorm ? 3 : 1);
  layers_.push_back({"stem", grid_str(spec.height, spec.width, cout / stem.capsule_dim, stem.capsule_dim), stem_params});

  std::size_t h = spec.height, w = spec.width, types = cout / stem.capsule_dim, dim = stem.capsule_dim;
  cells_.reserve(spec.cells.size());
  for (std::size_t c = 0; c < spec.cells.size(); ++c) {
    const std::string name = "cell" + std::to_string(c + 1);
    cells_.emplace_back(name, h, w, types, dim, spec.cells[c], spec.options, rng);
    h = cells_.back().out_h();
    w = cells_.back().out_w();
    types = cells_.back().out_types();
    dim = cells_.back().out_dim();
  }

  class_inputs_ = spec.class_caps.inputs;
  if (class_inputs_.empty()) class_inputs_.push_back(spec.cells.size() - 1);
  std::size_t inputs = 0, in_dim = 0, in_types = 0;
  for (std::size_t idx : class_inputs_) {
    if (idx >= cells_.size()) {
      throw ConfigError("class_caps: input cell index " + std::to_string(idx) + " out of range (" +
                        std::to_string(cells_.size()) + " cells)");
    }
    const CapsuleCell<T>& cell = cells_[idx];
    if (in_dim != 0 && cell.out_dim() != in_dim) {
      throw ConfigError("class_caps: input cells disagree on capsule dimension (" + std::to_string(in_dim) + " vs " +
                        std::to_string(cell.out_dim()) + ")");
    }
    if (in_types != 0 && cell.out_types() != in_types && spec.class_caps.sharing == TransformSharing::PerType) {
      throw ConfigError("class_caps: per-type sharing needs equal type counts across input cells");
    }
    in_dim = cell.out_dim();
    in_types = cell.out_types();
    inputs += cell.out_h() * cell.out_w() * cell.out_types();
  }
  const std::size_t groups = spec.class_caps.sharing == TransformSharing::PerType ? in_types : 0;
  RoutingOptions ro{spec.class_caps.routing_iterations, spec.options.softmax_axis, spec.options.routing_gradient};
  class_caps_ = std::make_unique<ClassCaps<T>>(inputs, in_dim, spec.classes, spec.class_caps.dim, groups, ro, rng);

  const DecoderConfig& dc = spec.decoder;
  if (dc.input_dim != spec.class_caps.dim || dc.out_h != spec.height || dc.out_w != spec.width ||
      dc.out_c != spec.channels) {
    throw ConfigError("decoder: input dim and output image must match the class capsule dim (" +
                      std::to_string(spec.class_caps.dim) + ") and the input image");
  }
  decoder_ = std::make_unique<Decoder<T>>(dc, rng);

  // Registry order is the checkpoint order.
  registry_.add_param("stem.kernel", stem_kernel_);
  registry_.add_param("stem.bias", stem_bias_);
  if (stem.batchnorm) {
    registry_.add_param("stem.bn_gamma", stem_gamma_);
    registry_.add_param("stem.bn_beta", stem_beta_);
    registry_.add_buffer("stem.bn_mean", &stem_stats_.running_mean);
    registry_.add_buffer("stem.bn_var", &stem_stats_.running_var);
  }
  for (std::size_t c = 0; c < cells_.size(); ++c) {
    const std::size_t before = registry_.trainable_count();
    cells_[c].collect("cell" + std::to_string(c + 1), registry_);
    layers_.push_back({"cell" + std::to_string(c + 1) + (spec.cells[c].routed ? " (routed)" : ""),
                       grid_str(cells_[c].out_h(), cells_[c].out_w(), cells_[c].out_types(), cells_[c].out_dim()),
                       registry_.trainable_count() - before});
  }
  std::size_t before = registry_.trainable_count();
  class_caps_->collect("class_caps", registry_);
  layers_.push_back({"class_caps", "[" + std::to_string(spec.classes) + "," + std::to_string(spec.class_caps.dim) + "]",
                     registry_.trainable_count() - before});
  before = registry_.trainable_count();
  decoder_->collect("decoder", registry_);
  layers_.push_back({"decoder (" + to_string(dc.kind) + ")",
                     "[" + std::to_string(dc.out_h) + "," + std::to_string(dc.out_w) + "," +
                         std::to_string(dc.out_c) + "]",
                     registry_.trainable_count() - before});
}

template <typename T>
typename Model<T>::Output Model<T>::forward(const DTensor<T>& images, Mode mode) {
  const Shape& s = images.shape();
  if (s.rank() != 4 || s[1] != spec_.height || s[2] != spec_.width || s[3] != spec_.channels) {
    throw ShapeError("model: expected images [N," + std::to_string(spec_.height) + "," + std::to_string(spec_.width) +
                     "," + std::to_string(spec_.channels) + "], got " + s.str());
  }
  const std::size_t N = s[0];
  DTensor<T> h = add_bias(conv2d(images, stem_kernel_, 1, Padding::Same), stem_bias_);
  if (spec_.stem.batchnorm) h = batchnorm(h, stem_gamma_, stem_beta_, stem_stats_, mode);
  h = relu(h);
  h = reshape(h, Shape{N, spec_.height, spec_.width, spec_.stem.channels / spec_.stem.capsule_dim,
                       spec_.stem.capsule_dim});

  std::vector<DTensor<T>> outs;
  outs.reserve(cells_.size());
  for (auto& cell : cells_) {
    h = cell.forward(h, mode);
    outs.push_back(h);
  }
  std::vector<DTensor<T>> flat;
  for (std::size_t idx : class_inputs_) flat.push_back(flatten_caps(outs[idx]));
  DTensor<T> caps_in = flat.size() == 1 ? flat.front() : concat(flat, 1);
  Output out;
  out.class_caps = class_caps_->forward(caps_in);
  out.norms = norm_last(out.class_caps);
  return out;
}

template <typename T>
DTensor<T> Model<T>::reconstruct(const DTensor<T>& class_caps, const Tensor<T>* labels) {
  return decoder_->decode(mask_winner(class_caps, labels).vectors);
}

template <typename T>
std::vector<LayerInfo> Model<T>::layer_table() const {
  return layers_;
}

template class Model<float>;
template class Model<double>;

}  // namespace deepcaps
