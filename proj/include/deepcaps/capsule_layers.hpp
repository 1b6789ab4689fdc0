#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "deepcaps/ops.hpp"
#include "deepcaps/params.hpp"
#include "deepcaps/routing.hpp"
#include "deepcaps/squash.hpp"

namespace deepcaps {

// A capsule tensor is a DTensor shaped [N, H, W, n, d]: n capsule types of
// dimension d at every grid location.

struct ConvCapsSpec {
  std::size_t kernel = 3;
  std::size_t stride = 1;
  std::size_t types = 32;  // output capsule types
  std::size_t dim = 8;     // output capsule dimension
};

// Layers run in sequence. The output of layers[skip_from] is added to the
// final layer's output before the final squash (skip_from < 0 disables the
// skip). When `routed`, the final layer is a 3D-convolution vote layer
// followed by dynamic routing.
struct CellSpec {
  std::vector<ConvCapsSpec> layers;
  int skip_from = -1;
  bool routed = false;
  int routing_iterations = 3;
};

struct LayerOptions {
  bool batchnorm = true;
  SoftmaxAxis softmax_axis = SoftmaxAxis::Parents;
  RoutingGradient routing_gradient = RoutingGradient::FinalIteration;
};

// Votes from children to parents, laid out [B, K, M, D] for routing. For
// votes produced by vote_conv3d, B = N * out_h * out_w and K is the number
// of child capsule types; each child is the kxk group of capsules of one type.
template <typename T>
struct VoteSet {
  DTensor<T> votes;
  std::size_t batch = 1, out_h = 1, out_w = 1;
};

// ---- stateless capsule ops -----------------------------------------------

// x: [N,H,W,n,d], kernel: [d, kh, kw, 1, m*d'] -> votes [N,H',W',n,m,d'].
// The n*d capsule axis is the depth axis of a 3D convolution with depth
// extent and stride d, so each depth step consumes one whole child capsule.
template <typename T>
DTensor<T> vote_conv3d(const DTensor<T>& x, const DTensor<T>& kernel, std::size_t stride,
                       std::size_t parent_types, std::size_t parent_dim);

template <typename T>
VoteSet<T> to_vote_set(const DTensor<T>& votes6);

// [N,H,W,n,d] -> [N, H*W*n, d]; capsule (h, w, t) lands at (h*W + w)*n + t.
template <typename T>
DTensor<T> flatten_caps(const DTensor<T>& x);

template <typename T>
DTensor<T> unflatten_caps(const DTensor<T>& x, std::size_t height, std::size_t width, std::size_t types);

// x: [N,K,d], weights: [G,d,C,d_out] -> votes [N,K,C,d_out], where input
// capsule i uses transform block i % G. G == K gives one transform per
// (input, class) pair; G == n shares transforms across positions per type.
template <typename T>
DTensor<T> caps_transform(const DTensor<T>& x, const DTensor<T>& weights);

// ---- layers ----------------------------------------------------------------

// Convolutional capsule layer: channel view -> conv2d + bias -> (batch norm)
// -> capsule view -> squash.
template <typename T>
class ConvCaps2D {
 public:
  ConvCaps2D(std::size_t in_types, std::size_t in_dim, const ConvCapsSpec& spec, bool batchnorm, Rng& rng);

  // Output before the squash, [N,H',W',types,dim].
  DTensor<T> preactivation(const DTensor<T>& x, Mode mode);
  DTensor<T> forward(const DTensor<T>& x, Mode mode) { return squash(preactivation(x, mode)); }

  void collect(const std::string& prefix, ParamRegistry<T>& registry);

  const ConvCapsSpec& spec() const { return spec_; }
  DTensor<T>& kernel() { return kernel_; }
  DTensor<T>& bias() { return bias_; }

 private:
  std::size_t in_types_, in_dim_;
  ConvCapsSpec spec_;
  bool batchnorm_;
  DTensor<T> kernel_, bias_, gamma_, beta_;
  BatchNormStats<T> stats_;
};

// 3D-convolution votes followed by dynamic routing; output is already squashed.
template <typename T>
class RoutedCaps3D {
 public:
  RoutedCaps3D(std::size_t in_types, std::size_t in_dim, const ConvCapsSpec& spec, RoutingOptions routing,
               Rng& rng);

  VoteSet<T> votes(const DTensor<T>& x);
  DTensor<T> forward(const DTensor<T>& x);

  void collect(const std::string& prefix, ParamRegistry<T>& registry);

  DTensor<T>& kernel() { return kernel_; }

 private:
  std::size_t in_types_, in_dim_;
  ConvCapsSpec spec_;
  RoutingOptions routing_;
  DTensor<T> kernel_;
};

template <typename T>
class CapsuleCell {
 public:
  // Throws ConfigError naming `name` if the spec is not shape-consistent for
  // an input grid of in_h x in_w x in_types x in_dim.
  CapsuleCell(std::string name, std::size_t in_h, std::size_t in_w, std::size_t in_types, std::size_t in_dim,
              const CellSpec& spec, const LayerOptions& options, Rng& rng);

  DTensor<T> forward(const DTensor<T>& x, Mode mode);

  void collect(const std::string& prefix, ParamRegistry<T>& registry);

  std::size_t out_h() const { return out_h_; }
  std::size_t out_w() const { return out_w_; }
  std::size_t out_types() const { return spec_.layers.back().types; }
  std::size_t out_dim() const { return spec_.layers.back().dim; }
  const CellSpec& spec() const { return spec_; }

  // Plain layers (all but a routed final layer), in order.
  std::vector<ConvCaps2D<T>>& plain_layers() { return plain_; }
  RoutedCaps3D<T>* routed_layer() { return routed_.empty() ? nullptr : &routed_.front(); }

 private:
  std::string name_;
  CellSpec spec_;
  std::size_t out_h_ = 0, out_w_ = 0;
  std::vector<ConvCaps2D<T>> plain_;
  std::vector<RoutedCaps3D<T>> routed_;  // zero or one element
};

// Class-capsule head: per-input transforms, then routing to C class capsules.
template <typename T>
class ClassCaps {
 public:
  // transform_groups == 0 means one transform per input capsule.
  ClassCaps(std::size_t inputs, std::size_t in_dim, std::size_t classes, std::size_t out_dim,
            std::size_t transform_groups, RoutingOptions routing, Rng& rng);

  // x: [N, K_in, d] -> [N, C, d_out]
  DTensor<T> forward(const DTensor<T>& x);

  void collect(const std::string& prefix, ParamRegistry<T>& registry);

  DTensor<T>& weights() { return weights_; }
  const RoutingOptions& routing() const { return routing_; }

 private:
  std::size_t inputs_, in_dim_, classes_, out_dim_, groups_;
  RoutingOptions routing_;
  DTensor<T> weights_;
};

}  // namespace deepcaps
