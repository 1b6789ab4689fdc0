#include "deepcaps/capsule_layers.hpp"

#include <algorithm>

#include "gemm.hpp"

namespace deepcaps {

namespace {

void require_caps(const Shape& s, const char* op) {
  if (s.rank() != 5) throw ShapeError(std::string(op) + ": capsule tensor must be [N,H,W,n,d], got " + s.str());
}

}  // namespace

template <typename T>
DTensor<T> vote_conv3d(const DTensor<T>& x, const DTensor<T>& kernel, std::size_t stride,
                       std::size_t parent_types, std::size_t parent_dim) {
  require_caps(x.shape(), "vote_conv3d");
  const std::size_t N = x.dim(0), H = x.dim(1), W = x.dim(2), n = x.dim(3), d = x.dim(4);
  const Shape& ks = kernel.shape();
  if (ks.rank() != 5 || ks[0] != d || ks[3] != 1 || ks[4] != parent_types * parent_dim) {
    throw ShapeError("vote_conv3d: kernel must be [" + std::to_string(d) + ",kh,kw,1," +
                     std::to_string(parent_types * parent_dim) + "], got " + ks.str());
  }
  if (ks[1] > H || ks[2] > W) {
    throw ShapeError("vote_conv3d: kernel spatial extent " + std::to_string(ks[1]) + "x" + std::to_string(ks[2]) +
                     " exceeds capsule grid " + std::to_string(H) + "x" + std::to_string(W));
  }
  DTensor<T> volume = reshape(transpose(reshape(x, Shape{N, H, W, n * d}), {0, 3, 1, 2}), Shape{N, n * d, H, W, 1});
  DTensor<T> y = conv3d(volume, kernel, {d, stride, stride}, Padding::Same);  // [N, n, H', W', m*d']
  const std::size_t Ho = y.dim(2), Wo = y.dim(3);
  return reshape(transpose(y, {0, 2, 3, 1, 4}), Shape{N, Ho, Wo, n, parent_types, parent_dim});
}

template <typename T>
VoteSet<T> to_vote_set(const DTensor<T>& votes6) {
  const Shape& s = votes6.shape();
  if (s.rank() != 6) throw ShapeError("to_vote_set: expected [N,H',W',n,m,d'], got " + s.str());
  VoteSet<T> vs;
  vs.batch = s[0];
  vs.out_h = s[1];
  vs.out_w = s[2];
  vs.votes = reshape(votes6, Shape{s[0] * s[1] * s[2], s[3], s[4], s[5]});
  return vs;
}

template <typename T>
DTensor<T> flatten_caps(const DTensor<T>& x) {
  require_caps(x.shape(), "flatten_caps");
  return reshape(x, Shape{x.dim(0), x.dim(1) * x.dim(2) * x.dim(3), x.dim(4)});
}

template <typename T>
DTensor<T> unflatten_caps(const DTensor<T>& x, std::size_t height, std::size_t width, std::size_t types) {
  if (x.shape().rank() != 3 || x.dim(1) != height * width * types) {
    throw ShapeError("unflatten_caps: " + x.shape().str() + " is not [N," + std::to_string(height * width * types) +
                     ",d]");
  }
  return reshape(x, Shape{x.dim(0), height, width, types, x.dim(2)});
}

template <typename T>
DTensor<T> caps_transform(const DTensor<T>& x, const DTensor<T>& weights) {
  const Shape& xs = x.shape();
  const Shape& ws = weights.shape();
  if (xs.rank() != 3) throw ShapeError("caps_transform: input must be [N,K,d], got " + xs.str());
  if (ws.rank() != 4 || ws[1] != xs[2]) {
    throw ShapeError("caps_transform: weights must be [G," + std::to_string(xs[2]) + ",C,d_out], got " + ws.str());
  }
  const std::size_t N = xs[0], K = xs[1], d = xs[2], G = ws[0], C = ws[2], D = ws[3];
  if (K % G != 0) {
    throw ShapeError("caps_transform: " + std::to_string(K) + " input capsules not divisible into " +
                     std::to_string(G) + " transform groups");
  }
  const std::size_t P = K / G, rows = N * P, cols = C * D;
  Tensor<T> out(Shape{N, K, C, D});
  std::vector<T> xg(rows * d), yg(rows * cols);
  const T* xv = x.value().ptr();
  for (std::size_t g = 0; g < G; ++g) {
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t p = 0; p < P; ++p)
        std::copy_n(xv + (n * K + p * G + g) * d, d, xg.data() + (n * P + p) * d);
    detail::gemm<T>(false, false, rows, cols, d, xg.data(), weights.value().ptr() + g * d * cols, yg.data(), false);
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t p = 0; p < P; ++p)
        std::copy_n(yg.data() + (n * P + p) * cols, cols, out.ptr() + (n * K + p * G + g) * cols);
  }
  return detail::finish(std::move(out), detail::should_record({&x, &weights}),
                        [x, weights, N, K, d, G, P, rows, cols](const Tensor<T>& gu) {
                          std::vector<T> xg(rows * d), gg(rows * cols), gxg(rows * d);
                          const T* xv = x.value().ptr();
                          for (std::size_t g = 0; g < G; ++g) {
                            for (std::size_t n = 0; n < N; ++n)
                              for (std::size_t p = 0; p < P; ++p) {
                                const std::size_t i = n * K + p * G + g;
                                std::copy_n(gu.ptr() + i * cols, cols, gg.data() + (n * P + p) * cols);
                                std::copy_n(xv + i * d, d, xg.data() + (n * P + p) * d);
                              }
                            if (detail::wants(weights)) {
                              detail::gemm<T>(true, false, d, cols, rows, xg.data(), gg.data(),
                                              detail::grad_of(weights).ptr() + g * d * cols, true);
                            }
                            if (detail::wants(x)) {
                              detail::gemm<T>(false, true, rows, d, cols, gg.data(),
                                              weights.value().ptr() + g * d * cols, gxg.data(), false);
                              T* gx = detail::grad_of(x).ptr();
                              for (std::size_t n = 0; n < N; ++n)
                                for (std::size_t p = 0; p < P; ++p) {
                                  T* dst = gx + (n * K + p * G + g) * d;
                                  const T* src = gxg.data() + (n * P + p) * d;
                                  for (std::size_t k = 0; k < d; ++k) dst[k] += src[k];
                                }
                            }
                          }
                        });
}

// ---- ConvCaps2D ------------------------------------------------------------

template <typename T>
ConvCaps2D<T>::ConvCaps2D(std::size_t in_types, std::size_t in_dim, const ConvCapsSpec& spec, bool batchnorm,
                          Rng& rng)
    : in_types_(in_types), in_dim_(in_dim), spec_(spec), batchnorm_(batchnorm), stats_(spec.types * spec.dim) {
  const std::size_t cin = in_types * in_dim, cout = spec.types * spec.dim, k = spec.kernel;
  kernel_ = DTensor<T>(glorot_uniform<T>(Shape{k, k, cin, cout}, k * k * cin, k * k * cout, rng), true);
  bias_ = DTensor<T>(Tensor<T>(Shape{cout}), true);
  if (batchnorm_) {
    gamma_ = DTensor<T>(Tensor<T>(Shape{cout}, T(1)), true);
    beta_ = DTensor<T>(Tensor<T>(Shape{cout}), true);
  }
}

template <typename T>
DTensor<T> ConvCaps2D<T>::preactivation(const DTensor<T>& x, Mode mode) {
  require_caps(x.shape(), "conv_caps2d");
  if (x.dim(3) * x.dim(4) != in_types_ * in_dim_) {
    throw ShapeError("conv_caps2d: input capsules " + std::to_string(x.dim(3)) + "x" + std::to_string(x.dim(4)) +
                     " give " + std::to_string(x.dim(3) * x.dim(4)) + " channels, layer expects " +
                     std::to_string(in_types_ * in_dim_));
  }
  const std::size_t N = x.dim(0);
  DTensor<T> h = conv2d(reshape(x, Shape{N, x.dim(1), x.dim(2), in_types_ * in_dim_}), kernel_, spec_.stride,
                        Padding::Same);
  h = add_bias(h, bias_);
  if (batchnorm_) h = batchnorm(h, gamma_, beta_, stats_, mode);
  return reshape(h, Shape{N, h.dim(1), h.dim(2), spec_.types, spec_.dim});
}

template <typename T>
void ConvCaps2D<T>::collect(const std::string& prefix, ParamRegistry<T>& registry) {
  registry.add_param(prefix + ".kernel", kernel_);
  registry.add_param(prefix + ".bias", bias_);
  if (batchnorm_) {
    registry.add_param(prefix + ".bn_gamma", gamma_);
    registry.add_param(prefix + ".bn_beta", beta_);
    registry.add_buffer(prefix + ".bn_mean", &stats_.running_mean);
    registry.add_buffer(prefix + ".bn_var", &stats_.running_var);
  }
}

// ---- RoutedCaps3D ----------------------------------------------------------

template <typename T>
RoutedCaps3D<T>::RoutedCaps3D(std::size_t in_types, std::size_t in_dim, const ConvCapsSpec& spec,
                              RoutingOptions routing, Rng& rng)
    : in_types_(in_types), in_dim_(in_dim), spec_(spec), routing_(routing) {
  const std::size_t k = spec.kernel, cout = spec.types * spec.dim;
  kernel_ = DTensor<T>(glorot_uniform<T>(Shape{in_dim, k, k, 1, cout}, in_dim * k * k, cout, rng), true);
}

template <typename T>
VoteSet<T> RoutedCaps3D<T>::votes(const DTensor<T>& x) {
  require_caps(x.shape(), "routed_caps3d");
  if (x.dim(3) != in_types_ || x.dim(4) != in_dim_) {
    throw ShapeError("routed_caps3d: expected " + std::to_string(in_types_) + " capsule types of dim " +
                     std::to_string(in_dim_) + ", got " + x.shape().str());
  }
  return to_vote_set(vote_conv3d(x, kernel_, spec_.stride, spec_.types, spec_.dim));
}

template <typename T>
DTensor<T> RoutedCaps3D<T>::forward(const DTensor<T>& x) {
  VoteSet<T> vs = votes(x);
  DTensor<T> parents = route(vs.votes, routing_);
  return reshape(parents, Shape{vs.batch, vs.out_h, vs.out_w, spec_.types, spec_.dim});
}

template <typename T>
void RoutedCaps3D<T>::collect(const std::string& prefix, ParamRegistry<T>& registry) {
  registry.add_param(prefix + ".kernel", kernel_);
}

// ---- CapsuleCell -----------------------------------------------------------

template <typename T>
CapsuleCell<T>::CapsuleCell(std::string name, std::size_t in_h, std::size_t in_w, std::size_t in_types,
                            std::size_t in_dim, const CellSpec& spec, const LayerOptions& options, Rng& rng)
    : name_(std::move(name)), spec_(spec) {
  const std::size_t L = spec.layers.size();
  if (L == 0) throw ConfigError(name_ + ": cell has no layers");
  if (spec.skip_from >= static_cast<int>(L) - 1 || spec.skip_from < -1) {
    throw ConfigError(name_ + ": skip_from " + std::to_string(spec.skip_from) + " must name a layer before the last (0.." +
                      std::to_string(static_cast<int>(L) - 2) + ") or be -1");
  }
  if (spec.routed && spec.routing_iterations < 1) {
    throw ConfigError(name_ + ": routing_iterations must be >= 1");
  }
  std::size_t h = in_h, w = in_w, types = in_types, dim = in_dim;
  std::size_t skip_h = 0, skip_w = 0, skip_types = 0, skip_dim = 0;
  for (std::size_t l = 0; l < L; ++l) {
    const ConvCapsSpec& ls = spec.layers[l];
    if (ls.kernel == 0 || ls.stride == 0 || ls.types == 0 || ls.dim == 0) {
      throw ConfigError(name_ + ".layer" + std::to_string(l) + ": kernel, stride, types and dim must be >= 1");
    }
    const bool routed_layer = spec.routed && l + 1 == L;
    if (routed_layer) {
      if (ls.kernel > h || ls.kernel > w) {
        throw ConfigError(name_ + ".layer" + std::to_string(l) + ": vote kernel " + std::to_string(ls.kernel) +
                          " exceeds capsule grid " + std::to_string(h) + "x" + std::to_string(w));
      }
      RoutingOptions ro{spec.routing_iterations, options.softmax_axis, options.routing_gradient};
      routed_.emplace_back(types, dim, ls, ro, rng);
    } else {
      plain_.emplace_back(types, dim, ls, options.batchnorm, rng);
    }
    h = conv_output_extent(h, ls.kernel, ls.stride, Padding::Same, 1);
    w = conv_output_extent(w, ls.kernel, ls.stride, Padding::Same, 2);
    types = ls.types;
    dim = ls.dim;
    if (static_cast<int>(l) == spec.skip_from) {
      skip_h = h;
      skip_w = w;
      skip_types = types;
      skip_dim = dim;
    }
  }
  if (spec.skip_from >= 0 && (skip_h != h || skip_w != w || skip_types != types || skip_dim != dim)) {
    throw ConfigError(name_ + ": skip source layer" + std::to_string(spec.skip_from) + " output [" +
                      std::to_string(skip_h) + "," + std::to_string(skip_w) + "," + std::to_string(skip_types) + "," +
                      std::to_string(skip_dim) + "] does not match cell output [" + std::to_string(h) + "," +
                      std::to_string(w) + "," + std::to_string(types) + "," + std::to_string(dim) + "]");
  }
  out_h_ = h;
  out_w_ = w;
}

template <typename T>
DTensor<T> CapsuleCell<T>::forward(const DTensor<T>& x, Mode mode) {
  const std::size_t L = spec_.layers.size();
  DTensor<T> cur = x;
  DTensor<T> skip;
  for (std::size_t l = 0; l + 1 < L; ++l) {
    cur = plain_[l].forward(cur, mode);
    if (static_cast<int>(l) == spec_.skip_from) skip = cur;
  }
  if (spec_.routed) {
    DTensor<T> out = routed_.front().forward(cur);
    if (!skip.defined()) return out;
    if (skip.shape() != out.shape()) {
      throw ShapeError(name_ + ": skip shape " + skip.shape().str() + " vs cell output " + out.shape().str());
    }
    return squash(add(out, skip));
  }
  DTensor<T> pre = plain_.back().preactivation(cur, mode);
  if (skip.defined()) {
    if (skip.shape() != pre.shape()) {
      throw ShapeError(name_ + ": skip shape " + skip.shape().str() + " vs cell output " + pre.shape().str());
    }
    pre = add(pre, skip);
  }
  return squash(pre);
}

template <typename T>
void CapsuleCell<T>::collect(const std::string& prefix, ParamRegistry<T>& registry) {
  for (std::size_t l = 0; l < plain_.size(); ++l) plain_[l].collect(prefix + ".layer" + std::to_string(l), registry);
  if (!routed_.empty()) routed_.front().collect(prefix + ".layer" + std::to_string(plain_.size()), registry);
}

// ---- ClassCaps -------------------------------------------------------------

template <typename T>
ClassCaps<T>::ClassCaps(std::size_t inputs, std::size_t in_dim, std::size_t classes, std::size_t out_dim,
                        std::size_t transform_groups, RoutingOptions routing, Rng& rng)
    : inputs_(inputs),
      in_dim_(in_dim),
      classes_(classes),
      out_dim_(out_dim),
      groups_(transform_groups == 0 ? inputs : transform_groups),
      routing_(routing) {
  if (routing.iterations < 1) throw ConfigError("class_caps: routing iterations must be >= 1");
  if (inputs % groups_ != 0) {
    throw ConfigError("class_caps: " + std::to_string(inputs) + " input capsules not divisible into " +
                      std::to_string(groups_) + " transform groups");
  }
  weights_ = DTensor<T>(glorot_uniform<T>(Shape{groups_, in_dim, classes, out_dim}, inputs * in_dim, out_dim, rng),
                        true);
}

template <typename T>
DTensor<T> ClassCaps<T>::forward(const DTensor<T>& x) {
  if (x.shape().rank() != 3 || x.dim(1) != inputs_ || x.dim(2) != in_dim_) {
    throw ShapeError("class_caps: expected [N," + std::to_string(inputs_) + "," + std::to_string(in_dim_) +
                     "], got " + x.shape().str());
  }
  return route(caps_transform(x, weights_), routing_);
}

template <typename T>
void ClassCaps<T>::collect(const std::string& prefix, ParamRegistry<T>& registry) {
  registry.add_param(prefix + ".weights", weights_);
}

#define DEEPCAPS_INSTANTIATE_CAPS(T)                                                                       \
  template DTensor<T> vote_conv3d(const DTensor<T>&, const DTensor<T>&, std::size_t, std::size_t, std::size_t); \
  template VoteSet<T> to_vote_set(const DTensor<T>&);                                                      \
  template DTensor<T> flatten_caps(const DTensor<T>&);                                                     \
  template DTensor<T> unflatten_caps(const DTensor<T>&, std::size_t, std::size_t, std::size_t);            \
  template DTensor<T> caps_transform(const DTensor<T>&, const DTensor<T>&);                                \
  template class ConvCaps2D<T>;                                                                            \
  template class RoutedCaps3D<T>;                                                                          \
  template class CapsuleCell<T>;                                                                           \
  template class ClassCaps<T>;

DEEPCAPS_INSTANTIATE_CAPS(float)
DEEPCAPS_INSTANTIATE_CAPS(double)

}  // namespace deepcaps
