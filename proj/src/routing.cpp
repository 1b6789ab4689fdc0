#include "deepcaps/routing.hpp"

#include <algorithm>
#include <cstring>
#include <numeric>
#include <vector>

#include "deepcaps/ops.hpp"
#include "deepcaps/squash.hpp"

namespace deepcaps {

SoftmaxAxis parse_softmax_axis(const std::string& name) {
  if (name == "parents") return SoftmaxAxis::Parents;
  if (name == "children") return SoftmaxAxis::Children;
  throw ConfigError("unknown routing softmax axis '" + name + "' (expected parents|children)");
}

std::string to_string(SoftmaxAxis axis) { return axis == SoftmaxAxis::Parents ? "parents" : "children"; }

RoutingGradient parse_routing_gradient(const std::string& name) {
  if (name == "final") return RoutingGradient::FinalIteration;
  if (name == "full") return RoutingGradient::Full;
  throw ConfigError("unknown routing gradient mode '" + name + "' (expected final|full)");
}

std::string to_string(RoutingGradient mode) {
  return mode == RoutingGradient::FinalIteration ? "final" : "full";
}

namespace {

std::size_t softmax_dim(SoftmaxAxis axis) { return axis == SoftmaxAxis::Parents ? 2 : 1; }

void check_votes(const Shape& v, int iterations) {
  if (iterations < 1) {
    throw ValueError("route: iterations must be >= 1, got " + std::to_string(iterations));
  }
  if (v.rank() != 4) throw ShapeError("route: votes must be [B,K,M,D], got " + v.str());
}

// Children of sample b sorted by the raw bytes of their vote rows. Summing in
// this order makes the weighted sum independent of how children are indexed.
template <typename T>
std::vector<std::size_t> canonical_children(const Tensor<T>& u, std::size_t b) {
  const std::size_t K = u.dim(1), row = u.dim(2) * u.dim(3);
  const T* base = u.ptr() + b * K * row;
  std::vector<std::size_t> order(K);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t z) {
    return std::memcmp(base + a * row, base + z * row, row * sizeof(T)) < 0;
  });
  return order;
}

// s[b,j,:] = sum_i c[b,i,j] * u[b,i,j,:]
template <typename T>
Tensor<T> weighted_sum(const Tensor<T>& c, const Tensor<T>& u) {
  const std::size_t B = u.dim(0), K = u.dim(1), M = u.dim(2), D = u.dim(3);
  Tensor<T> s(Shape{B, M, D});
  for (std::size_t b = 0; b < B; ++b) {
    T* sb = s.ptr() + b * M * D;
    for (std::size_t i : canonical_children(u, b)) {
      const T* ci = c.ptr() + (b * K + i) * M;
      const T* ui = u.ptr() + (b * K + i) * M * D;
      for (std::size_t j = 0; j < M; ++j) {
        const T w = ci[j];
        for (std::size_t k = 0; k < D; ++k) sb[j * D + k] += w * ui[j * D + k];
      }
    }
  }
  return s;
}

// Every iteration built from differentiable primitives.
template <typename T>
DTensor<T> route_unrolled(const DTensor<T>& votes, const RoutingOptions& options, RoutingState<T>* state) {
  const std::size_t B = votes.dim(0), K = votes.dim(1), M = votes.dim(2), D = votes.dim(3);
  DTensor<T> logits(Tensor<T>(Shape{B, K, M}), false);
  DTensor<T> parents;
  for (int it = 0; it < options.iterations; ++it) {
    DTensor<T> c = softmax_axis(logits, softmax_dim(options.softmax_axis));
    DTensor<T> s = sum_axis(mul(expand(c, 3, D), votes), 1);
    parents = squash(s);
    if (state && it == options.iterations - 1) {
      state->logits = logits.value();
      state->couplings = c.value();
    }
    if (it + 1 < options.iterations) {
      logits = add(logits, sum_axis(mul(expand(parents, 1, K), votes), 3));
    }
  }
  return parents;
}

}  // namespace

template <typename T>
Tensor<T> couplings(const Tensor<T>& logits, SoftmaxAxis axis) {
  if (logits.rank() != 3) throw ShapeError("couplings: logits must be [B,K,M], got " + logits.shape().str());
  return softmax_values(logits, softmax_dim(axis));
}

template <typename T>
void agreement_update(Tensor<T>& logits, const Tensor<T>& votes, const Tensor<T>& parents) {
  if (votes.rank() != 4 || logits.rank() != 3 || parents.rank() != 3) {
    throw ShapeError("agreement_update: expected logits [B,K,M], votes [B,K,M,D], parents [B,M,D]");
  }
  const std::size_t B = votes.dim(0), K = votes.dim(1), M = votes.dim(2), D = votes.dim(3);
  if (logits.shape() != Shape{B, K, M} || parents.shape() != Shape{B, M, D}) {
    throw ShapeError("agreement_update: inconsistent shapes logits " + logits.shape().str() + ", votes " +
                     votes.shape().str() + ", parents " + parents.shape().str());
  }
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t i = 0; i < K; ++i) {
      for (std::size_t j = 0; j < M; ++j) {
        const T* u = votes.ptr() + ((b * K + i) * M + j) * D;
        const T* v = parents.ptr() + (b * M + j) * D;
        T dot = 0;
        for (std::size_t k = 0; k < D; ++k) dot += u[k] * v[k];
        logits[(b * K + i) * M + j] += dot;
      }
    }
  }
}

template <typename T>
DTensor<T> route(const DTensor<T>& votes, const RoutingOptions& options, RoutingState<T>* final_state) {
  check_votes(votes.shape(), options.iterations);
  if (options.gradient == RoutingGradient::Full) return route_unrolled(votes, options, final_state);

  const Tensor<T>& u = votes.value();
  const std::size_t B = u.dim(0), K = u.dim(1), M = u.dim(2);
  Tensor<T> logits(Shape{B, K, M});
  Tensor<T> c, s, v;
  for (int it = 0; it < options.iterations; ++it) {
    c = couplings(logits, options.softmax_axis);
    s = weighted_sum(c, u);
    v = squash_values(s);
    if (it + 1 < options.iterations) agreement_update(logits, u, v);
  }
  if (final_state) {
    final_state->logits = logits;
    final_state->couplings = c;
  }
  const bool record = detail::should_record({&votes});
  if (!record) return DTensor<T>(std::move(v), false);
  return detail::finish(std::move(v), true, [votes, c = std::move(c), s = std::move(s)](const Tensor<T>& gv) {
    Tensor<T> gs(s.shape());
    squash_backward(s, gv, gs);
    Tensor<T>& gu = detail::grad_of(votes);
    const std::size_t B = gu.dim(0), K = gu.dim(1), M = gu.dim(2), D = gu.dim(3);
    for (std::size_t b = 0; b < B; ++b) {
      for (std::size_t i = 0; i < K; ++i) {
        for (std::size_t j = 0; j < M; ++j) {
          const T w = c[(b * K + i) * M + j];
          const T* g = gs.ptr() + (b * M + j) * D;
          T* out = gu.ptr() + ((b * K + i) * M + j) * D;
          for (std::size_t k = 0; k < D; ++k) out[k] += w * g[k];
        }
      }
    }
  });
}

#define DEEPCAPS_INSTANTIATE_ROUTING(T)                                                 \
  template Tensor<T> couplings(const Tensor<T>&, SoftmaxAxis);                          \
  template void agreement_update(Tensor<T>&, const Tensor<T>&, const Tensor<T>&);       \
  template DTensor<T> route(const DTensor<T>&, const RoutingOptions&, RoutingState<T>*);

DEEPCAPS_INSTANTIATE_ROUTING(float)
DEEPCAPS_INSTANTIATE_ROUTING(double)

}  // namespace deepcaps
