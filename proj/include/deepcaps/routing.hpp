#pragma once

#include <string>

#include "deepcaps/autograd.hpp"

namespace deepcaps {

// Axis the routing softmax normalises over.
enum class SoftmaxAxis { Parents, Children };

// FinalIteration: couplings from earlier iterations are constants, gradient
// flows through the last weighted sum and squash only. Full: every iteration
// is differentiated.
enum class RoutingGradient { FinalIteration, Full };

struct RoutingOptions {
  int iterations = 3;
  SoftmaxAxis softmax_axis = SoftmaxAxis::Parents;
  RoutingGradient gradient = RoutingGradient::FinalIteration;
};

SoftmaxAxis parse_softmax_axis(const std::string& name);
std::string to_string(SoftmaxAxis axis);
RoutingGradient parse_routing_gradient(const std::string& name);
std::string to_string(RoutingGradient mode);

// Logits b and couplings c, both [B, K_children, M_parents].
template <typename T>
struct RoutingState {
  Tensor<T> logits;
  Tensor<T> couplings;
};

// c = softmax(b) over the parent axis (or the child axis if requested).
template <typename T>
Tensor<T> couplings(const Tensor<T>& logits, SoftmaxAxis axis = SoftmaxAxis::Parents);

// b[n,i,j] += <parents[n,j,:], votes[n,i,j,:]>
template <typename T>
void agreement_update(Tensor<T>& logits, const Tensor<T>& votes, const Tensor<T>& parents);

// Dynamic routing by agreement. votes: [B, K, M, D] -> parents [B, M, D].
// Logits start at zero on every call. If `final_state` is given it receives
// the logits and couplings used by the last iteration.
template <typename T>
DTensor<T> route(const DTensor<T>& votes, const RoutingOptions& options,
                 RoutingState<T>* final_state = nullptr);

}  // namespace deepcaps
