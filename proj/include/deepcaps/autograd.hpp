#pragma once

#include <functional>
#include <memory>
#include <vector>

#include "deepcaps/tensor.hpp"

namespace deepcaps {

template <typename T>
struct Node {
  Tensor<T> value;
  Tensor<T> grad;  // allocated on first accumulation
  bool requires_grad = false;

  // Zero-initialised gradient buffer, allocated on demand.
  Tensor<T>& grad_buffer() {
    if (grad.empty()) grad = Tensor<T>(value.shape());
    return grad;
  }
};

// Differentiable tensor handle. Copies share the underlying node, so a
// parameter held by a layer and the handle passed into an op are the same
// tape leaf.
template <typename T>
class DTensor {
 public:
  DTensor() = default;
  explicit DTensor(Tensor<T> value, bool requires_grad = false)
      : node_(std::make_shared<Node<T>>()) {
    node_->value = std::move(value);
    node_->requires_grad = requires_grad;
  }

  bool defined() const { return node_ != nullptr; }
  const Tensor<T>& value() const { return node_->value; }
  Tensor<T>& mutable_value() { return node_->value; }
  const Shape& shape() const { return node_->value.shape(); }
  std::size_t numel() const { return node_->value.numel(); }
  std::size_t dim(std::size_t axis) const { return node_->value.dim(axis); }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool on) { node_->requires_grad = on; }
  bool has_grad() const { return !node_->grad.empty(); }
  const Tensor<T>& grad() const { return node_->grad; }
  void zero_grad() { node_->grad = Tensor<T>(); }

  const std::shared_ptr<Node<T>>& node() const { return node_; }

 private:
  std::shared_ptr<Node<T>> node_;
};

template <typename T>
class TapeScope;

// Append-only record of backward closures. Ops executed while a tape is
// active (see TapeScope) and touching at least one requires_grad input are
// recorded; backward() replays them in reverse append order exactly once.
template <typename T>
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  void record(std::function<void()> backward) { nodes_.push_back(std::move(backward)); }

  // Seeds d(loss)/d(loss) = 1 and propagates. The tape is empty afterwards.
  void backward(const DTensor<T>& loss) {
    if (!loss.defined() || loss.numel() != 1) {
      throw GradientError("backward: loss must be a scalar, got shape " +
                          (loss.defined() ? loss.shape().str() : std::string("<undefined>")));
    }
    if (!loss.requires_grad()) {
      throw GradientError("backward: loss is not on the tape");
    }
    loss.node()->grad_buffer()[0] += T(1);
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) (*it)();
    nodes_.clear();
  }

  std::size_t size() const { return nodes_.size(); }
  void clear() { nodes_.clear(); }

  static Tape* active() { return active_; }

 private:
  friend class TapeScope<T>;
  std::vector<std::function<void()>> nodes_;
  static inline thread_local Tape* active_ = nullptr;
};

// Makes `tape` the recording target for the current thread.
template <typename T>
class TapeScope {
 public:
  explicit TapeScope(Tape<T>& tape) : previous_(Tape<T>::active_) { Tape<T>::active_ = &tape; }
  ~TapeScope() { Tape<T>::active_ = previous_; }
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape<T>* previous_;
};

namespace detail {

template <typename T>
bool should_record(std::initializer_list<const DTensor<T>*> inputs) {
  if (Tape<T>::active() == nullptr) return false;
  for (const DTensor<T>* in : inputs) {
    if (in->defined() && in->requires_grad()) return true;
  }
  return false;
}

// Wraps a forward result; when recording, registers `backward(grad_out)`.
template <typename T, typename Backward>
DTensor<T> finish(Tensor<T> value, bool record, Backward&& backward) {
  DTensor<T> out(std::move(value), record);
  if (record) {
    Tape<T>::active()->record(
        [out_node = out.node(), fn = std::forward<Backward>(backward)]() {
          if (!out_node->grad.empty()) fn(out_node->grad);
        });
  }
  return out;
}

template <typename T>
bool wants(const DTensor<T>& t) {
  return t.defined() && t.requires_grad();
}

template <typename T>
Tensor<T>& grad_of(const DTensor<T>& t) {
  return t.node()->grad_buffer();
}

template <typename T>
void accumulate(const DTensor<T>& t, const Tensor<T>& g) {
  if (!wants(t)) return;
  Tensor<T>& buf = grad_of(t);
  for (std::size_t i = 0; i < g.numel(); ++i) buf[i] += g[i];
}

}  // namespace detail

}  // namespace deepcaps
