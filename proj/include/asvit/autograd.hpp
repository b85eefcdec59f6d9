#pragma once

#include <functional>
#include <memory>
#include <utility>
#include <vector>

#include "asvit/tensor.hpp"

namespace asvit {

template <class T>
struct Node {
  Tensor<T> value;
  Tensor<T> grad;  // allocated lazily during backward
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward;

  bool has_grad() const { return grad.size() == value.size() && grad.shape() == value.shape(); }

  Tensor<T>& grad_buffer() {
    if (!has_grad()) grad = Tensor<T>(value.shape());
    return grad;
  }
};

template <class T>
class GradTape;

/// Handle to a value in the computation graph. Copies share the node.
template <class T>
class Var {
 public:
  Var() = default;
  explicit Var(std::shared_ptr<Node<T>> node) : node_(std::move(node)) {}

  /// Leaf that accumulates a gradient when reached by backward.
  static Var param(Tensor<T> value) {
    auto n = std::make_shared<Node<T>>();
    n->value = std::move(value);
    n->requires_grad = true;
    return Var(std::move(n));
  }

  static Var constant(Tensor<T> value) {
    auto n = std::make_shared<Node<T>>();
    n->value = std::move(value);
    return Var(std::move(n));
  }

  bool defined() const { return static_cast<bool>(node_); }
  const Tensor<T>& value() const { return node_->value; }
  Tensor<T>& mutable_value() { return node_->value; }
  const Shape& shape() const { return node_->value.shape(); }
  bool requires_grad() const { return node_->requires_grad; }

  /// Gradient accumulated by the last backward pass; zeros when none reached this node.
  Tensor<T> grad() const {
    if (node_->has_grad()) return node_->grad;
    return Tensor<T>(node_->value.shape());
  }
  void zero_grad() { node_->grad = Tensor<T>(); }

  Node<T>* node() const { return node_.get(); }
  const std::shared_ptr<Node<T>>& shared() const { return node_; }

 private:
  std::shared_ptr<Node<T>> node_;
};

namespace detail {
template <class T>
GradTape<T>*& active_tape() {
  thread_local GradTape<T>* tape = nullptr;
  return tape;
}
}  // namespace detail

/// Ordered record of differentiable operations executed while the tape is active.
/// Construction activates it on the calling thread; destruction restores the previous tape.
template <class T>
class GradTape {
 public:
  GradTape() : previous_(detail::active_tape<T>()) { detail::active_tape<T>() = this; }
  ~GradTape() { detail::active_tape<T>() = previous_; }
  GradTape(const GradTape&) = delete;
  GradTape& operator=(const GradTape&) = delete;

  static GradTape* active() { return detail::active_tape<T>(); }

  void record(std::shared_ptr<Node<T>> node) { nodes_.push_back(std::move(node)); }
  std::size_t size() const { return nodes_.size(); }

  /// Seeds d(loss)/d(loss) = 1 and replays the tape in reverse.
  void backward(const Var<T>& loss) {
    if (loss.value().size() != 1) throw DimensionError("backward needs a scalar loss, got " + shape_str(loss.shape()));
    backward(loss, Tensor<T>(loss.shape(), T(1)));
  }

  void backward(const Var<T>& out, const Tensor<T>& seed) {
    if (seed.shape() != out.shape()) throw DimensionError("seed shape mismatch");
    if (!out.requires_grad()) return;
    auto& g = out.node()->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += seed[i];
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
      Node<T>& n = **it;
      if (n.backward && n.has_grad()) n.backward(n);
    }
  }

  void clear() { nodes_.clear(); }

 private:
  GradTape* previous_;
  std::vector<std::shared_ptr<Node<T>>> nodes_;
};

/// Creates the result node of an operation. The backward closure is kept only when a tape
/// is active and some input requires a gradient; otherwise the value is a plain constant.
template <class T>
Var<T> make_result(Tensor<T> value, std::vector<Var<T>> inputs, std::function<void(Node<T>&)> backward) {
  auto n = std::make_shared<Node<T>>();
  n->value = std::move(value);
  GradTape<T>* tape = GradTape<T>::active();
  bool needs = false;
  for (const auto& in : inputs) needs = needs || in.requires_grad();
  if (tape && needs) {
    n->requires_grad = true;
    n->inputs.reserve(inputs.size());
    for (auto& in : inputs) n->inputs.push_back(in.shared());
    n->backward = std::move(backward);
    tape->record(n);
  }
  return Var<T>(std::move(n));
}

/// Gradient buffer of input `i` of `out`, or nullptr when that input does not track gradients.
template <class T>
Tensor<T>* input_grad(Node<T>& out, std::size_t i) {
  Node<T>& in = *out.inputs[i];
  return in.requires_grad ? &in.grad_buffer() : nullptr;
}

template <class T>
Var<T> detach(const Var<T>& v) {
  return Var<T>::constant(v.value());
}

}  // namespace asvit
