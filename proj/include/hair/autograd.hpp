#pragma once

#include "hair/tensor.hpp"

#include <functional>
#include <memory>
#include <string>
#include <vector>

namespace hair {

template <typename Scalar>
struct Node {
  Tensor<Scalar> value;
  Tensor<Scalar> grad;  // empty until something flows into it
  bool requires_grad = false;
  bool consumed = false;
  std::vector<std::shared_ptr<Node>> parents;
  // Reads `grad` of this node and accumulates into the parents' grads.
  std::function<void(Node&)> backward_fn;

  bool is_leaf() const { return parents.empty(); }

  Tensor<Scalar>& grad_buffer() {
    if (grad.size() != value.size() || grad.shape() != value.shape()) grad = Tensor<Scalar>(value.shape());
    return grad;
  }
};

/// Handle to a value in the reverse-mode graph.
///
/// Leaves created with `requires_grad = true` act as parameters: their
/// gradients accumulate across `backward` calls until `zero_grad`.
/// Intermediate nodes are built by the free functions in ops.hpp; they record
/// a closure only when at least one input requires a gradient.
template <typename Scalar>
class Var {
 public:
  using NodeType = Node<Scalar>;

  Var() = default;
  explicit Var(Tensor<Scalar> value, bool requires_grad = false) : node_(std::make_shared<NodeType>()) {
    node_->value = std::move(value);
    node_->requires_grad = requires_grad;
  }
  explicit Var(std::shared_ptr<NodeType> node) : node_(std::move(node)) {}

  static Var parameter(Tensor<Scalar> value) { return Var(std::move(value), true); }

  bool defined() const { return static_cast<bool>(node_); }
  const Tensor<Scalar>& value() const { return node_->value; }
  /// Mutable access to a leaf's value (optimizer updates, test perturbations).
  Tensor<Scalar>& mutable_value() { return node_->value; }
  const Shape& shape() const { return node_->value.shape(); }
  Index dim(int axis) const { return node_->value.dim(axis); }
  Index size() const { return node_->value.size(); }
  bool requires_grad() const { return node_ && node_->requires_grad; }

  /// Gradient accumulated so far; zeros when nothing reached this node.
  Tensor<Scalar> grad() const {
    if (node_->grad.size() == node_->value.size() && node_->grad.shape() == node_->value.shape()) return node_->grad;
    return Tensor<Scalar>(node_->value.shape());
  }
  void zero_grad() { node_->grad = Tensor<Scalar>(); }

  NodeType* node() const { return node_.get(); }
  const std::shared_ptr<NodeType>& node_ptr() const { return node_; }

 private:
  std::shared_ptr<NodeType> node_;
};

/// Builds an intermediate node. `backward` is dropped when no parent needs a
/// gradient, which keeps inference free of graph bookkeeping.
template <typename Scalar>
Var<Scalar> make_result(Tensor<Scalar> value, std::vector<Var<Scalar>> parents,
                        std::function<void(Node<Scalar>&)> backward) {
  auto node = std::make_shared<Node<Scalar>>();
  node->value = std::move(value);
  for (const auto& p : parents) {
    if (p.requires_grad()) node->requires_grad = true;
  }
  if (node->requires_grad) {
    node->parents.reserve(parents.size());
    for (const auto& p : parents) node->parents.push_back(p.node_ptr());
    node->backward_fn = std::move(backward);
  }
  return Var<Scalar>(std::move(node));
}

/// Reverse-mode sweep from a scalar loss. Each reachable node is visited once,
/// in reverse topological order; leaf gradients accumulate. Intermediate
/// closures are released afterwards, so a second call on the same loss throws.
template <typename Scalar>
void backward(const Var<Scalar>& loss);

template <typename Scalar>
void zero_grad(std::vector<Var<Scalar>>& params) {
  for (auto& p : params) p.zero_grad();
}

}  // namespace hair
