#pragma once

#include "nvs/tensor.hpp"

#include <functional>
#include <memory>
#include <unordered_set>
#include <utility>
#include <vector>

namespace nvs::ag {

template <typename Scalar>
struct Node {
  Tensor<Scalar> value;
  Tensor<Scalar> grad;
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward;
  bool requires_grad = false;

  Tensor<Scalar>& grad_buffer() {
    if (grad.size() != value.size()) grad = Tensor<Scalar>::zeros(value.shape());
    return grad;
  }
  bool has_grad() const { return grad.size() == value.size() && !value.empty(); }
};

/// Handle to a node of the reverse-mode tape. Copies share the node.
template <typename Scalar>
class Var {
 public:
  using NodePtr = std::shared_ptr<Node<Scalar>>;

  Var() = default;
  explicit Var(NodePtr node) : node_(std::move(node)) {}

  static Var constant(Tensor<Scalar> value) {
    auto n = std::make_shared<Node<Scalar>>();
    n->value = std::move(value);
    return Var(std::move(n));
  }
  static Var leaf(Tensor<Scalar> value, bool requires_grad = true) {
    auto n = std::make_shared<Node<Scalar>>();
    n->value = std::move(value);
    n->requires_grad = requires_grad;
    return Var(std::move(n));
  }

  const Tensor<Scalar>& value() const { return node_->value; }
  Tensor<Scalar>& mutable_value() { return node_->value; }
  const Tensor<Scalar>& grad() const { return node_->grad_buffer(); }
  const Shape& shape() const { return node_->value.shape(); }
  Index dim(int axis) const { return node_->value.dim(axis); }
  Index size() const { return node_->value.size(); }
  bool requires_grad() const { return node_ && node_->requires_grad; }
  void set_requires_grad(bool on) { node_->requires_grad = on; }
  void zero_grad() { node_->grad = Tensor<Scalar>(); }
  const NodePtr& node() const { return node_; }
  explicit operator bool() const { return static_cast<bool>(node_); }

 private:
  NodePtr node_;
};

/// Creates the result of a differentiable op. `backward_fn(out_grad)` is
/// stored only when some input requires a gradient.
template <typename Scalar, typename Fn>
Var<Scalar> make_op(Tensor<Scalar> value, std::vector<Var<Scalar>> inputs, Fn&& backward_fn) {
  auto n = std::make_shared<Node<Scalar>>();
  n->value = std::move(value);
  for (const auto& in : inputs) {
    if (in.requires_grad()) n->requires_grad = true;
  }
  if (n->requires_grad) {
    n->inputs.reserve(inputs.size());
    for (auto& in : inputs) n->inputs.push_back(in.node());
    n->backward = [fn = std::forward<Fn>(backward_fn)](Node<Scalar>& self) { fn(self.grad_buffer()); };
  }
  return Var<Scalar>(std::move(n));
}

/// Accumulates `g` into the gradient of `v` if it participates in the tape.
template <typename Scalar, typename Expr>
void accumulate(const Var<Scalar>& v, const Expr& g) {
  if (v.requires_grad()) v.node()->grad_buffer().array() += g;
}

/// Runs reverse-mode accumulation from `root`, seeding d root = `seed`
/// (ones when empty). Intermediate gradients are released afterwards;
/// leaves keep theirs.
template <typename Scalar>
void backward(const Var<Scalar>& root, const Tensor<Scalar>& seed = {}) {
  if (!root.requires_grad()) return;
  std::vector<Node<Scalar>*> order;
  std::unordered_set<Node<Scalar>*> seen;
  std::vector<std::pair<Node<Scalar>*, std::size_t>> stack{{root.node().get(), 0}};
  seen.insert(root.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      Node<Scalar>* child = node->inputs[next++].get();
      if (child->requires_grad && seen.insert(child).second) stack.emplace_back(child, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  auto& g = root.node()->grad_buffer();
  if (seed.empty()) {
    g.array() += Scalar(1);
  } else {
    require_same_shape(seed.shape(), g.shape(), "backward seed");
    g.array() += seed.array();
  }
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<Scalar>* node = *it;
    if (node->backward) {
      node->backward(*node);
      node->grad = Tensor<Scalar>();
    }
  }
}

}  // namespace nvs::ag
