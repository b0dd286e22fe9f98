#pragma once

#include <functional>
#include <memory>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "wnet/tensor.hpp"

namespace wnet {

template <class Scalar>
struct Node {
  BasicTensor<Scalar> value;
  BasicTensor<Scalar> grad;  // empty until a gradient arrives
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> inputs;
  // Reads this node's grad and accumulates into inputs that require grad.
  std::function<void(Node&)> backward_fn;

  BasicTensor<Scalar>& ensure_grad() {
    if (grad.empty() && value.numel() > 0) grad = BasicTensor<Scalar>(value.shape());
    return grad;
  }
};

/// Handle to a node of the define-by-run graph. Copies share the node.
template <class Scalar>
class BasicVar {
 public:
  using NodePtr = std::shared_ptr<Node<Scalar>>;

  BasicVar() = default;
  explicit BasicVar(NodePtr node) : node_(std::move(node)) {}

  /// Leaf that never receives gradient.
  static BasicVar constant(BasicTensor<Scalar> value) {
    auto node = std::make_shared<Node<Scalar>>();
    node->value = std::move(value);
    return BasicVar(std::move(node));
  }

  /// Leaf that accumulates gradient.
  static BasicVar parameter(BasicTensor<Scalar> value) {
    auto node = std::make_shared<Node<Scalar>>();
    node->value = std::move(value);
    node->requires_grad = true;
    return BasicVar(std::move(node));
  }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->value.shape(); }
  const BasicTensor<Scalar>& value() const { return node_->value; }
  BasicTensor<Scalar>& mutable_value() { return node_->value; }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool on) { node_->requires_grad = on; }

  bool has_grad() const { return !node_->grad.empty(); }
  const BasicTensor<Scalar>& grad() const { return node_->grad; }
  BasicTensor<Scalar>& grad() { return node_->grad; }
  void zero_grad() { node_->grad = BasicTensor<Scalar>(); }

  const NodePtr& node() const { return node_; }

  /// Backpropagates from a single-element output with seed 1.
  void backward() const {
    require(node_->value.numel() == 1, "backward() without seed requires a scalar, got " + shape().str());
    backward(BasicTensor<Scalar>(shape(), Scalar(1)));
  }

  /// Backpropagates an explicit output gradient.
  void backward(const BasicTensor<Scalar>& seed) const;

 private:
  NodePtr node_;
};

template <class Scalar>
void BasicVar<Scalar>::backward(const BasicTensor<Scalar>& seed) const {
  require(seed.shape() == shape(),
          "backward seed shape " + seed.shape().str() + " != output " + shape().str());
  if (!node_->requires_grad) return;

  // Iterative post-order DFS gives a topological order.
  std::vector<Node<Scalar>*> order;
  std::unordered_set<Node<Scalar>*> seen;
  std::vector<std::pair<Node<Scalar>*, std::size_t>> stack{{node_.get(), 0}};
  seen.insert(node_.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      Node<Scalar>* child = node->inputs[next++].get();
      if (child->requires_grad && seen.insert(child).second) stack.push_back({child, 0});
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  auto& g = node_->ensure_grad();
  for (std::size_t i = 0; i < g.numel(); ++i) g[i] += seed[i];
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<Scalar>* node = *it;
    if (node->backward_fn && !node->grad.empty()) node->backward_fn(*node);
  }
  // Interior grads are consumed; only leaves keep theirs.
  for (Node<Scalar>* node : order) {
    if (node->backward_fn) node->grad = BasicTensor<Scalar>();
  }
}

using Var = BasicVar<float>;
using VarD = BasicVar<double>;

/// Scope guard that disables graph recording on this thread; ops then
/// return constants.
class NoGradGuard {
 public:
  NoGradGuard() : previous_(enabled()) { enabled() = false; }
  ~NoGradGuard() { enabled() = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

  static bool grad_enabled() { return enabled(); }

 private:
  static bool& enabled() {
    thread_local bool on = true;
    return on;
  }
  bool previous_;
};

}  // namespace wnet
