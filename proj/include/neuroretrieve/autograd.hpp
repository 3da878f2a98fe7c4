#pragma once

#include <functional>
#include <memory>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "tensor.hpp"

namespace nr {

/// One recorded value in a computation graph. Values are immutable once the
/// node is created; only `grad` is written, and only during backward().
struct Node {
  Tensor value;
  Tensor grad;  // empty until something flows into it
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward_fn;
  Tensor* grad_sink = nullptr;  // parameter gradient this leaf accumulates into
  bool requires_grad = false;

  Tensor& grad_buffer() {
    if (grad.shape() != value.shape()) grad = zeros_like(value);
    return grad;
  }
  bool has_grad() const { return grad.shape() == value.shape(); }
};

/// Handle to a graph node. Cheap to copy; copies share the node.
class Var {
 public:
  Var() = default;
  explicit Var(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  const Tensor& value() const { return node_->value; }
  const Shape& shape() const { return node_->value.shape(); }
  std::size_t rows() const { return node_->value.rows(); }
  std::size_t cols() const { return node_->value.cols(); }
  bool requires_grad() const { return node_->requires_grad; }

  /// Gradient after backward(); zeros if nothing reached this node.
  Tensor grad() const { return node_->has_grad() ? node_->grad : zeros_like(node_->value); }

  Node& node() const { return *node_; }
  const std::shared_ptr<Node>& ptr() const { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

inline Var constant(Tensor value) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  return Var(std::move(n));
}

/// Leaf that receives a gradient (but is not tied to any ParamSet).
inline Var variable(Tensor value) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  n->requires_grad = true;
  return Var(std::move(n));
}

namespace detail {

/// Records an op result. The closure is kept only when some input needs a gradient.
inline Var record(const char* op, Tensor value, std::vector<Var> inputs,
                  std::function<void(Node&)> backward_fn) {
  if (!value.all_finite()) throw NumericError(std::string(op) + " produced a non-finite value");
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  for (const auto& in : inputs) n->requires_grad = n->requires_grad || in.requires_grad();
  if (n->requires_grad) {
    n->inputs.reserve(inputs.size());
    for (auto& in : inputs) n->inputs.push_back(in.ptr());
    n->backward_fn = std::move(backward_fn);
  }
  return Var(std::move(n));
}

}  // namespace detail

/// Reverse-mode sweep from a scalar. Parameter leaves add their gradient into
/// their sink; callers are expected to zero sinks beforehand (ParamSet does).
inline void backward(const Var& loss) {
  if (loss.value().size() != 1) {
    throw ShapeError("backward() needs a scalar loss, got shape " + shape_string(loss.shape()));
  }
  if (!loss.requires_grad()) return;

  // Iterative post-order DFS gives a topological order without deep recursion.
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, std::size_t>> stack{{&loss.node(), 0}};
  seen.insert(&loss.node());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      Node* child = node->inputs[next++].get();
      if (child->requires_grad && seen.insert(child).second) stack.emplace_back(child, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  for (Node* n : order) n->grad = Tensor();
  loss.node().grad_buffer()[0] = 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (!n->has_grad()) continue;
    if (n->backward_fn) n->backward_fn(*n);
    if (n->grad_sink != nullptr) {
      auto sink = n->grad_sink->data();
      auto g = n->grad.data();
      for (std::size_t i = 0; i < g.size(); ++i) sink[i] += g[i];
    }
  }
}

}  // namespace nr
