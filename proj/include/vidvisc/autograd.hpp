#pragma once

#include <functional>
#include <memory>
#include <vector>

#include "vidvisc/tensor.hpp"

namespace vidvisc {

template <typename T>
struct Node {
  Tensor<T> value;
  Tensor<T> grad;  // empty until a gradient reaches this node
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  // Reads `grad` of this node and accumulates into the parents.
  std::function<void(Node&)> backward_fn;

  bool is_leaf() const { return !backward_fn; }
  void accumulate(const Tensor<T>& g);
  Tensor<T>& grad_buffer();
};

// Handle into the reverse-mode graph. Copies share the node; use
// `detach()` or `value()` to obtain an independent tensor.
template <typename T>
class Variable {
 public:
  Variable() : node_(std::make_shared<Node<T>>()) {}
  explicit Variable(Tensor<T> value, bool requires_grad = false) : node_(std::make_shared<Node<T>>()) {
    node_->value = std::move(value);
    node_->requires_grad = requires_grad;
  }

  const Tensor<T>& value() const { return node_->value; }
  Tensor<T>& mutable_value() { return node_->value; }
  const Shape& shape() const { return node_->value.shape(); }
  int64_t dim(int i) const { return node_->value.dim(i); }
  int rank() const { return node_->value.rank(); }
  size_t size() const { return node_->value.size(); }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool on) { node_->requires_grad = on; }
  bool has_grad() const { return !node_->grad.empty(); }
  const Tensor<T>& grad() const { return node_->grad; }
  void zero_grad() { node_->grad = Tensor<T>(); }

  Variable detach() const { return Variable(node_->value, false); }

  const std::shared_ptr<Node<T>>& node() const { return node_; }
  static Variable from_node(std::shared_ptr<Node<T>> n) {
    Variable v;
    v.node_ = std::move(n);
    return v;
  }

 private:
  std::shared_ptr<Node<T>> node_;
};

// While a NoGradGuard is alive on this thread no graph is recorded, so
// inference does not keep activations alive.
inline bool& grad_recording() {
  thread_local bool on = true;
  return on;
}

class NoGradGuard {
 public:
  NoGradGuard() : prev_(grad_recording()) { grad_recording() = false; }
  ~NoGradGuard() { grad_recording() = prev_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

// Builds the output variable of an operation. The backward closure is
// recorded only when some input requires a gradient.
template <typename T>
Variable<T> make_result(Tensor<T> value, std::vector<std::shared_ptr<Node<T>>> parents,
                        std::function<void(Node<T>&)> backward_fn) {
  bool needs = false;
  if (grad_recording())
    for (const auto& p : parents) needs = needs || p->requires_grad;
  auto node = std::make_shared<Node<T>>();
  node->value = std::move(value);
  if (needs) {
    node->requires_grad = true;
    node->parents = std::move(parents);
    node->backward_fn = std::move(backward_fn);
  }
  return Variable<T>::from_node(std::move(node));
}

// Reverse pass from a single-element loss. Leaf gradients accumulate across
// calls; intermediate gradients are rebuilt each call and released after use.
template <typename T>
void backward(const Variable<T>& loss);

}  // namespace vidvisc
