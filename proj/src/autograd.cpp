#include "vidvisc/autograd.hpp"

#include <unordered_set>

namespace vidvisc {

template <typename T>
Tensor<T>& Node<T>::grad_buffer() {
  if (grad.empty()) grad = Tensor<T>::zeros(value.shape());
  return grad;
}

template <typename T>
void Node<T>::accumulate(const Tensor<T>& g) {
  if (!requires_grad) return;
  if (g.size() != value.size()) {
    throw ShapeError("gradient of shape " + shape_str(g.shape()) + " for value of shape " +
                     shape_str(value.shape()));
  }
  auto& buf = grad_buffer();
  T* dst = buf.raw();
  const T* src = g.raw();
  for (size_t i = 0; i < buf.size(); ++i) dst[i] += src[i];
}

template <typename T>
void backward(const Variable<T>& loss) {
  if (loss.size() != 1) {
    throw ShapeError("backward() needs a single-element loss, got shape " + shape_str(loss.shape()));
  }
  auto root = loss.node();
  if (!root->requires_grad) return;

  // Iterative post-order DFS gives a topological order (parents first).
  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> seen;
  std::vector<std::pair<Node<T>*, size_t>> stack{{root.get(), 0}};
  seen.insert(root.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node<T>* p = node->parents[next++].get();
      if (p->requires_grad && !seen.count(p)) {
        seen.insert(p);
        stack.emplace_back(p, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  for (Node<T>* n : order) {
    if (!n->is_leaf()) n->grad = Tensor<T>();
  }
  if (root->is_leaf()) {
    root->accumulate(Tensor<T>::ones(root->value.shape()));
    return;
  }
  root->grad = Tensor<T>::ones(root->value.shape());
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>* n = *it;
    if (n->is_leaf() || n->grad.empty()) continue;
    n->backward_fn(*n);
    n->grad = Tensor<T>();
  }
}

template struct Node<float>;
template struct Node<double>;
template void backward(const Variable<float>&);
template void backward(const Variable<double>&);

}  // namespace vidvisc
