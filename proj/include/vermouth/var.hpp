#pragma once

#include <functional>
#include <memory>
#include <vector>

#include "vermouth/tensor.hpp"

namespace vermouth {

template <typename T>
struct Node {
  Tensor<T> value;
  Tensor<T> grad;  // allocated on first accumulation
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;

  Tensor<T>& grad_buffer() {
    if (grad.shape() != value.shape()) grad = Tensor<T>(value.shape());
    return grad;
  }
};

// Handle to a node of the reverse-mode tape. Copies share the node.
template <typename T>
class Var {
 public:
  Var() = default;
  explicit Var(Tensor<T> value, bool requires_grad = false) : node_(std::make_shared<Node<T>>()) {
    node_->value = std::move(value);
    node_->requires_grad = requires_grad;
  }

  bool defined() const { return node_ != nullptr; }
  const Tensor<T>& value() const { return node_->value; }
  Tensor<T>& mutable_value() { return node_->value; }
  const Shape& shape() const { return node_->value.shape(); }
  std::int64_t dim(std::size_t i) const { return node_->value.dim(i); }
  bool requires_grad() const { return node_ && node_->requires_grad; }
  void set_requires_grad(bool on) { node_->requires_grad = on; }

  bool has_grad() const { return node_->grad.shape() == node_->value.shape() && !node_->value.empty(); }
  // Zero tensor when no gradient has reached this node.
  Tensor<T> grad() const { return has_grad() ? node_->grad : Tensor<T>(node_->value.shape()); }
  void zero_grad() { node_->grad = Tensor<T>(); }

  // Seeds this node with ones and runs the tape in reverse topological order.
  void backward();

  // Same value, cut from the tape.
  Var detach() const { return Var(node_->value, false); }

  std::shared_ptr<Node<T>> node() const { return node_; }

 private:
  std::shared_ptr<Node<T>> node_;
};

// Builds an op result; attaches backward_fn only when some parent needs a gradient.
template <typename T>
Var<T> make_op(Tensor<T> value, std::vector<Var<T>> parents, std::function<void(Node<T>&)> backward_fn) {
  Var<T> out(std::move(value), false);
  bool any = false;
  for (const auto& p : parents) any = any || p.requires_grad();
  if (!any) return out;
  auto n = out.node();
  n->requires_grad = true;
  n->parents.reserve(parents.size());
  for (const auto& p : parents) n->parents.push_back(p.node());
  n->backward_fn = std::move(backward_fn);
  return out;
}

// True when parent i of an op node takes a gradient.
template <typename T>
inline bool wants(const Node<T>& self, std::size_t i) {
  return self.parents[i] && self.parents[i]->requires_grad;
}

}  // namespace vermouth
