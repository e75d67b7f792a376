#pragma once

// Reverse-mode automatic differentiation over dense row-major tensors.
//
// A Tensor is a cheap handle to a graph node.  Operations (ops.hpp) build new
// nodes that remember their parents and a closure propagating the output
// gradient back to them.  Leaves with requires_grad accumulate gradients over
// successive backward() calls until zero_grad(); interior gradients are
// reset at the start of every backward() call.

#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "m3bs/errors.hpp"

namespace m3bs::nn {

using Shape = std::vector<std::size_t>;

inline std::size_t numel_of(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

namespace detail {
inline bool& grad_mode() {
  thread_local bool enabled = true;
  return enabled;
}
}  // namespace detail

inline bool grad_enabled() { return detail::grad_mode(); }

// Disables graph construction on the current thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_mode()) { detail::grad_mode() = false; }
  ~NoGradGuard() { detail::grad_mode() = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

template <typename T>
struct Node {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;
  bool requires_grad = false;
  bool leaf = true;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;

  void ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), T(0));
  }
};

template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;

  explicit Tensor(Shape shape, T fill = T(0), bool requires_grad = false)
      : node_(std::make_shared<Node<T>>()) {
    check_shape(shape);
    node_->value.assign(numel_of(shape), fill);
    node_->shape = std::move(shape);
    node_->requires_grad = requires_grad;
  }

  static Tensor from(Shape shape, std::vector<T> values, bool requires_grad = false) {
    check_shape(shape);
    if (numel_of(shape) != values.size()) {
      throw ShapeError("tensor " + to_string(shape) + " given " + std::to_string(values.size()) +
                       " values");
    }
    Tensor t;
    t.node_ = std::make_shared<Node<T>>();
    t.node_->shape = std::move(shape);
    t.node_->value = std::move(values);
    t.node_->requires_grad = requires_grad;
    return t;
  }

  static Tensor scalar(T v, bool requires_grad = false) { return from({1}, {v}, requires_grad); }

  // Interior node produced by an operation.  Parents and the backward
  // closure are only retained when some parent needs a gradient.
  static Tensor make_result(Shape shape, std::vector<T> values,
                            std::vector<std::shared_ptr<Node<T>>> parents,
                            std::function<void(Node<T>&)> backward) {
    Tensor t = from(std::move(shape), std::move(values));
    bool needs = false;
    if (grad_enabled()) {
      for (const auto& p : parents) needs = needs || p->requires_grad;
    }
    if (needs) {
      t.node_->requires_grad = true;
      t.node_->leaf = false;
      t.node_->parents = std::move(parents);
      t.node_->backward = std::move(backward);
    }
    return t;
  }

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t numel() const { return node_->value.size(); }
  bool requires_grad() const { return node_->requires_grad; }
  bool is_leaf() const { return node_->leaf; }

  std::span<T> data() { return node_->value; }
  std::span<const T> data() const { return node_->value; }
  const std::vector<T>& values() const { return node_->value; }
  T item() const {
    if (numel() != 1) throw ShapeError("item() on tensor " + to_string(shape()));
    return node_->value[0];
  }
  T operator[](std::size_t i) const { return node_->value[i]; }

  bool has_grad() const { return node_->grad.size() == node_->value.size(); }
  // Gradient view; allocates a zero gradient if none was accumulated yet.
  std::span<T> grad() {
    node_->ensure_grad();
    return node_->grad;
  }
  std::span<const T> grad() const {
    node_->ensure_grad();
    return node_->grad;
  }
  void zero_grad() { node_->grad.assign(node_->value.size(), T(0)); }
  void set_requires_grad(bool on) {
    if (!node_->leaf) throw ValidationError("requires_grad can only be set on leaf tensors");
    node_->requires_grad = on;
  }

  // New leaf holding a copy of the values, disconnected from any graph.
  Tensor detach() const { return from(node_->shape, node_->value, false); }
  // Deep copy of a leaf, keeping requires_grad.  Gradients are not copied.
  Tensor clone() const { return from(node_->shape, node_->value, node_->requires_grad); }

  const std::shared_ptr<Node<T>>& node() const { return node_; }

 private:
  static void check_shape(const Shape& shape) {
    if (shape.empty()) throw ShapeError("empty shape");
    for (auto d : shape) {
      if (d == 0) throw ShapeError("zero-length dimension in " + to_string(shape));
    }
  }

  std::shared_ptr<Node<T>> node_;
};

// Reverse-mode sweep from a scalar loss.  Leaf gradients accumulate.
template <typename T>
void backward(const Tensor<T>& loss) {
  if (!loss.defined() || loss.numel() != 1) {
    throw ValidationError("backward() requires a scalar loss");
  }
  auto root = loss.node();
  if (!root->requires_grad) return;

  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> seen;
  std::vector<std::pair<Node<T>*, std::size_t>> stack{{root.get(), 0}};
  seen.insert(root.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node<T>* p = node->parents[next++].get();
      if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  for (Node<T>* n : order) {
    if (!n->leaf) n->grad.assign(n->value.size(), T(0));
  }
  root->ensure_grad();
  root->grad[0] += T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>* n = *it;
    if (n->leaf) continue;
    n->backward(*n);
    n->grad.clear();
    n->grad.shrink_to_fit();
  }
}

template <typename T>
using ParamList = std::vector<Tensor<T>*>;

template <typename T>
void zero_grads(const ParamList<T>& params) {
  for (auto* p : params) p->zero_grad();
}

}  // namespace m3bs::nn
