// Copyright 2026 The defmod Authors
// SPDX-License-Identifier: Apache-2.0

// Dense row-major tensors with tape-based reverse-mode differentiation.
//
// Every op creates a new node stamped with a monotonically increasing
// sequence number. Nodes that need gradients keep their operands and a
// backward rule; backward() replays them in reverse execution order.

#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <type_traits>
#include <vector>

#include "defmod/error.hpp"

namespace defmod {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

inline std::string shape_string(const Shape& shape) {
  std::ostringstream oss;
  oss << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) oss << 'x';
    oss << shape[i];
  }
  oss << ']';
  return oss.str();
}

namespace detail {

inline std::atomic<std::uint64_t>& sequence_counter() {
  static std::atomic<std::uint64_t> counter{0};
  return counter;
}

inline bool& grad_mode_flag() {
  thread_local bool enabled = true;
  return enabled;
}

}  // namespace detail

/// Disables graph recording for the current thread while alive.
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_mode_flag()) {
    detail::grad_mode_flag() = false;
  }
  ~NoGradGuard() { detail::grad_mode_flag() = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

inline bool grad_enabled() { return detail::grad_mode_flag(); }

template <typename T>
struct Node {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;  // empty means "no gradient yet"
  bool requires_grad = false;
  std::uint64_t order = 0;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;

  void ensure_grad() {
    if (grad.empty()) grad.assign(value.size(), T(0));
  }
};

template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;

  explicit Tensor(Shape shape, T fill = T(0), bool requires_grad = false)
      : node_(std::make_shared<Node<T>>()) {
    validate_shape(shape);
    node_->value.assign(shape_size(shape), fill);
    node_->shape = std::move(shape);
    node_->requires_grad = requires_grad;
    node_->order = detail::sequence_counter()++;
  }

  Tensor(Shape shape, std::vector<T> data, bool requires_grad = false)
      : node_(std::make_shared<Node<T>>()) {
    validate_shape(shape);
    if (shape_size(shape) != data.size()) {
      raise<DimensionError>("tensor data of length ", data.size(),
                            " does not fit shape ", shape_string(shape));
    }
    node_->value = std::move(data);
    node_->shape = std::move(shape);
    node_->requires_grad = requires_grad;
    node_->order = detail::sequence_counter()++;
  }

  static Tensor scalar(T v, bool requires_grad = false) {
    return Tensor(Shape{1}, std::vector<T>{v}, requires_grad);
  }

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t size() const { return node_->value.size(); }
  std::size_t dim(std::size_t i) const { return node_->shape.at(i); }

  /// Columns of the row view: the last dimension.
  std::size_t cols() const { return node_->shape.back(); }
  /// Rows of the row view: product of all leading dimensions.
  std::size_t rows() const { return size() / cols(); }

  std::span<const T> data() const { return node_->value; }
  std::span<T> mutable_data() { return node_->value; }
  const std::vector<T>& values() const { return node_->value; }

  T item() const {
    if (size() != 1) {
      raise<DimensionError>("item() on tensor of shape ", shape_string(shape()));
    }
    return node_->value[0];
  }
  T at(std::size_t r, std::size_t c) const {
    return node_->value[r * cols() + c];
  }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool on) { node_->requires_grad = on; }

  bool has_grad() const { return !node_->grad.empty(); }
  std::span<const T> grad() const { return node_->grad; }
  std::span<T> mutable_grad() {
    node_->ensure_grad();
    return node_->grad;
  }
  void zero_grad() { node_->grad.clear(); }

  std::uint64_t order() const { return node_->order; }
  Node<T>& node() const { return *node_; }
  const std::shared_ptr<Node<T>>& node_ptr() const { return node_; }

  /// Deep copy detached from any graph.
  Tensor clone(bool requires_grad = false) const {
    return Tensor(shape(), node_->value, requires_grad);
  }

  /// Same data, new shape with equal element count. Differentiable.
  Tensor reshape(Shape shape) const;

  bool all_finite() const {
    return std::all_of(node_->value.begin(), node_->value.end(),
                       [](T v) { return std::isfinite(v); });
  }

  /// Creates an op output. Records parents and the backward rule only when
  /// grad mode is on and some parent participates in differentiation.
  static Tensor make_result(Shape shape, std::vector<T> value,
                            std::vector<Tensor> parents,
                            std::function<void(Node<T>&)> backward_fn) {
    Tensor out(std::move(shape), std::move(value));
    if (!grad_enabled()) return out;
    const bool any = std::any_of(parents.begin(), parents.end(),
                                 [](const Tensor& p) { return p.requires_grad(); });
    if (!any) return out;
    out.node_->requires_grad = true;
    out.node_->backward_fn = std::move(backward_fn);
    out.node_->parents.reserve(parents.size());
    for (auto& p : parents) out.node_->parents.push_back(p.node_);
    return out;
  }

 private:
  static void validate_shape(const Shape& shape) {
    if (shape.empty()) raise<DimensionError>("tensor shape must have rank >= 1");
    for (auto d : shape) {
      if (d == 0) {
        raise<DimensionError>("tensor shape ", shape_string(shape),
                              " has a zero dimension");
      }
    }
  }

  std::shared_ptr<Node<T>> node_;
};

/// Gradient buffer of a parent if it participates in differentiation,
/// otherwise nullptr. Frozen leaves never get a buffer.
template <typename T>
T* grad_target(Node<T>& parent) {
  if (!parent.requires_grad) return nullptr;
  parent.ensure_grad();
  return parent.grad.data();
}

/// Reverse-mode sweep from a scalar root. Each reachable node runs its
/// backward rule once, in reverse order of creation. `visit`, when given,
/// observes every node processed.
template <typename T>
void backward(const Tensor<T>& root,
              const std::function<void(const std::type_identity_t<Node<T>>&)>& visit = nullptr) {
  if (root.size() != 1) {
    raise<DimensionError>("backward() needs a scalar root, got ",
                          shape_string(root.shape()));
  }
  if (!root.requires_grad()) return;

  std::vector<Node<T>*> nodes;
  std::unordered_set<const Node<T>*> seen;
  std::vector<Node<T>*> stack{&root.node()};
  while (!stack.empty()) {
    Node<T>* n = stack.back();
    stack.pop_back();
    if (!seen.insert(n).second) continue;
    nodes.push_back(n);
    for (auto& p : n->parents) {
      if (p->requires_grad) stack.push_back(p.get());
    }
  }
  std::sort(nodes.begin(), nodes.end(),
            [](const Node<T>* a, const Node<T>* b) { return a->order > b->order; });

  root.node().ensure_grad();
  root.node().grad[0] += T(1);
  for (Node<T>* n : nodes) {
    if (visit) visit(*n);
    if (n->backward_fn && !n->grad.empty()) n->backward_fn(*n);
  }
  // Interior gradients are not needed once propagated.
  for (Node<T>* n : nodes) {
    if (n->backward_fn) n->grad.clear();
  }
}

template <typename T>
Tensor<T> Tensor<T>::reshape(Shape new_shape) const {
  if (shape_size(new_shape) != size()) {
    raise<DimensionError>("cannot reshape ", shape_string(shape()), " to ",
                          shape_string(new_shape));
  }
  return make_result(std::move(new_shape), node_->value, {*this},
                     [](Node<T>& self) {
                       if (T* g = grad_target(*self.parents[0])) {
                         for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
                       }
                     });
}

/// Converts between scalar types, detached.
template <typename To, typename From>
Tensor<To> convert(const Tensor<From>& t, bool requires_grad = false) {
  std::vector<To> data(t.data().begin(), t.data().end());
  return Tensor<To>(t.shape(), std::move(data), requires_grad);
}

}  // namespace defmod
