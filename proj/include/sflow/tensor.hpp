#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <vector>

#include "sflow/rng.hpp"

namespace sflow {

using Shape = std::vector<std::int64_t>;

inline std::int64_t shape_numel(const Shape& s) {
  std::int64_t n = 1;
  for (auto d : s) n *= d;
  return n;
}

/// Thread-local switch that suppresses graph construction, used when
/// rolling a trained policy out (no gradients wanted, big speed win).
struct GradMode {
  static bool& enabled() {
    thread_local bool on = true;
    return on;
  }
};

struct NoGradGuard {
  bool prev;
  NoGradGuard() : prev(GradMode::enabled()) { GradMode::enabled() = false; }
  ~NoGradGuard() { GradMode::enabled() = prev; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;
};

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  os << "]";
  return os.str();
}

template <typename T>
struct TensorNode {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;  // allocated lazily by backward()
  bool requires_grad = false;
  std::vector<std::shared_ptr<TensorNode>> parents;
  // Reads this node's grad and accumulates into the parents' grads.
  std::function<void(TensorNode&)> backward_fn;

  std::int64_t numel() const { return shape_numel(shape); }

  void ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), T(0));
  }
};

/// Dense row-major tensor; a cheap shared handle onto a tape node.
///
/// Copying a Tensor copies the handle, not the buffer. Every op in
/// ops.hpp produces a fresh node; when any input participates in the
/// tape (requires_grad), the node records its parents and a backward
/// closure for reverse-mode differentiation via backward().
template <typename T>
class Tensor {
 public:
  using Scalar = T;

  Tensor() = default;
  explicit Tensor(std::shared_ptr<TensorNode<T>> n) : node_(std::move(n)) {}

  static Tensor zeros(Shape shape) {
    auto n = std::make_shared<TensorNode<T>>();
    n->data.assign(static_cast<std::size_t>(shape_numel(shape)), T(0));
    n->shape = std::move(shape);
    return Tensor(std::move(n));
  }

  static Tensor full(Shape shape, T value) {
    Tensor t = zeros(std::move(shape));
    for (auto& v : t.node_->data) v = value;
    return t;
  }

  static Tensor scalar(T value) { return full({}, value); }

  static Tensor from_data(Shape shape, std::vector<T> data) {
    if (shape_numel(shape) != static_cast<std::int64_t>(data.size()))
      throw std::invalid_argument("Tensor::from_data: " + shape_str(shape) +
                                  " does not hold " +
                                  std::to_string(data.size()) + " values");
    auto n = std::make_shared<TensorNode<T>>();
    n->shape = std::move(shape);
    n->data = std::move(data);
    return Tensor(std::move(n));
  }

  static Tensor gaussian(Shape shape, Rng& rng, T scale = T(1)) {
    Tensor t = zeros(std::move(shape));
    for (auto& v : t.node_->data)
      v = static_cast<T>(rng.gaussian()) * scale;
    return t;
  }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::int64_t numel() const { return node_->numel(); }
  std::int64_t rank() const { return static_cast<std::int64_t>(node_->shape.size()); }

  std::int64_t rows() const { return node_->shape.at(0); }
  std::int64_t cols() const { return node_->shape.at(1); }

  std::vector<T>& values() { return node_->data; }
  const std::vector<T>& values() const { return node_->data; }
  T* ptr() { return node_->data.data(); }
  const T* ptr() const { return node_->data.data(); }

  T item() const {
    if (numel() != 1)
      throw std::invalid_argument("Tensor::item: tensor " +
                                  shape_str(shape()) + " is not a scalar");
    return node_->data[0];
  }

  T& at(std::int64_t i) { return node_->data[static_cast<std::size_t>(i)]; }
  T at(std::int64_t i) const { return node_->data[static_cast<std::size_t>(i)]; }
  T& at(std::int64_t i, std::int64_t j) {
    return node_->data[static_cast<std::size_t>(i * cols() + j)];
  }
  T at(std::int64_t i, std::int64_t j) const {
    return node_->data[static_cast<std::size_t>(i * cols() + j)];
  }

  bool requires_grad() const { return node_->requires_grad; }
  Tensor& set_requires_grad(bool v) {
    node_->requires_grad = v;
    return *this;
  }

  /// Gradient buffer (valid after backward() touched this node).
  const std::vector<T>& grad() const {
    if (node_->grad.size() != node_->data.size())
      throw std::runtime_error("Tensor::grad: no gradient recorded");
    return node_->grad;
  }
  bool has_grad() const { return node_->grad.size() == node_->data.size(); }
  void zero_grad() { node_->grad.assign(node_->data.size(), T(0)); }

  /// Same values, fresh leaf node outside the tape.
  Tensor detach() const {
    auto n = std::make_shared<TensorNode<T>>();
    n->shape = node_->shape;
    n->data = node_->data;
    return Tensor(std::move(n));
  }

  std::shared_ptr<TensorNode<T>>& node() { return node_; }
  const std::shared_ptr<TensorNode<T>>& node() const { return node_; }

 private:
  std::shared_ptr<TensorNode<T>> node_;
};

/// Reverse-mode sweep from a scalar loss. Gradients accumulate
/// additively, so repeated uses of a tensor sum their contributions;
/// call zero_grad on parameters between steps.
template <typename T>
void backward(const Tensor<T>& loss) {
  if (loss.numel() != 1)
    throw std::invalid_argument("backward: loss " + shape_str(loss.shape()) +
                                " is not a scalar");
  backward(loss, T(1));
}

template <typename T>
void backward(const Tensor<T>& loss, T seed) {
  if (loss.numel() != 1)
    throw std::invalid_argument("backward: loss " + shape_str(loss.shape()) +
                                " is not a scalar");
  if (!loss.requires_grad()) return;

  // Iterative post-order topological sort (graphs can be deep).
  std::vector<TensorNode<T>*> topo;
  std::unordered_set<TensorNode<T>*> visited;
  struct Frame {
    TensorNode<T>* node;
    std::size_t next_parent;
  };
  std::vector<Frame> stack;
  stack.push_back({loss.node().get(), 0});
  visited.insert(loss.node().get());
  while (!stack.empty()) {
    Frame& f = stack.back();
    if (f.next_parent < f.node->parents.size()) {
      TensorNode<T>* p = f.node->parents[f.next_parent++].get();
      if (p->requires_grad && visited.insert(p).second)
        stack.push_back({p, 0});
    } else {
      topo.push_back(f.node);
      stack.pop_back();
    }
  }

  loss.node()->ensure_grad();
  loss.node()->grad[0] += seed;
  for (auto it = topo.rbegin(); it != topo.rend(); ++it) {
    TensorNode<T>* n = *it;
    if (n->backward_fn) n->backward_fn(*n);
  }
}

}  // namespace sflow
