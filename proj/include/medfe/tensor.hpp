#pragma once

// Dense rank-4 tensors with a reverse-mode differentiation tape.
//
// Every tensor is (n, c, h, w), row-major, 64-bit. An op whose inputs require
// gradients records a node holding its output, a handle to each input and a
// backward rule. Nodes receive strictly increasing ids at creation, so sorting
// the nodes reachable from a loss by descending id is a valid reverse
// topological order; that ordered list is the tape.

#include <algorithm>
#include <array>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <ostream>
#include <span>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "medfe/errors.hpp"

namespace medfe {

struct Shape {
  std::array<std::int64_t, 4> dims{1, 1, 1, 1};

  Shape() = default;
  Shape(std::int64_t n, std::int64_t c, std::int64_t h, std::int64_t w) : dims{n, c, h, w} {}

  std::int64_t n() const { return dims[0]; }
  std::int64_t c() const { return dims[1]; }
  std::int64_t h() const { return dims[2]; }
  std::int64_t w() const { return dims[3]; }
  std::int64_t operator[](std::size_t i) const { return dims[i]; }
  std::int64_t numel() const { return dims[0] * dims[1] * dims[2] * dims[3]; }
  std::int64_t plane() const { return dims[2] * dims[3]; }

  bool operator==(const Shape&) const = default;

  std::string str() const {
    return "(" + std::to_string(dims[0]) + "," + std::to_string(dims[1]) + "," + std::to_string(dims[2]) + "," +
           std::to_string(dims[3]) + ")";
  }
};

inline std::ostream& operator<<(std::ostream& os, const Shape& s) { return os << s.str(); }

namespace detail {

inline std::uint64_t next_node_id() {
  static std::atomic<std::uint64_t> counter{0};
  return ++counter;
}

inline bool& grad_mode() {
  thread_local bool enabled = true;
  return enabled;
}

struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;  // empty until the first accumulation
  bool requires_grad = false;
  std::uint64_t id = next_node_id();
  std::vector<std::shared_ptr<Node>> inputs;
  // Reads self.grad and accumulates into the inputs' grads.
  std::function<void(Node& self)> backward;

  std::vector<double>& grad_buffer() {
    if (grad.empty()) grad.assign(value.size(), 0.0);
    return grad;
  }
};

}  // namespace detail

/// Disables tape recording in the current thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_mode()) { detail::grad_mode() = false; }
  ~NoGradGuard() { detail::grad_mode() = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape s, bool requires_grad = false) { return full(s, 0.0, requires_grad); }

  static Tensor full(Shape s, double v, bool requires_grad = false) {
    check_shape(s);
    auto node = std::make_shared<detail::Node>();
    node->shape = s;
    node->value.assign(static_cast<std::size_t>(s.numel()), v);
    node->requires_grad = requires_grad;
    return Tensor(std::move(node));
  }

  static Tensor from(Shape s, std::vector<double> values, bool requires_grad = false) {
    check_shape(s);
    require(static_cast<std::int64_t>(values.size()) == s.numel(),
            "Tensor::from: " + std::to_string(values.size()) + " values for shape " + s.str());
    auto node = std::make_shared<detail::Node>();
    node->shape = s;
    node->value = std::move(values);
    node->requires_grad = requires_grad;
    return Tensor(std::move(node));
  }

  static Tensor scalar(double v, bool requires_grad = false) { return full(Shape{1, 1, 1, 1}, v, requires_grad); }

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::int64_t numel() const { return node_->shape.numel(); }
  bool requires_grad() const { return node_->requires_grad; }

  std::span<const double> values() const { return node_->value; }
  const double* data() const { return node_->value.data(); }

  /// Writable storage. Only meaningful for leaves (parameters, inputs); ops
  /// treat their outputs as immutable.
  std::span<double> mutable_values() { return node_->value; }

  /// Gradient after backward(); zeros if nothing reached this tensor.
  std::vector<double> grad() const {
    if (node_->grad.empty()) return std::vector<double>(node_->value.size(), 0.0);
    return node_->grad;
  }
  bool has_grad() const { return !node_->grad.empty(); }
  void zero_grad() { node_->grad.clear(); }

  double item() const {
    require(numel() == 1, "item() on tensor of shape " + shape().str());
    return node_->value[0];
  }

  std::int64_t index(std::int64_t n, std::int64_t c, std::int64_t h, std::int64_t w) const {
    const auto& d = node_->shape.dims;
    return ((n * d[1] + c) * d[2] + h) * d[3] + w;
  }
  double at(std::int64_t n, std::int64_t c, std::int64_t h, std::int64_t w) const {
    return node_->value[static_cast<std::size_t>(index(n, c, h, w))];
  }

  /// Fresh leaf holding a copy of the values, cut from the tape.
  Tensor detach() const { return from(shape(), node_->value, false); }

  /// Same storage semantics as detach() but marked as a trainable leaf.
  Tensor as_parameter() const { return from(shape(), node_->value, true); }

  bool all_finite() const {
    return std::all_of(node_->value.begin(), node_->value.end(), [](double v) { return std::isfinite(v); });
  }

  const std::shared_ptr<detail::Node>& node() const { return node_; }
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}

 private:
  static void check_shape(const Shape& s) {
    for (auto d : s.dims) require(d >= 1, "tensor dims must be >= 1, got " + s.str());
  }

  std::shared_ptr<detail::Node> node_;
};

namespace detail {

/// True when an op over these inputs must be recorded.
inline bool needs_grad(std::initializer_list<const Tensor*> inputs) {
  if (!grad_mode()) return false;
  return std::any_of(inputs.begin(), inputs.end(),
                     [](const Tensor* t) { return t && t->defined() && t->requires_grad(); });
}

/// Builds an op result. When recording, the node keeps the listed inputs
/// alive and stores the backward rule; otherwise it is a plain constant.
inline Tensor make_result(Shape s, std::vector<double> value, std::initializer_list<const Tensor*> inputs,
                          std::function<void(Node&)> backward) {
  auto node = std::make_shared<Node>();
  node->shape = s;
  node->value = std::move(value);
  if (needs_grad(inputs)) {
    node->requires_grad = true;
    for (const Tensor* t : inputs)
      if (t && t->defined()) node->inputs.push_back(t->node());
    node->backward = std::move(backward);
  }
  return Tensor(std::move(node));
}

inline Tensor make_result(Shape s, std::vector<double> value, const std::vector<Tensor>& inputs,
                          std::function<void(Node&)> backward) {
  auto node = std::make_shared<Node>();
  node->shape = s;
  node->value = std::move(value);
  const bool rec = grad_mode() && std::any_of(inputs.begin(), inputs.end(), [](const Tensor& t) {
                     return t.defined() && t.requires_grad();
                   });
  if (rec) {
    node->requires_grad = true;
    for (const Tensor& t : inputs) node->inputs.push_back(t.node());
    node->backward = std::move(backward);
  }
  return Tensor(std::move(node));
}

/// Gradient buffer of an input if it participates in differentiation.
inline std::vector<double>* grad_sink(const std::shared_ptr<Node>& n) {
  return n->requires_grad ? &n->grad_buffer() : nullptr;
}

}  // namespace detail

/// Nodes reachable from `root` that require gradients, in reverse creation
/// order (outputs before the inputs that produced them).
inline std::vector<detail::Node*> build_tape(const Tensor& root) {
  std::vector<detail::Node*> order;
  std::unordered_set<detail::Node*> seen;
  std::vector<detail::Node*> stack{root.node().get()};
  while (!stack.empty()) {
    detail::Node* n = stack.back();
    stack.pop_back();
    if (!n->requires_grad || !seen.insert(n).second) continue;
    order.push_back(n);
    for (const auto& in : n->inputs) stack.push_back(in.get());
  }
  std::sort(order.begin(), order.end(), [](const detail::Node* a, const detail::Node* b) { return a->id > b->id; });
  return order;
}

/// Reverse-mode sweep from a scalar loss. Gradients accumulate into every
/// requires_grad tensor reachable from the loss, so fan-out sums correctly and
/// leaves must be zeroed between steps.
inline void backward(const Tensor& loss) {
  require(loss.defined() && loss.numel() == 1, "backward: loss must be a scalar, got " +
                                                   (loss.defined() ? loss.shape().str() : std::string("undefined")));
  require(loss.requires_grad(), "backward: loss is not on the tape");
  auto tape = build_tape(loss);
  loss.node()->grad_buffer()[0] += 1.0;
  for (detail::Node* n : tape) {
    if (n->backward && !n->grad.empty()) n->backward(*n);
  }
}

}  // namespace medfe
