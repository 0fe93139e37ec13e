// SPDX-License-Identifier: Apache-2.0
//
// Dense tensors with a define-by-run reverse-mode tape.
//
// Operations executed while a TapeScope is active record a backward closure
// on that thread's tape whenever at least one input requires a gradient.
// Outside a scope (or with only constant inputs) ops are plain evaluation.
#pragma once

#include <atomic>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "btx/errors.hpp"

namespace btx {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

template <typename S>
class Tape;

namespace detail {

inline std::uint64_t next_node_id() {
  static std::atomic<std::uint64_t> counter{0};
  return ++counter;
}

template <typename S>
struct Node {
  Shape shape;
  std::vector<S> value;
  std::vector<S> grad;  // empty until something flows into the node
  bool requires_grad = false;
  const Tape<S>* tape = nullptr;  // null for leaves and constants
  std::function<void(const std::vector<S>&)> backward;
  std::uint64_t id = next_node_id();

  std::vector<S>& grad_buffer() {
    if (grad.empty()) grad.assign(value.size(), S(0));
    return grad;
  }
};

}  // namespace detail

template <typename S>
class Tensor {
 public:
  using Scalar = S;

  Tensor() = default;

  static Tensor constant(Shape shape, std::vector<S> values) {
    return Tensor(std::move(shape), std::move(values), false);
  }

  // A gradient-accumulating input such as a model parameter.
  static Tensor leaf(Shape shape, std::vector<S> values, bool requires_grad = true) {
    return Tensor(std::move(shape), std::move(values), requires_grad);
  }

  static Tensor zeros(Shape shape) {
    const std::size_t n = shape_numel(shape);
    return constant(std::move(shape), std::vector<S>(n, S(0)));
  }

  static Tensor scalar(S value) { return constant({1}, {value}); }

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::size_t dim(std::size_t axis) const { return node_->shape.at(axis); }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t numel() const { return node_->value.size(); }
  std::uint64_t id() const { return node_->id; }
  bool requires_grad() const { return node_->requires_grad; }

  std::span<const S> data() const { return node_->value; }
  std::span<S> mutable_data() { return node_->value; }
  S operator[](std::size_t i) const { return node_->value[i]; }
  S at(std::size_t row, std::size_t col) const { return node_->value[row * node_->shape.back() + col]; }

  S item() const {
    if (numel() != 1) throw ContractError("item() on tensor of shape " + shape_str(shape()));
    return node_->value[0];
  }

  bool has_grad() const { return !node_->grad.empty(); }
  // Zero-filled when nothing has flowed in yet.
  std::vector<S> grad() const {
    if (node_->grad.empty()) return std::vector<S>(node_->value.size(), S(0));
    return node_->grad;
  }
  void zero_grad() { node_->grad.clear(); }

  // Same storage, new shape (no autodiff record; the view shares the node).
  Tensor reshaped(Shape shape) const {
    if (shape_numel(shape) != numel())
      throw DimensionError("cannot reshape " + shape_str(this->shape()) + " to " + shape_str(shape));
    Tensor out = *this;
    out.node_ = std::make_shared<detail::Node<S>>(*node_);
    out.node_->shape = std::move(shape);
    out.node_->requires_grad = false;
    out.node_->backward = nullptr;
    return out;
  }

  std::shared_ptr<detail::Node<S>> node() const { return node_; }
  explicit Tensor(std::shared_ptr<detail::Node<S>> node) : node_(std::move(node)) {}

 private:
  Tensor(Shape shape, std::vector<S> values, bool requires_grad) {
    if (shape_numel(shape) != values.size())
      throw DimensionError("tensor of shape " + shape_str(shape) + " given " +
                           std::to_string(values.size()) + " values");
    node_ = std::make_shared<detail::Node<S>>();
    node_->shape = std::move(shape);
    node_->value = std::move(values);
    node_->requires_grad = requires_grad;
  }

  std::shared_ptr<detail::Node<S>> node_;
};

template <typename S>
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  void record(std::shared_ptr<detail::Node<S>> node) {
    if (consumed_) throw ContractError("recording onto a tape whose backward already ran; reset() it first");
    node->tape = this;
    nodes_.push_back(std::move(node));
  }

  std::size_t size() const { return nodes_.size(); }
  bool consumed() const { return consumed_; }

  // Seeds d(loss)/d(loss) = 1 and walks the tape in reverse creation order,
  // which is a reverse topological order because inputs precede outputs.
  void backward(const Tensor<S>& loss) {
    if (loss.numel() != 1) throw ContractError("backward() needs a scalar root, got " + shape_str(loss.shape()));
    if (nodes_.empty()) return;
    if (consumed_) throw ContractError("backward() called twice without resetting the tape");
    if (loss.node()->tape != this) throw ContractError("backward() root was not recorded on this tape");
    consumed_ = true;
    loss.node()->grad_buffer()[0] += S(1);
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
      detail::Node<S>& node = **it;
      if (node.grad.empty() || !node.backward) continue;
      node.backward(node.grad);
    }
  }

  void reset() {
    nodes_.clear();
    consumed_ = false;
  }

 private:
  std::vector<std::shared_ptr<detail::Node<S>>> nodes_;
  bool consumed_ = false;
};

namespace detail {
template <typename S>
inline thread_local Tape<S>* active_tape = nullptr;
}  // namespace detail

template <typename S>
Tape<S>* active_tape() {
  return detail::active_tape<S>;
}

// Activates a tape for the current thread; restores the previous one on exit.
template <typename S>
class TapeScope {
 public:
  explicit TapeScope(Tape<S>& tape) : previous_(detail::active_tape<S>) { detail::active_tape<S> = &tape; }
  ~TapeScope() { detail::active_tape<S> = previous_; }
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape<S>* previous_;
};

template <typename S>
void backward(const Tensor<S>& loss) {
  Tape<S>* tape = active_tape<S>();
  if (tape == nullptr) throw ContractError("backward() outside of a TapeScope");
  tape->backward(loss);
}

namespace detail {

// Builds an op result and, when gradients are live, attaches its backward
// closure. The closure receives the output gradient.
template <typename S, typename Backward>
Tensor<S> make_result(Shape shape, std::vector<S> value, std::initializer_list<const Tensor<S>*> inputs,
                      Backward&& backward) {
  auto node = std::make_shared<Node<S>>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  Tape<S>* tape = active_tape<S>;
  bool needs = false;
  for (const Tensor<S>* in : inputs) needs = needs || in->requires_grad();
  if (tape != nullptr && needs) {
    node->requires_grad = true;
    node->backward = std::forward<Backward>(backward);
    tape->record(node);
  }
  return Tensor<S>(std::move(node));
}

template <typename S, typename Backward>
Tensor<S> make_result_n(Shape shape, std::vector<S> value, const std::vector<const Tensor<S>*>& inputs,
                        Backward&& backward) {
  auto node = std::make_shared<Node<S>>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  Tape<S>* tape = active_tape<S>;
  bool needs = false;
  for (const Tensor<S>* in : inputs) needs = needs || in->requires_grad();
  if (tape != nullptr && needs) {
    node->requires_grad = true;
    node->backward = std::forward<Backward>(backward);
    tape->record(node);
  }
  return Tensor<S>(std::move(node));
}

// Gradient sink for an input, or nullptr when the input is constant.
template <typename S>
std::vector<S>* sink(const std::shared_ptr<Node<S>>& node) {
  return node->requires_grad ? &node->grad_buffer() : nullptr;
}

}  // namespace detail
}  // namespace btx
