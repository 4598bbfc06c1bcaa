#pragma once

// Reverse-mode differentiation tape. Nodes are appended in execution order,
// so the node vector is already a topological order and backward is a
// single reverse sweep.

#include <cstdint>
#include <functional>
#include <initializer_list>
#include <span>
#include <stdexcept>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include "mvcr/tensor.hpp"

namespace mvcr {

template <class T>
class Tape;

/// Handle to a node on a tape.
template <class T>
class Var {
 public:
  Var() = default;
  Var(Tape<T>* tape, std::uint32_t id) : tape_(tape), id_(id) {}

  Tape<T>& tape() const { return *tape_; }
  std::uint32_t id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }

  const Shape& shape() const { return tape_->shape(id_); }
  std::span<const T> value() const { return tape_->value(id_); }
  std::size_t size() const { return tape_->value(id_).size(); }
  bool requires_grad() const { return tape_->requires_grad(id_); }
  T item() const {
    if (size() != 1) throw ShapeError("item: tensor is not scalar, shape " + to_string(shape()));
    return value()[0];
  }
  std::vector<T> to_vector() const { return {value().begin(), value().end()}; }

 private:
  Tape<T>* tape_ = nullptr;
  std::uint32_t id_ = 0;
};

template <class T>
class Tape {
 public:
  using Backward = std::function<void(Tape&, std::uint32_t self)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Binds a parameter by reference; repeated binds of the same tensor
  /// return the same node. The tensor must outlive the tape.
  Var<T> param(const Tensor<T>& t) {
    if (auto it = bound_.find(&t); it != bound_.end()) return {this, it->second};
    Node n;
    n.kind = "param";
    n.shape = t.shape;
    n.external = &t.data;
    n.requires_grad = t.requires_grad;
    n.leaf = &t;
    const auto id = push(std::move(n));
    bound_.emplace(&t, id);
    return {this, id};
  }

  Var<T> constant(Shape shape, std::vector<T> values) { return leaf(std::move(shape), std::move(values), false); }

  Var<T> constant(const Tensor<T>& t) { return leaf(t.shape, t.data, false); }

  /// Leaf owning its storage (gradient-check points, inputs).
  Var<T> leaf(Shape shape, std::vector<T> values, bool requires_grad) {
    if (values.size() != numel(shape))
      throw ShapeError("leaf: " + std::to_string(values.size()) + " values for shape " + to_string(shape));
    Node n;
    n.kind = requires_grad ? "leaf" : "constant";
    n.shape = std::move(shape);
    n.owned = std::move(values);
    n.requires_grad = requires_grad;
    return {this, push(std::move(n))};
  }

  /// Appends an op result. The backward rule is kept only when some input
  /// requires a gradient.
  Var<T> record(std::string_view kind, Shape shape, std::vector<T> values, std::initializer_list<Var<T>> inputs,
                Backward backward) {
    bool needs = false;
    for (const auto& in : inputs) {
      if (in.valid() && &in.tape() != this) throw std::invalid_argument(std::string(kind) + ": operand from another tape");
      needs = needs || (in.valid() && requires_grad(in.id()));
    }
    Node n;
    n.kind = kind;
    n.shape = std::move(shape);
    n.owned = std::move(values);
    n.requires_grad = needs;
    if (needs) {
      n.backward = std::move(backward);
      for (const auto& in : inputs)
        if (in.valid()) n.inputs.push_back(in.id());
    }
    return {this, push(std::move(n))};
  }

  /// Fills gradients of every requires_grad node upstream of a scalar loss.
  /// Previous gradients are discarded, so a tape can be swept once per loss.
  void backward(Var<T> loss) {
    if (&loss.tape() != this) throw std::invalid_argument("backward: loss belongs to another tape");
    if (loss.size() != 1) throw ShapeError("backward: loss must be scalar, got shape " + to_string(loss.shape()));
    for (auto& n : nodes_) n.grad.clear();
    const std::uint32_t top = loss.id();
    // Only nodes upstream of the loss get buffers and have their rule run.
    std::vector<std::uint8_t> reached(top + 1, 0);
    reached[top] = nodes_[top].requires_grad;
    for (std::uint32_t i = top + 1; i-- > 0;) {
      if (!reached[i]) continue;
      for (auto in : nodes_[i].inputs) reached[in] |= static_cast<std::uint8_t>(nodes_[in].requires_grad);
    }
    for (std::uint32_t i = 0; i <= top; ++i)
      if (reached[i] || (nodes_[i].requires_grad && !nodes_[i].backward)) nodes_[i].grad.assign(value(i).size(), T{0});
    if (!reached[top]) return;
    nodes_[top].grad[0] = T{1};
    for (std::uint32_t i = top + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (reached[i] && n.backward) n.backward(*this, i);
    }
  }

  std::span<const T> grad(Var<T> v) const { return nodes_[v.id()].grad; }

  /// Gradient for a bound parameter; zeros when it did not reach the loss,
  /// empty when it was never bound or is not trainable.
  std::span<const T> grad(const Tensor<T>& param) const {
    auto it = bound_.find(&param);
    if (it == bound_.end()) return {};
    return nodes_[it->second].grad;
  }

  bool is_bound(const Tensor<T>& param) const { return bound_.contains(&param); }

  /// Copies the parameter's gradient into `param.grad` (zeros if unbound).
  void write_grads(Tensor<T>& param) const {
    auto g = grad(param);
    if (g.empty())
      param.grad.assign(param.data.size(), T{0});
    else
      param.grad.assign(g.begin(), g.end());
  }

  // Node access used by op implementations.
  const Shape& shape(std::uint32_t id) const { return nodes_[id].shape; }
  std::span<const T> value(std::uint32_t id) const {
    const Node& n = nodes_[id];
    return n.external ? std::span<const T>(*n.external) : std::span<const T>(n.owned);
  }
  bool requires_grad(std::uint32_t id) const { return nodes_[id].requires_grad; }
  std::span<T> grad_buffer(std::uint32_t id) { return nodes_[id].grad; }
  std::string_view kind(std::uint32_t id) const { return nodes_[id].kind; }
  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    std::string_view kind;
    Shape shape;
    std::vector<T> owned;
    const std::vector<T>* external = nullptr;
    const Tensor<T>* leaf = nullptr;
    bool requires_grad = false;
    std::vector<std::uint32_t> inputs;
    std::vector<T> grad;
    Backward backward;
  };

  std::uint32_t push(Node n) {
    nodes_.push_back(std::move(n));
    return static_cast<std::uint32_t>(nodes_.size() - 1);
  }

  std::vector<Node> nodes_;
  std::unordered_map<const Tensor<T>*, std::uint32_t> bound_;
};

}  // namespace mvcr
