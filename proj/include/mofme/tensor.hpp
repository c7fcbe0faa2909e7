#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <vector>

#include "mofme/common.hpp"

namespace mofme {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& s) {
  std::size_t n = 1;
  for (auto d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += "x";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

template <class T>
struct TensorData {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;  // empty until a consumer accumulates into it
  bool requires_grad = false;
  std::int64_t tape_pos = -1;  // index of the producing op, -1 for leaves

  std::vector<T>& grad_buf() {
    if (grad.empty()) grad.assign(value.size(), T(0));
    return grad;
  }
};

template <class T>
class Tensor;

// Linear record of executed ops. Recording happens only inside a TapeScope
// and only for ops touching a gradient-tracked tensor; execution order is a
// topological order by construction. Replaying in reverse accumulates (sums)
// gradients from every consumer into each input exactly once per op.
template <class T>
class Tape {
 public:
  struct Node {
    std::function<void()> backward;
    std::shared_ptr<TensorData<T>> out;
  };

  static Tape*& current() {
    thread_local Tape* cur = nullptr;
    return cur;
  }

  std::int64_t record(std::function<void()> fn, std::shared_ptr<TensorData<T>> out) {
    nodes_.push_back(Node{std::move(fn), std::move(out)});
    return static_cast<std::int64_t>(nodes_.size()) - 1;
  }

  void backward_from(const Tensor<T>& loss);

  std::size_t size() const { return nodes_.size(); }
  void clear() { nodes_.clear(); }

 private:
  std::vector<Node> nodes_;
};

// RAII scope making a fresh tape current on this thread. Forward passes run
// outside any scope record nothing (inference mode).
template <class T>
class TapeScope {
 public:
  TapeScope() : prev_(Tape<T>::current()) { Tape<T>::current() = &tape_; }
  ~TapeScope() { Tape<T>::current() = prev_; }
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;
  Tape<T>& tape() { return tape_; }

 private:
  Tape<T> tape_;
  Tape<T>* prev_;
};

// Dense row-major tensor. Value-semantics handle sharing the underlying
// storage; storage is written once by the producing op and treated as
// immutable afterwards (raw() is for leaf initialization only).
template <class T>
class Tensor {
 public:
  using Scalar = T;

  Tensor() = default;

  static Tensor zeros(Shape shape) {
    Tensor t;
    t.d_ = std::make_shared<TensorData<T>>();
    t.d_->shape = std::move(shape);
    t.d_->value.assign(shape_numel(t.d_->shape), T(0));
    return t;
  }

  static Tensor full(Shape shape, T v) {
    Tensor t = zeros(std::move(shape));
    for (auto& x : t.d_->value) x = v;
    return t;
  }

  static Tensor from(Shape shape, std::vector<T> data) {
    if (shape_numel(shape) != data.size())
      throw ShapeError(msg("from: shape ", shape_str(shape), " does not hold ",
                           data.size(), " values"));
    Tensor t;
    t.d_ = std::make_shared<TensorData<T>>();
    t.d_->shape = std::move(shape);
    t.d_->value = std::move(data);
    return t;
  }

  static Tensor scalar(T v) { return from({1}, {v}); }

  bool defined() const { return d_ != nullptr; }
  const Shape& shape() const { return d_->shape; }
  std::size_t rank() const { return d_->shape.size(); }
  std::size_t size(std::size_t axis) const { return d_->shape.at(axis); }
  std::size_t numel() const { return d_->value.size(); }

  const std::vector<T>& value() const { return d_->value; }
  std::vector<T>& raw() { return d_->value; }

  T item() const {
    if (numel() != 1)
      throw ShapeError(msg("item: tensor ", shape_str(shape()), " is not scalar"));
    return d_->value[0];
  }

  Tensor& set_requires_grad(bool rg = true) {
    d_->requires_grad = rg;
    return *this;
  }
  bool requires_grad() const { return d_->requires_grad; }

  bool has_grad() const { return d_ && !d_->grad.empty(); }
  const std::vector<T>& grad() const {
    if (!has_grad())
      throw ShapeError("grad: no gradient has been accumulated for this tensor");
    return d_->grad;
  }
  void zero_grad() { d_->grad.clear(); }

  std::int64_t node_id() const { return d_->tape_pos; }

  bool all_finite() const {
    for (T v : d_->value)
      if (!std::isfinite(double(v))) return false;
    return true;
  }

  const std::shared_ptr<TensorData<T>>& ptr() const { return d_; }

 private:
  std::shared_ptr<TensorData<T>> d_;
};

template <class T>
void Tape<T>::backward_from(const Tensor<T>& loss) {
  if (loss.numel() != 1)
    throw ShapeError(msg("backward: loss must be scalar, got ",
                         shape_str(loss.shape())));
  loss.ptr()->grad_buf()[0] += T(1);
  std::int64_t start = loss.node_id();
  if (start < 0) return;  // leaf scalar, nothing to propagate
  for (std::int64_t i = start; i >= 0; --i) {
    Node& n = nodes_[static_cast<std::size_t>(i)];
    if (n.out->grad.empty()) continue;
    n.backward();
    // An op output's gradient is fully consumed once its node has run
    // (reverse topological order); dropping it keeps repeated backward
    // calls on one tape from re-counting earlier subgraphs and frees
    // memory as the sweep proceeds. Leaves are never cleared.
    n.out->grad.clear();
  }
}

// Propagates d(loss)/d(leaf) into every gradient-tracked leaf reachable from
// `loss` on the current tape.
template <class T>
void backward(const Tensor<T>& loss) {
  Tape<T>* tape = Tape<T>::current();
  if (!tape)
    throw ShapeError("backward: no tape is active on this thread");
  tape->backward_from(loss);
}

using Tensor64 = Tensor<double>;
using Tensor32 = Tensor<float>;

}  // namespace mofme
