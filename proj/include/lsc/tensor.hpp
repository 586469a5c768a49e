#pragma once

#include <functional>
#include <memory>
#include <utility>
#include <vector>

#include "lsc/common.hpp"

namespace lsc {

template <class R>
class Tape;

namespace detail {

template <class R>
struct Node {
  Shape shape;
  std::vector<R> value;
  std::vector<R> grad;  // allocated on first accumulation per backward pass
  bool grad_ready = false;
  bool requires_grad = false;
  bool edited = false;  // provenance: produced by (or derived from) Y/O output
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void()> backward;  // empty for leaves

  void ensure_grad() {
    if (!grad_ready) {
      grad.assign(value.size(), R(0));
      grad_ready = true;
    }
  }

  void accumulate(const R* g, std::size_t n) {
    ensure_grad();
    R* dst = grad.data();
    for (std::size_t i = 0; i < n; ++i) dst[i] += g[i];
  }
};

}  // namespace detail

// Value-semantic handle over a shared node. Node values are immutable once an
// op has recorded them on a tape; parameter data may be mutated between tapes
// (optimizer steps).
template <class R>
class Tensor {
 public:
  using NodeT = detail::Node<R>;

  Tensor() = default;
  explicit Tensor(std::shared_ptr<NodeT> n) : node_(std::move(n)) {}

  static Tensor from_data(Shape shape, std::vector<R> data) {
    LSC_CHECK(shape_numel(shape) == static_cast<std::int64_t>(data.size()),
              "tensor: shape " << shape_str(shape) << " does not match data length "
                               << data.size());
    auto n = std::make_shared<NodeT>();
    n->shape = std::move(shape);
    n->value = std::move(data);
    return Tensor(std::move(n));
  }

  static Tensor zeros(Shape shape) {
    std::vector<R> d(static_cast<std::size_t>(shape_numel(shape)), R(0));
    return from_data(std::move(shape), std::move(d));
  }

  static Tensor full(Shape shape, R v) {
    std::vector<R> d(static_cast<std::size_t>(shape_numel(shape)), v);
    return from_data(std::move(shape), std::move(d));
  }

  static Tensor scalar(R v) { return from_data({1}, {v}); }

  bool valid() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::int64_t numel() const { return static_cast<std::int64_t>(node_->value.size()); }
  int dim(int i) const { return node_->shape[static_cast<std::size_t>(i)]; }
  int ndim() const { return static_cast<int>(node_->shape.size()); }

  const R* data() const { return node_->value.data(); }
  const std::vector<R>& values() const { return node_->value; }
  // For parameters / leaves only; mutating a recorded intermediate breaks the
  // tape contract.
  R* mutable_data() { return node_->value.data(); }

  bool requires_grad() const { return node_->requires_grad; }
  Tensor& set_requires_grad(bool rg) {
    node_->requires_grad = rg;
    return *this;
  }

  bool has_grad() const { return node_->grad_ready; }
  const std::vector<R>& grad() const {
    LSC_CHECK(node_->grad_ready, "tensor: gradient not computed");
    return node_->grad;
  }
  std::vector<R> grad_or_zeros() const {
    if (node_->grad_ready) return node_->grad;
    return std::vector<R>(node_->value.size(), R(0));
  }
  void clear_grad() { node_->grad_ready = false; }

  bool edited() const { return node_->edited; }
  Tensor& mark_edited() {
    node_->edited = true;
    return *this;
  }

  R item() const {
    LSC_CHECK(numel() == 1, "tensor: item() on non-scalar " << shape_str(shape()));
    return node_->value[0];
  }

  // Leaf copy of the values: no graph edge, no provenance.
  Tensor detach_copy() const { return Tensor::from_data(node_->shape, node_->value); }

  std::shared_ptr<NodeT>& node() { return node_; }
  const std::shared_ptr<NodeT>& node() const { return node_; }

 private:
  std::shared_ptr<NodeT> node_;
};

// Ordered operation record. Creation order is topological order, so the
// backward sweep is a single reverse pass.
template <class R>
class Tape {
 public:
  static Tape*& current() {
    thread_local Tape* cur = nullptr;
    return cur;
  }

  void record(std::shared_ptr<detail::Node<R>> n) { ops_.push_back(std::move(n)); }

  std::size_t size() const { return ops_.size(); }

  bool owns(const detail::Node<R>* n) const {
    for (const auto& p : ops_)
      if (p.get() == n) return true;
    return false;
  }

  // Computes gradients of `loss` w.r.t. everything reachable on this tape.
  // Resets all gradients first, so repeated calls give identical results.
  void backward(const Tensor<R>& loss) {
    LSC_CHECK(loss.valid() && loss.numel() == 1,
              "backward: loss must be a scalar tensor, got "
                  << (loss.valid() ? shape_str(loss.shape()) : std::string("<null>")));
    LSC_CHECK(loss.node()->backward || loss.node()->requires_grad,
              "backward: loss is not connected to the tape");
    for (auto& n : ops_) {
      n->grad_ready = false;
      for (auto& in : n->inputs) in->grad_ready = false;
    }
    loss.node()->ensure_grad();
    loss.node()->grad[0] = R(1);
    for (auto it = ops_.rbegin(); it != ops_.rend(); ++it) {
      detail::Node<R>* n = it->get();
      if (n->grad_ready && n->backward) n->backward();
    }
  }

 private:
  std::vector<std::shared_ptr<detail::Node<R>>> ops_;
};

// RAII scope that makes a fresh tape current on this thread.
template <class R>
class TapeScope {
 public:
  TapeScope() : prev_(Tape<R>::current()) { Tape<R>::current() = &tape_; }
  ~TapeScope() { Tape<R>::current() = prev_; }
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

  Tape<R>& tape() { return tape_; }

 private:
  Tape<R> tape_;
  Tape<R>* prev_;
};

// Suspends recording (forward-only evaluation).
template <class R>
class NoGradScope {
 public:
  NoGradScope() : prev_(Tape<R>::current()) { Tape<R>::current() = nullptr; }
  ~NoGradScope() { Tape<R>::current() = prev_; }
  NoGradScope(const NoGradScope&) = delete;
  NoGradScope& operator=(const NoGradScope&) = delete;

 private:
  Tape<R>* prev_;
};

}  // namespace lsc
