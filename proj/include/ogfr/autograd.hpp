#pragma once

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <string>
#include <unordered_map>
#include <vector>

#include "ogfr/tensor.hpp"

namespace ogfr {

/// A named trainable tensor living outside any tape. Tapes read it through
/// Tape::param() and accumulate into `grad` on backward.
template <typename T>
struct Parameter {
  std::string name;
  Tensor<T> value;
  Tensor<T> grad;
  bool weight_decay = true;
  // False for parameters owned by a non-gradient update rule (the erasing agent).
  bool sgd = true;

  void zero_grad() {
    if (grad.shape() != value.shape()) grad = Tensor<T>(value.shape());
    grad.fill(T(0));
  }
};

template <typename T>
class Tape;

/// Handle to a node recorded on a tape.
template <typename T>
class Var {
 public:
  Var() = default;
  Var(Tape<T>* tape, std::size_t id) : tape_(tape), id_(id) {}

  const Tensor<T>& value() const;
  const Shape& shape() const { return value().shape(); }
  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }
  T item() const { return value().item(); }

  Tape<T>& tape() const { return *tape_; }
  std::size_t id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }

 private:
  Tape<T>* tape_ = nullptr;
  std::size_t id_ = 0;
};

/// Reverse-mode tape. Nodes are appended in evaluation order, so the node
/// index is already a topological order and backward is a single reverse scan.
template <typename T>
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, std::size_t)>;

  explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool grad_enabled() const { return grad_enabled_; }
  void set_check_finite(bool on) { check_finite_ = on; }
  std::size_t size() const { return nodes_.size(); }

  Var<T> constant(Tensor<T> value) { return push("constant", std::move(value), false, {}, nullptr); }

  /// Gradient barrier. With a log attached, record mode appends each stopped
  /// value and replay mode substitutes the logged values in call order, so a
  /// perturbed re-evaluation sees the stopped values of the base point.
  Var<T> stop_gradient(const Tensor<T>& value) {
    if (stop_log_ == nullptr) return constant(value);
    if (!replay_stops_) {
      stop_log_->push_back(value);
      return constant(value);
    }
    if (stop_cursor_ >= stop_log_->size()) throw ContractError("stop_gradient replay: log exhausted");
    const Tensor<T>& frozen = (*stop_log_)[stop_cursor_++];
    require_same_shape(frozen, value, "stop_gradient replay");
    return constant(frozen);
  }
  void record_stops(std::vector<Tensor<T>>* log) { stop_log_ = log, replay_stops_ = false, stop_cursor_ = 0; }
  void replay_stops(const std::vector<Tensor<T>>* log) {
    stop_log_ = const_cast<std::vector<Tensor<T>>*>(log), replay_stops_ = true, stop_cursor_ = 0;
  }

  /// Free-standing differentiable input; its gradient is read back with grad().
  Var<T> leaf(Tensor<T> value) { return push("leaf", std::move(value), grad_enabled_, {}, nullptr); }

  /// Registers a parameter once per tape; later calls return the same node.
  Var<T> param(Parameter<T>& p) {
    if (auto it = param_nodes_.find(&p); it != param_nodes_.end()) return Var<T>(this, it->second);
    Var<T> v = push(p.name.c_str(), p.value, grad_enabled_, {}, nullptr);
    nodes_[v.id()].param = &p;
    param_nodes_.emplace(&p, v.id());
    return v;
  }

  /// Appends an operation result. The backward rule runs only if some input needs a gradient.
  Var<T> record(const char* op, Tensor<T> value, std::initializer_list<Var<T>> inputs, BackwardFn fn) {
    bool needs = false;
    for (const Var<T>& in : inputs) needs = needs || nodes_[in.id()].needs_grad;
    return push(op, std::move(value), needs && grad_enabled_, inputs, needs ? std::move(fn) : nullptr);
  }
  Var<T> record(const char* op, Tensor<T> value, const std::vector<Var<T>>& inputs, BackwardFn fn) {
    bool needs = false;
    for (const Var<T>& in : inputs) needs = needs || nodes_[in.id()].needs_grad;
    return push(op, std::move(value), needs && grad_enabled_, {}, needs ? std::move(fn) : nullptr);
  }

  const Tensor<T>& value(std::size_t id) const { return nodes_[id].value; }
  bool needs_grad(std::size_t id) const { return nodes_[id].needs_grad; }

  /// Gradient buffer of a node, allocated as zeros on first access.
  Tensor<T>& grad_ref(std::size_t id) {
    Node& n = nodes_[id];
    if (n.grad.shape() != n.value.shape()) n.grad = Tensor<T>(n.value.shape());
    return n.grad;
  }
  const Tensor<T>& out_grad(std::size_t id) { return grad_ref(id); }

  /// Gradient of the last backward() with respect to `v`; zeros if unreached.
  Tensor<T> grad(Var<T> v) {
    const Node& n = nodes_[v.id()];
    if (n.grad.shape() != n.value.shape()) return Tensor<T>(n.value.shape());
    return n.grad;
  }

  void backward(Var<T> out) {
    if (out.value().numel() != 1) {
      throw ContractError("backward() needs a scalar output, got shape " + shape_str(out.shape()));
    }
    backward(out, Tensor<T>(out.shape(), T(1)));
  }

  /// Vector-Jacobian product seeded with `seed`. Clears previous node gradients
  /// and adds the result into every registered parameter's grad.
  void backward(Var<T> out, const Tensor<T>& seed) {
    if (!grad_enabled_) throw ContractError("backward() on a tape recorded without gradients");
    require_same_shape(seed, out.value(), "backward seed");
    for (Node& n : nodes_) n.grad = Tensor<T>();
    grad_ref(out.id()) = seed;
    for (std::size_t i = out.id() + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.needs_grad || n.grad.numel() == 0 || !n.backward) continue;
      n.backward(*this, i);
    }
    for (Node& n : nodes_) {
      if (n.param == nullptr || n.grad.numel() == 0) continue;
      Parameter<T>& p = *n.param;
      if (p.grad.shape() != p.value.shape()) p.zero_grad();
      for (std::size_t k = 0; k < p.grad.numel(); ++k) p.grad[k] += n.grad[k];
    }
  }

 private:
  struct Node {
    Tensor<T> value;
    Tensor<T> grad;
    bool needs_grad = false;
    BackwardFn backward;
    Parameter<T>* param = nullptr;
  };

  Var<T> push(const char* op, Tensor<T> value, bool needs_grad, std::initializer_list<Var<T>>, BackwardFn fn) {
    if (check_finite_ && !value.all_finite()) {
      throw NumericError(std::string("non-finite value produced by '") + op + "' (node " +
                         std::to_string(nodes_.size()) + ", shape " + shape_str(value.shape()) + ")");
    }
    nodes_.push_back(Node{std::move(value), Tensor<T>(), needs_grad, std::move(fn), nullptr});
    return Var<T>(this, nodes_.size() - 1);
  }

  std::vector<Node> nodes_;
  std::unordered_map<const Parameter<T>*, std::size_t> param_nodes_;
  bool grad_enabled_ = true;
  bool check_finite_ = false;
  std::vector<Tensor<T>>* stop_log_ = nullptr;
  bool replay_stops_ = false;
  std::size_t stop_cursor_ = 0;
};

template <typename T>
const Tensor<T>& Var<T>::value() const {
  return tape_->value(id_);
}

}  // namespace ogfr
