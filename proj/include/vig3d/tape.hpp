#pragma once

#include <cstddef>
#include <deque>
#include <functional>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "vig3d/tensor.hpp"

namespace vig3d {

/// A named trainable array with its accumulated gradient.
struct Parameter {
  std::string name;
  Tensor5 value;
  Tensor5 grad;

  Parameter(std::string n, Tensor5 v) : name(std::move(n)), value(std::move(v)), grad(value.shape()) {}
  void zero_grad() { grad.fill(0.0); }
};

class Tape;

/// Handle to a value recorded on a tape. Cheap to copy; valid while the tape lives.
struct Var {
  Tape* tape = nullptr;
  std::size_t id = 0;

  const Tensor5& value() const;
  const Shape5& shape() const { return value().shape(); }
};

/// Reverse-mode operation tape. One tape per forward pass; confined to one thread.
///
/// Ops append nodes in evaluation order, so reverse id order is a valid topological
/// order for backpropagation. Parameters bound with `param` receive their gradient
/// (accumulated, not overwritten) when `backward` finishes.
class Tape {
 public:
  /// Backward closure: receives the tape and the gradient flowing into this node's output.
  using BackwardFn = std::function<void(Tape&, const Tensor5& grad_out)>;

  explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Tensor5 value);
  Var input(Tensor5 value);
  Var param(Parameter& p);

  /// Append an op result. `backward` is dropped when no parent requires a gradient.
  Var record(std::string_view op, Tensor5 value, std::initializer_list<Var> parents, BackwardFn backward);
  Var record(std::string_view op, Tensor5 value, const std::vector<Var>& parents, BackwardFn backward);

  bool grad_enabled() const { return grad_enabled_; }
  bool requires_grad(Var v) const { return nodes_[v.id].requires_grad; }
  const Tensor5& value(Var v) const { return nodes_[v.id].value; }

  /// Mutable gradient buffer of `v`, allocated as zeros on first access.
  Tensor5& grad_buffer(Var v);
  /// Gradient of `v` after `backward`; nullptr if none flowed.
  const Tensor5* grad(Var v) const;

  /// Backpropagate from a single-element root with seed 1.
  void backward(Var root);

  std::size_t size() const { return nodes_.size(); }
  /// Number of times an op (or noted event) was recorded on this tape.
  std::size_t op_count(std::string_view op) const;
  void note(std::string_view event) { ++counts_[std::string(event)]; }

 private:
  struct Node {
    Tensor5 value;
    Tensor5 grad;
    bool has_grad = false;
    bool requires_grad = false;
    BackwardFn backward;
    Parameter* sink = nullptr;
    std::string_view op;
  };

  std::deque<Node> nodes_;
  std::map<std::string, std::size_t, std::less<>> counts_;
  bool grad_enabled_;
};

// Test fixture hook: scales the backward pass of the named op by (1 + 1e-2) so the
// gradient-check suite can prove it detects a broken derivative. Empty disables.
void set_backward_fault(std::string op);
const std::string& backward_fault();

}  // namespace vig3d
