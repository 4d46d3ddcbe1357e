#include "vig3d/tape.hpp"

#include "vig3d/error.hpp"

namespace vig3d {

namespace {
std::string& fault_slot() {
  static std::string op;
  return op;
}
}  // namespace

void set_backward_fault(std::string op) { fault_slot() = std::move(op); }
const std::string& backward_fault() { return fault_slot(); }

const Tensor5& Var::value() const { return tape->value(*this); }

Var Tape::constant(Tensor5 value) {
  Node& n = nodes_.emplace_back();
  n.value = std::move(value);
  n.op = "constant";
  return {this, nodes_.size() - 1};
}

Var Tape::input(Tensor5 value) {
  Node& n = nodes_.emplace_back();
  n.value = std::move(value);
  n.requires_grad = grad_enabled_;
  n.op = "input";
  return {this, nodes_.size() - 1};
}

Var Tape::param(Parameter& p) {
  Node& n = nodes_.emplace_back();
  n.value = p.value;
  n.requires_grad = grad_enabled_;
  n.sink = &p;
  n.op = "param";
  return {this, nodes_.size() - 1};
}

Var Tape::record(std::string_view op, Tensor5 value, std::initializer_list<Var> parents, BackwardFn backward) {
  return record(op, std::move(value), std::vector<Var>(parents), std::move(backward));
}

Var Tape::record(std::string_view op, Tensor5 value, const std::vector<Var>& parents, BackwardFn backward) {
  bool needs = false;
  for (const Var& p : parents) needs = needs || nodes_[p.id].requires_grad;
  ++counts_[std::string(op)];
  Node& n = nodes_.emplace_back();
  n.value = std::move(value);
  n.op = op;
  n.requires_grad = grad_enabled_ && needs;
  if (n.requires_grad) {
    if (!backward_fault().empty() && backward_fault() == op) {
      n.backward = [inner = std::move(backward)](Tape& t, const Tensor5& g) {
        Tensor5 skewed = g;
        for (double& v : skewed.data()) v *= 1.0 + 1e-2;
        inner(t, skewed);
      };
    } else {
      n.backward = std::move(backward);
    }
  }
  return {this, nodes_.size() - 1};
}

Tensor5& Tape::grad_buffer(Var v) {
  Node& n = nodes_[v.id];
  if (!n.has_grad) {
    n.grad = Tensor5(n.value.shape());
    n.has_grad = true;
  }
  return n.grad;
}

const Tensor5* Tape::grad(Var v) const {
  const Node& n = nodes_[v.id];
  return n.has_grad ? &n.grad : nullptr;
}

void Tape::backward(Var root) {
  if (root.tape != this) throw Error("backward: variable belongs to another tape");
  if (nodes_[root.id].value.numel() != 1) {
    throw DimensionMismatch("backward", "numel", 1, nodes_[root.id].value.numel());
  }
  grad_buffer(root).fill(1.0);
  for (std::size_t i = root.id + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (!n.has_grad) continue;
    if (n.backward) {
      n.backward(*this, n.grad);
      // Interior results never surface their gradient; release it eagerly.
      if (i != root.id) {
        n.grad = Tensor5();
        n.has_grad = false;
      }
    } else if (n.sink != nullptr) {
      Tensor5& dst = n.sink->grad;
      for (std::size_t k = 0; k < dst.numel(); ++k) dst[k] += n.grad[k];
    }
  }
}

std::size_t Tape::op_count(std::string_view op) const {
  auto it = counts_.find(op);
  return it == counts_.end() ? 0 : it->second;
}

}  // namespace vig3d
