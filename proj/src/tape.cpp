#include "dpbnet/tape.hpp"

#include <algorithm>
#include <stdexcept>

namespace dpbn {

const Tensor& Var::value() const {
  if (!tape) throw std::logic_error("Var is not bound to a tape");
  return tape->value(id);
}

Var Tape::push(std::string_view op, Tensor value, bool requires_grad, BackwardFn backward) {
  if (!value.all_finite()) {
    throw std::runtime_error("non-finite value produced by op '" + std::string(op) + "' with shape " +
                             shape_str(value.shape()));
  }
  Node node;
  node.op = std::string(op);
  node.value = std::move(value);
  node.requires_grad = requires_grad;
  if (requires_grad) node.backward = std::move(backward);
  nodes_.push_back(std::move(node));
  return Var{this, nodes_.size() - 1};
}

Var Tape::leaf(Tensor value) { return push("leaf", std::move(value), grad_enabled_, nullptr); }

Var Tape::constant(Tensor value) { return push("constant", std::move(value), false, nullptr); }

Var Tape::record(std::string_view op, Tensor value, std::initializer_list<Var> inputs, BackwardFn backward) {
  return record(op, std::move(value), std::vector<Var>(inputs), std::move(backward));
}

Var Tape::record(std::string_view op, Tensor value, const std::vector<Var>& inputs, BackwardFn backward) {
  bool needs = false;
  for (const Var& v : inputs) {
    if (v.tape != this) throw std::logic_error("op '" + std::string(op) + "' mixes vars from different tapes");
    needs = needs || nodes_[v.id].requires_grad;
  }
  return push(op, std::move(value), grad_enabled_ && needs, std::move(backward));
}

Tensor Tape::grad(NodeId id) const {
  const Node& n = nodes_.at(id);
  if (n.grad) return *n.grad;
  return Tensor(n.value.shape(), Real(0));
}

void Tape::accumulate(NodeId id, const Tensor& g) {
  Node& n = nodes_.at(id);
  if (!n.requires_grad) return;
  if (g.size() != n.value.size()) {
    throw std::logic_error("gradient shape " + shape_str(g.shape()) + " does not match value shape " +
                           shape_str(n.value.shape()) + " for op '" + n.op + "'");
  }
  if (!n.grad) {
    n.grad = g.reshaped(n.value.shape());
    return;
  }
  auto dst = n.grad->data();
  auto src = g.data();
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

void Tape::backward(Var loss) {
  if (loss.tape != this) throw std::logic_error("backward() on a var from another tape");
  if (!grad_enabled_) throw std::logic_error("backward() on a tape with gradients disabled");
  const Tensor& lv = nodes_.at(loss.id).value;
  if (lv.size() != 1) throw std::invalid_argument("backward() needs a scalar loss, got shape " + shape_str(lv.shape()));
  for (Node& n : nodes_) n.grad.reset();
  accumulate(loss.id, Tensor(lv.shape(), Real(1)));
  for (NodeId i = loss.id + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (!n.grad || !n.backward) continue;
    // Inputs always precede their op, so the rule never writes n.grad.
    n.backward(*this, *n.grad);
  }
}

std::size_t Tape::count_ops(std::string_view op) const {
  return static_cast<std::size_t>(
      std::count_if(nodes_.begin(), nodes_.end(), [&](const Node& n) { return n.op == op; }));
}

}  // namespace dpbn
