#pragma once

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "dpbnet/tensor.hpp"

namespace dpbn {

using NodeId = std::size_t;
class Tape;

/// Handle to a value recorded on a Tape.
struct Var {
  Tape* tape = nullptr;
  NodeId id = 0;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
};

/// Backward rule: receives the gradient of the op's output and accumulates
/// into its inputs through Tape::accumulate.
using BackwardFn = std::function<void(Tape&, const Tensor& grad_out)>;

/// Records a computation for reverse-mode differentiation. Single owner,
/// single thread. With grad disabled it only stores values (inference).
class Tape {
 public:
  explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Trainable input; receives a gradient on backward().
  Var leaf(Tensor value);
  /// Input that never needs a gradient.
  Var constant(Tensor value);

  /// Adds an op output. The backward rule is kept only if some input needs a
  /// gradient. Throws if the value holds NaN/Inf.
  Var record(std::string_view op, Tensor value, std::initializer_list<Var> inputs, BackwardFn backward);
  Var record(std::string_view op, Tensor value, const std::vector<Var>& inputs, BackwardFn backward);

  const Tensor& value(NodeId id) const { return nodes_.at(id).value; }
  bool requires_grad(NodeId id) const { return nodes_.at(id).requires_grad; }
  bool has_grad(NodeId id) const { return nodes_.at(id).grad.has_value(); }
  /// Gradient of a node after backward(); zeros if the node was unreachable.
  Tensor grad(NodeId id) const;
  const std::string& op_name(NodeId id) const { return nodes_.at(id).op; }

  /// Seeds d(loss)/d(loss) = 1 and sweeps recorded ops in reverse order.
  void backward(Var loss);

  void accumulate(NodeId id, const Tensor& g);

  std::size_t size() const { return nodes_.size(); }
  std::size_t count_ops(std::string_view op) const;
  bool grad_enabled() const { return grad_enabled_; }

 private:
  struct Node {
    std::string op;
    Tensor value;
    std::optional<Tensor> grad;
    BackwardFn backward;
    bool requires_grad = false;
  };

  Var push(std::string_view op, Tensor value, bool requires_grad, BackwardFn backward);

  std::vector<Node> nodes_;
  bool grad_enabled_;
};

}  // namespace dpbn
