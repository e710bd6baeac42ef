#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "dpbnet/tape.hpp"

namespace dpbn {

/// Builds a scalar graph from leaves bound to the given tape.
using ScalarGraph = std::function<Var(Tape&, const std::vector<Var>&)>;

struct GradCheckOptions {
  Real step = Real(1e-5);
  /// Relative error is |a - n| / max(|a|, |n|, floor), where floor is the
  /// larger of scale_floor and norm_floor * max|a| over the same input tensor.
  /// The second term keeps cancellation noise in near-zero components from
  /// dominating.
  Real scale_floor = Real(1e-8);
  Real norm_floor = Real(1e-3);
  /// Take max|a| over every input instead of per input. For deep graphs,
  /// where early layers carry gradients orders of magnitude below the head
  /// and sit at the roundoff level of the loss.
  bool global_floor = false;
  /// Checks at most this many coordinates in total, drawn without replacement
  /// (0 = every coordinate).
  std::size_t max_coords = 0;
  std::uint64_t seed = 0;
};

struct GradCheckResult {
  Real max_rel_error = 0;
  Real max_abs_error = 0;
  std::size_t coords_checked = 0;
  std::string worst;  // "input[i] element j: analytic a, numeric n"
};

/// Compares reverse-mode gradients of `graph` at `inputs` with central
/// differences (f(x+h) - f(x-h)) / 2h.
GradCheckResult check_gradients(const ScalarGraph& graph, const std::vector<Tensor>& inputs,
                                const GradCheckOptions& options = {});

}  // namespace dpbn
