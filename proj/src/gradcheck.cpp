#include "dpbnet/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "dpbnet/random.hpp"

namespace dpbn {

namespace {

Real evaluate(const ScalarGraph& graph, const std::vector<Tensor>& inputs) {
  Tape tape(false);
  std::vector<Var> leaves;
  leaves.reserve(inputs.size());
  for (const Tensor& t : inputs) leaves.push_back(tape.leaf(t));
  return graph(tape, leaves).value().item();
}

}  // namespace

GradCheckResult check_gradients(const ScalarGraph& graph, const std::vector<Tensor>& inputs,
                                const GradCheckOptions& options) {
  std::vector<Tensor> analytic;
  {
    Tape tape(true);
    std::vector<Var> leaves;
    for (const Tensor& t : inputs) leaves.push_back(tape.leaf(t));
    Var loss = graph(tape, leaves);
    tape.backward(loss);
    for (const Var& v : leaves) analytic.push_back(tape.grad(v.id));
  }

  std::vector<std::pair<std::size_t, std::size_t>> coords;
  for (std::size_t i = 0; i < inputs.size(); ++i)
    for (std::size_t j = 0; j < inputs[i].size(); ++j) coords.emplace_back(i, j);
  if (options.max_coords > 0 && coords.size() > options.max_coords) {
    Rng rng(options.seed);
    for (std::size_t i = 0; i < options.max_coords; ++i) {
      const std::size_t pick = i + static_cast<std::size_t>(rng.uniform_int(coords.size() - i));
      std::swap(coords[i], coords[pick]);
    }
    coords.resize(options.max_coords);
  }

  std::vector<Real> floors;
  for (const Tensor& g : analytic) floors.push_back(std::max(options.scale_floor, options.norm_floor * max_abs(g)));
  if (options.global_floor) {
    const Real top = *std::max_element(floors.begin(), floors.end());
    std::fill(floors.begin(), floors.end(), top);
  }

  GradCheckResult result;
  std::vector<Tensor> probe = inputs;
  for (const auto& [i, j] : coords) {
    const Real orig = probe[i][j];
    probe[i][j] = orig + options.step;
    const Real fp = evaluate(graph, probe);
    probe[i][j] = orig - options.step;
    const Real fm = evaluate(graph, probe);
    probe[i][j] = orig;
    const Real numeric = (fp - fm) / (Real(2) * options.step);
    const Real a = analytic[i][j];
    const Real abs_err = std::abs(a - numeric);
    const Real rel = abs_err / std::max({std::abs(a), std::abs(numeric), floors[i]});
    result.max_abs_error = std::max(result.max_abs_error, abs_err);
    if (rel > result.max_rel_error || result.worst.empty()) {
      result.max_rel_error = std::max(result.max_rel_error, rel);
      std::ostringstream os;
      os.precision(12);
      os << "input[" << i << "] element " << j << ": analytic " << a << ", numeric " << numeric;
      result.worst = os.str();
    }
    ++result.coords_checked;
  }
  return result;
}

}  // namespace dpbn
