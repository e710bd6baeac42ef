#pragma once

#include <array>
#include <span>
#include <vector>

#include "dpbnet/tape.hpp"
#include "dpbnet/tensor.hpp"

namespace dpbn {

/// Shuffled 1-based position of index i for a size = groups * ratio axis:
/// writing i-1 = q*groups + m, the result is m*ratio + q + 1.
int kappa(int i, int groups, int ratio);

/// One axis of a shuffle plan. `forward[i]` is the 0-based destination of
/// source position i; `inverse` undoes it.
struct AxisPermutation {
  int size = 1;
  int ratio = 1;
  int groups = 1;
  std::vector<int> forward;
  std::vector<int> inverse;

  bool is_identity() const;
};

using Ratios = std::array<int, 3>;

/// Per-axis (H, W, D) kappa permutations for a volume shape.
class ShufflePlan {
 public:
  /// Throws if a ratio does not divide its axis, naming axis and ratio.
  static ShufflePlan build(const Dims3& shape, const Ratios& ratios);
  static ShufflePlan identity(const Dims3& shape) { return build(shape, {1, 1, 1}); }

  const AxisPermutation& axis(int a) const { return axes_[static_cast<std::size_t>(a)]; }
  Dims3 shape() const { return {axes_[0].size, axes_[1].size, axes_[2].size}; }
  Ratios ratios() const { return {axes_[0].ratio, axes_[1].ratio, axes_[2].ratio}; }
  bool is_identity() const;

 private:
  std::array<AxisPermutation, 3> axes_;
};

/// out[:, kappa(h), kappa(w), kappa(d)] = in[:, h, w, d] (1-based kappa).
Tensor shuffle(const Tensor& features, const ShufflePlan& plan);
/// Inverse of shuffle; reorder(shuffle(x)) == x bitwise.
Tensor reorder(const Tensor& shuffled, const ShufflePlan& plan);
Var shuffle(Var features, const ShufflePlan& plan);
Var reorder(Var shuffled, const ShufflePlan& plan);

/// Candidate ratios per axis, ascending.
struct RatioMenu {
  std::array<std::vector<int>, 3> axes;

  std::size_t total() const { return axes[0].size() + axes[1].size() + axes[2].size(); }
  /// {1} together with the members of {2, 4, 8, 16} that divide each extent.
  static RatioMenu for_shape(const Dims3& shape);
};

/// Ratios a head can emit logits for, independent of input shape.
inline constexpr std::array<int, 5> kCanonicalRatios{1, 2, 4, 8, 16};

/// Per axis, the candidate with the largest logit; ties go to the smaller
/// ratio, an empty menu yields 1. `logits` are laid out axis by axis in menu
/// order.
Ratios select_ratios(std::span<const Real> logits, const Dims3& shape, const RatioMenu& menu);

/// Picks the logits of the valid menu entries out of a canonical
/// 3 * kCanonicalRatios.size() head output.
std::vector<Real> menu_logits(std::span<const Real> canonical_logits, const RatioMenu& menu);

}  // namespace dpbn
