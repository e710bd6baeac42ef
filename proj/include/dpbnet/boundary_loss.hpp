#pragma once

#include "dpbnet/tape.hpp"
#include "dpbnet/tensor.hpp"

namespace dpbn {

inline constexpr Real kDefaultEpsilon = Real(1e-5);
inline constexpr int kDefaultBoundaryK = 5;
inline constexpr Real kProbabilityClamp = Real(1e-7);

/// Throws unless every value is exactly 0 or 1.
void require_binary(const Tensor& mask, const char* what);

/// Foreground count in the k^3 neighbourhood of every voxel, centre included,
/// with replicate padding at the volume border. mask is [H,W,D].
Tensor neighbor_count(const Tensor& mask, int k);

/// Per-voxel weights: k^3 - count + 1 on foreground, count + 1 on background.
/// Interior voxels get 1, boundary voxels 1 + (opposite-label neighbours).
struct DfbMap {
  Tensor weights;
  int k = kDefaultBoundaryK;
};

DfbMap dfb_map(const Tensor& mask, int k);

/// 1 - 2 (sum w p g + eps) / (sum (w p + w g) + eps).
Real dfb_loss(const Tensor& prob, const Tensor& mask, const Tensor& weights, Real eps = kDefaultEpsilon);
Real dfb_loss(const Tensor& prob, const Tensor& mask, const DfbMap& map, Real eps = kDefaultEpsilon);
/// d(dfb_loss)/dp_i = -2 w_i g_i / S_den + 2 S_num w_i / S_den^2.
Tensor dfb_loss_grad(const Tensor& prob, const Tensor& mask, const Tensor& weights, Real eps = kDefaultEpsilon);

/// Mean binary cross-entropy with p clamped to [1e-7, 1 - 1e-7].
Real ce_loss(const Tensor& prob, const Tensor& mask);
Tensor ce_loss_grad(const Tensor& prob, const Tensor& mask);

// Tape ops with the analytic rules above. Weights and mask are constants.
Var dfb_loss(Var prob, const Tensor& mask, const Tensor& weights, Real eps = kDefaultEpsilon);
Var ce_loss(Var prob, const Tensor& mask);

struct LossTerms {
  Var total;
  Real ce = 0;
  Real boundary = 0;
};

/// ce + weighted Dice. `weights` is a DFB map (or any other boundary weighting).
LossTerms total_loss(Var prob, const Tensor& mask, const Tensor& weights, Real eps = kDefaultEpsilon);
Real total_loss(const Tensor& prob, const Tensor& mask, int k, Real eps = kDefaultEpsilon);

}  // namespace dpbn
