#pragma once

#include <optional>

#include "dpbnet/position_transform.hpp"
#include "dpbnet/random.hpp"
#include "dpbnet/tape.hpp"

namespace dpbn {

/// Weights of one shuffle-then-reorder attention module.
struct SramParams {
  Tensor ratio_weight;  // [3 * kCanonicalRatios.size(), 2C]
  Tensor ratio_bias;    // [3 * kCanonicalRatios.size()]
  Tensor attn_kernel;   // [1, 2, k, k, k]
  Tensor attn_bias;     // [1]

  int channels() const { return ratio_weight.dim(1) / 2; }
  int kernel_size() const { return attn_kernel.dim(2); }

  /// Attention conv: fan-in scaled uniform weights, zero bias. Ratio head:
  /// uniform in +-1/sqrt(2C) with zero bias.
  static SramParams init(int channels, int kernel_size, Rng& rng);
};

/// SramParams bound to a tape. The ratio head is read by value only.
struct SramVars {
  Var ratio_weight, ratio_bias, attn_kernel, attn_bias;
};

/// Per-channel spatial max followed by per-channel spatial mean: [C,H,W,D] -> [2C].
Tensor channel_descriptor(const Tensor& features);
Var channel_descriptor(Var features);
/// Channel-wise max (channel 0) and mean (channel 1): [C,H,W,D] -> [2,H,W,D].
Tensor spatial_descriptor(const Tensor& features);
Var spatial_descriptor(Var features);

/// Ratios chosen by the head for these features (hard argmax, no gradient).
Ratios sram_ratios(const Tensor& features, const Tensor& ratio_weight, const Tensor& ratio_bias);

struct SramResult {
  Var refined;
  Ratios ratios{1, 1, 1};
};

/// refined = (sigmoid(reorder(conv(shuffle(spatial_descriptor(F))))) + 1) * F.
/// `forced` overrides the head's ratio choice.
SramResult sram_forward(Var features, const SramVars& params, std::optional<Ratios> forced = std::nullopt);
Tensor sram_forward(const Tensor& features, const SramParams& params, std::optional<Ratios> forced = std::nullopt);

}  // namespace dpbn
