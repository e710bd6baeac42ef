#include "dpbnet/sram.hpp"

#include <cmath>
#include <stdexcept>

#include "dpbnet/ops.hpp"

namespace dpbn {

SramParams SramParams::init(int channels, int kernel_size, Rng& rng) {
  if (channels < 1) throw std::invalid_argument("SRAM channel count must be positive");
  if (kernel_size < 1 || kernel_size % 2 == 0) throw std::invalid_argument("SRAM kernel size must be odd");
  const int logits = 3 * static_cast<int>(kCanonicalRatios.size());
  SramParams p;
  const double head_bound = 1.0 / std::sqrt(2.0 * channels);
  p.ratio_weight = uniform_tensor({logits, 2 * channels}, rng, -head_bound, head_bound);
  p.ratio_bias = Tensor(Shape{logits}, 0);
  const double fan_in = 2.0 * kernel_size * kernel_size * kernel_size;
  const double bound = std::sqrt(3.0 / fan_in);
  p.attn_kernel = uniform_tensor({1, 2, kernel_size, kernel_size, kernel_size}, rng, -bound, bound);
  p.attn_bias = Tensor(Shape{1}, 0);
  return p;
}

Tensor channel_descriptor(const Tensor& features) {
  const Tensor mx = pool_spatial(features, PoolMode::max);
  const Tensor av = pool_spatial(features, PoolMode::avg);
  std::vector<Real> d(mx.data().begin(), mx.data().end());
  d.insert(d.end(), av.data().begin(), av.data().end());
  const int n = static_cast<int>(d.size());
  return Tensor(Shape{n}, std::move(d));
}

Var channel_descriptor(Var features) {
  return concat_channels({pool_spatial(features, PoolMode::max), pool_spatial(features, PoolMode::avg)});
}

Tensor spatial_descriptor(const Tensor& features) {
  const Tensor mx = pool_channel(features, PoolMode::max);
  const Tensor av = pool_channel(features, PoolMode::avg);
  std::vector<Real> d(mx.data().begin(), mx.data().end());
  d.insert(d.end(), av.data().begin(), av.data().end());
  const Dims3 s = features.spatial();
  return Tensor(Shape{2, s.h, s.w, s.d}, std::move(d));
}

Var spatial_descriptor(Var features) {
  return concat_channels({pool_channel(features, PoolMode::max), pool_channel(features, PoolMode::avg)});
}

Ratios sram_ratios(const Tensor& features, const Tensor& ratio_weight, const Tensor& ratio_bias) {
  const Dims3 shape = features.spatial();
  const Tensor logits = linear(channel_descriptor(features), ratio_weight, ratio_bias);
  const RatioMenu menu = RatioMenu::for_shape(shape);
  return select_ratios(menu_logits(logits.data(), menu), shape, menu);
}

SramResult sram_forward(Var features, const SramVars& params, std::optional<Ratios> forced) {
  const Tensor& f = features.value();
  if (f.rank() != 4) throw std::invalid_argument("SRAM expects [C,H,W,D] features, got " + shape_str(f.shape()));
  SramResult out;
  out.ratios = forced ? *forced : sram_ratios(f, params.ratio_weight.value(), params.ratio_bias.value());
  const ShufflePlan plan = ShufflePlan::build(f.spatial(), out.ratios);

  Var desc = spatial_descriptor(features);
  if (!plan.is_identity()) desc = shuffle(desc, plan);
  Var logits = conv3d(desc, params.attn_kernel, params.attn_bias, 1, Padding::zero);
  if (!plan.is_identity()) logits = reorder(logits, plan);
  out.refined = residual_gate(sigmoid(logits), features);
  return out;
}

Tensor sram_forward(const Tensor& features, const SramParams& params, std::optional<Ratios> forced) {
  Tape tape(false);
  SramVars v{tape.constant(params.ratio_weight), tape.constant(params.ratio_bias), tape.constant(params.attn_kernel),
             tape.constant(params.attn_bias)};
  return sram_forward(tape.constant(features), v, forced).refined.value();
}

}  // namespace dpbn
