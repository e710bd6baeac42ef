#pragma once

#include <array>
#include <span>
#include <vector>

#include "dpbnet/tape.hpp"
#include "dpbnet/tensor.hpp"

namespace dpbn {

enum class Padding { zero, replicate };
enum class PoolMode { max, avg };

// Tensor-level convolution. Input [C_in,H,W,D], kernel [C_out,C_in,k,k,k],
// bias [C_out] or empty. "Same" padding of (k-1)/2 on each side; output
// extent is (n-1)/stride + 1 per spatial dim.
Tensor conv3d(const Tensor& input, const Tensor& kernel, const Tensor& bias, int stride, Padding padding);

struct Conv3dGrads {
  Tensor input;
  Tensor kernel;
  Tensor bias;
};

Conv3dGrads conv3d_backward(const Tensor& input, const Tensor& kernel, const Tensor& grad_out, int stride,
                            Padding padding, bool need_input_grad = true);

// Differentiable ops. Every op records its backward rule on the input's tape.
Var conv3d(Var input, Var kernel, Var bias, int stride, Padding padding);
Var relu(Var x);
Var sigmoid(Var x);
Var add(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var x, Real factor);
Var sum(Var x);
Var reshape(Var x, Shape shape);
/// Concatenation along dim 0; trailing dims must agree.
Var concat_channels(const std::vector<Var>& parts);
/// [C,H,W,D] -> [C,2H,2W,2D], each voxel copied to its 2x2x2 block.
Var upsample_nearest2x(Var x);
/// x [n], weight [m,n], bias [m] -> [m].
Var linear(Var x, Var weight, Var bias);
/// [C,H,W,D] -> [C], reduced over all spatial positions.
Var pool_spatial(Var x, PoolMode mode);
/// [C,H,W,D] -> [1,H,W,D], reduced over channels.
Var pool_channel(Var x, PoolMode mode);
/// (attn + 1) * features with attn [1,H,W,D] broadcast over the C channels of features.
Var residual_gate(Var attn, Var features);

/// Gathers spatial positions: out[c, h, w, d] = in[c, src_h[h], src_w[w], src_d[d]].
/// The index arrays must be permutations of their axis. Records op "permute".
Var permute_spatial(Var x, std::span<const int> src_h, std::span<const int> src_w, std::span<const int> src_d);
Tensor permute_spatial(const Tensor& x, std::span<const int> src_h, std::span<const int> src_w,
                       std::span<const int> src_d);

// Tensor-level pooling, shared with code that does not need a tape.
Tensor pool_spatial(const Tensor& x, PoolMode mode);
Tensor pool_channel(const Tensor& x, PoolMode mode);
Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias);

}  // namespace dpbn
