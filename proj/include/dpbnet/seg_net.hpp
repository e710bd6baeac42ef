#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "dpbnet/position_transform.hpp"
#include "dpbnet/tape.hpp"

namespace dpbn {

/// Shape of the encoder-decoder. Stage s runs at 1/2^s resolution with
/// channels[s] features; sram[s] inserts an attention module after it.
struct Architecture {
  std::vector<int> channels{8, 16, 32};
  std::vector<bool> sram{true, true, true};
  int sram_kernel = 7;
  int boundary_k = 5;

  int stages() const { return static_cast<int>(channels.size()); }
  /// Spatial extents must be multiples of this.
  int divisor() const { return 1 << (stages() - 1); }
  void validate() const;

  std::string to_text() const;  // compact JSON
  static Architecture from_text(std::string_view text);
  bool operator==(const Architecture&) const = default;
};

using NamedTensors = std::vector<std::pair<std::string, Tensor>>;

struct ModelParams {
  Architecture arch;
  NamedTensors tensors;

  const Tensor& at(std::string_view name) const;
  Tensor& at(std::string_view name);
  bool contains(std::string_view name) const;
  std::size_t parameter_count() const;
};

/// Ratio heads get no gradient; everything else is optimised.
bool is_trainable(std::string_view name);

/// Deterministic per seed. Convolutions: uniform +-sqrt(6/fan_in), zero bias;
/// residual-closing convs are scaled by 0.1 and sigmoid-facing convs use
/// +-sqrt(3/fan_in).
ModelParams init_model(const Architecture& arch, std::uint64_t seed);

/// Model parameters bound to a tape, in ModelParams order.
struct BoundParams {
  const ModelParams* model = nullptr;
  std::vector<Var> vars;

  Var get(std::string_view name) const;
};

/// Trainable tensors become leaves (when the tape records gradients), the
/// rest constants.
BoundParams bind_params(Tape& tape, const ModelParams& params);

struct ForwardResult {
  Var prob;                   // [H,W,D]
  std::vector<Ratios> ratios;  // one entry per active SRAM, encoder order
};

/// input is [1,H,W,D]; H, W, D must be multiples of arch.divisor().
/// `forced_ratios`, when set, replaces each SRAM's own choice.
ForwardResult forward(const BoundParams& params, Var input,
                      const std::optional<std::vector<Ratios>>& forced_ratios = std::nullopt);
/// Inference without gradients. input is [H,W,D] or [1,H,W,D]; returns [H,W,D].
Tensor forward(const ModelParams& params, const Tensor& input);

/// Binary checkpoint: "DPBN", u32 version, u32-length architecture text,
/// u32 tensor count, then per tensor u32-length name, u32 rank, u32 dims and
/// little-endian f64 values. `extra` tensors (optimizer state) follow the
/// model tensors under their own names.
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  ModelParams params;
  NamedTensors extra;
};

void save_checkpoint(const std::string& path, const ModelParams& params, const NamedTensors& extra = {});
Checkpoint load_checkpoint(const std::string& path);

}  // namespace dpbn
