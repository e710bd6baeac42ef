#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "dpbnet/boundary_loss.hpp"
#include "dpbnet/eval.hpp"
#include "dpbnet/seg_net.hpp"
#include "dpbnet/volumes.hpp"

namespace dpbn {

enum class LossMode { ce_only, ce_edge, ce_dfb };

std::string to_string(LossMode mode);  // "ce_only", "ce+edge", "ce+dfb"
LossMode parse_loss_mode(std::string_view text);

struct AdamConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double weight_decay = 1e-4;
  double eps = 1e-8;

  void validate() const;
};

/// Moments for every trainable tensor, in ModelParams order.
struct AdamState {
  long step = 0;
  NamedTensors m;
  NamedTensors v;

  static AdamState zeros(const ModelParams& params);
  /// "adam/step", "adam/m/<name>", "adam/v/<name>".
  NamedTensors to_extra() const;
  static AdamState from_extra(const ModelParams& params, const NamedTensors& extra);
};

/// One Adam step with coupled L2 decay: g + wd * theta feeds both moments.
/// `grads` is keyed by tensor name; frozen tensors are left alone.
/// Throws before touching anything if a gradient holds NaN or Inf.
void adam_step(ModelParams& params, const NamedTensors& grads, AdamState& state, const AdamConfig& cfg);

/// 2 on foreground voxels with a background voxel in their k^3 neighbourhood,
/// 1 elsewhere.
Tensor edge_weights(const Tensor& mask, int k);
Real edge_loss(const Tensor& prob, const Tensor& mask, int k, Real eps = kDefaultEpsilon);
Var edge_loss(Var prob, const Tensor& mask, int k, Real eps = kDefaultEpsilon);

struct TrainConfig {
  AdamConfig adam;
  long iterations = 2000;
  Dims3 crop{32, 32, 16};
  int dfb_k = kDefaultBoundaryK;
  double epsilon = kDefaultEpsilon;
  LossMode loss = LossMode::ce_dfb;
  Architecture arch;
  std::uint64_t seed = 0;
  std::string data_dir;
  double train_fraction = 0.8;
  std::uint64_t split_seed = 0;
  long checkpoint_every = 0;  // 0 = only at the end
  std::string log_path;       // CSV loss curve; empty = none

  void validate() const;
  /// Every field is written, so the document doubles as a full defaults listing.
  std::string to_json() const;
  /// Unknown keys and wrong types are errors.
  static TrainConfig from_json(std::string_view text);
};

struct StepLog {
  long iteration = 0;
  double ce = 0;
  double boundary = 0;  // edge or DFB term, 0 for ce_only
  double total = 0;
  double seconds = 0;
};

struct TrainResult {
  ModelParams params;
  AdamState state;
  std::vector<StepLog> log;
};

using StepCallback = std::function<void(const StepLog&, const ModelParams&, const AdamState&)>;

/// Runs iterations state.step + 1 .. cfg.iterations on `train_set`. Each
/// iteration draws its sample and crop from (seed, iteration) only, so a
/// resumed run replays the uninterrupted one exactly.
TrainResult train(const TrainConfig& cfg, const std::vector<VolumeSample>& train_set,
                  std::optional<Checkpoint> resume = std::nullopt, const StepCallback& on_step = {});

/// Loads cfg.data_dir, keeps the training split and trains. Checkpoints go to
/// `out` (and `out`.iterN every checkpoint_every steps).
TrainResult train_to_file(const TrainConfig& cfg, const std::string& out, const std::string& resume_path = {});

std::string log_csv(const std::vector<StepLog>& log);

// ---- ablation ----

struct Variant {
  std::string name;
  bool sram = false;
  int sram_kernel = 5;
  LossMode loss = LossMode::ce_only;
};

/// baseline, +SRAM(k=3), +SRAM(k=5), +SRAM(k=7), +EdgeLoss, +DFB, +All(k=5).
std::vector<Variant> default_variants();

struct AblationConfig {
  TrainConfig train;  // loss, sram flags and seed are overridden per cell
  std::vector<std::string> variants;  // names from default_variants(); empty = all
  std::vector<std::uint64_t> seeds{0, 1, 2};
  std::uint64_t data_seed = 2024;
  int volumes = 50;
  Dims3 volume_shape{64, 64, 32};
  std::optional<Dims3> stride;  // default: crop / 2

  void validate() const;
  std::string to_json() const;
  static AblationConfig from_json(std::string_view text);
};

struct AblationRun {
  std::string variant;
  std::uint64_t seed = 0;
  MetricsReport metrics;
  long permute_ops = 0;  // permutations recorded in one training forward
  double seconds = 0;
};

struct AblationReport {
  std::vector<AblationRun> runs;
  std::vector<std::string> variant_order;

  /// Per-seed mean over test cases.
  double run_mean(const AblationRun& run, const std::string& metric) const;
  /// Mean and std across seeds of the per-seed means.
  MetricSummary variant_summary(const std::string& variant, const std::string& metric) const;
  std::optional<double> dice_gap(const std::string& variant) const;  // vs baseline, Dice points

  std::string table_csv() const;
  std::string runs_csv() const;
  std::string to_json() const;
};

/// Trains every (variant, seed) cell and evaluates on the held-out split.
/// With `out_dir`, each cell writes <variant>_s<seed>/{model.ckpt,metrics.json}
/// and finished cells are reused on rerun.
AblationReport ablate(const AblationConfig& cfg, const std::string& out_dir = {},
                      const std::function<void(const std::string&)>& progress = {});

}  // namespace dpbn
