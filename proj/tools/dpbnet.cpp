// dpbnet command-line interface.

#include <chrono>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "dpbnet/boundary_loss.hpp"
#include "dpbnet/eval.hpp"
#include "dpbnet/suites.hpp"
#include "dpbnet/trainer.hpp"
#include "dpbnet/volumes.hpp"

using namespace dpbn;
namespace fs = std::filesystem;

namespace {

constexpr int kUsageError = 2;

// Config problems are usage errors, everything else is a runtime failure.
struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

Dims3 parse_dims(const std::string& text) {
  Dims3 d;
  char x1 = 0, x2 = 0;
  std::istringstream in(text);
  if (!(in >> d.h >> x1 >> d.w >> x2 >> d.d) || x1 != 'x' || x2 != 'x' || in.peek() != EOF || d.h < 1 || d.w < 1 || d.d < 1)
    throw UsageError("expected HxWxD with positive extents, got '" + text + "'");
  return d;
}

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw UsageError("cannot open config " + path);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

template <typename T>
T load_config(const std::string& path) {
  const std::string text = read_file(path);
  try {
    return T::from_json(text);
  } catch (const std::invalid_argument& e) {
    throw UsageError(path + ": " + e.what());
  }
}

void write_file(const std::string& path, const std::string& text) {
  if (const fs::path parent = fs::path(path).parent_path(); !parent.empty()) fs::create_directories(parent);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << text;
}

Tensor load_mask(const std::string& path) {
  const VolumeFile f = load_array(path);
  require_binary(f.data, path.c_str());
  return f.data;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Dual-boundary segmentation network: data synthesis, training, inference and evaluation"};
  app.require_subcommand(1);

  // synth
  auto* synth = app.add_subcommand("synth", "Generate a synthetic phantom dataset");
  std::uint64_t synth_seed = 0;
  int synth_count = 50;
  std::string synth_shape = "64x64x32", synth_out;
  synth->add_option("--seed", synth_seed, "Dataset seed")->capture_default_str();
  synth->add_option("--count", synth_count, "Number of volumes")->capture_default_str()->check(CLI::PositiveNumber);
  synth->add_option("--shape", synth_shape, "Volume shape HxWxD")->capture_default_str();
  synth->add_option("--out", synth_out, "Output directory")->required();

  // train
  auto* train_cmd = app.add_subcommand("train", "Train a model from a JSON config");
  std::string train_config, train_out, train_resume;
  train_cmd->add_option("--config", train_config, "TrainConfig JSON")->required()->check(CLI::ExistingFile);
  train_cmd->add_option("--out", train_out, "Checkpoint path")->required();
  train_cmd->add_option("--resume", train_resume, "Continue from this checkpoint")->check(CLI::ExistingFile);
  train_cmd->footer("Config keys and defaults:\n" + TrainConfig{}.to_json());

  // infer
  auto* infer = app.add_subcommand("infer", "Sliding-window inference on one volume");
  std::string infer_ckpt, infer_volume, infer_window, infer_stride, infer_out, infer_mask_out;
  infer->add_option("--ckpt", infer_ckpt, "Checkpoint")->required()->check(CLI::ExistingFile);
  infer->add_option("--volume", infer_volume, "Image volume (.json sidecar or stem)")->required();
  infer->add_option("--window", infer_window, "Window HxWxD")->required();
  infer->add_option("--stride", infer_stride, "Stride HxWxD (default: window / 2)");
  infer->add_option("--out", infer_out, "Probability volume output")->required();
  infer->add_option("--mask-out", infer_mask_out, "Also write the mask thresholded at 0.5");

  // eval
  auto* eval = app.add_subcommand("eval", "Compare a prediction with ground truth");
  std::string eval_pred, eval_truth, eval_out, eval_csv;
  double eval_spacing = kDefaultSpacing, eval_threshold = 0.5;
  eval->add_option("--pred", eval_pred, "Predicted probabilities or mask")->required();
  eval->add_option("--truth", eval_truth, "Ground-truth mask")->required();
  eval->add_option("--spacing", eval_spacing, "Voxel spacing in mm")->capture_default_str()->check(CLI::PositiveNumber);
  eval->add_option("--threshold", eval_threshold, "Binarisation threshold for --pred")->capture_default_str();
  eval->add_option("--out", eval_out, "JSON report")->required();
  eval->add_option("--csv", eval_csv, "Also write a CSV report");

  // ablate
  auto* ablate_cmd = app.add_subcommand("ablate", "Run the variant-by-seed ablation grid");
  std::string ablate_config, ablate_out;
  ablate_cmd->add_option("--config", ablate_config, "AblationConfig JSON")->required()->check(CLI::ExistingFile);
  ablate_cmd->add_option("--out", ablate_out, "Output directory")->required();
  ablate_cmd->footer("Config keys and defaults:\n" + AblationConfig{}.to_json());

  // dfbmap
  auto* dfbmap = app.add_subcommand("dfbmap", "Export boundary weights of a mask as a volume");
  std::string dfb_mask, dfb_out;
  int dfb_k = kDefaultBoundaryK;
  dfbmap->add_option("--mask", dfb_mask, "Mask volume")->required();
  dfbmap->add_option("--k", dfb_k, "Neighbourhood size (odd, >= 3)")->capture_default_str();
  dfbmap->add_option("--out", dfb_out, "Output volume")->required();

  // gradcheck
  auto* gradcheck = app.add_subcommand("gradcheck", "Finite-difference gradient suites");
  std::string gc_module = "all";
  std::uint64_t gc_seed = 0;
  gradcheck->add_option("--module", gc_module, "dfb, ce, total, sram, net or all")
      ->capture_default_str()
      ->check(CLI::IsMember({"dfb", "ce", "total", "sram", "net", "all"}));
  gradcheck->add_option("--seed", gc_seed, "Instance seed")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kUsageError;
  }

  try {
    if (*synth) {
      const auto samples = synth_generate(synth_seed, synth_count, parse_dims(synth_shape));
      save_dataset(samples, synth_out);
      double fg = 0;
      for (const auto& s : samples) fg += foreground_fraction(s.mask) / static_cast<double>(samples.size());
      std::cout << "wrote " << samples.size() << " volumes to " << synth_out << " (mean foreground " << fg << ")\n";
    } else if (*train_cmd) {
      const TrainConfig cfg = load_config<TrainConfig>(train_config);
      const auto start = std::chrono::steady_clock::now();
      const TrainResult r = train_to_file(cfg, train_out, train_resume);
      const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
      if (!r.log.empty()) {
        std::cout << "iterations " << r.log.front().iteration << ".." << r.log.back().iteration << " first loss "
                  << r.log.front().total << " last loss " << r.log.back().total << " (" << secs << " s)\n";
      }
      std::cout << "checkpoint " << train_out << "\n";
    } else if (*infer) {
      const Checkpoint ck = load_checkpoint(infer_ckpt);
      const VolumeFile vol = load_array(infer_volume);
      const Dims3 window = parse_dims(infer_window);
      const Dims3 stride = infer_stride.empty() ? Dims3{std::max(1, window.h / 2), std::max(1, window.w / 2),
                                                        std::max(1, window.d / 2)}
                                                : parse_dims(infer_stride);
      const Tensor prob = sliding_window_infer(ck.params, vol.data, window, stride);
      save_array(infer_out, prob, DType::f64, vol.meta);
      if (!infer_mask_out.empty()) save_array(infer_mask_out, binarize(prob), DType::u8, vol.meta);
      std::cout << "wrote " << infer_out << "\n";
    } else if (*eval) {
      const Tensor pred = binarize(load_array(eval_pred).data, eval_threshold);
      const Tensor truth = load_mask(eval_truth);
      MetricsReport report;
      report.cases.push_back(evaluate_case(fs::path(eval_pred).stem().string(), pred, truth, eval_spacing));
      report.config = {{"pred", eval_pred}, {"truth", eval_truth}, {"spacing_mm", std::to_string(eval_spacing)},
                       {"threshold", std::to_string(eval_threshold)}};
      write_file(eval_out, report.to_json() + "\n");
      if (!eval_csv.empty()) write_file(eval_csv, report.to_csv());
      const CaseMetrics& c = report.cases.front();
      std::cout << "dice " << c.dice << " jaccard " << c.jaccard << " hd95 "
                << (c.hd95 ? std::to_string(*c.hd95) : std::string("undefined")) << " assd "
                << (c.assd ? std::to_string(*c.assd) : std::string("undefined")) << "\n";
    } else if (*ablate_cmd) {
      const AblationConfig cfg = load_config<AblationConfig>(ablate_config);
      const auto start = std::chrono::steady_clock::now();
      const AblationReport r = ablate(cfg, ablate_out, [](const std::string& m) { std::cerr << m << std::endl; });
      const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
      write_file((fs::path(ablate_out) / "table.csv").string(), r.table_csv());
      write_file((fs::path(ablate_out) / "runs.csv").string(), r.runs_csv());
      write_file((fs::path(ablate_out) / "report.json").string(), r.to_json() + "\n");
      write_file((fs::path(ablate_out) / "timing.txt").string(), "wall_seconds " + std::to_string(secs) + "\n");
      std::cout << r.table_csv();
    } else if (*dfbmap) {
      const VolumeFile f = load_array(dfb_mask);
      require_binary(f.data, dfb_mask.c_str());
      save_array(dfb_out, dfb_map(f.data, dfb_k).weights, DType::f64, f.meta);
      std::cout << "wrote " << dfb_out << "\n";
    } else if (*gradcheck) {
      bool ok = true;
      Real worst = 0;
      for (const SuiteCase& c : run_gradcheck_suite(gc_module, gc_seed)) {
        std::cout << (c.passed() ? "ok   " : "FAIL ") << c.module << " " << c.instance << ": max relative error "
                  << c.result.max_rel_error << " (tolerance " << c.tolerance << ", " << c.result.coords_checked
                  << " coords)\n";
        if (!c.passed()) std::cout << "     worst " << c.result.worst << "\n";
        ok = ok && c.passed();
        worst = std::max(worst, c.result.max_rel_error);
      }
      std::cout << "max relative error " << worst << "\n";
      return ok ? 0 : 1;
    }
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kUsageError;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
