// Acceptance suite: one PASS/FAIL line per criterion.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <set>
#include <sstream>

#include "CLI11.hpp"
#include "dpbnet/boundary_loss.hpp"
#include "dpbnet/eval.hpp"
#include "dpbnet/ops.hpp"
#include "dpbnet/position_transform.hpp"
#include "dpbnet/random.hpp"
#include "dpbnet/seg_net.hpp"
#include "dpbnet/sram.hpp"
#include "dpbnet/suites.hpp"
#include "dpbnet/trainer.hpp"
#include "json.hpp"

using namespace dpbn;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

// Tolerances and budgets.
constexpr int kMaxPermutationSize = 64;
constexpr double kPermutationBudgetSeconds = 5;
constexpr int kDfbMasks = 50;
constexpr int kDfbExtent = 12;
constexpr double kDfbBudgetSeconds = 30;
constexpr double kLossGradTolerance = 1e-5;
constexpr double kNetGradTolerance = 1e-4;
constexpr double kGradBudgetSeconds = 120;
constexpr int kSoftDicePairs = 30;
constexpr double kSoftDiceTolerance = 1e-12;
constexpr int kMetricPairs = 10;
constexpr double kDistanceTolerance = 1e-9;
constexpr double kJaccardIdentityTolerance = 1e-12;
constexpr double kNearIdentityTolerance = 1e-6;
constexpr double kNearIdentityBias = -20;
constexpr double kAllGapPoints = 0.5;
constexpr double kAblationTargetMinutes = 30;
constexpr long kAblationIterations = 2000;
constexpr int kAblationSeeds = 3;
constexpr int kAblationTrain = 40;
constexpr int kAblationTest = 10;

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string num(double v) {
  std::ostringstream os;
  os << std::setprecision(4) << v;
  return os.str();
}

Tensor random_mask(Rng& rng, Dims3 s, double fg) {
  Tensor m(Shape{s.h, s.w, s.d});
  for (Real& v : m.data()) v = rng.uniform() < fg ? 1 : 0;
  return m;
}

std::size_t flat(Dims3 s, int h, int w, int d) { return (static_cast<std::size_t>(h) * s.w + w) * s.d + d; }

// 1. kappa is a bijection and reorder(shuffle(x)) == x for every size <= 64 and every divisor ratio.
Outcome permutations() {
  const auto start = std::chrono::steady_clock::now();
  Rng rng(1);
  long cases = 0;
  for (int n = 1; n <= kMaxPermutationSize; ++n) {
    for (int r = 1; r <= n; ++r) {
      if (n % r) continue;
      const int g = n / r;
      std::vector<char> hit(static_cast<std::size_t>(n) + 1, 0);
      for (int i = 1; i <= n; ++i) {
        const int k = kappa(i, g, r);
        if (k < 1 || k > n || hit[static_cast<std::size_t>(k)]) {
          return {false, "kappa not a bijection for size " + std::to_string(n) + " ratio " + std::to_string(r)};
        }
        hit[static_cast<std::size_t>(k)] = 1;
      }
      for (int axis = 0; axis < 3; ++axis) {
        Dims3 shape{2, 3, 2};
        shape[axis] = n;
        Ratios ratios{1, 1, 1};
        ratios[static_cast<std::size_t>(axis)] = r;
        const ShufflePlan plan = ShufflePlan::build(shape, ratios);
        const Tensor x = uniform_tensor({2, shape.h, shape.w, shape.d}, rng, -1, 1);
        if (!bitwise_equal(reorder(shuffle(x, plan), plan), x)) {
          return {false, "reorder(shuffle(x)) != x for size " + std::to_string(n) + " ratio " + std::to_string(r) +
                             " axis " + std::to_string(axis)};
        }
        ++cases;
      }
    }
  }
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return {secs < kPermutationBudgetSeconds,
          std::to_string(cases) + " (size, ratio, axis) cases in " + num(secs) + " s (budget " + num(kPermutationBudgetSeconds) + " s)"};
}

// Nested-loop weight: 1 + opposite-label voxels in the k^3 window, coordinates clamped at the border.
Tensor dfb_oracle(const Tensor& mask, int k) {
  const Dims3 s = mask.spatial();
  const int r = k / 2;
  Tensor w(mask.shape());
  for (int h = 0; h < s.h; ++h)
    for (int x = 0; x < s.w; ++x)
      for (int d = 0; d < s.d; ++d) {
        const Real self = mask[flat(s, h, x, d)];
        int opposite = 0;
        for (int a = -r; a <= r; ++a)
          for (int b = -r; b <= r; ++b)
            for (int c = -r; c <= r; ++c) {
              const int hh = std::clamp(h + a, 0, s.h - 1), ww = std::clamp(x + b, 0, s.w - 1), dd = std::clamp(d + c, 0, s.d - 1);
              opposite += mask[flat(s, hh, ww, dd)] != self;
            }
        w[flat(s, h, x, d)] = static_cast<Real>(1 + opposite);
      }
  return w;
}

// 2. DFB map equals the nested-loop oracle, lies in [1, k^3], and interior voxels weigh 1.
Outcome dfb_maps() {
  const auto start = std::chrono::steady_clock::now();
  Rng rng(2);
  const Dims3 s{kDfbExtent, kDfbExtent, kDfbExtent};
  for (int k : {3, 5, 7}) {
    const Real k3 = static_cast<Real>(k) * k * k;
    for (int i = 0; i < kDfbMasks; ++i) {
      const Tensor mask = random_mask(rng, s, rng.uniform(0.05, 0.7));
      const Tensor w = dfb_map(mask, k).weights;
      if (!bitwise_equal(w, dfb_oracle(mask, k))) return {false, "mismatch for k=" + std::to_string(k) + " mask " + std::to_string(i)};
      const Tensor count = neighbor_count(mask, k);
      for (std::size_t j = 0; j < w.size(); ++j) {
        if (w[j] < 1 || w[j] > k3) return {false, "weight out of [1, k^3]"};
        const bool interior = (mask[j] == 1 && count[j] == k3) || (mask[j] == 0 && count[j] == 0);
        if (interior != (w[j] == 1)) return {false, "interior rule violated for k=" + std::to_string(k)};
      }
    }
  }
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return {secs < kDfbBudgetSeconds, std::to_string(3 * kDfbMasks) + " masks exact in " + num(secs) + " s (budget " +
                                        num(kDfbBudgetSeconds) + " s)"};
}

// 3. Finite-difference checks for dfb, ce, total, SRAM and the full network.
Outcome gradients() {
  const auto start = std::chrono::steady_clock::now();
  std::map<std::string, Real> worst;
  bool ok = true;
  std::string failures;
  for (const SuiteCase& c : run_gradcheck_suite("all", 3)) {
    const double tol = c.module == "net" ? kNetGradTolerance : kLossGradTolerance;
    worst[c.module] = std::max(worst[c.module], c.result.max_rel_error);
    if (!(c.result.max_rel_error <= tol)) {
      ok = false;
      failures += " " + c.module + " " + c.instance + " (" + c.result.worst + ")";
    }
  }
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  std::string detail = "max rel error";
  for (const auto& [m, v] : worst) detail += " " + m + " " + num(v);
  detail += " in " + num(secs) + " s";
  if (!failures.empty()) detail += "; failed:" + failures;
  return {ok && secs < kGradBudgetSeconds, detail};
}

// 4. Unit weights reduce the DFB loss to plain soft Dice; constant masks map to all-ones.
Outcome soft_dice() {
  Rng rng(4);
  double worst = 0;
  for (int i = 0; i < kSoftDicePairs; ++i) {
    const Dims3 s{rng.uniform_int(4, 16), rng.uniform_int(4, 16), rng.uniform_int(4, 16)};
    const Tensor g = random_mask(rng, s, rng.uniform(0, 1));
    const Tensor p = uniform_tensor({s.h, s.w, s.d}, rng, 0, 1);
    double num_ = 0, den = 0;
    for (std::size_t j = 0; j < p.size(); ++j) {
      num_ += p[j] * g[j];
      den += p[j] + g[j];
    }
    const double eps = kDefaultEpsilon;
    const double expected = 1 - (2 * num_ + 2 * eps) / (den + eps);
    worst = std::max(worst, std::abs(dfb_loss(p, g, Tensor(p.shape(), 1)) - expected));
  }
  for (int k : {3, 5, 7})
    for (Real v : {Real(0), Real(1)}) {
      const Tensor m(Shape{7, 9, 5}, v);
      if (!bitwise_equal(dfb_map(m, k).weights, Tensor(m.shape(), 1))) return {false, "constant mask not all-ones"};
    }
  return {worst <= kSoftDiceTolerance, "max |diff| " + num(worst) + " over " + std::to_string(kSoftDicePairs) + " pairs"};
}

// Brute-force surface distances for the metric oracle.
std::vector<double> oracle_distances(const Tensor& a, const Tensor& b, double spacing) {
  const Dims3 s = a.spatial();
  auto border = [&](const Tensor& m) {
    std::vector<std::array<double, 3>> pts;
    const int off[6][3] = {{1, 0, 0}, {-1, 0, 0}, {0, 1, 0}, {0, -1, 0}, {0, 0, 1}, {0, 0, -1}};
    for (int h = 0; h < s.h; ++h)
      for (int w = 0; w < s.w; ++w)
        for (int d = 0; d < s.d; ++d) {
          if (m[flat(s, h, w, d)] == 0) continue;
          bool edge = false;
          for (const auto& o : off) {
            const int x = h + o[0], y = w + o[1], z = d + o[2];
            edge = edge || x < 0 || y < 0 || z < 0 || x >= s.h || y >= s.w || z >= s.d || m[flat(s, x, y, z)] == 0;
          }
          if (edge) pts.push_back({h * spacing, w * spacing, d * spacing});
        }
    return pts;
  };
  const auto pa = border(a), pb = border(b);
  std::vector<double> all;
  for (const auto* pair : {&pa, &pb}) {
    const auto& from = *pair;
    const auto& to = pair == &pa ? pb : pa;
    for (const auto& p : from) {
      double best = 1e300;
      for (const auto& q : to) best = std::min(best, std::hypot(p[0] - q[0], p[1] - q[1], p[2] - q[2]));
      all.push_back(best);
    }
  }
  std::sort(all.begin(), all.end());
  return all;
}

// 5. Metrics against brute-force oracles.
Outcome metrics() {
  Rng rng(5);
  const Dims3 s{16, 16, 16};
  double dist_err = 0, identity_err = 0;
  for (int i = 0; i < kMetricPairs; ++i) {
    const Tensor a = random_mask(rng, s, rng.uniform(0.05, 0.5)), b = random_mask(rng, s, rng.uniform(0.05, 0.5));
    long na = 0, nb = 0, both = 0, either = 0;
    for (std::size_t j = 0; j < a.size(); ++j) {
      na += a[j] == 1;
      nb += b[j] == 1;
      both += a[j] == 1 && b[j] == 1;
      either += a[j] == 1 || b[j] == 1;
    }
    const double d = dice(a, b), jac = jaccard(a, b);
    if (d != 2.0 * both / (na + nb) || jac != static_cast<double>(both) / either) return {false, "overlap counts differ"};
    identity_err = std::max(identity_err, std::abs(jac - d / (2 - d)));
    const double spacing = i % 2 ? kDefaultSpacing : 1.1;
    const auto all = oracle_distances(a, b, spacing);
    const double rank = 0.95 * static_cast<double>(all.size() - 1);
    const auto lo = static_cast<std::size_t>(rank);
    const double p95 = lo + 1 < all.size() ? all[lo] + (rank - static_cast<double>(lo)) * (all[lo + 1] - all[lo]) : all[lo];
    double mean = 0;
    for (double v : all) mean += v / static_cast<double>(all.size());
    dist_err = std::max({dist_err, std::abs(hd95(a, b, spacing) - p95), std::abs(assd(a, b, spacing) - mean)});
  }
  return {dist_err <= kDistanceTolerance && identity_err <= kJaccardIdentityTolerance,
          "counts exact, max distance error " + num(dist_err) + " mm, jaccard identity error " + num(identity_err)};
}

// 6. Sliding-window aggregation.
Outcome sliding_window() {
  Architecture arch;
  const ModelParams p = init_model(arch, 6);
  Rng rng(6);
  const Tensor vol = uniform_tensor({32, 32, 16}, rng, 0, 1);
  if (!bitwise_equal(sliding_window_infer(p, vol, {32, 32, 16}, {16, 16, 8}), forward(p, vol)))
    return {false, "window == volume differs from forward()"};

  const Dims3 v{20, 17, 9}, w{8, 7, 3};
  const Real c = Real(0.375);
  const WindowPredictor constant = [&](const Tensor& x) { return Tensor(x.shape(), c); };
  long checked = 0;
  for (int sh = 1; sh <= w.h; ++sh)
    for (int sw = 1; sw <= w.w; sw += 2)
      for (int sd = 1; sd <= w.d; ++sd) {
        const Dims3 stride{sh, sw, sd};
        if (max_abs_diff(sliding_window_infer(constant, Tensor(Shape{v.h, v.w, v.d}), w, stride), Tensor(Shape{v.h, v.w, v.d}, c)) != 0)
          return {false, "constant model not preserved at stride " + dims_str(stride)};
        // Independent coverage: enumerate window starts per axis, then count.
        const Tensor cov = coverage_counts(v, w, stride);
        std::array<std::vector<int>, 3> starts;
        for (int a = 0; a < 3; ++a) {
          for (int o = 0;; o += stride[a]) {
            if (o + w[a] >= v[a]) {
              starts[static_cast<std::size_t>(a)].push_back(v[a] - w[a]);
              break;
            }
            starts[static_cast<std::size_t>(a)].push_back(o);
          }
        }
        Tensor expect(Shape{v.h, v.w, v.d});
        for (int a : starts[0])
          for (int b : starts[1])
            for (int e : starts[2])
              for (int h = a; h < a + w.h; ++h)
                for (int x = b; x < b + w.w; ++x)
                  for (int d = e; d < e + w.d; ++d) expect[flat(v, h, x, d)] += 1;
        for (std::size_t j = 0; j < cov.size(); ++j)
          if (cov[j] < 1 || cov[j] != expect[j]) return {false, "coverage mismatch at stride " + dims_str(stride)};
        ++checked;
      }
  return {true, "bitwise window == volume, constant and coverage checks over " + std::to_string(checked) + " strides"};
}

// 7. SRAM with silenced attention is a near-identity; with zero logits it scales by 1.5.
Outcome sram_identity() {
  Architecture with, without;
  without.sram = {false, false, false};
  ModelParams a = init_model(with, 7), b = init_model(without, 7);
  for (auto& [name, t] : b.tensors) t = a.at(name);
  for (int s = 0; s < with.stages(); ++s) {
    a.at("enc" + std::to_string(s) + ".sram.attn.weight").fill(0);
    a.at("enc" + std::to_string(s) + ".sram.attn.bias").fill(static_cast<Real>(kNearIdentityBias));
  }
  Rng rng(7);
  const Tensor x = uniform_tensor({32, 32, 16}, rng, 0, 1);
  const Tensor ya = forward(a, x), yb = forward(b, x);
  const double rel = max_abs_diff(ya, yb) / max_abs(yb);

  const Tensor f = uniform_tensor({4, 8, 8, 8}, rng, -2, 2);
  SramParams p = SramParams::init(4, 5, rng);
  p.attn_kernel.fill(0);
  p.attn_bias.fill(0);
  Tensor scaled = f;
  for (Real& v : scaled.data()) v *= Real(1.5);
  const bool exact = bitwise_equal(sram_forward(f, p), scaled);
  return {rel <= kNearIdentityTolerance && exact,
          "network relative change " + num(rel) + " at bias " + num(kNearIdentityBias) + ", zero-bias scaling " +
              (exact ? "exactly 1.5" : "not 1.5")};
}

std::string cell_dir(const std::string& variant, int seed) {
  std::string s;
  for (char c : variant) s += std::isalnum(static_cast<unsigned char>(c)) ? c : '_';
  return s + "_s" + std::to_string(seed);
}

// 8. Directional ablation from a finished report directory.
Outcome ablation(const std::string& dir) {
  const std::vector<std::string> rows{"baseline", "+SRAM(k=3)", "+SRAM(k=5)", "+SRAM(k=7)", "+EdgeLoss", "+DFB", "+All(k=5)"};
  if (!fs::exists(fs::path(dir) / "table.csv")) return {false, "no ablation report in " + dir + " (run: dpbnet ablate)"};
  std::ifstream table(fs::path(dir) / "table.csv");
  std::string line;
  std::getline(table, line);
  for (const auto& r : rows) {
    if (!std::getline(table, line) || line.rfind(r + ",", 0) != 0) return {false, "table.csv rows are not in the expected variant order"};
  }
  std::map<std::string, double> mean_dice;
  for (const auto& r : rows) {
    double sum = 0;
    for (int seed = 0; seed < kAblationSeeds; ++seed) {
      const fs::path m = fs::path(dir) / cell_dir(r, seed) / "metrics.json";
      if (!fs::exists(m)) return {false, "missing " + m.string()};
      std::ifstream in(m);
      const json j = json::parse(in);
      const json& cell = j.at("cell");
      if (cell.at("iterations").get<long>() != kAblationIterations || cell.at("crop") != json::array({32, 32, 16}) ||
          cell.at("volume_shape") != json::array({64, 64, 32}) ||
          cell.at("volumes").get<int>() != kAblationTrain + kAblationTest || cell.at("train_fraction").get<double>() != 0.8 ||
          j.at("cases").size() != static_cast<std::size_t>(kAblationTest)) {
        return {false, m.string() + " was not produced with the benchmark protocol"};
      }
      double d = 0;
      for (const auto& c : j.at("cases")) d += c.at("dice").get<double>() / kAblationTest;
      sum += d;
    }
    mean_dice[r] = 100 * sum / kAblationSeeds;
  }
  const double base = mean_dice["baseline"], s5 = mean_dice["+SRAM(k=5)"], dfb = mean_dice["+DFB"], all = mean_dice["+All(k=5)"];
  const bool ok = s5 >= base && dfb >= base && all >= base + kAllGapPoints;
  std::string detail = "Dice baseline " + num(base) + ", +SRAM(k=5) " + num(s5) + ", +DFB " + num(dfb) + ", +All(k=5) " +
                       num(all) + " (gap " + num(all - base) + " points, need >= " + num(kAllGapPoints) + ")";
  std::ifstream timing(fs::path(dir) / "timing.txt");
  std::string key;
  double secs = 0;
  if (timing >> key >> secs) {
    detail += "; runtime " + num(secs / 60) + " min";
    if (secs / 60 > kAblationTargetMinutes) detail += " over the " + num(kAblationTargetMinutes) + " min target";
  }
  return {ok, detail};
}

std::string read_all(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

// 9. Every CLI command twice in fresh directories; compare every artifact byte for byte.
Outcome determinism(const std::string& cli) {
  if (cli.empty() || !fs::exists(cli)) return {false, "CLI binary not found: '" + cli + "'"};
  const fs::path root = fs::temp_directory_path() / "dpbn_acceptance_determinism";
  fs::remove_all(root);
  const std::string train_cfg =
      R"({"data_dir": "data", "iterations": 3, "crop": [16, 16, 8], "channels": [4, 8], "sram": [true, true], "sram_kernel": 3, "dfb_k": 3, "seed": 4})";
  const std::string ablate_cfg =
      R"js({"train": {"iterations": 2, "crop": [16, 16, 8], "channels": [4, 8], "sram": [true, true], "sram_kernel": 3, "dfb_k": 3, "train_fraction": 0.5}, "variants": ["baseline", "+All(k=5)"], "seeds": [0, 1], "volumes": 4, "volume_shape": [16, 16, 16]})js";
  const std::vector<std::string> commands{
      "synth --seed 3 --count 4 --shape 16x16x16 --out data",
      "train --config train.json --out model.ckpt",
      "infer --ckpt model.ckpt --volume data/case_000_img.json --window 16x16x8 --stride 8x8x4 --out prob --mask-out mask",
      "eval --pred prob.json --truth data/case_000_seg.json --spacing 0.625 --out report.json --csv report.csv",
      "dfbmap --mask data/case_000_seg.json --k 5 --out weights",
      "ablate --config ablate.json --out ablation",
  };
  for (const char* run : {"a", "b"}) {
    const fs::path dir = root / run;
    fs::create_directories(dir);
    std::ofstream(dir / "train.json") << train_cfg;
    std::ofstream(dir / "ablate.json") << ablate_cfg;
    for (const auto& c : commands) {
      const std::string cmd = "cd \"" + dir.string() + "\" && \"" + cli + "\" " + c + " > /dev/null 2>&1";
      if (std::system(cmd.c_str()) != 0) return {false, "command failed: " + c};
    }
  }
  // Wall-clock fields are the only intended difference.
  auto skip = [](const fs::path& p) { return p.filename() == "timing.txt" || p.filename() == "loss.csv"; };
  std::set<std::string> files_a, files_b;
  for (const auto& e : fs::recursive_directory_iterator(root / "a"))
    if (e.is_regular_file() && !skip(e.path())) files_a.insert(fs::relative(e.path(), root / "a").string());
  for (const auto& e : fs::recursive_directory_iterator(root / "b"))
    if (e.is_regular_file() && !skip(e.path())) files_b.insert(fs::relative(e.path(), root / "b").string());
  if (files_a != files_b) return {false, "runs produced different file sets"};
  for (const auto& f : files_a)
    if (read_all(root / "a" / f) != read_all(root / "b" / f)) return {false, "differs between runs: " + f};
  fs::remove_all(root);
  return {true, std::to_string(files_a.size()) + " artifacts bitwise identical across " + std::to_string(commands.size()) +
                    " commands run twice"};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance criteria"};
  std::string ablation_dir = DPBN_DEFAULT_ABLATION_DIR, cli = DPBN_DEFAULT_CLI;
  std::vector<int> only;
  bool run_ablation = false;
  app.add_option("--ablation-dir", ablation_dir, "Directory with a finished ablation report")->capture_default_str();
  app.add_option("--cli", cli, "dpbnet executable")->capture_default_str();
  app.add_option("--only", only, "Criteria to run (default: all)")->delimiter(',')->check(CLI::Range(1, 9));
  app.add_flag("--run-ablation", run_ablation, "Run the full benchmark ablation into --ablation-dir first (hours on one core)");
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 2;
  }

  if (run_ablation) {
    AblationConfig cfg;
    const AblationReport r = ablate(cfg, ablation_dir, [](const std::string& m) { std::cerr << m << std::endl; });
    std::ofstream(fs::path(ablation_dir) / "table.csv") << r.table_csv();
    std::ofstream(fs::path(ablation_dir) / "runs.csv") << r.runs_csv();
    std::ofstream(fs::path(ablation_dir) / "report.json") << r.to_json() << "\n";
  }

  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
      {"permutation correctness", permutations},
      {"DFB map oracle equivalence", dfb_maps},
      {"gradient fidelity", gradients},
      {"soft-Dice reduction", soft_dice},
      {"metric oracles", metrics},
      {"sliding-window consistency", sliding_window},
      {"SRAM near-identity", sram_identity},
      {"directional ablation", [&] { return ablation(ablation_dir); }},
      {"determinism", [&] { return determinism(cli); }},
  };
  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int id = static_cast<int>(i) + 1;
    if (!only.empty() && std::find(only.begin(), only.end(), id) == only.end()) continue;
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failed += !o.pass;
    std::cout << (o.pass ? "PASS " : "FAIL ") << id << " " << criteria[i].first << ": " << o.detail << std::endl;
  }
  return failed ? 1 : 0;
}
