#include "dpbnet/trainer.hpp"

#include <cctype>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <set>
#include <sstream>
#include <stdexcept>

#include "dpbnet/ops.hpp"
#include "dpbnet/random.hpp"
#include "json.hpp"

namespace dpbn {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr std::uint64_t kSampleStream = 0x73616D70;
constexpr std::uint64_t kCropStream = 0x63726F70;

std::string fmt(double v) {
  std::ostringstream os;
  os << std::setprecision(10) << v;
  return os.str();
}

json dims_json(Dims3 d) { return json::array({d.h, d.w, d.d}); }

Dims3 dims_from(const json& j, const std::string& key) {
  if (!j.is_array() || j.size() != 3) throw std::invalid_argument("config: '" + key + "' must be [H, W, D]");
  return {j[0].get<int>(), j[1].get<int>(), j[2].get<int>()};
}

// Reads known keys and rejects anything else.
class Fields {
 public:
  Fields(const json& j, std::string where) : j_(j), where_(std::move(where)) {
    if (!j.is_object()) throw std::invalid_argument(where_ + ": expected a JSON object");
  }

  template <typename T>
  void get(const std::string& key, T& out) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    try {
      out = j_.at(key).get<T>();
    } catch (const json::exception& e) {
      throw std::invalid_argument(where_ + ": key '" + key + "': " + e.what());
    }
  }
  const json* raw(const std::string& key) {
    seen_.insert(key);
    return j_.contains(key) ? &j_.at(key) : nullptr;
  }
  void finish() const {
    for (const auto& [k, v] : j_.items())
      if (!seen_.count(k)) throw std::invalid_argument(where_ + ": unknown key '" + k + "'");
  }

 private:
  const json& j_;
  std::string where_;
  std::set<std::string> seen_;
};

json parse_json(std::string_view text, const char* what) {
  try {
    return json::parse(text);
  } catch (const json::parse_error& e) {
    throw std::invalid_argument(std::string(what) + ": malformed JSON: " + e.what());
  }
}

json train_json(const TrainConfig& c) {
  json j;
  j["lr"] = c.adam.lr;
  j["beta1"] = c.adam.beta1;
  j["beta2"] = c.adam.beta2;
  j["weight_decay"] = c.adam.weight_decay;
  j["adam_eps"] = c.adam.eps;
  j["iterations"] = c.iterations;
  j["crop"] = dims_json(c.crop);
  j["dfb_k"] = c.dfb_k;
  j["epsilon"] = c.epsilon;
  j["loss"] = to_string(c.loss);
  j["channels"] = c.arch.channels;
  j["sram"] = c.arch.sram;
  j["sram_kernel"] = c.arch.sram_kernel;
  j["seed"] = c.seed;
  j["data_dir"] = c.data_dir;
  j["train_fraction"] = c.train_fraction;
  j["split_seed"] = c.split_seed;
  j["checkpoint_every"] = c.checkpoint_every;
  j["log"] = c.log_path;
  return j;
}

TrainConfig train_from(const json& j, const char* where) {
  TrainConfig c;
  Fields f(j, where);
  f.get("lr", c.adam.lr);
  f.get("beta1", c.adam.beta1);
  f.get("beta2", c.adam.beta2);
  f.get("weight_decay", c.adam.weight_decay);
  f.get("adam_eps", c.adam.eps);
  f.get("iterations", c.iterations);
  if (const json* v = f.raw("crop")) c.crop = dims_from(*v, "crop");
  f.get("dfb_k", c.dfb_k);
  f.get("epsilon", c.epsilon);
  std::string loss = to_string(c.loss);
  f.get("loss", loss);
  c.loss = parse_loss_mode(loss);
  f.get("channels", c.arch.channels);
  f.get("sram", c.arch.sram);
  f.get("sram_kernel", c.arch.sram_kernel);
  f.get("seed", c.seed);
  f.get("data_dir", c.data_dir);
  f.get("train_fraction", c.train_fraction);
  f.get("split_seed", c.split_seed);
  f.get("checkpoint_every", c.checkpoint_every);
  f.get("log", c.log_path);
  f.finish();
  c.arch.boundary_k = c.dfb_k;
  c.validate();
  return c;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
}

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace

std::string to_string(LossMode mode) {
  switch (mode) {
    case LossMode::ce_only: return "ce_only";
    case LossMode::ce_edge: return "ce+edge";
    case LossMode::ce_dfb: return "ce+dfb";
  }
  return "?";
}

LossMode parse_loss_mode(std::string_view text) {
  if (text == "ce_only") return LossMode::ce_only;
  if (text == "ce+edge") return LossMode::ce_edge;
  if (text == "ce+dfb") return LossMode::ce_dfb;
  throw std::invalid_argument("unknown loss mode '" + std::string(text) + "' (ce_only, ce+edge, ce+dfb)");
}

void AdamConfig::validate() const {
  if (!(lr > 0)) throw std::invalid_argument("lr must be > 0");
  if (!(beta1 >= 0 && beta1 < 1) || !(beta2 >= 0 && beta2 < 1)) throw std::invalid_argument("betas must be in [0, 1)");
  if (!(weight_decay >= 0)) throw std::invalid_argument("weight_decay must be >= 0");
  if (!(eps > 0)) throw std::invalid_argument("adam_eps must be > 0");
}

AdamState AdamState::zeros(const ModelParams& params) {
  AdamState s;
  for (const auto& [name, t] : params.tensors) {
    if (!is_trainable(name)) continue;
    s.m.emplace_back(name, Tensor(t.shape()));
    s.v.emplace_back(name, Tensor(t.shape()));
  }
  return s;
}

NamedTensors AdamState::to_extra() const {
  NamedTensors out;
  out.emplace_back("adam/step", Tensor::scalar(static_cast<Real>(step)));
  for (const auto& [name, t] : m) out.emplace_back("adam/m/" + name, t);
  for (const auto& [name, t] : v) out.emplace_back("adam/v/" + name, t);
  return out;
}

AdamState AdamState::from_extra(const ModelParams& params, const NamedTensors& extra) {
  AdamState s = zeros(params);
  auto find = [&](const std::string& key) -> const Tensor& {
    for (const auto& [name, t] : extra)
      if (name == key) return t;
    throw std::runtime_error("checkpoint has no optimizer tensor '" + key + "'");
  };
  s.step = static_cast<long>(find("adam/step").item());
  for (auto* moments : {&s.m, &s.v}) {
    const std::string prefix = moments == &s.m ? "adam/m/" : "adam/v/";
    for (auto& [name, t] : *moments) {
      const Tensor& src = find(prefix + name);
      if (src.shape() != t.shape()) throw std::runtime_error("optimizer tensor '" + prefix + name + "' has wrong shape");
      t = src;
    }
  }
  return s;
}

void adam_step(ModelParams& params, const NamedTensors& grads, AdamState& state, const AdamConfig& cfg) {
  if (grads.size() != state.m.size()) {
    throw std::invalid_argument("adam_step: " + std::to_string(grads.size()) + " gradients for " +
                                std::to_string(state.m.size()) + " trainable tensors");
  }
  for (std::size_t i = 0; i < grads.size(); ++i) {
    const auto& [name, g] = grads[i];
    if (name != state.m[i].first) throw std::invalid_argument("adam_step: gradient order mismatch at '" + name + "'");
    if (g.shape() != params.at(name).shape()) throw std::invalid_argument("adam_step: gradient shape mismatch for '" + name + "'");
    if (!g.all_finite()) throw std::runtime_error("adam_step: non-finite gradient in '" + name + "'");
  }
  state.step += 1;
  const double t = static_cast<double>(state.step);
  const double c1 = 1 - std::pow(cfg.beta1, t), c2 = 1 - std::pow(cfg.beta2, t);
  for (std::size_t i = 0; i < grads.size(); ++i) {
    const Tensor& g = grads[i].second;
    Tensor& p = params.at(grads[i].first);
    Tensor& m = state.m[i].second;
    Tensor& v = state.v[i].second;
    for (std::size_t j = 0; j < p.size(); ++j) {
      const double gj = g[j] + cfg.weight_decay * p[j];
      m[j] = static_cast<Real>(cfg.beta1 * m[j] + (1 - cfg.beta1) * gj);
      v[j] = static_cast<Real>(cfg.beta2 * v[j] + (1 - cfg.beta2) * gj * gj);
      p[j] -= static_cast<Real>(cfg.lr * (m[j] / c1) / (std::sqrt(v[j] / c2) + cfg.eps));
    }
  }
}

Tensor edge_weights(const Tensor& mask, int k) {
  require_binary(mask, "edge_weights mask");
  const Tensor count = neighbor_count(mask, k);
  const Real full = static_cast<Real>(k) * k * k;
  Tensor w(mask.shape(), 1);
  for (std::size_t i = 0; i < w.size(); ++i)
    if (mask[i] == 1 && count[i] < full) w[i] = 2;
  return w;
}

Real edge_loss(const Tensor& prob, const Tensor& mask, int k, Real eps) {
  return dfb_loss(prob, mask, edge_weights(mask, k), eps);
}

Var edge_loss(Var prob, const Tensor& mask, int k, Real eps) {
  return dfb_loss(prob, mask, edge_weights(mask, k), eps);
}

void TrainConfig::validate() const {
  adam.validate();
  if (iterations < 1) throw std::invalid_argument("iterations must be >= 1");
  if (crop.h < 1 || crop.w < 1 || crop.d < 1) throw std::invalid_argument("crop must be positive");
  if (dfb_k < 3 || dfb_k % 2 == 0) throw std::invalid_argument("dfb_k must be odd and >= 3");
  if (!(epsilon > 0)) throw std::invalid_argument("epsilon must be > 0");
  if (!(train_fraction > 0 && train_fraction < 1)) throw std::invalid_argument("train_fraction must be in (0, 1)");
  if (checkpoint_every < 0) throw std::invalid_argument("checkpoint_every must be >= 0");
  Architecture a = arch;
  a.boundary_k = dfb_k;
  a.validate();
  const int div = a.divisor();
  if (crop.h % div || crop.w % div || crop.d % div) {
    throw std::invalid_argument("crop " + dims_str(crop) + " must be divisible by " + std::to_string(div));
  }
}

std::string TrainConfig::to_json() const { return train_json(*this).dump(2); }

TrainConfig TrainConfig::from_json(std::string_view text) { return train_from(parse_json(text, "train config"), "train config"); }

TrainResult train(const TrainConfig& cfg, const std::vector<VolumeSample>& train_set, std::optional<Checkpoint> resume,
                  const StepCallback& on_step) {
  cfg.validate();
  if (train_set.empty()) throw std::invalid_argument("training set is empty");
  Architecture arch = cfg.arch;
  arch.boundary_k = cfg.dfb_k;

  TrainResult res;
  if (resume) {
    if (!(resume->params.arch == arch)) throw std::invalid_argument("resume checkpoint architecture differs from config");
    res.params = std::move(resume->params);
    res.state = AdamState::from_extra(res.params, resume->extra);
  } else {
    res.params = init_model(arch, cfg.seed);
    res.state = AdamState::zeros(res.params);
  }
  if (res.state.step > cfg.iterations) throw std::invalid_argument("checkpoint is already past the configured iterations");

  const auto n = static_cast<std::uint64_t>(train_set.size());
  const Real eps = static_cast<Real>(cfg.epsilon);
  for (long it = res.state.step + 1; it <= cfg.iterations; ++it) {
    const auto start = std::chrono::steady_clock::now();
    const auto iu = static_cast<std::uint64_t>(it);
    Rng pick(derive_seed(cfg.seed, {kSampleStream, iu}));
    const VolumeSample& src = train_set[pick.uniform_int(n)];
    const VolumeSample crop = random_crop(src, cfg.crop, derive_seed(cfg.seed, {kCropStream, iu}));

    Tape tape;
    const BoundParams bound = bind_params(tape, res.params);
    const Dims3 s = crop.image.spatial();
    const ForwardResult fr = forward(bound, tape.constant(crop.image.reshaped({1, s.h, s.w, s.d})));

    StepLog log;
    log.iteration = it;
    Var total;
    switch (cfg.loss) {
      case LossMode::ce_only: {
        total = ce_loss(fr.prob, crop.mask);
        log.ce = total.value().item();
        break;
      }
      case LossMode::ce_edge: {
        Var ce = ce_loss(fr.prob, crop.mask);
        Var edge = edge_loss(fr.prob, crop.mask, cfg.dfb_k, eps);
        log.ce = ce.value().item();
        log.boundary = edge.value().item();
        total = add(ce, edge);
        break;
      }
      case LossMode::ce_dfb: {
        LossTerms terms = total_loss(fr.prob, crop.mask, dfb_map(crop.mask, cfg.dfb_k).weights, eps);
        log.ce = terms.ce;
        log.boundary = terms.boundary;
        total = terms.total;
        break;
      }
    }
    log.total = total.value().item();
    tape.backward(total);

    NamedTensors grads;
    for (std::size_t i = 0; i < res.params.tensors.size(); ++i) {
      const std::string& name = res.params.tensors[i].first;
      if (is_trainable(name)) grads.emplace_back(name, tape.grad(bound.vars[i].id));
    }
    adam_step(res.params, grads, res.state, cfg.adam);
    log.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    res.log.push_back(log);
    if (on_step) on_step(log, res.params, res.state);
  }
  return res;
}

TrainResult train_to_file(const TrainConfig& cfg, const std::string& out, const std::string& resume_path) {
  cfg.validate();
  if (cfg.data_dir.empty()) throw std::invalid_argument("config has no data_dir");
  if (!fs::exists(fs::path(cfg.data_dir) / "dataset.json")) {
    throw std::runtime_error("no dataset at '" + cfg.data_dir + "' (missing dataset.json)");
  }
  const auto all = load_dataset(cfg.data_dir);
  if (all.size() < 2) throw std::runtime_error("dataset at '" + cfg.data_dir + "' needs at least 2 volumes");
  const auto train_set = split(all, cfg.train_fraction, cfg.split_seed).first;

  std::optional<Checkpoint> resume;
  if (!resume_path.empty()) resume = load_checkpoint(resume_path);

  std::ofstream log;
  if (!cfg.log_path.empty()) {
    log.open(cfg.log_path, resume ? std::ios::app : std::ios::trunc);
    if (!log) throw std::runtime_error("cannot write log " + cfg.log_path);
    if (!resume) log << "iteration,ce,boundary,total,seconds\n";
  }
  auto on_step = [&](const StepLog& s, const ModelParams& p, const AdamState& st) {
    if (log.is_open()) {
      log << s.iteration << ',' << fmt(s.ce) << ',' << fmt(s.boundary) << ',' << fmt(s.total) << ',' << fmt(s.seconds)
          << '\n';
      log.flush();
    }
    if (cfg.checkpoint_every > 0 && s.iteration % cfg.checkpoint_every == 0 && s.iteration < cfg.iterations) {
      save_checkpoint(out + ".iter" + std::to_string(s.iteration), p, st.to_extra());
    }
  };
  TrainResult res = train(cfg, train_set, std::move(resume), on_step);
  save_checkpoint(out, res.params, res.state.to_extra());
  return res;
}

std::string log_csv(const std::vector<StepLog>& log) {
  std::ostringstream os;
  os << "iteration,ce,boundary,total,seconds\n";
  for (const auto& s : log) os << s.iteration << ',' << fmt(s.ce) << ',' << fmt(s.boundary) << ',' << fmt(s.total) << ',' << fmt(s.seconds) << '\n';
  return os.str();
}

// ---- ablation ----

std::vector<Variant> default_variants() {
  return {
      {"baseline", false, 5, LossMode::ce_only},   {"+SRAM(k=3)", true, 3, LossMode::ce_only},
      {"+SRAM(k=5)", true, 5, LossMode::ce_only},  {"+SRAM(k=7)", true, 7, LossMode::ce_only},
      {"+EdgeLoss", false, 5, LossMode::ce_edge},  {"+DFB", false, 5, LossMode::ce_dfb},
      {"+All(k=5)", true, 5, LossMode::ce_dfb},
  };
}

namespace {

Variant find_variant(const std::string& name) {
  for (const auto& v : default_variants())
    if (v.name == name) return v;
  std::string known;
  for (const auto& v : default_variants()) known += (known.empty() ? "" : ", ") + v.name;
  throw std::invalid_argument("unknown variant '" + name + "' (" + known + ")");
}

std::string cell_dir_name(const std::string& variant, std::uint64_t seed) {
  std::string s;
  for (char c : variant) s += (std::isalnum(static_cast<unsigned char>(c)) ? c : '_');
  return s + "_s" + std::to_string(seed);
}

json case_json(const CaseMetrics& c) {
  auto opt = [](const std::optional<double>& v) { return v ? json(*v) : json(nullptr); };
  return {{"name", c.name}, {"dice", c.dice}, {"jaccard", c.jaccard}, {"hd95", opt(c.hd95)}, {"assd", opt(c.assd)}};
}

CaseMetrics case_from(const json& j) {
  CaseMetrics c;
  c.name = j.at("name").get<std::string>();
  c.dice = j.at("dice").get<double>();
  c.jaccard = j.at("jaccard").get<double>();
  if (!j.at("hd95").is_null()) c.hd95 = j.at("hd95").get<double>();
  if (!j.at("assd").is_null()) c.assd = j.at("assd").get<double>();
  return c;
}

}  // namespace

void AblationConfig::validate() const {
  train.validate();
  for (const auto& v : variants) find_variant(v);
  if (seeds.empty()) throw std::invalid_argument("ablation needs at least one seed");
  if (volumes < 2) throw std::invalid_argument("ablation needs at least 2 volumes");
  for (int a = 0; a < 3; ++a) {
    if (train.crop[a] > volume_shape[a]) {
      throw std::invalid_argument("crop " + dims_str(train.crop) + " is larger than volume " + dims_str(volume_shape));
    }
    if (stride && ((*stride)[a] < 1 || (*stride)[a] > train.crop[a])) {
      throw std::invalid_argument("stride must be in [1, crop] per dimension");
    }
  }
}

std::string AblationConfig::to_json() const {
  json j;
  j["train"] = train_json(train);
  j["variants"] = variants;
  j["seeds"] = seeds;
  j["data_seed"] = data_seed;
  j["volumes"] = volumes;
  j["volume_shape"] = dims_json(volume_shape);
  j["stride"] = stride ? dims_json(*stride) : json(nullptr);
  return j.dump(2);
}

AblationConfig AblationConfig::from_json(std::string_view text) {
  const json j = parse_json(text, "ablation config");
  AblationConfig c;
  Fields f(j, "ablation config");
  if (const json* t = f.raw("train")) c.train = train_from(*t, "ablation config: train");
  f.get("variants", c.variants);
  f.get("seeds", c.seeds);
  f.get("data_seed", c.data_seed);
  f.get("volumes", c.volumes);
  if (const json* v = f.raw("volume_shape")) c.volume_shape = dims_from(*v, "volume_shape");
  if (const json* v = f.raw("stride"); v && !v->is_null()) c.stride = dims_from(*v, "stride");
  f.finish();
  c.validate();
  return c;
}

double AblationReport::run_mean(const AblationRun& run, const std::string& metric) const {
  return run.metrics.summary(metric).mean;
}

MetricSummary AblationReport::variant_summary(const std::string& variant, const std::string& metric) const {
  std::vector<double> v;
  for (const auto& r : runs)
    if (r.variant == variant && r.metrics.summary(metric).count > 0) v.push_back(run_mean(r, metric));
  return summarize(v);
}

std::optional<double> AblationReport::dice_gap(const std::string& variant) const {
  const MetricSummary base = variant_summary("baseline", "dice"), v = variant_summary(variant, "dice");
  if (base.count == 0 || v.count == 0) return std::nullopt;
  return 100 * (v.mean - base.mean);
}

std::string AblationReport::table_csv() const {
  std::ostringstream os;
  os << "variant,dice_mean,dice_std,jaccard_mean,jaccard_std,hd95_mean,hd95_std,assd_mean,assd_std,seeds,dice_gap\n";
  for (const auto& name : variant_order) {
    os << name;
    for (const char* m : {"dice", "jaccard", "hd95", "assd"}) {
      const MetricSummary s = variant_summary(name, m);
      const double scale = (std::string(m) == "dice" || std::string(m) == "jaccard") ? 100 : 1;
      os << ',' << fmt(scale * s.mean) << ',' << fmt(scale * s.std);
    }
    os << ',' << variant_summary(name, "dice").count << ',';
    if (const auto g = dice_gap(name)) os << std::showpos << fmt(*g) << std::noshowpos;
    os << '\n';
  }
  return os.str();
}

std::string AblationReport::runs_csv() const {
  std::ostringstream os;
  os << "variant,seed,dice,jaccard,hd95_mm,assd_mm,hd95_undefined,permute_ops\n";
  for (const auto& name : variant_order)
    for (const auto& r : runs) {
      if (r.variant != name) continue;
      const int undefined = static_cast<int>(r.metrics.cases.size()) - r.metrics.summary("hd95").count;
      os << r.variant << ',' << r.seed << ',' << fmt(run_mean(r, "dice")) << ',' << fmt(run_mean(r, "jaccard")) << ','
         << fmt(run_mean(r, "hd95")) << ',' << fmt(run_mean(r, "assd")) << ',' << undefined << ',' << r.permute_ops
         << '\n';
    }
  return os.str();
}

std::string AblationReport::to_json() const {
  json j;
  j["variants"] = json::array();
  for (const auto& name : variant_order) {
    json v;
    v["name"] = name;
    for (const char* m : {"dice", "jaccard", "hd95", "assd"}) {
      const MetricSummary s = variant_summary(name, m);
      v[m] = {{"mean", s.mean}, {"std", s.std}, {"count", s.count}};
    }
    const auto g = dice_gap(name);
    v["dice_gap_points"] = g ? json(*g) : json(nullptr);
    j["variants"].push_back(v);
  }
  j["runs"] = json::array();
  for (const auto& r : runs) {
    json cases = json::array();
    for (const auto& c : r.metrics.cases) cases.push_back(case_json(c));
    j["runs"].push_back({{"variant", r.variant}, {"seed", r.seed}, {"permute_ops", r.permute_ops}, {"cases", cases}});
  }
  return j.dump(2);
}

AblationReport ablate(const AblationConfig& cfg, const std::string& out_dir,
                      const std::function<void(const std::string&)>& progress) {
  cfg.validate();
  std::vector<Variant> variants;
  if (cfg.variants.empty())
    variants = default_variants();
  else
    for (const auto& n : cfg.variants) variants.push_back(find_variant(n));

  const std::vector<VolumeSample> all = cfg.train.data_dir.empty()
                                            ? synth_generate(cfg.data_seed, cfg.volumes, cfg.volume_shape)
                                            : load_dataset(cfg.train.data_dir);
  const auto [train_set, test_set] = split(all, cfg.train.train_fraction, cfg.train.split_seed);
  if (test_set.empty()) throw std::invalid_argument("ablation test split is empty");
  const Dims3 window = cfg.train.crop;
  const Dims3 stride = cfg.stride.value_or(Dims3{std::max(1, window.h / 2), std::max(1, window.w / 2), std::max(1, window.d / 2)});

  AblationReport report;
  for (const auto& v : variants) report.variant_order.push_back(v.name);
  if (!out_dir.empty()) fs::create_directories(out_dir);

  for (const auto& v : variants) {
    for (std::uint64_t seed : cfg.seeds) {
      TrainConfig tc = cfg.train;
      tc.seed = seed;
      tc.loss = v.loss;
      tc.arch.sram.assign(tc.arch.channels.size(), v.sram);
      tc.arch.sram_kernel = v.sram_kernel;
      tc.log_path.clear();
      tc.checkpoint_every = 0;

      json cell = json::parse(tc.to_json());
      cell["variant"] = v.name;
      cell["data_seed"] = cfg.data_seed;
      cell["volumes"] = cfg.volumes;
      cell["volume_shape"] = dims_json(cfg.volume_shape);
      cell["stride"] = dims_json(stride);

      AblationRun run;
      run.variant = v.name;
      run.seed = seed;
      const fs::path dir = out_dir.empty() ? fs::path() : fs::path(out_dir) / cell_dir_name(v.name, seed);
      const fs::path metrics_path = dir / "metrics.json";
      if (!out_dir.empty() && fs::exists(metrics_path)) {
        const json saved = json::parse(read_text(metrics_path));
        if (saved.at("cell") == cell) {
          for (const auto& c : saved.at("cases")) run.metrics.cases.push_back(case_from(c));
          run.permute_ops = saved.at("permute_ops").get<long>();
          report.runs.push_back(std::move(run));
          if (progress) progress(v.name + " seed " + std::to_string(seed) + ": reused " + metrics_path.string());
          continue;
        }
      }

      const auto start = std::chrono::steady_clock::now();
      TrainResult res = train(tc, train_set);
      {
        Tape probe(false);
        const Dims3 c = tc.crop;
        const Tensor x = crop_at(train_set.front(), c, {0, 0, 0}).image.reshaped({1, c.h, c.w, c.d});
        forward(bind_params(probe, res.params), probe.constant(x));
        run.permute_ops = static_cast<long>(probe.count_ops("permute"));
      }
      for (std::size_t i = 0; i < test_set.size(); ++i) {
        const Tensor prob = sliding_window_infer(res.params, test_set[i].image, window, stride);
        run.metrics.cases.push_back(
            evaluate_case("test_" + std::to_string(i), binarize(prob), test_set[i].mask, test_set[i].meta.spacing));
      }
      run.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();

      if (!out_dir.empty()) {
        fs::create_directories(dir);
        save_checkpoint((dir / "model.ckpt").string(), res.params, res.state.to_extra());
        json cases = json::array();
        for (const auto& c : run.metrics.cases) cases.push_back(case_json(c));
        write_text(metrics_path, json{{"cell", cell}, {"cases", cases}, {"permute_ops", run.permute_ops}}.dump(2));
        write_text(dir / "loss.csv", log_csv(res.log));
      }
      if (progress) {
        progress(v.name + " seed " + std::to_string(seed) + ": dice " + fmt(run.metrics.summary("dice").mean) + " in " +
                 fmt(run.seconds) + " s");
      }
      report.runs.push_back(std::move(run));
    }
  }
  return report;
}

}  // namespace dpbn
