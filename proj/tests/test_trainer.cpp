#include <cmath>
#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "dpbnet/random.hpp"
#include "dpbnet/suites.hpp"
#include "dpbnet/trainer.hpp"

using namespace dpbn;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const char* name) {
  const fs::path p = fs::temp_directory_path() / (std::string("dpbn_train_") + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

ModelParams tiny_model() {
  Architecture a;
  a.channels = {2, 3};
  a.sram = {false, false};
  return init_model(a, 1);
}

NamedTensors grads_like(const ModelParams& p, Real value) {
  NamedTensors g;
  for (const auto& [name, t] : p.tensors)
    if (is_trainable(name)) g.emplace_back(name, Tensor(t.shape(), value));
  return g;
}

TrainConfig small_config() {
  TrainConfig c;
  c.arch.channels = {4, 8};
  c.arch.sram = {true, true};
  c.arch.sram_kernel = 3;
  c.crop = {16, 16, 8};
  c.iterations = 4;
  c.dfb_k = 3;
  c.seed = 3;
  return c;
}

// Plain soft Dice written out directly.
double soft_dice_loss(const Tensor& p, const Tensor& g, double eps) {
  double num = 0, den = 0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    num += p[i] * g[i];
    den += p[i] + g[i];
  }
  return 1 - 2 * (num + eps) / (den + eps);
}

}  // namespace

TEST_CASE("adam with zero gradient and no decay leaves parameters") {
  ModelParams p = tiny_model();
  const ModelParams before = p;
  AdamState s = AdamState::zeros(p);
  AdamConfig cfg;
  cfg.weight_decay = 0;
  for (int i = 0; i < 3; ++i) adam_step(p, grads_like(p, 0), s, cfg);
  CHECK(s.step == 3);
  for (std::size_t i = 0; i < p.tensors.size(); ++i) CHECK(bitwise_equal(p.tensors[i].second, before.tensors[i].second));
}

TEST_CASE("adam first step moves by lr") {
  ModelParams p = tiny_model();
  const ModelParams before = p;
  AdamState s = AdamState::zeros(p);
  AdamConfig cfg;
  cfg.weight_decay = 0;
  adam_step(p, grads_like(p, 1), s, cfg);
  for (std::size_t i = 0; i < p.tensors.size(); ++i) {
    const auto& [name, t] = p.tensors[i];
    for (std::size_t j = 0; j < t.size(); ++j) {
      const double moved = before.tensors[i].second[j] - t[j];
      if (is_trainable(name))
        CHECK(std::abs(moved - cfg.lr) <= 1e-11);
      else
        CHECK(moved == 0);
    }
  }
}

TEST_CASE("adam matches a scalar reference with coupled decay") {
  ModelParams p = tiny_model();
  AdamState s = AdamState::zeros(p);
  AdamConfig cfg;
  cfg.lr = 1e-2;
  cfg.weight_decay = 0.1;
  const std::string name = p.tensors.front().first;
  double theta = p.at(name)[0], m = 0, v = 0;
  const double gs[] = {0.5, -1.5, 2.0, 0.25, -0.75};
  for (int t = 1; t <= 5; ++t) {
    NamedTensors g = grads_like(p, 0);
    g.front().second[0] = static_cast<Real>(gs[t - 1]);
    adam_step(p, g, s, cfg);
    const double gt = gs[t - 1] + 0.1 * theta;
    m = 0.9 * m + 0.1 * gt;
    v = 0.999 * v + 0.001 * gt * gt;
    theta -= 1e-2 * (m / (1 - std::pow(0.9, t))) / (std::sqrt(v / (1 - std::pow(0.999, t))) + 1e-8);
    CHECK(std::abs(p.at(name)[0] - theta) <= 1e-14);
  }
}

TEST_CASE("adam rejects non-finite gradients by name") {
  ModelParams p = tiny_model();
  const ModelParams before = p;
  AdamState s = AdamState::zeros(p);
  NamedTensors g = grads_like(p, 0.1);
  g.back().second[0] = std::nan("");
  CHECK_THROWS_WITH(adam_step(p, g, s, AdamConfig{}), doctest::Contains(g.back().first.c_str()));
  CHECK(s.step == 0);
  for (std::size_t i = 0; i < p.tensors.size(); ++i) CHECK(bitwise_equal(p.tensors[i].second, before.tensors[i].second));
  g.pop_back();
  CHECK_THROWS(adam_step(p, g, s, AdamConfig{}));
}

TEST_CASE("adam state round trips through checkpoint extras") {
  ModelParams p = tiny_model();
  AdamState s = AdamState::zeros(p);
  adam_step(p, grads_like(p, 0.3), s, AdamConfig{});
  const AdamState back = AdamState::from_extra(p, s.to_extra());
  CHECK(back.step == 1);
  for (std::size_t i = 0; i < s.m.size(); ++i) {
    CHECK(bitwise_equal(back.m[i].second, s.m[i].second));
    CHECK(bitwise_equal(back.v[i].second, s.v[i].second));
  }
  CHECK_THROWS_WITH(AdamState::from_extra(p, {}), doctest::Contains("adam/step"));
}

TEST_CASE("edge weights") {
  CHECK(max_abs_diff(edge_weights(Tensor(Shape{6, 6, 6}, 1), 3), Tensor(Shape{6, 6, 6}, 1)) == 0);
  CHECK(max_abs_diff(edge_weights(Tensor(Shape{6, 6, 6}, 0), 5), Tensor(Shape{6, 6, 6}, 1)) == 0);

  Tensor single(Shape{7, 7, 7});
  single[(3 * 7 + 3) * 7 + 3] = 1;
  const Tensor w = edge_weights(single, 3);
  for (std::size_t i = 0; i < w.size(); ++i) CHECK(w[i] == (i == (3 * 7 + 3) * 7 + 3 ? 2 : 1));

  Rng rng(4);
  for (int trial = 0; trial < 10; ++trial) {
    Tensor g(Shape{8, 8, 8});
    for (Real& v : g.data()) v = rng.uniform() < 0.4 ? 1 : 0;
    const Tensor p = uniform_tensor({8, 8, 8}, rng, 0.01, 0.99);
    CHECK(edge_loss(p, g, 3) == dfb_loss(p, g, edge_weights(g, 3)));
    const Tensor ones(Shape{8, 8, 8}, 1);
    CHECK(std::abs(edge_loss(p, ones, 3) - soft_dice_loss(p, ones, kDefaultEpsilon)) <= 1e-12);
  }
}

TEST_CASE("train config json") {
  TrainConfig c = small_config();
  c.loss = LossMode::ce_edge;
  c.data_dir = "some/dir";
  const TrainConfig back = TrainConfig::from_json(c.to_json());
  CHECK(back.to_json() == c.to_json());
  CHECK(back.loss == LossMode::ce_edge);
  CHECK(back.crop == Dims3{16, 16, 8});

  const TrainConfig defaults = TrainConfig::from_json("{}");
  CHECK(defaults.adam.lr == 1e-4);
  CHECK(defaults.adam.beta1 == 0.9);
  CHECK(defaults.adam.beta2 == 0.999);
  CHECK(defaults.adam.weight_decay == 1e-4);
  CHECK(defaults.iterations == 2000);
  CHECK(defaults.dfb_k == 5);
  CHECK(defaults.epsilon == 1e-5);

  CHECK_THROWS_WITH(TrainConfig::from_json(R"({"lr": 1e-3, "lerning_rate": 2})"), doctest::Contains("unknown key 'lerning_rate'"));
  CHECK_THROWS_WITH(TrainConfig::from_json("{\"lr\": "), doctest::Contains("malformed JSON"));
  CHECK_THROWS_WITH(TrainConfig::from_json(R"({"lr": "fast"})"), doctest::Contains("'lr'"));
  CHECK_THROWS_WITH(TrainConfig::from_json(R"({"lr": 0})"), doctest::Contains("lr must be > 0"));
  CHECK_THROWS(TrainConfig::from_json(R"({"beta2": 1.0})"));
  CHECK_THROWS(TrainConfig::from_json(R"({"iterations": 0})"));
  CHECK_THROWS_WITH(TrainConfig::from_json(R"({"loss": "dice"})"), doctest::Contains("unknown loss mode"));
  CHECK_THROWS_WITH(TrainConfig::from_json(R"({"crop": [30, 32, 16]})"), doctest::Contains("divisible"));
}

TEST_CASE("one iteration takes one step and logs the decomposition") {
  TrainConfig c = small_config();
  c.iterations = 1;
  const auto data = synth_generate(1, 2, {16, 16, 16});
  const TrainResult r = train(c, data);
  CHECK(r.state.step == 1);
  REQUIRE(r.log.size() == 1);
  CHECK(r.log[0].iteration == 1);
  CHECK(r.log[0].total == r.log[0].ce + r.log[0].boundary);
  CHECK(r.log[0].boundary > 0);

  for (LossMode mode : {LossMode::ce_only, LossMode::ce_edge}) {
    c.loss = mode;
    const TrainResult m = train(c, data);
    CHECK(m.log[0].total == m.log[0].ce + m.log[0].boundary);
    CHECK((m.log[0].boundary == 0) == (mode == LossMode::ce_only));
  }
  CHECK_THROWS_WITH(train(c, {}), doctest::Contains("empty"));
}

TEST_CASE("training is deterministic and resumes exactly") {
  const fs::path dir = scratch("resume");
  TrainConfig c = small_config();
  c.iterations = 6;
  save_dataset(synth_generate(9, 5, {16, 16, 16}), (dir / "data").string());
  c.data_dir = (dir / "data").string();

  const TrainResult a = train_to_file(c, (dir / "a.ckpt").string());
  const TrainResult b = train_to_file(c, (dir / "b.ckpt").string());
  {
    std::ifstream fa(dir / "a.ckpt", std::ios::binary), fb(dir / "b.ckpt", std::ios::binary);
    const std::string sa{std::istreambuf_iterator<char>(fa), {}}, sb{std::istreambuf_iterator<char>(fb), {}};
    CHECK(sa == sb);
  }

  TrainConfig half = c;
  half.iterations = 3;
  train_to_file(half, (dir / "half.ckpt").string());
  const TrainResult resumed = train_to_file(c, (dir / "resumed.ckpt").string(), (dir / "half.ckpt").string());
  CHECK(resumed.log.size() == 3);
  CHECK(resumed.log.front().iteration == 4);
  CHECK(resumed.state.step == 6);
  for (std::size_t i = 0; i < a.params.tensors.size(); ++i)
    CHECK(bitwise_equal(a.params.tensors[i].second, resumed.params.tensors[i].second));
  for (std::size_t i = 0; i < a.state.m.size(); ++i) {
    CHECK(bitwise_equal(a.state.m[i].second, resumed.state.m[i].second));
    CHECK(bitwise_equal(a.state.v[i].second, resumed.state.v[i].second));
  }
  for (std::size_t i = 0; i < 3; ++i) CHECK(resumed.log[i].total == a.log[i + 3].total);

  TrainConfig other = c;
  other.arch.channels = {4, 4};
  CHECK_THROWS_WITH(train_to_file(other, (dir / "x.ckpt").string(), (dir / "half.ckpt").string()),
                    doctest::Contains("architecture"));
  other = c;
  other.data_dir = (dir / "nowhere").string();
  CHECK_THROWS_WITH(train_to_file(other, (dir / "x.ckpt").string()), doctest::Contains("no dataset"));
  CHECK_FALSE(fs::exists(dir / "x.ckpt"));
  fs::remove_all(dir);
}

TEST_CASE("periodic checkpoints and loss log") {
  const fs::path dir = scratch("periodic");
  TrainConfig c = small_config();
  c.iterations = 5;
  c.checkpoint_every = 2;
  c.log_path = (dir / "loss.csv").string();
  save_dataset(synth_generate(9, 3, {16, 16, 16}), (dir / "data").string());
  c.data_dir = (dir / "data").string();
  train_to_file(c, (dir / "m.ckpt").string());
  CHECK(fs::exists(dir / "m.ckpt.iter2"));
  CHECK(fs::exists(dir / "m.ckpt.iter4"));
  CHECK(fs::exists(dir / "m.ckpt"));
  std::ifstream log(dir / "loss.csv");
  std::string line;
  int lines = 0;
  std::getline(log, line);
  CHECK(line == "iteration,ce,boundary,total,seconds");
  while (std::getline(log, line)) ++lines;
  CHECK(lines == 5);
  fs::remove_all(dir);
}

TEST_CASE("cross-entropy decreases on an easy phantom set") {
  TrainConfig c;
  c.arch.channels = {4, 8};
  c.arch.sram = {false, false};
  c.crop = {16, 16, 16};
  c.loss = LossMode::ce_only;
  c.iterations = 200;
  c.adam.lr = 1e-3;
  PhantomConfig easy;
  easy.noise_sigma = 0;
  easy.texture_amplitude = 0;
  std::vector<VolumeSample> data;
  for (int i = 0; i < 4; ++i) data.push_back(synth_sample(6, i, {16, 16, 16}, easy));
  const TrainResult r = train(c, data);
  double first = 0, last = 0;
  for (int i = 0; i < 20; ++i) {
    first += r.log[static_cast<std::size_t>(i)].ce / 20;
    last += r.log[r.log.size() - 1 - static_cast<std::size_t>(i)].ce / 20;
  }
  INFO("first " << first << " last " << last);
  CHECK(last < 0.5 * first);
}

TEST_CASE("ablation bookkeeping") {
  const fs::path dir = scratch("ablate");
  AblationConfig a;
  a.train = small_config();
  a.train.iterations = 2;
  a.variants = {"baseline", "+All(k=5)"};
  a.seeds = {0, 1};
  a.volumes = 4;
  a.volume_shape = {16, 16, 16};
  a.train.train_fraction = 0.5;
  std::vector<std::string> messages;
  const AblationReport r = ablate(a, dir.string(), [&](const std::string& m) { messages.push_back(m); });
  REQUIRE(r.runs.size() == 4);
  CHECK(r.variant_order == std::vector<std::string>{"baseline", "+All(k=5)"});
  for (const auto& run : r.runs) {
    CHECK(run.metrics.cases.size() == 2);
    if (run.variant == "baseline") CHECK(run.permute_ops == 0);
  }
  CHECK(fs::exists(dir / "baseline_s0" / "model.ckpt"));
  CHECK(fs::exists(dir / "_All_k_5__s1" / "metrics.json"));

  const std::string table = r.table_csv();
  CHECK(table.rfind("variant,dice_mean,dice_std,jaccard_mean,jaccard_std,hd95_mean,hd95_std,assd_mean,assd_std,seeds,dice_gap\n"
                    "baseline,",
                    0) == 0);
  CHECK(table.find("\n+All(k=5),") != std::string::npos);
  const double gap = *r.dice_gap("+All(k=5)");
  CHECK(gap == 100 * (r.variant_summary("+All(k=5)", "dice").mean - r.variant_summary("baseline", "dice").mean));
  CHECK(table.find(gap >= 0 ? ",+" : ",-") != std::string::npos);
  CHECK(*r.dice_gap("baseline") == 0);

  const AblationReport again = ablate(a, dir.string(), [&](const std::string& m) { messages.push_back(m); });
  CHECK(again.to_json() == r.to_json());
  CHECK(again.table_csv() == table);
  CHECK(messages.back().find("reused") != std::string::npos);

  AblationConfig bad = a;
  bad.variants = {"+Magic"};
  CHECK_THROWS_WITH(ablate(bad), doctest::Contains("unknown variant"));
  CHECK(AblationConfig::from_json(a.to_json()).to_json() == a.to_json());
  CHECK(default_variants().size() == 7);
  fs::remove_all(dir);
}

TEST_CASE("gradcheck suites pass") {
  for (const char* m : {"dfb", "ce", "total", "sram"}) {
    for (const SuiteCase& c : run_gradcheck_suite(m, 7)) {
      INFO(c.module << " " << c.instance << " " << c.result.worst);
      CHECK(c.passed());
    }
  }
  CHECK_THROWS(run_gradcheck_suite("nope", 1));
}
