#include "dpbnet/suites.hpp"

#include <stdexcept>

#include "dpbnet/boundary_loss.hpp"
#include "dpbnet/ops.hpp"
#include "dpbnet/random.hpp"
#include "dpbnet/seg_net.hpp"
#include "dpbnet/sram.hpp"

namespace dpbn {

namespace {

Tensor random_mask(Rng& rng, Dims3 s, double fg) {
  Tensor m(Shape{s.h, s.w, s.d});
  for (Real& v : m.data()) v = rng.uniform() < fg ? 1 : 0;
  return m;
}

Dims3 random_dims(Rng& rng) { return {rng.uniform_int(8, 16), rng.uniform_int(8, 16), rng.uniform_int(8, 16)}; }

std::string describe(Dims3 s, const std::string& extra = {}) { return dims_str(s) + (extra.empty() ? "" : " " + extra); }

std::vector<SuiteCase> loss_suite(const std::string& module, std::uint64_t seed) {
  std::vector<SuiteCase> out;
  GradCheckOptions opt;
  opt.step = 1e-6;
  opt.max_coords = 500;
  for (int k : {3, 5, 7}) {
    Rng rng(derive_seed(seed, {static_cast<std::uint64_t>(k)}));
    const Dims3 s = random_dims(rng);
    const Tensor g = random_mask(rng, s, rng.uniform(0.1, 0.5));
    const Tensor p = uniform_tensor({s.h, s.w, s.d}, rng, 0.01, 0.99);
    const Tensor w = dfb_map(g, k).weights;
    opt.seed = derive_seed(seed, {7, static_cast<std::uint64_t>(k)});
    ScalarGraph graph;
    if (module == "dfb")
      graph = [&](Tape&, const std::vector<Var>& v) { return dfb_loss(v[0], g, w); };
    else if (module == "ce")
      graph = [&](Tape&, const std::vector<Var>& v) { return ce_loss(v[0], g); };
    else
      graph = [&](Tape&, const std::vector<Var>& v) { return total_loss(v[0], g, w).total; };
    SuiteCase c;
    c.module = module;
    c.instance = describe(s, module == "ce" ? "" : "k=" + std::to_string(k));
    c.result = check_gradients(graph, {p}, opt);
    c.tolerance = 1e-5;
    out.push_back(c);
    if (module == "ce" && k == 5) break;
  }
  return out;
}

std::vector<SuiteCase> sram_suite(std::uint64_t seed) {
  std::vector<SuiteCase> out;
  const Ratios menu[] = {{1, 1, 1}, {2, 2, 2}, {4, 2, 1}};
  for (std::size_t i = 0; i < 3; ++i) {
    Rng rng(derive_seed(seed, {0x5352, i}));
    const Dims3 s{8 * rng.uniform_int(1, 2), 8, 8 * rng.uniform_int(1, 2)};
    const int channels = rng.uniform_int(2, 4), kernel = i == 0 ? 3 : (i == 1 ? 5 : 7);
    const Tensor f = uniform_tensor({channels, s.h, s.w, s.d}, rng, -1, 1);
    SramParams p = SramParams::init(channels, kernel, rng);
    p.attn_bias[0] = static_cast<Real>(rng.uniform(-0.5, 0.5));
    const Tensor probe = uniform_tensor({channels, s.h, s.w, s.d}, rng, -1, 1);
    const Ratios r = menu[i];
    ScalarGraph graph = [&](Tape& t, const std::vector<Var>& v) {
      SramVars sv{v[1], v[2], v[3], v[4]};
      return sum(mul(sram_forward(v[0], sv, r).refined, t.constant(probe)));
    };
    GradCheckOptions opt;
    opt.max_coords = 600;
    opt.seed = derive_seed(seed, {0x5353, i});
    SuiteCase c;
    c.module = "sram";
    c.instance = describe(s, "C=" + std::to_string(channels) + " k=" + std::to_string(kernel) + " ratios " +
                                 std::to_string(r[0]) + "," + std::to_string(r[1]) + "," + std::to_string(r[2]));
    c.result = check_gradients(graph, {f, p.ratio_weight, p.ratio_bias, p.attn_kernel, p.attn_bias}, opt);
    c.tolerance = 1e-5;
    out.push_back(c);
  }
  return out;
}

std::vector<SuiteCase> net_suite(std::uint64_t seed) {
  Architecture a;
  a.channels = {4, 6, 8};
  a.sram_kernel = 3;
  a.boundary_k = 3;
  ModelParams p = init_model(a, derive_seed(seed, {0x4E31}));
  Rng rng(derive_seed(seed, {0x4E32}));
  const Dims3 s{16, 16, 8};
  const Tensor x = uniform_tensor({1, s.h, s.w, s.d}, rng, -1, 1);
  // Off the ReLU kinks and away from the cross-entropy clamp.
  for (auto& [name, t] : p.tensors)
    if (name.ends_with(".bias") && is_trainable(name)) t = uniform_tensor(t.shape(), rng, -0.1, 0.1);
  for (Real& v : p.at("head.weight").data()) v *= Real(0.1);
  const Tensor mask = random_mask(rng, s, 0.3);
  const Tensor weights = dfb_map(mask, 3).weights;

  Tape probe(false);
  const auto ratios = forward(bind_params(probe, p), probe.constant(x)).ratios;

  std::vector<Tensor> inputs;
  for (const auto& [name, t] : p.tensors)
    if (is_trainable(name)) inputs.push_back(t);
  const ScalarGraph graph = [&](Tape& tape, const std::vector<Var>& leaves) {
    BoundParams b;
    b.model = &p;
    std::size_t next = 0;
    for (const auto& [name, t] : p.tensors) b.vars.push_back(is_trainable(name) ? leaves[next++] : tape.constant(t));
    return total_loss(forward(b, tape.constant(x), ratios).prob, mask, weights).total;
  };
  GradCheckOptions opt;
  opt.step = 1e-6;
  opt.global_floor = true;
  opt.max_coords = 400;
  opt.seed = derive_seed(seed, {0x4E33});
  SuiteCase c;
  c.module = "net";
  c.instance = describe(s, "channels 4,6,8 sram k=3");
  c.result = check_gradients(graph, inputs, opt);
  c.tolerance = 1e-4;
  return {c};
}

}  // namespace

const std::vector<std::string>& gradcheck_modules() {
  static const std::vector<std::string> m{"dfb", "ce", "total", "sram", "net"};
  return m;
}

std::vector<SuiteCase> run_gradcheck_suite(std::string_view module, std::uint64_t seed) {
  if (module == "all") {
    std::vector<SuiteCase> out;
    for (const auto& m : gradcheck_modules()) {
      auto part = run_gradcheck_suite(m, seed);
      out.insert(out.end(), part.begin(), part.end());
    }
    return out;
  }
  const std::string m(module);
  if (m == "dfb" || m == "ce" || m == "total") return loss_suite(m, seed);
  if (m == "sram") return sram_suite(seed);
  if (m == "net") return net_suite(seed);
  throw std::invalid_argument("unknown gradcheck module '" + m + "' (dfb, ce, total, sram, net, all)");
}

}  // namespace dpbn
