#include "dpbnet/seg_net.hpp"

#include <algorithm>
#include <cmath>
#include "json.hpp"
#include <stdexcept>

#include "dpbnet/ops.hpp"
#include "dpbnet/random.hpp"
#include "dpbnet/sram.hpp"

namespace dpbn {

namespace {

std::string stage(const char* prefix, int s, const char* part) {
  return std::string(prefix) + std::to_string(s) + "." + part;
}

// Parameter layout implied by an architecture, in storage order.
NamedTensors layout(const Architecture& a) {
  NamedTensors out;
  auto conv = [&](const std::string& name, int cout, int cin, int k) {
    out.emplace_back(name + ".weight", Tensor(Shape{cout, cin, k, k, k}));
    out.emplace_back(name + ".bias", Tensor(Shape{cout}));
  };
  const int n = a.stages();
  for (int s = 0; s < n; ++s) {
    const int c = a.channels[static_cast<std::size_t>(s)];
    if (s == 0)
      conv(stage("enc", s, "in"), c, 1, 3);
    else
      conv(stage("enc", s, "down"), c, a.channels[static_cast<std::size_t>(s - 1)], 3);
    conv(stage("enc", s, "conv1"), c, c, 3);
    conv(stage("enc", s, "conv2"), c, c, 3);
    if (a.sram[static_cast<std::size_t>(s)]) {
      const int logits = 3 * static_cast<int>(kCanonicalRatios.size());
      out.emplace_back(stage("enc", s, "sram.ratio.weight"), Tensor(Shape{logits, 2 * c}));
      out.emplace_back(stage("enc", s, "sram.ratio.bias"), Tensor(Shape{logits}));
      conv(stage("enc", s, "sram.attn"), 1, 2, a.sram_kernel);
    }
  }
  for (int s = n - 2; s >= 0; --s) {
    const int c = a.channels[static_cast<std::size_t>(s)];
    conv(stage("dec", s, "up"), c, a.channels[static_cast<std::size_t>(s + 1)], 1);
    conv(stage("dec", s, "conv"), c, c, 3);
  }
  conv("head", 1, a.channels[0], 1);
  return out;
}

}  // namespace

void Architecture::validate() const {
  if (channels.size() < 2) throw std::invalid_argument("architecture needs at least 2 stages");
  if (sram.size() != channels.size()) {
    throw std::invalid_argument("architecture has " + std::to_string(channels.size()) + " stages but " +
                                std::to_string(sram.size()) + " SRAM flags");
  }
  for (int c : channels)
    if (c < 1) throw std::invalid_argument("channel widths must be positive");
  if (sram_kernel < 1 || sram_kernel % 2 == 0) throw std::invalid_argument("SRAM kernel size must be odd");
  if (boundary_k < 3 || boundary_k % 2 == 0) throw std::invalid_argument("boundary k must be odd and >= 3");
}

std::string Architecture::to_text() const {
  nlohmann::json j;
  j["channels"] = channels;
  j["sram"] = sram;
  j["sram_kernel"] = sram_kernel;
  j["boundary_k"] = boundary_k;
  return j.dump();
}

Architecture Architecture::from_text(std::string_view text) {
  Architecture a;
  try {
    const auto j = nlohmann::json::parse(text);
    a.channels = j.at("channels").get<std::vector<int>>();
    a.sram = j.at("sram").get<std::vector<bool>>();
    a.sram_kernel = j.at("sram_kernel").get<int>();
    a.boundary_k = j.at("boundary_k").get<int>();
  } catch (const nlohmann::json::exception& e) {
    throw std::invalid_argument(std::string("malformed architecture descriptor: ") + e.what());
  }
  a.validate();
  return a;
}

const Tensor& ModelParams::at(std::string_view name) const {
  for (const auto& [n, t] : tensors)
    if (n == name) return t;
  throw std::out_of_range("no parameter named '" + std::string(name) + "'");
}

Tensor& ModelParams::at(std::string_view name) {
  return const_cast<Tensor&>(static_cast<const ModelParams&>(*this).at(name));
}

bool ModelParams::contains(std::string_view name) const {
  return std::any_of(tensors.begin(), tensors.end(), [&](const auto& p) { return p.first == name; });
}

std::size_t ModelParams::parameter_count() const {
  std::size_t n = 0;
  for (const auto& [name, t] : tensors) n += t.size();
  return n;
}

bool is_trainable(std::string_view name) { return name.find(".sram.ratio.") == std::string_view::npos; }

ModelParams init_model(const Architecture& arch, std::uint64_t seed) {
  arch.validate();
  ModelParams p;
  p.arch = arch;
  p.tensors = layout(arch);
  Rng rng(derive_seed(seed, {0x696E6974}));
  for (auto& [name, t] : p.tensors) {
    if (name.ends_with(".bias")) continue;
    if (name.find(".sram.ratio.") != std::string::npos) {
      const double bound = 1.0 / std::sqrt(static_cast<double>(t.dim(1)));
      t = uniform_tensor(t.shape(), rng, -bound, bound);
      continue;
    }
    const double fan_in = static_cast<double>(t.size()) / t.dim(0);
    double bound = std::sqrt(6.0 / fan_in);
    // Sigmoid-facing convs get unit gain; residual branches start near zero
    // so stacked stages do not blow up the logits.
    if (name.find(".sram.attn.") != std::string::npos || name.starts_with("head.")) bound = std::sqrt(3.0 / fan_in);
    if (name.ends_with("conv2.weight") || (name.starts_with("dec") && name.ends_with(".conv.weight"))) bound *= 0.1;
    t = uniform_tensor(t.shape(), rng, -bound, bound);
  }
  return p;
}

Var BoundParams::get(std::string_view name) const {
  for (std::size_t i = 0; i < model->tensors.size(); ++i)
    if (model->tensors[i].first == name) return vars[i];
  throw std::out_of_range("no parameter named '" + std::string(name) + "'");
}

BoundParams bind_params(Tape& tape, const ModelParams& params) {
  BoundParams b;
  b.model = &params;
  b.vars.reserve(params.tensors.size());
  for (const auto& [name, t] : params.tensors) b.vars.push_back(is_trainable(name) ? tape.leaf(t) : tape.constant(t));
  return b;
}

ForwardResult forward(const BoundParams& p, Var input, const std::optional<std::vector<Ratios>>& forced_ratios) {
  const Architecture& a = p.model->arch;
  const Tensor& x = input.value();
  if (x.rank() != 4 || x.dim(0) != 1) {
    throw std::invalid_argument("network input must be [1,H,W,D], got " + shape_str(x.shape()));
  }
  const Dims3 s = x.spatial();
  const int div = a.divisor();
  if (s.h % div || s.w % div || s.d % div) {
    throw std::invalid_argument("input extent " + dims_str(s) + " must be divisible by " + std::to_string(div) +
                                " (2^(stages-1)) in every dimension");
  }
  auto conv = [&](Var v, const std::string& name, int stride = 1) {
    return conv3d(v, p.get(name + ".weight"), p.get(name + ".bias"), stride, Padding::zero);
  };

  ForwardResult result;
  std::vector<Var> skips;
  Var h = input;
  std::size_t sram_index = 0;
  for (int st = 0; st < a.stages(); ++st) {
    h = relu(st == 0 ? conv(h, stage("enc", st, "in")) : conv(h, stage("enc", st, "down"), 2));
    Var r = conv(relu(conv(h, stage("enc", st, "conv1"))), stage("enc", st, "conv2"));
    h = relu(add(h, r));
    if (a.sram[static_cast<std::size_t>(st)]) {
      SramVars sv{p.get(stage("enc", st, "sram.ratio.weight")), p.get(stage("enc", st, "sram.ratio.bias")),
                  p.get(stage("enc", st, "sram.attn.weight")), p.get(stage("enc", st, "sram.attn.bias"))};
      std::optional<Ratios> forced;
      if (forced_ratios) forced = forced_ratios->at(sram_index);
      SramResult sr = sram_forward(h, sv, forced);
      result.ratios.push_back(sr.ratios);
      h = sr.refined;
      ++sram_index;
    }
    skips.push_back(h);
  }
  for (int st = a.stages() - 2; st >= 0; --st) {
    Var u = conv(upsample_nearest2x(h), stage("dec", st, "up"));
    Var m = relu(add(u, skips[static_cast<std::size_t>(st)]));
    h = relu(add(m, conv(m, stage("dec", st, "conv"))));
  }
  result.prob = reshape(sigmoid(conv(h, "head")), {s.h, s.w, s.d});
  return result;
}

Tensor forward(const ModelParams& params, const Tensor& input) {
  Tape tape(false);
  const BoundParams b = bind_params(tape, params);
  Tensor x = input;
  if (x.rank() == 3) {
    const Dims3 s = x.spatial();
    x = x.reshaped({1, s.h, s.w, s.d});
  }
  return forward(b, tape.constant(std::move(x))).prob.value();
}

}  // namespace dpbn
