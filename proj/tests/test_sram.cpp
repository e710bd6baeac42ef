#include <algorithm>
#include <cmath>

#include "doctest.h"
#include "dpbnet/gradcheck.hpp"
#include "dpbnet/ops.hpp"
#include "dpbnet/sram.hpp"

using namespace dpbn;

namespace {

// Plain spatial attention with no permutation, written with explicit loops.
Tensor reference_spatial_attention(const Tensor& f, const SramParams& p) {
  const int c = f.dim(0);
  const Dims3 s = f.spatial();
  const std::size_t n = s.numel();
  std::vector<Real> mx(n), av(n);
  for (std::size_t i = 0; i < n; ++i) {
    Real m = f[i], acc = 0;
    for (int ci = 0; ci < c; ++ci) {
      m = std::max(m, f[static_cast<std::size_t>(ci) * n + i]);
      acc += f[static_cast<std::size_t>(ci) * n + i];
    }
    mx[i] = m;
    av[i] = acc / c;
  }
  const int k = p.kernel_size(), r = k / 2;
  Tensor out(f.shape());
  for (int h = 0; h < s.h; ++h)
    for (int w = 0; w < s.w; ++w)
      for (int d = 0; d < s.d; ++d) {
        Real z = p.attn_bias[0];
        for (int ch = 0; ch < 2; ++ch)
          for (int a = 0; a < k; ++a)
            for (int b = 0; b < k; ++b)
              for (int e = 0; e < k; ++e) {
                const int hh = h + a - r, ww = w + b - r, dd = d + e - r;
                if (hh < 0 || hh >= s.h || ww < 0 || ww >= s.w || dd < 0 || dd >= s.d) continue;
                const std::size_t src = (static_cast<std::size_t>(hh) * s.w + ww) * s.d + dd;
                z += p.attn_kernel[(((static_cast<std::size_t>(ch) * k + a) * k + b) * k) + e] *
                     (ch == 0 ? mx[src] : av[src]);
              }
        const Real attn = 1 / (1 + std::exp(-z));
        const std::size_t i = (static_cast<std::size_t>(h) * s.w + w) * s.d + d;
        for (int ci = 0; ci < c; ++ci) out[static_cast<std::size_t>(ci) * n + i] = (attn + 1) * f[static_cast<std::size_t>(ci) * n + i];
      }
  return out;
}

SramParams with_constant_attention(SramParams p, Real bias) {
  p.attn_kernel.fill(0);
  p.attn_bias.fill(bias);
  return p;
}

}  // namespace

TEST_CASE("channel descriptor") {
  const Tensor c(Shape{3, 2, 2, 2}, -0.75);
  const Tensor d = channel_descriptor(c);
  CHECK(d.shape() == Shape{6});
  for (Real v : d.data()) CHECK(v == -0.75);

  Tensor one(Shape{1, 2, 2, 2}, 0);
  one[7] = 10;
  CHECK(channel_descriptor(one).storage() == std::vector<Real>{10, 1.25});

  Rng rng(1);
  const Tensor f = uniform_tensor({4, 6, 4, 8}, rng, -1, 1);
  const ShufflePlan plan = ShufflePlan::build({6, 4, 8}, {3, 2, 4});
  const Tensor a = channel_descriptor(f), b = channel_descriptor(shuffle(f, plan));
  for (std::size_t i = 0; i < 4; ++i) CHECK(a[i] == b[i]);  // max is order independent
  for (std::size_t i = 4; i < 8; ++i) CHECK(a[i] == doctest::Approx(b[i]).epsilon(1e-14));
}

TEST_CASE("spatial descriptor") {
  Tensor two(Shape{2, 2, 3, 2}, 0);
  for (std::size_t i = 12; i < 24; ++i) two[i] = 1;
  const Tensor d = spatial_descriptor(two);
  CHECK(d.shape() == Shape{2, 2, 3, 2});
  for (std::size_t i = 0; i < 12; ++i) CHECK(d[i] == 1);
  for (std::size_t i = 12; i < 24; ++i) CHECK(d[i] == 0.5);

  Rng rng(2);
  const Tensor f1 = uniform_tensor({1, 3, 2, 2}, rng, -1, 1);
  const Tensor d1 = spatial_descriptor(f1);
  for (std::size_t i = 0; i < 12; ++i) {
    CHECK(d1[i] == f1[i]);
    CHECK(d1[12 + i] == f1[i]);
  }

  const Tensor f = uniform_tensor({5, 8, 4, 6}, rng, -1, 1);
  const ShufflePlan plan = ShufflePlan::build({8, 4, 6}, {2, 4, 3});
  CHECK(bitwise_equal(spatial_descriptor(shuffle(f, plan)), shuffle(spatial_descriptor(f), plan)));
}

TEST_CASE("SRAM near-identity and exact 1.5 scaling") {
  Rng rng(3);
  const Tensor f = uniform_tensor({4, 8, 8, 4}, rng, -2, 2);
  const SramParams p = SramParams::init(4, 7, rng);

  const Tensor quiet = sram_forward(f, with_constant_attention(p, -20));
  const Real expected_attn = 1 / (1 + std::exp(Real(20)));  // ~2.06e-9
  CHECK(expected_attn < 2.1e-9);
  CHECK(max_abs_diff(quiet, f) / max_abs(f) <= 1e-8);

  const Tensor half = sram_forward(f, with_constant_attention(p, 0));
  Tensor scaled = f;
  for (Real& v : scaled.data()) v *= 1.5;
  CHECK(bitwise_equal(half, scaled));
}

TEST_CASE("SRAM with identity ratios equals plain spatial attention") {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    Rng rng(seed);
    const Tensor f = uniform_tensor({3, 6, 4, 8}, rng, -1, 1);
    SramParams p = SramParams::init(3, seed % 2 ? 7 : 3, rng);
    p.attn_bias[0] = rng.uniform(-0.5, 0.5);
    const Tensor got = sram_forward(f, p, Ratios{1, 1, 1});
    const Tensor ref = reference_spatial_attention(f, p);
    CHECK(max_abs_diff(got, ref) <= 1e-12);
  }
}

TEST_CASE("SRAM output shape and bounded amplification") {
  Rng rng(4);
  for (int trial = 0; trial < 10; ++trial) {
    const Tensor f = uniform_tensor({2, 8, 4, 16}, rng, -3, 3);
    SramParams p = SramParams::init(2, 5, rng);
    p.ratio_weight = uniform_tensor(p.ratio_weight.shape(), rng, -3, 3);
    Tape t(false);
    SramVars v{t.constant(p.ratio_weight), t.constant(p.ratio_bias), t.constant(p.attn_kernel),
               t.constant(p.attn_bias)};
    const SramResult r = sram_forward(t.constant(f), v);
    const Tensor& out = r.refined.value();
    REQUIRE(out.shape() == f.shape());
    for (std::size_t i = 0; i < f.size(); ++i) {
      if (f[i] == 0) continue;
      CHECK(std::abs(out[i]) > std::abs(f[i]));
      CHECK(std::abs(out[i]) < 2 * std::abs(f[i]));
    }
    const Dims3 s = f.spatial();
    for (int a = 0; a < 3; ++a) CHECK(s[a] % r.ratios[static_cast<std::size_t>(a)] == 0);
  }
}

TEST_CASE("SRAM ratios respond to the input") {
  Rng rng(5);
  SramParams p = SramParams::init(4, 3, rng);
  std::vector<Ratios> seen;
  for (int trial = 0; trial < 20; ++trial) {
    const Tensor f = uniform_tensor({4, 16, 16, 8}, rng, -trial, trial + 1);
    const Ratios r = sram_ratios(f, p.ratio_weight, p.ratio_bias);
    if (std::find(seen.begin(), seen.end(), r) == seen.end()) seen.push_back(r);
  }
  CHECK(seen.size() > 1);
}

TEST_CASE("SRAM gradient check with frozen ratios") {
  for (const Ratios ratios : {Ratios{1, 1, 1}, Ratios{2, 4, 2}, Ratios{4, 2, 8}}) {
    Rng rng(6);
    const Tensor f = uniform_tensor({3, 8, 8, 8}, rng, -1, 1);
    SramParams p = SramParams::init(3, 5, rng);
    p.attn_bias[0] = 0.2;
    const Tensor w = uniform_tensor({3, 8, 8, 8}, rng, -1, 1);
    ScalarGraph g = [&](Tape& t, const std::vector<Var>& v) {
      SramVars sv{v[1], v[2], v[3], v[4]};
      return sum(mul(sram_forward(v[0], sv, ratios).refined, t.constant(w)));
    };
    GradCheckOptions opt;
    opt.max_coords = 600;
    opt.seed = 17;
    GradCheckResult r = check_gradients(g, {f, p.ratio_weight, p.ratio_bias, p.attn_kernel, p.attn_bias}, opt);
    INFO(r.worst);
    CHECK(r.max_rel_error <= 1e-5);
  }
}
