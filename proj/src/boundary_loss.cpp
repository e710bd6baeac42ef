#include "dpbnet/boundary_loss.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

#include "dpbnet/ops.hpp"

namespace dpbn {

namespace {

void require_volume3(const Tensor& t, const char* what) {
  if (t.rank() != 3) throw std::invalid_argument(std::string(what) + " must be [H,W,D], got " + shape_str(t.shape()));
}

void check_loss_inputs(const Tensor& prob, const Tensor& mask, const Tensor* weights) {
  if (!same_shape(prob, mask)) {
    throw std::invalid_argument("probability shape " + shape_str(prob.shape()) + " does not match mask " +
                                shape_str(mask.shape()));
  }
  if (weights && !same_shape(*weights, mask)) {
    throw std::invalid_argument("weight shape " + shape_str(weights->shape()) + " does not match mask " +
                                shape_str(mask.shape()));
  }
  for (Real p : prob.data()) {
    if (!(p >= 0 && p <= 1)) throw std::invalid_argument("probabilities must lie in [0, 1]");
  }
}

struct DiceSums {
  Real num = 0;
  Real den = 0;
};

DiceSums dice_sums(const Tensor& prob, const Tensor& mask, const Tensor& weights, Real eps) {
  DiceSums s;
  for (std::size_t i = 0; i < prob.size(); ++i) {
    s.num += weights[i] * prob[i] * mask[i];
    s.den += weights[i] * prob[i] + weights[i] * mask[i];
  }
  s.num += eps;
  s.den += eps;
  return s;
}

Real clamp_prob(Real p) { return std::clamp(p, kProbabilityClamp, Real(1) - kProbabilityClamp); }

}  // namespace

void require_binary(const Tensor& mask, const char* what) {
  for (Real v : mask.data()) {
    if (v != 0 && v != 1) throw std::invalid_argument(std::string(what) + " must be binary (0/1)");
  }
}

Tensor neighbor_count(const Tensor& mask, int k) {
  require_volume3(mask, "mask");
  if (k < 3 || k % 2 == 0) throw std::invalid_argument("neighbourhood size k must be odd and >= 3, got " + std::to_string(k));
  require_binary(mask, "mask");
  const Dims3 s = mask.spatial();
  const Tensor ones(Shape{1, 1, k, k, k}, 1);
  Tensor counts = conv3d(mask.reshaped({1, s.h, s.w, s.d}), ones, Tensor(), 1, Padding::replicate);
  // Sums of at most k^3 ones are exact; rounding guards against any reassociation.
  for (Real& v : counts.data()) v = std::round(v);
  return counts.reshaped({s.h, s.w, s.d});
}

DfbMap dfb_map(const Tensor& mask, int k) {
  DfbMap map;
  map.k = k;
  map.weights = neighbor_count(mask, k);
  const Real full = static_cast<Real>(k) * k * k;
  for (std::size_t i = 0; i < mask.size(); ++i) {
    Real& w = map.weights[i];
    w = mask[i] == 1 ? full - w + 1 : w + 1;
  }
  return map;
}

Real dfb_loss(const Tensor& prob, const Tensor& mask, const Tensor& weights, Real eps) {
  check_loss_inputs(prob, mask, &weights);
  const DiceSums s = dice_sums(prob, mask, weights, eps);
  return Real(1) - Real(2) * s.num / s.den;
}

Real dfb_loss(const Tensor& prob, const Tensor& mask, const DfbMap& map, Real eps) {
  return dfb_loss(prob, mask, map.weights, eps);
}

Tensor dfb_loss_grad(const Tensor& prob, const Tensor& mask, const Tensor& weights, Real eps) {
  check_loss_inputs(prob, mask, &weights);
  const DiceSums s = dice_sums(prob, mask, weights, eps);
  Tensor g(prob.shape());
  const Real inv = Real(1) / s.den;
  const Real quot = Real(2) * s.num * inv * inv;
  for (std::size_t i = 0; i < g.size(); ++i) g[i] = -Real(2) * weights[i] * mask[i] * inv + quot * weights[i];
  return g;
}

Real ce_loss(const Tensor& prob, const Tensor& mask) {
  check_loss_inputs(prob, mask, nullptr);
  Real acc = 0;
  for (std::size_t i = 0; i < prob.size(); ++i) {
    const Real p = clamp_prob(prob[i]);
    acc -= mask[i] * std::log(p) + (Real(1) - mask[i]) * std::log(Real(1) - p);
  }
  return acc / static_cast<Real>(prob.size());
}

Tensor ce_loss_grad(const Tensor& prob, const Tensor& mask) {
  check_loss_inputs(prob, mask, nullptr);
  Tensor g(prob.shape());
  const Real n = static_cast<Real>(prob.size());
  for (std::size_t i = 0; i < g.size(); ++i) {
    const Real p = clamp_prob(prob[i]);
    g[i] = (-mask[i] / p + (Real(1) - mask[i]) / (Real(1) - p)) / n;
  }
  return g;
}

Var dfb_loss(Var prob, const Tensor& mask, const Tensor& weights, Real eps) {
  const Real value = dfb_loss(prob.value(), mask, weights, eps);
  return prob.tape->record("dfb_loss", Tensor::scalar(value), {prob}, [prob, mask, weights, eps](Tape& t, const Tensor& g) {
    Tensor d = dfb_loss_grad(t.value(prob.id), mask, weights, eps);
    const Real s = g.item();
    for (Real& v : d.data()) v *= s;
    t.accumulate(prob.id, d);
  });
}

Var ce_loss(Var prob, const Tensor& mask) {
  const Real value = ce_loss(prob.value(), mask);
  return prob.tape->record("ce_loss", Tensor::scalar(value), {prob}, [prob, mask](Tape& t, const Tensor& g) {
    Tensor d = ce_loss_grad(t.value(prob.id), mask);
    const Real s = g.item();
    for (Real& v : d.data()) v *= s;
    t.accumulate(prob.id, d);
  });
}

LossTerms total_loss(Var prob, const Tensor& mask, const Tensor& weights, Real eps) {
  Var ce = ce_loss(prob, mask);
  Var boundary = dfb_loss(prob, mask, weights, eps);
  LossTerms out;
  out.ce = ce.value().item();
  out.boundary = boundary.value().item();
  out.total = add(ce, boundary);
  return out;
}

Real total_loss(const Tensor& prob, const Tensor& mask, int k, Real eps) {
  const DfbMap map = dfb_map(mask, k);
  return ce_loss(prob, mask) + dfb_loss(prob, mask, map.weights, eps);
}

}  // namespace dpbn
