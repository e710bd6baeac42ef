#include "dpbnet/position_transform.hpp"

#include <algorithm>
#include <stdexcept>
#include <string>

#include "dpbnet/ops.hpp"

namespace dpbn {

namespace {

constexpr const char* kAxisNames[3] = {"H", "W", "D"};

AxisPermutation make_axis(int size, int ratio, int axis) {
  if (size < 1) throw std::invalid_argument("axis size must be positive");
  if (ratio < 1 || size % ratio != 0) {
    throw std::invalid_argument(std::string("shuffle ratio ") + std::to_string(ratio) + " does not divide " +
                                kAxisNames[axis] + " extent " + std::to_string(size));
  }
  AxisPermutation p;
  p.size = size;
  p.ratio = ratio;
  p.groups = size / ratio;
  p.forward.resize(static_cast<std::size_t>(size));
  p.inverse.resize(static_cast<std::size_t>(size));
  for (int i = 0; i < size; ++i) {
    const int dst = kappa(i + 1, p.groups, p.ratio) - 1;
    p.forward[static_cast<std::size_t>(i)] = dst;
    p.inverse[static_cast<std::size_t>(dst)] = i;
  }
  return p;
}

void check_plan_shape(const Shape& shape, const ShufflePlan& plan) {
  if (shape.size() != 4 || Dims3{shape[1], shape[2], shape[3]} != plan.shape()) {
    throw std::invalid_argument("tensor " + shape_str(shape) + " does not match shuffle plan extent " +
                                dims_str(plan.shape()));
  }
}

}  // namespace

int kappa(int i, int groups, int ratio) {
  if (groups < 1 || ratio < 1) throw std::invalid_argument("kappa: groups and ratio must be positive");
  if (i < 1 || i > groups * ratio) {
    throw std::out_of_range("kappa: index " + std::to_string(i) + " outside [1, " + std::to_string(groups * ratio) +
                            "]");
  }
  return ((i - 1) % groups) * ratio + (i - 1) / groups + 1;
}

bool AxisPermutation::is_identity() const {
  for (int i = 0; i < size; ++i)
    if (forward[static_cast<std::size_t>(i)] != i) return false;
  return true;
}

ShufflePlan ShufflePlan::build(const Dims3& shape, const Ratios& ratios) {
  ShufflePlan plan;
  for (int a = 0; a < 3; ++a) plan.axes_[static_cast<std::size_t>(a)] = make_axis(shape[a], ratios[static_cast<std::size_t>(a)], a);
  return plan;
}

bool ShufflePlan::is_identity() const {
  return std::all_of(axes_.begin(), axes_.end(), [](const AxisPermutation& p) { return p.is_identity(); });
}

// shuffle gathers through the inverse (out[j] = in[inverse[j]]); reorder through forward.
Tensor shuffle(const Tensor& features, const ShufflePlan& plan) {
  check_plan_shape(features.shape(), plan);
  return permute_spatial(features, plan.axis(0).inverse, plan.axis(1).inverse, plan.axis(2).inverse);
}

Tensor reorder(const Tensor& shuffled, const ShufflePlan& plan) {
  check_plan_shape(shuffled.shape(), plan);
  return permute_spatial(shuffled, plan.axis(0).forward, plan.axis(1).forward, plan.axis(2).forward);
}

Var shuffle(Var features, const ShufflePlan& plan) {
  check_plan_shape(features.shape(), plan);
  return permute_spatial(features, plan.axis(0).inverse, plan.axis(1).inverse, plan.axis(2).inverse);
}

Var reorder(Var shuffled, const ShufflePlan& plan) {
  check_plan_shape(shuffled.shape(), plan);
  return permute_spatial(shuffled, plan.axis(0).forward, plan.axis(1).forward, plan.axis(2).forward);
}

RatioMenu RatioMenu::for_shape(const Dims3& shape) {
  RatioMenu menu;
  for (int a = 0; a < 3; ++a) {
    auto& m = menu.axes[static_cast<std::size_t>(a)];
    m.push_back(1);
    for (int r : {2, 4, 8, 16})
      if (shape[a] % r == 0) m.push_back(r);
  }
  return menu;
}

Ratios select_ratios(std::span<const Real> logits, const Dims3& shape, const RatioMenu& menu) {
  if (logits.size() != menu.total()) {
    throw std::invalid_argument("select_ratios: " + std::to_string(logits.size()) + " logits for " +
                                std::to_string(menu.total()) + " candidates");
  }
  Ratios out{1, 1, 1};
  std::size_t offset = 0;
  for (int a = 0; a < 3; ++a) {
    const auto& cand = menu.axes[static_cast<std::size_t>(a)];
    for (int r : cand) {
      if (r < 1 || shape[a] % r != 0) {
        throw std::invalid_argument(std::string("select_ratios: menu entry ") + std::to_string(r) +
                                    " does not divide " + kAxisNames[a] + " extent " + std::to_string(shape[a]));
      }
    }
    if (!cand.empty()) {
      std::size_t best = 0;
      for (std::size_t j = 1; j < cand.size(); ++j) {
        const Real lj = logits[offset + j], lb = logits[offset + best];
        if (lj > lb || (lj == lb && cand[j] < cand[best])) best = j;
      }
      out[static_cast<std::size_t>(a)] = cand[best];
    }
    offset += cand.size();
  }
  return out;
}

std::vector<Real> menu_logits(std::span<const Real> canonical_logits, const RatioMenu& menu) {
  const std::size_t per_axis = kCanonicalRatios.size();
  if (canonical_logits.size() != 3 * per_axis) {
    throw std::invalid_argument("menu_logits: expected " + std::to_string(3 * per_axis) + " canonical logits, got " +
                                std::to_string(canonical_logits.size()));
  }
  std::vector<Real> out;
  out.reserve(menu.total());
  for (int a = 0; a < 3; ++a) {
    for (int r : menu.axes[static_cast<std::size_t>(a)]) {
      const auto it = std::find(kCanonicalRatios.begin(), kCanonicalRatios.end(), r);
      if (it == kCanonicalRatios.end()) {
        throw std::invalid_argument("menu_logits: ratio " + std::to_string(r) + " has no canonical logit");
      }
      out.push_back(canonical_logits[static_cast<std::size_t>(a) * per_axis +
                                     static_cast<std::size_t>(it - kCanonicalRatios.begin())]);
    }
  }
  return out;
}

}  // namespace dpbn
