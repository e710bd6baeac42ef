#pragma once

#include <array>
#include <functional>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "dpbnet/seg_net.hpp"
#include "dpbnet/tensor.hpp"

namespace dpbn {

/// 2|a n b| / (|a| + |b|); 1 when both masks are empty.
double dice(const Tensor& a, const Tensor& b);
/// |a n b| / |a u b|; 1 when both masks are empty.
double jaccard(const Tensor& a, const Tensor& b);

/// Mask voxels with at least one background 6-neighbour; outside the volume
/// counts as background.
std::vector<std::array<int, 3>> surface_voxels(const Tensor& mask);

struct SurfaceDistances {
  std::vector<double> a_to_b;  // sorted, mm
  std::vector<double> b_to_a;  // sorted, mm
};

/// Nearest-surface distances in both directions, all pairs, in mm.
SurfaceDistances surface_distances(const Tensor& a, const Tensor& b, double spacing);
/// 95th percentile (linear interpolation) of both directed lists pooled.
double hd95(const Tensor& a, const Tensor& b, double spacing);
/// Mean of both directed lists pooled.
double assd(const Tensor& a, const Tensor& b, double spacing);
/// Linear interpolation between order statistics at q * (n - 1); `sorted` must be non-empty.
double percentile(const std::vector<double>& sorted, double q);

/// p >= threshold.
Tensor binarize(const Tensor& prob, double threshold = 0.5);

/// Window origins along one axis: 0, stride, 2 stride, ... plus a final origin
/// extent - window so the last window touches the border. stride must not
/// exceed window.
std::vector<int> window_origins(int extent, int window, int stride);
/// How many windows cover each voxel.
Tensor coverage_counts(Dims3 volume, Dims3 window, Dims3 stride);

using WindowPredictor = std::function<Tensor(const Tensor& window)>;

/// Averages per-window probabilities over overlaps. `volume` is [H,W,D];
/// the predictor maps a [h,w,d] window to probabilities of the same shape.
Tensor sliding_window_infer(const WindowPredictor& predict, const Tensor& volume, Dims3 window, Dims3 stride);
Tensor sliding_window_infer(const ModelParams& params, const Tensor& volume, Dims3 window, Dims3 stride);

struct CaseMetrics {
  std::string name;
  double dice = 0;
  double jaccard = 0;
  std::optional<double> hd95;  // empty when either mask is empty
  std::optional<double> assd;
};

CaseMetrics evaluate_case(const std::string& name, const Tensor& pred, const Tensor& truth, double spacing);

struct MetricSummary {
  double mean = 0;
  double std = 0;  // sample standard deviation, 0 for a single value
  int count = 0;
};

MetricSummary summarize(const std::vector<double>& values);

struct MetricsReport {
  std::vector<CaseMetrics> cases;
  std::vector<std::pair<std::string, std::string>> config;  // echoed run settings

  MetricSummary summary(const std::string& metric) const;  // dice, jaccard, hd95, assd
  std::string to_json() const;
  std::string to_csv() const;
};

}  // namespace dpbn
