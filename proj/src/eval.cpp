#include "dpbnet/eval.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <limits>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "json.hpp"

namespace dpbn {

namespace {

void require_pair(const Tensor& a, const Tensor& b, const char* what) {
  if (a.rank() != 3 || !same_shape(a, b)) {
    throw std::invalid_argument(std::string(what) + ": masks must be [H,W,D] of equal shape, got " +
                                shape_str(a.shape()) + " and " + shape_str(b.shape()));
  }
}

std::pair<double, double> overlap_counts(const Tensor& a, const Tensor& b, double& inter) {
  double na = 0, nb = 0;
  inter = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const bool x = a[i] != 0, y = b[i] != 0;
    na += x;
    nb += y;
    inter += x && y;
  }
  return {na, nb};
}

std::vector<double> directed(const std::vector<std::array<int, 3>>& from, const std::vector<std::array<int, 3>>& to,
                             double spacing) {
  std::vector<double> out;
  out.reserve(from.size());
  for (const auto& p : from) {
    long best = std::numeric_limits<long>::max();
    for (const auto& q : to) {
      const long dh = p[0] - q[0], dw = p[1] - q[1], dd = p[2] - q[2];
      best = std::min(best, dh * dh + dw * dw + dd * dd);
    }
    out.push_back(std::sqrt(static_cast<double>(best)) * spacing);
  }
  std::sort(out.begin(), out.end());
  return out;
}

std::vector<double> pooled(const SurfaceDistances& s) {
  std::vector<double> all = s.a_to_b;
  all.insert(all.end(), s.b_to_a.begin(), s.b_to_a.end());
  std::sort(all.begin(), all.end());
  return all;
}

std::string fmt(double v) {
  std::ostringstream os;
  os << std::setprecision(10) << v;
  return os.str();
}

}  // namespace

double dice(const Tensor& a, const Tensor& b) {
  require_pair(a, b, "dice");
  double inter = 0;
  const auto [na, nb] = overlap_counts(a, b, inter);
  if (na + nb == 0) return 1;
  return 2 * inter / (na + nb);
}

double jaccard(const Tensor& a, const Tensor& b) {
  require_pair(a, b, "jaccard");
  double inter = 0;
  const auto [na, nb] = overlap_counts(a, b, inter);
  if (na + nb == 0) return 1;
  return inter / (na + nb - inter);
}

std::vector<std::array<int, 3>> surface_voxels(const Tensor& mask) {
  if (mask.rank() != 3) throw std::invalid_argument("surface_voxels: mask must be [H,W,D]");
  const Dims3 s = mask.spatial();
  auto fg = [&](int h, int w, int d) {
    if (h < 0 || h >= s.h || w < 0 || w >= s.w || d < 0 || d >= s.d) return false;
    return mask[(static_cast<std::size_t>(h) * s.w + w) * s.d + d] != 0;
  };
  std::vector<std::array<int, 3>> out;
  for (int h = 0; h < s.h; ++h)
    for (int w = 0; w < s.w; ++w)
      for (int d = 0; d < s.d; ++d) {
        if (!fg(h, w, d)) continue;
        if (!fg(h - 1, w, d) || !fg(h + 1, w, d) || !fg(h, w - 1, d) || !fg(h, w + 1, d) || !fg(h, w, d - 1) ||
            !fg(h, w, d + 1))
          out.push_back({h, w, d});
      }
  return out;
}

SurfaceDistances surface_distances(const Tensor& a, const Tensor& b, double spacing) {
  require_pair(a, b, "surface_distances");
  if (!(spacing > 0)) throw std::invalid_argument("spacing must be positive");
  const auto sa = surface_voxels(a), sb = surface_voxels(b);
  if (sa.empty() || sb.empty()) throw std::invalid_argument("undefined surface distance for empty mask");
  return {directed(sa, sb, spacing), directed(sb, sa, spacing)};
}

double percentile(const std::vector<double>& sorted, double q) {
  if (sorted.empty()) throw std::invalid_argument("percentile of an empty list");
  const double pos = q * static_cast<double>(sorted.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, sorted.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  return sorted[lo] + frac * (sorted[hi] - sorted[lo]);
}

double hd95(const Tensor& a, const Tensor& b, double spacing) {
  return percentile(pooled(surface_distances(a, b, spacing)), 0.95);
}

double assd(const Tensor& a, const Tensor& b, double spacing) {
  const auto all = pooled(surface_distances(a, b, spacing));
  return std::accumulate(all.begin(), all.end(), 0.0) / static_cast<double>(all.size());
}

Tensor binarize(const Tensor& prob, double threshold) {
  Tensor out(prob.shape());
  for (std::size_t i = 0; i < prob.size(); ++i) out[i] = prob[i] >= threshold ? 1 : 0;
  return out;
}

std::vector<int> window_origins(int extent, int window, int stride) {
  if (window < 1 || window > extent) {
    throw std::invalid_argument("window " + std::to_string(window) + " does not fit extent " + std::to_string(extent));
  }
  if (stride < 1 || stride > window) {
    throw std::invalid_argument("window stride " + std::to_string(stride) + " must be in [1, " + std::to_string(window) +
                                "] so that every voxel is covered");
  }
  std::vector<int> out;
  for (int o = 0; o + window <= extent; o += stride) out.push_back(o);
  if (out.back() + window < extent) out.push_back(extent - window);
  return out;
}

Tensor coverage_counts(Dims3 volume, Dims3 window, Dims3 stride) {
  Tensor count(Shape{volume.h, volume.w, volume.d});
  const auto oh = window_origins(volume.h, window.h, stride.h);
  const auto ow = window_origins(volume.w, window.w, stride.w);
  const auto od = window_origins(volume.d, window.d, stride.d);
  for (int a : oh)
    for (int b : ow)
      for (int c : od)
        for (int h = a; h < a + window.h; ++h)
          for (int w = b; w < b + window.w; ++w)
            for (int d = c; d < c + window.d; ++d) count[(static_cast<std::size_t>(h) * volume.w + w) * volume.d + d] += 1;
  return count;
}

Tensor sliding_window_infer(const WindowPredictor& predict, const Tensor& volume, Dims3 window, Dims3 stride) {
  if (volume.rank() != 3) throw std::invalid_argument("sliding window input must be [H,W,D], got " + shape_str(volume.shape()));
  const Dims3 v = volume.spatial();
  for (int a = 0; a < 3; ++a) {
    if (window[a] > v[a]) {
      throw std::invalid_argument("window " + dims_str(window) + " is larger than volume " + dims_str(v));
    }
  }
  const auto oh = window_origins(v.h, window.h, stride.h);
  const auto ow = window_origins(v.w, window.w, stride.w);
  const auto od = window_origins(v.d, window.d, stride.d);
  Tensor sum(volume.shape()), count(volume.shape());
  Tensor patch(Shape{window.h, window.w, window.d});
  for (int a : oh)
    for (int b : ow)
      for (int c : od) {
        for (int h = 0; h < window.h; ++h)
          for (int w = 0; w < window.w; ++w)
            for (int d = 0; d < window.d; ++d)
              patch[(static_cast<std::size_t>(h) * window.w + w) * window.d + d] =
                  volume[(static_cast<std::size_t>(h + a) * v.w + w + b) * v.d + d + c];
        const Tensor p = predict(patch);
        if (p.shape() != patch.shape()) {
          throw std::logic_error("window predictor returned " + shape_str(p.shape()) + " for window " + dims_str(window));
        }
        for (int h = 0; h < window.h; ++h)
          for (int w = 0; w < window.w; ++w)
            for (int d = 0; d < window.d; ++d) {
              const std::size_t dst = (static_cast<std::size_t>(h + a) * v.w + w + b) * v.d + d + c;
              sum[dst] += p[(static_cast<std::size_t>(h) * window.w + w) * window.d + d];
              count[dst] += 1;
            }
      }
  for (std::size_t i = 0; i < sum.size(); ++i) sum[i] /= count[i];
  return sum;
}

Tensor sliding_window_infer(const ModelParams& params, const Tensor& volume, Dims3 window, Dims3 stride) {
  const int div = params.arch.divisor();
  if (window.h % div || window.w % div || window.d % div) {
    throw std::invalid_argument("window " + dims_str(window) + " must be divisible by " + std::to_string(div));
  }
  return sliding_window_infer([&](const Tensor& w) { return forward(params, w); }, volume, window, stride);
}

CaseMetrics evaluate_case(const std::string& name, const Tensor& pred, const Tensor& truth, double spacing) {
  CaseMetrics m;
  m.name = name;
  m.dice = dice(pred, truth);
  m.jaccard = jaccard(pred, truth);
  const auto sp = surface_voxels(pred), st = surface_voxels(truth);
  if (!sp.empty() && !st.empty()) {
    const auto all = pooled(surface_distances(pred, truth, spacing));
    m.hd95 = percentile(all, 0.95);
    m.assd = std::accumulate(all.begin(), all.end(), 0.0) / static_cast<double>(all.size());
  }
  return m;
}

MetricSummary summarize(const std::vector<double>& values) {
  MetricSummary s;
  s.count = static_cast<int>(values.size());
  if (values.empty()) return s;
  s.mean = std::accumulate(values.begin(), values.end(), 0.0) / static_cast<double>(values.size());
  if (values.size() > 1) {
    double ss = 0;
    for (double v : values) ss += (v - s.mean) * (v - s.mean);
    s.std = std::sqrt(ss / static_cast<double>(values.size() - 1));
  }
  return s;
}

MetricSummary MetricsReport::summary(const std::string& metric) const {
  std::vector<double> v;
  for (const auto& c : cases) {
    if (metric == "dice")
      v.push_back(c.dice);
    else if (metric == "jaccard")
      v.push_back(c.jaccard);
    else if (metric == "hd95") {
      if (c.hd95) v.push_back(*c.hd95);
    } else if (metric == "assd") {
      if (c.assd) v.push_back(*c.assd);
    } else {
      throw std::invalid_argument("unknown metric '" + metric + "'");
    }
  }
  return summarize(v);
}

std::string MetricsReport::to_json() const {
  using nlohmann::json;
  auto opt = [](const std::optional<double>& v) { return v ? json(*v) : json(nullptr); };
  json j;
  j["config"] = json::object();
  for (const auto& [k, v] : config) j["config"][k] = v;
  j["cases"] = json::array();
  for (const auto& c : cases)
    j["cases"].push_back({{"name", c.name}, {"dice", c.dice}, {"jaccard", c.jaccard}, {"hd95", opt(c.hd95)}, {"assd", opt(c.assd)}});
  j["aggregate"] = json::object();
  for (const char* m : {"dice", "jaccard", "hd95", "assd"}) {
    const MetricSummary s = summary(m);
    j["aggregate"][m] = {{"mean", s.mean}, {"std", s.std}, {"count", s.count}};
  }
  return j.dump(2);
}

std::string MetricsReport::to_csv() const {
  std::ostringstream os;
  auto opt = [](const std::optional<double>& v) { return v ? fmt(*v) : std::string(); };
  os << "case,dice,jaccard,hd95_mm,assd_mm\n";
  for (const auto& c : cases) os << c.name << ',' << fmt(c.dice) << ',' << fmt(c.jaccard) << ',' << opt(c.hd95) << ',' << opt(c.assd) << '\n';
  os << "mean";
  for (const char* m : {"dice", "jaccard", "hd95", "assd"}) os << ',' << fmt(summary(m).mean);
  os << "\nstd";
  for (const char* m : {"dice", "jaccard", "hd95", "assd"}) os << ',' << fmt(summary(m).std);
  os << '\n';
  return os.str();
}

}  // namespace dpbn
