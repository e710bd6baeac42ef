#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "dpbnet/tensor.hpp"

namespace dpbn {

inline constexpr double kDefaultSpacing = 0.625;

struct VolumeMeta {
  std::uint64_t seed = 0;
  double spacing = kDefaultSpacing;  // mm, isotropic
  std::optional<std::array<int, 3>> crop_origin;
};

/// image and mask are [H,W,D]; mask holds only 0 and 1.
struct VolumeSample {
  Tensor image;
  Tensor mask;
  VolumeMeta meta;

  void validate() const;
};

struct PhantomConfig {
  double fg_intensity = 1.0;
  double bg_intensity = 0.0;
  double texture_amplitude = 0.15;
  /// Noise standard deviation as a fraction of |fg - bg|.
  double noise_sigma = 0.1;
  /// Ellipsoid semi-axes as fractions of the matching extent.
  double min_axis = 0.15;
  double max_axis = 0.35;
  int min_cylinders = 1;
  int max_cylinders = 3;

  void validate() const;
};

/// Sample i is a pure function of (seed, i, shape, cfg).
VolumeSample synth_sample(std::uint64_t seed, int index, Dims3 shape, const PhantomConfig& cfg = {});
std::vector<VolumeSample> synth_generate(std::uint64_t seed, int count, Dims3 shape, const PhantomConfig& cfg = {});

/// Uniform origin over all valid positions. crop_origin accumulates when the
/// input is itself a crop.
VolumeSample random_crop(const VolumeSample& sample, Dims3 crop, std::uint64_t seed);
VolumeSample crop_at(const VolumeSample& sample, Dims3 crop, std::array<int, 3> origin);

enum class DType { f64, u8 };

struct VolumeFile {
  Tensor data;
  DType dtype = DType::f64;
  VolumeMeta meta;
};

/// `path` may be the .json sidecar, the .raw payload or the shared stem.
void save_array(const std::string& path, const Tensor& data, DType dtype, const VolumeMeta& meta);
VolumeFile load_array(const std::string& path);

/// Writes <dir>/<name>_img.{json,raw} (f64) and <dir>/<name>_seg.{json,raw} (u8).
void save_volume(const VolumeSample& sample, const std::string& dir, const std::string& name);
VolumeSample load_volume(const std::string& dir, const std::string& name);

/// Dataset directory: case_XXX volumes plus dataset.json listing them.
void save_dataset(const std::vector<VolumeSample>& samples, const std::string& dir);
std::vector<VolumeSample> load_dataset(const std::string& dir);

/// Shuffled split with round(fraction * n) training indices.
std::pair<std::vector<int>, std::vector<int>> split_indices(int n, double train_fraction, std::uint64_t seed);

template <typename T>
std::pair<std::vector<T>, std::vector<T>> split(const std::vector<T>& items, double train_fraction,
                                                std::uint64_t seed) {
  auto [tr, te] = split_indices(static_cast<int>(items.size()), train_fraction, seed);
  std::pair<std::vector<T>, std::vector<T>> out;
  for (int i : tr) out.first.push_back(items[static_cast<std::size_t>(i)]);
  for (int i : te) out.second.push_back(items[static_cast<std::size_t>(i)]);
  return out;
}

/// Fraction of voxels equal to 1.
double foreground_fraction(const Tensor& mask);

}  // namespace dpbn
