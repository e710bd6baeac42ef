#include "dpbnet/volumes.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <numbers>
#include <stdexcept>

#include "dpbnet/random.hpp"
#include "json.hpp"

namespace dpbn {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

void require_volume(const Tensor& t, const char* what) {
  if (t.rank() != 3) throw std::invalid_argument(std::string(what) + " must be [H,W,D], got " + shape_str(t.shape()));
}

std::size_t flat(Dims3 s, int h, int w, int d) {
  return (static_cast<std::size_t>(h) * s.w + w) * s.d + d;
}

struct Vec3 {
  double x = 0, y = 0, z = 0;
};

Vec3 random_direction(Rng& rng) {
  for (;;) {
    const Vec3 v{rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1)};
    const double n = std::sqrt(v.x * v.x + v.y * v.y + v.z * v.z);
    if (n > 0.1 && n <= 1) return {v.x / n, v.y / n, v.z / n};
  }
}

std::string stem_of(const std::string& path) {
  if (path.ends_with(".json") || path.ends_with(".raw")) return path.substr(0, path.rfind('.'));
  return path;
}

std::vector<char> read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open '" + path + "'");
  return std::vector<char>(std::istreambuf_iterator<char>(in), {});
}

void write_file(const std::string& path, const std::vector<char>& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open '" + path + "' for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("failed writing '" + path + "'");
}

}  // namespace

void VolumeSample::validate() const {
  require_volume(image, "volume image");
  require_volume(mask, "volume mask");
  if (image.shape() != mask.shape()) {
    throw std::invalid_argument("image " + shape_str(image.shape()) + " and mask " + shape_str(mask.shape()) +
                                " differ in shape");
  }
  for (Real v : mask.data())
    if (v != 0 && v != 1) throw std::invalid_argument("mask is not binary");
}

void PhantomConfig::validate() const {
  if (!(min_axis > 0 && min_axis <= max_axis && max_axis < 0.5)) {
    throw std::invalid_argument("phantom axis fractions must satisfy 0 < min <= max < 0.5");
  }
  if (min_cylinders < 0 || max_cylinders < min_cylinders) throw std::invalid_argument("bad cylinder count range");
  if (noise_sigma < 0 || texture_amplitude < 0) throw std::invalid_argument("noise and texture must be >= 0");
}

VolumeSample synth_sample(std::uint64_t seed, int index, Dims3 shape, const PhantomConfig& cfg) {
  if (shape.h < 16 || shape.w < 16 || shape.d < 16) {
    throw std::invalid_argument("phantom shape " + dims_str(shape) + " is degenerate (need >= 16 per dim)");
  }
  if (index < 0) throw std::invalid_argument("sample index must be >= 0");
  cfg.validate();
  const std::uint64_t sample_seed = derive_seed(seed, {static_cast<std::uint64_t>(index)});
  Rng geo(derive_seed(sample_seed, {1}));

  // Ellipsoid rotated in the H-W plane and kept inside the volume.
  const double ah = geo.uniform(cfg.min_axis, cfg.max_axis) * shape.h;
  const double aw = geo.uniform(cfg.min_axis, cfg.max_axis) * shape.w;
  const double ad = geo.uniform(cfg.min_axis, cfg.max_axis) * shape.d;
  double theta = 0, eh = ah, ew = aw;
  for (int attempt = 0; attempt < 32; ++attempt) {
    const double t = geo.uniform(0, std::numbers::pi);
    const double c = std::cos(t), s = std::sin(t);
    const double th = std::hypot(ah * c, aw * s), tw = std::hypot(ah * s, aw * c);
    if (th < shape.h / 2.0 - 1 && tw < shape.w / 2.0 - 1) {
      theta = t;
      eh = th;
      ew = tw;
      break;
    }
  }
  const double ch = geo.uniform(eh + 0.5, shape.h - 1.5 - eh);
  const double cw = geo.uniform(ew + 0.5, shape.w - 1.5 - ew);
  const double cd = geo.uniform(ad + 0.5, shape.d - 1.5 - ad);
  const double cos_t = std::cos(theta), sin_t = std::sin(theta);

  struct Cylinder {
    Vec3 p0, u;
    double length, radius;
  };
  std::vector<Cylinder> cylinders;
  const int ncyl = geo.uniform_int(cfg.min_cylinders, cfg.max_cylinders);
  const int min_extent = std::min({shape.h, shape.w, shape.d});
  for (int i = 0; i < ncyl; ++i) {
    const Vec3 u = random_direction(geo);
    // Distance from the centre to the ellipsoid surface along u.
    const double lh = u.x * cos_t + u.y * sin_t, lw = -u.x * sin_t + u.y * cos_t;
    const double t_surf = 1.0 / std::sqrt(lh * lh / (ah * ah) + lw * lw / (aw * aw) + u.z * u.z / (ad * ad));
    Cylinder c;
    c.p0 = {ch + 0.8 * t_surf * u.x, cw + 0.8 * t_surf * u.y, cd + 0.8 * t_surf * u.z};
    c.u = u;
    c.length = 0.2 * t_surf + geo.uniform(0.2, 0.4) * min_extent;
    c.radius = std::max(1.0, geo.uniform(0.05, 0.08) * min_extent);
    cylinders.push_back(c);
  }

  Rng tex(derive_seed(sample_seed, {2}));
  std::array<double, 3> freq{}, phase{};
  for (int a = 0; a < 3; ++a) {
    freq[static_cast<std::size_t>(a)] = tex.uniform(0.5, 2.0);
    phase[static_cast<std::size_t>(a)] = tex.uniform(0, 1);
  }
  Rng noise(derive_seed(sample_seed, {3}));
  const double sigma = cfg.noise_sigma * std::abs(cfg.fg_intensity - cfg.bg_intensity);

  VolumeSample out;
  out.image = Tensor(Shape{shape.h, shape.w, shape.d});
  out.mask = Tensor(Shape{shape.h, shape.w, shape.d});
  out.meta.seed = sample_seed;
  const double two_pi = 2 * std::numbers::pi;
  for (int h = 0; h < shape.h; ++h)
    for (int w = 0; w < shape.w; ++w)
      for (int d = 0; d < shape.d; ++d) {
        const double x = h - ch, y = w - cw, z = d - cd;
        const double rh = x * cos_t + y * sin_t, rw = -x * sin_t + y * cos_t;
        bool fg = rh * rh / (ah * ah) + rw * rw / (aw * aw) + z * z / (ad * ad) <= 1;
        for (const Cylinder& c : cylinders) {
          if (fg) break;
          const double px = h - c.p0.x, py = w - c.p0.y, pz = d - c.p0.z;
          const double along = px * c.u.x + py * c.u.y + pz * c.u.z;
          if (along < 0 || along > c.length) continue;
          const double qx = px - along * c.u.x, qy = py - along * c.u.y, qz = pz - along * c.u.z;
          fg = qx * qx + qy * qy + qz * qz <= c.radius * c.radius;
        }
        const double texture =
            cfg.texture_amplitude *
            (std::sin(two_pi * (freq[0] * h / shape.h + phase[0])) + std::sin(two_pi * (freq[1] * w / shape.w + phase[1])) +
             std::sin(two_pi * (freq[2] * d / shape.d + phase[2]))) /
            3;
        const double base = fg ? cfg.fg_intensity : cfg.bg_intensity;
        const double n = sigma > 0 ? sigma * noise.normal() : 0.0;
        const std::size_t i = flat(shape, h, w, d);
        out.mask[i] = fg ? 1 : 0;
        out.image[i] = static_cast<Real>(base + texture + n);
      }
  return out;
}

std::vector<VolumeSample> synth_generate(std::uint64_t seed, int count, Dims3 shape, const PhantomConfig& cfg) {
  if (count < 1) throw std::invalid_argument("sample count must be >= 1");
  std::vector<VolumeSample> out;
  out.reserve(static_cast<std::size_t>(count));
  for (int i = 0; i < count; ++i) out.push_back(synth_sample(seed, i, shape, cfg));
  return out;
}

VolumeSample crop_at(const VolumeSample& sample, Dims3 crop, std::array<int, 3> origin) {
  const Dims3 s = sample.image.spatial();
  for (int a = 0; a < 3; ++a) {
    if (crop[a] < 1 || crop[a] > s[a]) {
      throw std::invalid_argument("crop " + dims_str(crop) + " does not fit volume " + dims_str(s));
    }
    if (origin[static_cast<std::size_t>(a)] < 0 || origin[static_cast<std::size_t>(a)] + crop[a] > s[a]) {
      throw std::invalid_argument("crop origin out of range for volume " + dims_str(s));
    }
  }
  VolumeSample out;
  out.image = Tensor(Shape{crop.h, crop.w, crop.d});
  out.mask = Tensor(Shape{crop.h, crop.w, crop.d});
  for (int h = 0; h < crop.h; ++h)
    for (int w = 0; w < crop.w; ++w) {
      const std::size_t src = flat(s, h + origin[0], w + origin[1], origin[2]);
      const std::size_t dst = flat(crop, h, w, 0);
      std::copy_n(sample.image.data().begin() + static_cast<std::ptrdiff_t>(src), crop.d,
                  out.image.data().begin() + static_cast<std::ptrdiff_t>(dst));
      std::copy_n(sample.mask.data().begin() + static_cast<std::ptrdiff_t>(src), crop.d,
                  out.mask.data().begin() + static_cast<std::ptrdiff_t>(dst));
    }
  out.meta = sample.meta;
  std::array<int, 3> abs = origin;
  if (sample.meta.crop_origin)
    for (std::size_t a = 0; a < 3; ++a) abs[a] += (*sample.meta.crop_origin)[a];
  out.meta.crop_origin = abs;
  return out;
}

VolumeSample random_crop(const VolumeSample& sample, Dims3 crop, std::uint64_t seed) {
  const Dims3 s = sample.image.spatial();
  for (int a = 0; a < 3; ++a) {
    if (crop[a] > s[a]) throw std::invalid_argument("crop " + dims_str(crop) + " is larger than volume " + dims_str(s));
  }
  Rng rng(seed);
  std::array<int, 3> origin{};
  for (int a = 0; a < 3; ++a) origin[static_cast<std::size_t>(a)] = rng.uniform_int(0, s[a] - crop[a]);
  return crop_at(sample, crop, origin);
}

void save_array(const std::string& path, const Tensor& data, DType dtype, const VolumeMeta& meta) {
  require_volume(data, "saved array");
  const std::string stem = stem_of(path);
  std::vector<char> bytes;
  if (dtype == DType::u8) {
    bytes.reserve(data.size());
    for (Real v : data.data()) {
      if (v != 0 && v != 1) throw std::invalid_argument("u8 arrays must be binary masks");
      bytes.push_back(static_cast<char>(v));
    }
  } else {
    bytes.reserve(data.size() * 8);
    for (Real v : data.data()) {
      const auto bits = std::bit_cast<std::uint64_t>(static_cast<double>(v));
      for (int i = 0; i < 8; ++i) bytes.push_back(static_cast<char>((bits >> (8 * i)) & 0xFF));
    }
  }
  json j;
  j["shape"] = data.shape();
  j["dtype"] = dtype == DType::u8 ? "u8" : "f64";
  j["spacing"] = meta.spacing;
  j["seed"] = meta.seed;
  j["crop_origin"] = meta.crop_origin ? json(*meta.crop_origin) : json(nullptr);
  j["payload"] = fs::path(stem + ".raw").filename().string();
  write_file(stem + ".raw", bytes);
  std::ofstream side(stem + ".json", std::ios::trunc);
  if (!side) throw std::runtime_error("cannot open '" + stem + ".json' for writing");
  side << j.dump(2) << "\n";
}

VolumeFile load_array(const std::string& path) {
  const std::string stem = stem_of(path);
  const std::vector<char> side = read_file(stem + ".json");
  VolumeFile out;
  Shape shape;
  try {
    const json j = json::parse(side.begin(), side.end());
    shape = j.at("shape").get<Shape>();
    const std::string dt = j.at("dtype").get<std::string>();
    if (dt == "u8")
      out.dtype = DType::u8;
    else if (dt == "f64")
      out.dtype = DType::f64;
    else
      throw std::invalid_argument("unknown dtype '" + dt + "' in " + stem + ".json");
    out.meta.spacing = j.value("spacing", kDefaultSpacing);
    out.meta.seed = j.value("seed", std::uint64_t{0});
    if (j.contains("crop_origin") && !j["crop_origin"].is_null())
      out.meta.crop_origin = j["crop_origin"].get<std::array<int, 3>>();
  } catch (const json::exception& e) {
    throw std::invalid_argument("malformed sidecar " + stem + ".json: " + e.what());
  }
  if (shape.size() != 3) throw std::invalid_argument("sidecar shape must have 3 dims in " + stem + ".json");
  for (int v : shape)
    if (v < 1) throw std::invalid_argument("sidecar shape has a non-positive extent in " + stem + ".json");
  const std::size_t n = shape_numel(shape);
  const std::size_t width = out.dtype == DType::u8 ? 1 : 8;
  const std::vector<char> payload = read_file(stem + ".raw");
  if (payload.size() != n * width) {
    throw std::runtime_error("payload " + stem + ".raw has " + std::to_string(payload.size()) + " bytes, sidecar shape " +
                             shape_str(shape) + " expects " + std::to_string(n * width));
  }
  out.data = Tensor(shape);
  const auto* p = reinterpret_cast<const unsigned char*>(payload.data());
  for (std::size_t i = 0; i < n; ++i) {
    if (out.dtype == DType::u8) {
      if (p[i] > 1) throw std::runtime_error("u8 payload " + stem + ".raw holds non-binary value at element " + std::to_string(i));
      out.data[i] = p[i];
    } else {
      std::uint64_t bits = 0;
      for (int b = 0; b < 8; ++b) bits |= static_cast<std::uint64_t>(p[i * 8 + static_cast<std::size_t>(b)]) << (8 * b);
      out.data[i] = static_cast<Real>(std::bit_cast<double>(bits));
    }
  }
  return out;
}

void save_volume(const VolumeSample& sample, const std::string& dir, const std::string& name) {
  sample.validate();
  fs::create_directories(dir);
  save_array((fs::path(dir) / (name + "_img")).string(), sample.image, DType::f64, sample.meta);
  save_array((fs::path(dir) / (name + "_seg")).string(), sample.mask, DType::u8, sample.meta);
}

VolumeSample load_volume(const std::string& dir, const std::string& name) {
  VolumeFile img = load_array((fs::path(dir) / (name + "_img")).string());
  VolumeFile seg = load_array((fs::path(dir) / (name + "_seg")).string());
  VolumeSample s{std::move(img.data), std::move(seg.data), img.meta};
  s.validate();
  return s;
}

void save_dataset(const std::vector<VolumeSample>& samples, const std::string& dir) {
  fs::create_directories(dir);
  json j;
  j["cases"] = json::array();
  for (std::size_t i = 0; i < samples.size(); ++i) {
    char name[32];
    std::snprintf(name, sizeof name, "case_%03zu", i);
    save_volume(samples[i], dir, name);
    j["cases"].push_back(name);
  }
  std::ofstream out(fs::path(dir) / "dataset.json", std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write dataset manifest in '" + dir + "'");
  out << j.dump(2) << "\n";
}

std::vector<VolumeSample> load_dataset(const std::string& dir) {
  const fs::path manifest = fs::path(dir) / "dataset.json";
  if (!fs::exists(manifest)) throw std::runtime_error("no dataset.json in '" + dir + "'");
  const std::vector<char> bytes = read_file(manifest.string());
  std::vector<std::string> cases;
  try {
    cases = json::parse(bytes.begin(), bytes.end()).at("cases").get<std::vector<std::string>>();
  } catch (const json::exception& e) {
    throw std::invalid_argument("malformed " + manifest.string() + ": " + e.what());
  }
  if (cases.empty()) throw std::runtime_error("dataset '" + dir + "' lists no cases");
  std::vector<VolumeSample> out;
  for (const auto& c : cases) out.push_back(load_volume(dir, c));
  return out;
}

std::pair<std::vector<int>, std::vector<int>> split_indices(int n, double train_fraction, std::uint64_t seed) {
  if (!(train_fraction > 0 && train_fraction < 1)) throw std::invalid_argument("train fraction must be in (0, 1)");
  if (n < 0) throw std::invalid_argument("item count must be >= 0");
  std::vector<int> idx(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) idx[static_cast<std::size_t>(i)] = i;
  Rng rng(seed);
  for (int i = n - 1; i > 0; --i) {
    const int j = static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(i) + 1));
    std::swap(idx[static_cast<std::size_t>(i)], idx[static_cast<std::size_t>(j)]);
  }
  const auto n_train = static_cast<std::size_t>(std::lround(train_fraction * n));
  return {std::vector<int>(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(n_train)),
          std::vector<int>(idx.begin() + static_cast<std::ptrdiff_t>(n_train), idx.end())};
}

double foreground_fraction(const Tensor& mask) {
  if (mask.empty()) return 0;
  double n = 0;
  for (Real v : mask.data()) n += v == 1;
  return n / static_cast<double>(mask.size());
}

}  // namespace dpbn
