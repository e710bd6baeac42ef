#pragma once

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

namespace dpbn {

#ifdef DPBN_SINGLE_PRECISION
using Real = float;
#else
using Real = double;
#endif

using Shape = std::vector<int>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

/// Spatial extent of a volume, ordered (H, W, D).
struct Dims3 {
  int h = 1;
  int w = 1;
  int d = 1;

  std::size_t numel() const {
    return static_cast<std::size_t>(h) * static_cast<std::size_t>(w) * static_cast<std::size_t>(d);
  }
  int operator[](int axis) const { return axis == 0 ? h : (axis == 1 ? w : d); }
  int& operator[](int axis) { return axis == 0 ? h : (axis == 1 ? w : d); }
  bool operator==(const Dims3&) const = default;
};

std::string dims_str(const Dims3& dims);

/// Dense row-major array with shape metadata. Channel-first for feature maps:
/// [C, H, W, D] with D varying fastest.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, Real fill = Real(0));
  Tensor(Shape shape, std::vector<Real> data);

  static Tensor scalar(Real value);

  const Shape& shape() const { return shape_; }
  int rank() const { return static_cast<int>(shape_.size()); }
  int dim(int axis) const;
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  std::span<Real> data() { return data_; }
  std::span<const Real> data() const { return data_; }
  std::vector<Real>& storage() { return data_; }
  const std::vector<Real>& storage() const { return data_; }

  Real& operator[](std::size_t i) { return data_[i]; }
  Real operator[](std::size_t i) const { return data_[i]; }

  /// Value of a single-element tensor.
  Real item() const;

  /// Trailing three dims of a [.., H, W, D] tensor.
  Dims3 spatial() const;
  /// Leading dim of a rank-4 tensor, 1 for rank-3.
  int channels() const;

  Tensor reshaped(Shape shape) const;
  void fill(Real value);
  bool all_finite() const;

 private:
  Shape shape_;
  std::vector<Real> data_;
};

bool same_shape(const Tensor& a, const Tensor& b);
/// Exact equality of shape and every stored bit pattern.
bool bitwise_equal(const Tensor& a, const Tensor& b);
Real max_abs(const Tensor& t);
Real max_abs_diff(const Tensor& a, const Tensor& b);

}  // namespace dpbn
