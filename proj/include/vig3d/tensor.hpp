#pragma once

#include <array>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

namespace vig3d {

/// Extents of a rank-5 array in (batch, channel, depth, height, width) order.
struct Shape5 {
  std::array<std::size_t, 5> dims{0, 0, 0, 0, 0};

  constexpr Shape5() = default;
  constexpr Shape5(std::size_t n, std::size_t c, std::size_t d, std::size_t h, std::size_t w)
      : dims{n, c, d, h, w} {}

  /// Matrix layout used for node-feature tables: (1, 1, 1, rows, cols).
  static constexpr Shape5 matrix(std::size_t rows, std::size_t cols) { return {1, 1, 1, rows, cols}; }
  static constexpr Shape5 vector(std::size_t len) { return {1, 1, 1, 1, len}; }
  static constexpr Shape5 scalar() { return {1, 1, 1, 1, 1}; }

  constexpr std::size_t n() const { return dims[0]; }
  constexpr std::size_t c() const { return dims[1]; }
  constexpr std::size_t d() const { return dims[2]; }
  constexpr std::size_t h() const { return dims[3]; }
  constexpr std::size_t w() const { return dims[4]; }
  constexpr std::size_t spatial() const { return dims[2] * dims[3] * dims[4]; }
  constexpr std::size_t numel() const { return dims[0] * dims[1] * dims[2] * dims[3] * dims[4]; }

  constexpr bool is_matrix() const { return dims[0] == 1 && dims[1] == 1 && dims[2] == 1; }
  constexpr std::size_t rows() const { return dims[3]; }
  constexpr std::size_t cols() const { return dims[4]; }

  constexpr bool operator==(const Shape5&) const = default;

  std::string str() const;
};

/// Dense row-major (width fastest) array of doubles.
class Tensor5 {
 public:
  Tensor5() = default;
  explicit Tensor5(Shape5 shape, double fill = 0.0);
  Tensor5(Shape5 shape, std::vector<double> data);

  static Tensor5 matrix(std::size_t rows, std::size_t cols, double fill = 0.0) {
    return Tensor5(Shape5::matrix(rows, cols), fill);
  }

  const Shape5& shape() const { return shape_; }
  std::size_t numel() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  std::span<double> data() { return data_; }
  std::span<const double> data() const { return data_; }
  double* raw() { return data_.data(); }
  const double* raw() const { return data_.data(); }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  std::size_t offset(std::size_t n, std::size_t c, std::size_t d, std::size_t h, std::size_t w) const {
    return (((n * shape_.c() + c) * shape_.d() + d) * shape_.h() + h) * shape_.w() + w;
  }
  double& at(std::size_t n, std::size_t c, std::size_t d, std::size_t h, std::size_t w) {
    return data_[offset(n, c, d, h, w)];
  }
  double at(std::size_t n, std::size_t c, std::size_t d, std::size_t h, std::size_t w) const {
    return data_[offset(n, c, d, h, w)];
  }

  /// Contiguous spatial block of one (batch, channel) pair.
  double* channel(std::size_t n, std::size_t c) { return data_.data() + (n * shape_.c() + c) * shape_.spatial(); }
  const double* channel(std::size_t n, std::size_t c) const {
    return data_.data() + (n * shape_.c() + c) * shape_.spatial();
  }

  /// Reinterpret with a new shape of equal element count.
  Tensor5 reshaped(Shape5 shape) const;

  void fill(double v);
  bool all_finite() const;

 private:
  Shape5 shape_{};
  std::vector<double> data_;
};

double dot(const Tensor5& a, const Tensor5& b);
double max_abs_diff(const Tensor5& a, const Tensor5& b);

}  // namespace vig3d
