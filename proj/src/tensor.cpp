#include "vig3d/tensor.hpp"

#include <algorithm>
#include <cmath>

#include "vig3d/error.hpp"

namespace vig3d {

std::string Shape5::str() const {
  return std::to_string(dims[0]) + "x" + std::to_string(dims[1]) + "x" + std::to_string(dims[2]) + "x" +
         std::to_string(dims[3]) + "x" + std::to_string(dims[4]);
}

Tensor5::Tensor5(Shape5 shape, double fill) : shape_(shape), data_(shape.numel(), fill) {}

Tensor5::Tensor5(Shape5 shape, std::vector<double> data) : shape_(shape), data_(std::move(data)) {
  if (data_.size() != shape_.numel()) {
    throw DimensionMismatch("Tensor5", "numel", shape_.numel(), data_.size());
  }
}

Tensor5 Tensor5::reshaped(Shape5 shape) const {
  if (shape.numel() != numel()) throw DimensionMismatch("reshape", "numel", numel(), shape.numel());
  return Tensor5(shape, data_);
}

void Tensor5::fill(double v) { std::fill(data_.begin(), data_.end(), v); }

bool Tensor5::all_finite() const {
  return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

double dot(const Tensor5& a, const Tensor5& b) {
  if (a.numel() != b.numel()) throw DimensionMismatch("dot", "numel", a.numel(), b.numel());
  double s = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) s += a[i] * b[i];
  return s;
}

double max_abs_diff(const Tensor5& a, const Tensor5& b) {
  if (a.numel() != b.numel()) throw DimensionMismatch("max_abs_diff", "numel", a.numel(), b.numel());
  double m = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace vig3d
