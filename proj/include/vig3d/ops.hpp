#pragma once

#include <array>
#include <cstddef>
#include <optional>
#include <vector>

#include "vig3d/tape.hpp"
#include "vig3d/tensor.hpp"

// Differentiable operations recorded on a Tape. Every op validates shapes up front and
// throws DimensionMismatch naming the offending axis.
namespace vig3d::ops {

using Index3 = std::array<std::size_t, 3>;

/// Stride and zero padding shared by conv3d and its adjoint.
struct ConvGeometry {
  Index3 stride{1, 1, 1};
  Index3 padding{0, 0, 0};
};

/// Kernel `(out_ch, in_ch, kd, kh, kw)` applied with zero padding.
/// Output extent per axis: floor((in + 2*pad - k) / stride) + 1.
Var conv3d(Var input, Var kernel, std::optional<Var> bias, ConvGeometry geometry);

/// Adjoint of conv3d for the same kernel and geometry. `kernel` keeps the conv3d layout,
/// so it maps dim-0 channels to dim-1 channels. Output extent: (in - 1)*stride - 2*pad + k.
Var conv_transpose3d(Var input, Var kernel, std::optional<Var> bias, ConvGeometry geometry);

/// Per (batch, channel) normalisation over the spatial voxels, biased variance.
Var instance_norm3d(Var input, Var gamma, Var beta, double eps = 1e-5);

enum class Activation { kGelu, kRelu, kSigmoid };
/// Elementwise map. GeLU uses the exact erf form.
Var activation(Var input, Activation kind);
inline Var gelu(Var x) { return activation(x, Activation::kGelu); }
inline Var relu(Var x) { return activation(x, Activation::kRelu); }
inline Var sigmoid(Var x) { return activation(x, Activation::kSigmoid); }

/// Row-wise affine map of a matrix: rows x in -> rows x out. `weight` is (out, in).
Var linear(Var input, Var weight, std::optional<Var> bias);

/// Mean over the spatial voxels; output spatial extent 1x1x1.
Var global_avg_pool(Var input);

/// Per-voxel softmax over the channel axis, max-shifted.
Var softmax_channel(Var input);

Var add(Var a, Var b);
/// x (N,C,D,H,W) + table (1,C,D,H,W), the table broadcast over the batch axis.
Var add_broadcast_batch(Var x, Var table);
Var scale(Var x, double factor);
/// x (N,C,D,H,W) times gate (N,C,1,1,1) broadcast over space.
Var scale_channels(Var x, Var gate);
Var concat_channels(Var a, Var b);
Var concat_batch(const std::vector<Var>& parts);
/// Keep a single channel: output (N,1,D,H,W).
Var select_channel(Var x, std::size_t channel);
Var reshape(Var x, Shape5 shape);
/// Sum of all entries; output is a scalar.
Var sum(Var x);
/// a*x + b*y for scalars.
Var weighted_sum(const std::vector<Var>& terms, const std::vector<double>& weights);

/// Output extent of conv3d along one axis; throws on an empty result.
std::size_t conv_out_extent(std::size_t in, std::size_t k, std::size_t stride, std::size_t pad, const char* axis);

}  // namespace vig3d::ops
