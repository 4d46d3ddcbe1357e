#include "vig3d/ops.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <numbers>

#include "vig3d/error.hpp"

namespace vig3d::ops {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using ConstMatMap = Eigen::Map<const RowMat>;

struct ConvDims {
  Index3 in{};
  Index3 k{};
  Index3 stride{};
  Index3 pad{};
  Index3 out{};

  std::size_t in_voxels() const { return in[0] * in[1] * in[2]; }
  std::size_t out_voxels() const { return out[0] * out[1] * out[2]; }
  std::size_t taps() const { return k[0] * k[1] * k[2]; }
};

// Output columns [lo, hi) whose width tap e lands inside the input.
std::pair<std::size_t, std::size_t> valid_range(const ConvDims& g, std::size_t e) {
  const std::size_t s = g.stride[2], p = g.pad[2];
  const std::size_t lo = e >= p ? 0 : (p - e + s - 1) / s;
  const std::size_t end = g.in[2] + p;  // ow*s + e < in + p
  std::size_t hi = end > e ? (end - e + s - 1) / s : 0;
  hi = std::min(hi, g.out[2]);
  return {std::min(lo, hi), hi};
}

// Row-major operand view: rows x cols with leading dimension ld.
struct RowView {
  const double* data;
  Eigen::Index rows, cols, ld;
};

using ColMap = Eigen::Map<Eigen::MatrixXd, 0, Eigen::OuterStride<>>;
using ConstColMap = Eigen::Map<const Eigen::MatrixXd, 0, Eigen::OuterStride<>>;

// A row-major matrix read as column-major is its transpose.
ConstColMap transposed(const RowView& v) { return ConstColMap(v.data, v.cols, v.rows, Eigen::OuterStride<>(v.ld)); }

// Row-major C (ldc) = or += op(A) op(B), evaluated as C^T = op(B)^T op(A)^T in
// column-major form, which Eigen's kernels handle about twice as fast here.
void gemm(double* c, Eigen::Index ldc, const RowView& a, bool ta, const RowView& b, bool tb, bool accumulate) {
  const Eigen::Index m = ta ? a.cols : a.rows;
  const Eigen::Index n = tb ? b.rows : b.cols;
  ColMap ct(c, n, m, Eigen::OuterStride<>(ldc));
  const ConstColMap av = transposed(a), bv = transposed(b);
  if (!ta && !tb) {
    if (accumulate) ct.noalias() += bv * av;
    else ct.noalias() = bv * av;
  } else if (!ta && tb) {
    if (accumulate) ct.noalias() += bv.transpose() * av;
    else ct.noalias() = bv.transpose() * av;
  } else if (ta && !tb) {
    if (accumulate) ct.noalias() += bv * av.transpose();
    else ct.noalias() = bv * av.transpose();
  } else {
    if (accumulate) ct.noalias() += bv.transpose() * av.transpose();
    else ct.noalias() = bv.transpose() * av.transpose();
  }
}

// Output rows (od, oh) flattened as od*out[1] + oh; chunks are ranges of these rows so
// the column buffer stays cache-sized.
std::size_t rows_per_chunk(const ConvDims& g, std::size_t kdim) {
  constexpr std::size_t kTarget = std::size_t{1} << 17;
  return std::max<std::size_t>(1, kTarget / std::max<std::size_t>(1, kdim * g.out[2]));
}

// col: (channels * taps) x ((r1 - r0) * out[2]) for output rows [r0, r1).
void im2col(const double* x, std::size_t channels, const ConvDims& g, double* col, std::size_t r0, std::size_t r1) {
  const std::size_t cols = (r1 - r0) * g.out[2];
  std::size_t row = 0;
  for (std::size_t c = 0; c < channels; ++c) {
    const double* xc = x + c * g.in_voxels();
    for (std::size_t a = 0; a < g.k[0]; ++a) {
      for (std::size_t b = 0; b < g.k[1]; ++b) {
        for (std::size_t e = 0; e < g.k[2]; ++e, ++row) {
          const auto [lo, hi] = valid_range(g, e);
          double* drow = col + row * cols;
          for (std::size_t r = r0; r < r1; ++r, drow += g.out[2]) {
            const std::size_t od = r / g.out[1], oh = r % g.out[1];
            const auto id = static_cast<std::ptrdiff_t>(od * g.stride[0] + a) - static_cast<std::ptrdiff_t>(g.pad[0]);
            const auto ih = static_cast<std::ptrdiff_t>(oh * g.stride[1] + b) - static_cast<std::ptrdiff_t>(g.pad[1]);
            if (id < 0 || id >= static_cast<std::ptrdiff_t>(g.in[0]) || ih < 0 || ih >= static_cast<std::ptrdiff_t>(g.in[1])) {
              std::fill(drow, drow + g.out[2], 0.0);
              continue;
            }
            const double* src = xc + (static_cast<std::size_t>(id) * g.in[1] + static_cast<std::size_t>(ih)) * g.in[2];
            std::fill(drow, drow + lo, 0.0);
            if (g.stride[2] == 1) {
              std::copy_n(src + (lo + e - g.pad[2]), hi - lo, drow + lo);
            } else {
              for (std::size_t ow = lo; ow < hi; ++ow) drow[ow] = src[ow * g.stride[2] + e - g.pad[2]];
            }
            std::fill(drow + hi, drow + g.out[2], 0.0);
          }
        }
      }
    }
  }
}

// Adjoint of im2col: scatter-adds the chunk's columns back into x.
void col2im(const double* col, std::size_t channels, const ConvDims& g, double* x, std::size_t r0, std::size_t r1) {
  const std::size_t cols = (r1 - r0) * g.out[2];
  std::size_t row = 0;
  for (std::size_t c = 0; c < channels; ++c) {
    double* xc = x + c * g.in_voxels();
    for (std::size_t a = 0; a < g.k[0]; ++a) {
      for (std::size_t b = 0; b < g.k[1]; ++b) {
        for (std::size_t e = 0; e < g.k[2]; ++e, ++row) {
          const auto [lo, hi] = valid_range(g, e);
          const double* srow = col + row * cols;
          for (std::size_t r = r0; r < r1; ++r, srow += g.out[2]) {
            const std::size_t od = r / g.out[1], oh = r % g.out[1];
            const auto id = static_cast<std::ptrdiff_t>(od * g.stride[0] + a) - static_cast<std::ptrdiff_t>(g.pad[0]);
            const auto ih = static_cast<std::ptrdiff_t>(oh * g.stride[1] + b) - static_cast<std::ptrdiff_t>(g.pad[1]);
            if (id < 0 || id >= static_cast<std::ptrdiff_t>(g.in[0]) || ih < 0 || ih >= static_cast<std::ptrdiff_t>(g.in[1])) continue;
            double* dst = xc + (static_cast<std::size_t>(id) * g.in[1] + static_cast<std::size_t>(ih)) * g.in[2];
            if (g.stride[2] == 1) {
              double* d = dst + (lo + e - g.pad[2]);
              for (std::size_t ow = lo; ow < hi; ++ow) *d++ += srow[ow];
            } else {
              for (std::size_t ow = lo; ow < hi; ++ow) dst[ow * g.stride[2] + e - g.pad[2]] += srow[ow];
            }
          }
        }
      }
    }
  }
}

const char* kAxisNames[3] = {"depth", "height", "width"};

void check_geometry(const char* op, const ConvGeometry& g) {
  for (int i = 0; i < 3; ++i) {
    if (g.stride[i] < 1) throw ConfigError(std::string(op) + ": stride must be >= 1 on " + kAxisNames[i]);
  }
}

void check_bias(const char* op, const std::optional<Var>& bias, std::size_t channels) {
  if (bias && bias->shape().numel() != channels) {
    throw DimensionMismatch(op, "bias", channels, bias->shape().numel());
  }
}

void add_bias(Tensor5& out, const Tensor5& bias) {
  const std::size_t sp = out.shape().spatial();
  for (std::size_t n = 0; n < out.shape().n(); ++n) {
    for (std::size_t c = 0; c < out.shape().c(); ++c) {
      double* p = out.channel(n, c);
      const double b = bias[c];
      for (std::size_t i = 0; i < sp; ++i) p[i] += b;
    }
  }
}

void accumulate_bias_grad(Tensor5& gb, const Tensor5& g) {
  const std::size_t sp = g.shape().spatial();
  for (std::size_t n = 0; n < g.shape().n(); ++n) {
    for (std::size_t c = 0; c < g.shape().c(); ++c) {
      const double* p = g.channel(n, c);
      double s = 0.0;
      for (std::size_t i = 0; i < sp; ++i) s += p[i];
      gb[c] += s;
    }
  }
}

void require_same_shape(const char* op, const Shape5& a, const Shape5& b) {
  static const char* names[5] = {"batch", "channel", "depth", "height", "width"};
  for (int i = 0; i < 5; ++i) {
    if (a.dims[i] != b.dims[i]) throw DimensionMismatch(op, names[i], a.dims[i], b.dims[i]);
  }
}

double gelu_value(double x) { return 0.5 * x * (1.0 + std::erf(x / std::numbers::sqrt2)); }
double gelu_grad(double x) {
  const double cdf = 0.5 * (1.0 + std::erf(x / std::numbers::sqrt2));
  const double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi);
  return cdf + x * pdf;
}
double sigmoid_value(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace

std::size_t conv_out_extent(std::size_t in, std::size_t k, std::size_t stride, std::size_t pad, const char* axis) {
  if (in + 2 * pad < k) throw DimensionMismatch("conv3d", axis, k, in + 2 * pad);
  return (in + 2 * pad - k) / stride + 1;
}

Var conv3d(Var input, Var kernel, std::optional<Var> bias, ConvGeometry geometry) {
  Tape& tape = *input.tape;
  const Shape5 xs = input.shape();
  const Shape5 ks = kernel.shape();
  check_geometry("conv3d", geometry);
  if (ks.dims[1] != xs.c()) throw DimensionMismatch("conv3d", "channel", ks.dims[1], xs.c());
  check_bias("conv3d", bias, ks.dims[0]);

  ConvDims g;
  g.in = {xs.d(), xs.h(), xs.w()};
  g.k = {ks.dims[2], ks.dims[3], ks.dims[4]};
  g.stride = geometry.stride;
  g.pad = geometry.padding;
  for (int i = 0; i < 3; ++i) g.out[i] = conv_out_extent(g.in[i], g.k[i], g.stride[i], g.pad[i], kAxisNames[i]);

  const std::size_t cin = xs.c();
  const std::size_t cout = ks.dims[0];
  const std::size_t kdim = cin * g.taps();
  const std::size_t cols = g.out_voxels();
  Tensor5 out(Shape5(xs.n(), cout, g.out[0], g.out[1], g.out[2]));
  const std::size_t out_rows = g.out[0] * g.out[1];
  const std::size_t chunk = rows_per_chunk(g, kdim);
  std::vector<double> col(kdim * std::min(chunk, out_rows) * g.out[2]);
  const RowView w{kernel.value().raw(), static_cast<Eigen::Index>(cout), static_cast<Eigen::Index>(kdim), static_cast<Eigen::Index>(kdim)};
  for (std::size_t n = 0; n < xs.n(); ++n) {
    for (std::size_t r0 = 0; r0 < out_rows; r0 += chunk) {
      const std::size_t r1 = std::min(out_rows, r0 + chunk);
      const auto nc = static_cast<Eigen::Index>((r1 - r0) * g.out[2]);
      im2col(input.value().channel(n, 0), cin, g, col.data(), r0, r1);
      gemm(out.channel(n, 0) + r0 * g.out[2], static_cast<Eigen::Index>(cols), w, false,
           {col.data(), static_cast<Eigen::Index>(kdim), nc, nc}, false, false);
    }
  }
  if (bias) add_bias(out, bias->value());

  std::vector<Var> parents{input, kernel};
  if (bias) parents.push_back(*bias);
  return tape.record("conv3d", std::move(out), parents, [input, kernel, bias, g, cin, cout, kdim, cols](Tape& t, const Tensor5& gout) {
    const Tensor5& x = t.value(input);
    const RowView w{t.value(kernel).raw(), static_cast<Eigen::Index>(cout), static_cast<Eigen::Index>(kdim), static_cast<Eigen::Index>(kdim)};
    const bool want_x = t.requires_grad(input);
    const bool want_w = t.requires_grad(kernel);
    const std::size_t out_rows = g.out[0] * g.out[1];
    const std::size_t chunk = rows_per_chunk(g, kdim);
    std::vector<double> col(kdim * std::min(chunk, out_rows) * g.out[2]);
    for (std::size_t n = 0; n < x.shape().n() && (want_x || want_w); ++n) {
      for (std::size_t r0 = 0; r0 < out_rows; r0 += chunk) {
        const std::size_t r1 = std::min(out_rows, r0 + chunk);
        const auto nc = static_cast<Eigen::Index>((r1 - r0) * g.out[2]);
        const RowView go{gout.channel(n, 0) + r0 * g.out[2], static_cast<Eigen::Index>(cout), nc, static_cast<Eigen::Index>(cols)};
        const RowView cv{col.data(), static_cast<Eigen::Index>(kdim), nc, nc};
        if (want_w) {
          im2col(x.channel(n, 0), cin, g, col.data(), r0, r1);
          gemm(t.grad_buffer(kernel).raw(), static_cast<Eigen::Index>(kdim), go, false, cv, true, true);
        }
        if (want_x) {
          gemm(col.data(), nc, w, true, go, false, false);
          col2im(col.data(), cin, g, t.grad_buffer(input).channel(n, 0), r0, r1);
        }
      }
    }
    if (bias && t.requires_grad(*bias)) accumulate_bias_grad(t.grad_buffer(*bias), gout);
  });
}

Var conv_transpose3d(Var input, Var kernel, std::optional<Var> bias, ConvGeometry geometry) {
  Tape& tape = *input.tape;
  const Shape5 xs = input.shape();
  const Shape5 ks = kernel.shape();
  check_geometry("conv_transpose3d", geometry);
  if (ks.dims[0] != xs.c()) throw DimensionMismatch("conv_transpose3d", "channel", ks.dims[0], xs.c());
  check_bias("conv_transpose3d", bias, ks.dims[1]);

  // The transposed op's output plays the role of conv3d's input.
  ConvDims g;
  g.k = {ks.dims[2], ks.dims[3], ks.dims[4]};
  g.stride = geometry.stride;
  g.pad = geometry.padding;
  g.out = {xs.d(), xs.h(), xs.w()};
  for (int i = 0; i < 3; ++i) {
    const std::size_t full = (g.out[i] - 1) * g.stride[i] + g.k[i];
    if (g.out[i] == 0 || full < 2 * g.pad[i] + 1) {
      throw DimensionMismatch("conv_transpose3d", kAxisNames[i], 2 * g.pad[i] + 1, full);
    }
    g.in[i] = full - 2 * g.pad[i];
  }

  const std::size_t ca = ks.dims[0];
  const std::size_t cb = ks.dims[1];
  const std::size_t kdim = cb * g.taps();
  const std::size_t cols = g.out_voxels();
  Tensor5 out(Shape5(xs.n(), cb, g.in[0], g.in[1], g.in[2]));
  const std::size_t out_rows = g.out[0] * g.out[1];
  const std::size_t chunk = rows_per_chunk(g, kdim);
  std::vector<double> col(kdim * std::min(chunk, out_rows) * g.out[2]);
  const RowView w{kernel.value().raw(), static_cast<Eigen::Index>(ca), static_cast<Eigen::Index>(kdim), static_cast<Eigen::Index>(kdim)};
  for (std::size_t n = 0; n < xs.n(); ++n) {
    for (std::size_t r0 = 0; r0 < out_rows; r0 += chunk) {
      const std::size_t r1 = std::min(out_rows, r0 + chunk);
      const auto nc = static_cast<Eigen::Index>((r1 - r0) * g.out[2]);
      const RowView xin{input.value().channel(n, 0) + r0 * g.out[2], static_cast<Eigen::Index>(ca), nc, static_cast<Eigen::Index>(cols)};
      gemm(col.data(), nc, w, true, xin, false, false);
      col2im(col.data(), cb, g, out.channel(n, 0), r0, r1);
    }
  }
  if (bias) add_bias(out, bias->value());

  std::vector<Var> parents{input, kernel};
  if (bias) parents.push_back(*bias);
  return tape.record("conv_transpose3d", std::move(out), parents, [input, kernel, bias, g, ca, kdim, cols, cb](Tape& t, const Tensor5& gout) {
    const Tensor5& x = t.value(input);
    const RowView w{t.value(kernel).raw(), static_cast<Eigen::Index>(ca), static_cast<Eigen::Index>(kdim), static_cast<Eigen::Index>(kdim)};
    const bool want_x = t.requires_grad(input);
    const bool want_w = t.requires_grad(kernel);
    const std::size_t out_rows = g.out[0] * g.out[1];
    const std::size_t chunk = rows_per_chunk(g, kdim);
    std::vector<double> col(kdim * std::min(chunk, out_rows) * g.out[2]);
    for (std::size_t n = 0; n < x.shape().n() && (want_x || want_w); ++n) {
      for (std::size_t r0 = 0; r0 < out_rows; r0 += chunk) {
        const std::size_t r1 = std::min(out_rows, r0 + chunk);
        const auto nc = static_cast<Eigen::Index>((r1 - r0) * g.out[2]);
        im2col(gout.channel(n, 0), cb, g, col.data(), r0, r1);
        const RowView gc{col.data(), static_cast<Eigen::Index>(kdim), nc, nc};
        if (want_x) gemm(t.grad_buffer(input).channel(n, 0) + r0 * g.out[2], static_cast<Eigen::Index>(cols), w, false, gc, false, true);
        if (want_w) {
          const RowView xin{x.channel(n, 0) + r0 * g.out[2], static_cast<Eigen::Index>(ca), nc, static_cast<Eigen::Index>(cols)};
          gemm(t.grad_buffer(kernel).raw(), static_cast<Eigen::Index>(kdim), xin, false, gc, true, true);
        }
      }
    }
    if (bias && t.requires_grad(*bias)) accumulate_bias_grad(t.grad_buffer(*bias), gout);
  });
}

Var instance_norm3d(Var input, Var gamma, Var beta, double eps) {
  const Shape5 xs = input.shape();
  if (gamma.shape().numel() != xs.c()) throw DimensionMismatch("instance_norm3d", "gamma", xs.c(), gamma.shape().numel());
  if (beta.shape().numel() != xs.c()) throw DimensionMismatch("instance_norm3d", "beta", xs.c(), beta.shape().numel());
  if (!(eps > 0.0)) throw ConfigError("instance_norm3d: eps must be positive");

  const std::size_t m = xs.spatial();
  const std::size_t groups = xs.n() * xs.c();
  Tensor5 xhat(xs);
  std::vector<double> inv_std(groups);
  Tensor5 out(xs);
  const Tensor5& x = input.value();
  for (std::size_t n = 0; n < xs.n(); ++n) {
    for (std::size_t c = 0; c < xs.c(); ++c) {
      const double* p = x.channel(n, c);
      double mean = 0.0;
      for (std::size_t i = 0; i < m; ++i) mean += p[i];
      mean /= static_cast<double>(m);
      // Second pass removes the rounding residue of the first (exact for constant input).
      double resid = 0.0;
      for (std::size_t i = 0; i < m; ++i) resid += p[i] - mean;
      mean += resid / static_cast<double>(m);
      double var = 0.0;
      for (std::size_t i = 0; i < m; ++i) var += (p[i] - mean) * (p[i] - mean);
      var /= static_cast<double>(m);
      const double inv = 1.0 / std::sqrt(var + eps);
      inv_std[n * xs.c() + c] = inv;
      double* xh = xhat.channel(n, c);
      double* o = out.channel(n, c);
      const double gm = gamma.value()[c];
      const double bt = beta.value()[c];
      for (std::size_t i = 0; i < m; ++i) {
        xh[i] = (p[i] - mean) * inv;
        o[i] = gm * xh[i] + bt;
      }
    }
  }
  return input.tape->record("instance_norm3d", std::move(out), {input, gamma, beta},
                            [input, gamma, beta, xhat = std::move(xhat), inv_std = std::move(inv_std), m](Tape& t, const Tensor5& g) {
    const Shape5 s = g.shape();
    const bool want_x = t.requires_grad(input);
    for (std::size_t n = 0; n < s.n(); ++n) {
      for (std::size_t c = 0; c < s.c(); ++c) {
        const double* gp = g.channel(n, c);
        const double* xh = xhat.channel(n, c);
        double sum_g = 0.0;
        double sum_gx = 0.0;
        for (std::size_t i = 0; i < m; ++i) {
          sum_g += gp[i];
          sum_gx += gp[i] * xh[i];
        }
        if (t.requires_grad(gamma)) t.grad_buffer(gamma)[c] += sum_gx;
        if (t.requires_grad(beta)) t.grad_buffer(beta)[c] += sum_g;
        if (want_x) {
          const double gm = t.value(gamma)[c];
          const double inv = inv_std[n * s.c() + c];
          const double md = static_cast<double>(m);
          double* gx = t.grad_buffer(input).channel(n, c);
          for (std::size_t i = 0; i < m; ++i) {
            gx[i] += gm * inv * (gp[i] - sum_g / md - xh[i] * sum_gx / md);
          }
        }
      }
    }
  });
}

Var activation(Var input, Activation kind) {
  const Tensor5& x = input.value();
  Tensor5 out(x.shape());
  for (std::size_t i = 0; i < x.numel(); ++i) {
    switch (kind) {
      case Activation::kGelu: out[i] = gelu_value(x[i]); break;
      case Activation::kRelu: out[i] = x[i] > 0.0 ? x[i] : 0.0; break;
      case Activation::kSigmoid: out[i] = sigmoid_value(x[i]); break;
    }
  }
  const char* name = kind == Activation::kGelu ? "gelu" : kind == Activation::kRelu ? "relu" : "sigmoid";
  Tensor5 saved = kind == Activation::kSigmoid ? out : Tensor5();
  return input.tape->record(name, std::move(out), {input}, [input, kind, saved = std::move(saved)](Tape& t, const Tensor5& g) {
    const Tensor5& xv = t.value(input);
    Tensor5& gx = t.grad_buffer(input);
    for (std::size_t i = 0; i < g.numel(); ++i) {
      switch (kind) {
        case Activation::kGelu: gx[i] += g[i] * gelu_grad(xv[i]); break;
        case Activation::kRelu: gx[i] += xv[i] > 0.0 ? g[i] : 0.0; break;
        case Activation::kSigmoid: gx[i] += g[i] * saved[i] * (1.0 - saved[i]); break;
      }
    }
  });
}

Var linear(Var input, Var weight, std::optional<Var> bias) {
  const Shape5 xs = input.shape();
  const Shape5 ws = weight.shape();
  if (!xs.is_matrix()) throw DimensionMismatch("linear", "batch", 1, xs.n() * xs.c() * xs.d());
  if (ws.cols() != xs.cols()) throw DimensionMismatch("linear", "in_features", ws.cols(), xs.cols());
  check_bias("linear", bias, ws.rows());
  const auto rows = static_cast<Eigen::Index>(xs.rows());
  const auto in = static_cast<Eigen::Index>(xs.cols());
  const auto outf = static_cast<Eigen::Index>(ws.rows());

  Tensor5 out = Tensor5::matrix(xs.rows(), ws.rows());
  gemm(out.raw(), outf, {input.value().raw(), rows, in, in}, false, {weight.value().raw(), outf, in, in}, true, false);
  MatMap y(out.raw(), rows, outf);
  if (bias) {
    for (Eigen::Index r = 0; r < rows; ++r) {
      for (Eigen::Index c = 0; c < outf; ++c) y(r, c) += bias->value()[static_cast<std::size_t>(c)];
    }
  }
  std::vector<Var> parents{input, weight};
  if (bias) parents.push_back(*bias);
  return input.tape->record("linear", std::move(out), parents, [input, weight, bias, rows, in, outf](Tape& t, const Tensor5& g) {
    ConstMatMap go(g.raw(), rows, outf);
    const RowView gv{g.raw(), rows, outf, outf};
    if (t.requires_grad(input)) gemm(t.grad_buffer(input).raw(), in, gv, false, {t.value(weight).raw(), outf, in, in}, false, true);
    if (t.requires_grad(weight)) gemm(t.grad_buffer(weight).raw(), in, gv, true, {t.value(input).raw(), rows, in, in}, false, true);
    if (bias && t.requires_grad(*bias)) {
      Tensor5& gb = t.grad_buffer(*bias);
      for (Eigen::Index r = 0; r < rows; ++r) {
        for (Eigen::Index c = 0; c < outf; ++c) gb[static_cast<std::size_t>(c)] += go(r, c);
      }
    }
  });
}

Var global_avg_pool(Var input) {
  const Shape5 xs = input.shape();
  const std::size_t m = xs.spatial();
  if (m == 0) throw DimensionMismatch("global_avg_pool", "spatial", 1, 0);
  Tensor5 out(Shape5(xs.n(), xs.c(), 1, 1, 1));
  for (std::size_t n = 0; n < xs.n(); ++n) {
    for (std::size_t c = 0; c < xs.c(); ++c) {
      const double* p = input.value().channel(n, c);
      double s = 0.0;
      for (std::size_t i = 0; i < m; ++i) s += p[i];
      out[n * xs.c() + c] = s / static_cast<double>(m);
    }
  }
  return input.tape->record("global_avg_pool", std::move(out), {input}, [input, m](Tape& t, const Tensor5& g) {
    Tensor5& gx = t.grad_buffer(input);
    const std::size_t groups = g.numel();
    for (std::size_t k = 0; k < groups; ++k) {
      const double v = g[k] / static_cast<double>(m);
      double* p = gx.raw() + k * m;
      for (std::size_t i = 0; i < m; ++i) p[i] += v;
    }
  });
}

Var softmax_channel(Var input) {
  const Shape5 xs = input.shape();
  if (xs.c() < 2) throw DimensionMismatch("softmax_channel", "channel", 2, xs.c());
  const std::size_t m = xs.spatial();
  const std::size_t ch = xs.c();
  const Tensor5& x = input.value();
  Tensor5 out(xs);
  for (std::size_t n = 0; n < xs.n(); ++n) {
    const double* base = x.channel(n, 0);
    double* obase = out.channel(n, 0);
    for (std::size_t i = 0; i < m; ++i) {
      double mx = base[i];
      for (std::size_t c = 1; c < ch; ++c) mx = std::max(mx, base[c * m + i]);
      double s = 0.0;
      for (std::size_t c = 0; c < ch; ++c) {
        const double e = std::exp(base[c * m + i] - mx);
        obase[c * m + i] = e;
        s += e;
      }
      for (std::size_t c = 0; c < ch; ++c) obase[c * m + i] /= s;
    }
  }
  Tensor5 saved = out;
  return input.tape->record("softmax_channel", std::move(out), {input}, [input, saved = std::move(saved), m, ch](Tape& t, const Tensor5& g) {
    Tensor5& gx = t.grad_buffer(input);
    for (std::size_t n = 0; n < g.shape().n(); ++n) {
      const double* y = saved.channel(n, 0);
      const double* gp = g.channel(n, 0);
      double* gxp = gx.channel(n, 0);
      for (std::size_t i = 0; i < m; ++i) {
        double s = 0.0;
        for (std::size_t c = 0; c < ch; ++c) s += gp[c * m + i] * y[c * m + i];
        for (std::size_t c = 0; c < ch; ++c) gxp[c * m + i] += y[c * m + i] * (gp[c * m + i] - s);
      }
    }
  });
}

Var add(Var a, Var b) {
  require_same_shape("add", a.shape(), b.shape());
  Tensor5 out = a.value();
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] += b.value()[i];
  return a.tape->record("add", std::move(out), {a, b}, [a, b](Tape& t, const Tensor5& g) {
    for (Var v : {a, b}) {
      if (!t.requires_grad(v)) continue;
      Tensor5& gv = t.grad_buffer(v);
      for (std::size_t i = 0; i < g.numel(); ++i) gv[i] += g[i];
    }
  });
}

Var add_broadcast_batch(Var x, Var table) {
  const Shape5 xs = x.shape();
  const Shape5 ts = table.shape();
  require_same_shape("add_broadcast_batch", Shape5(1, xs.c(), xs.d(), xs.h(), xs.w()), ts);
  const std::size_t per = ts.numel();
  Tensor5 out = x.value();
  for (std::size_t n = 0; n < xs.n(); ++n) {
    for (std::size_t i = 0; i < per; ++i) out[n * per + i] += table.value()[i];
  }
  return x.tape->record("add_broadcast_batch", std::move(out), {x, table}, [x, table, per](Tape& t, const Tensor5& g) {
    const std::size_t batches = g.numel() / per;
    if (t.requires_grad(x)) {
      Tensor5& gx = t.grad_buffer(x);
      for (std::size_t i = 0; i < g.numel(); ++i) gx[i] += g[i];
    }
    if (t.requires_grad(table)) {
      Tensor5& gt = t.grad_buffer(table);
      for (std::size_t n = 0; n < batches; ++n) {
        for (std::size_t i = 0; i < per; ++i) gt[i] += g[n * per + i];
      }
    }
  });
}

Var scale(Var x, double factor) {
  Tensor5 out = x.value();
  for (double& v : out.data()) v *= factor;
  return x.tape->record("scale", std::move(out), {x}, [x, factor](Tape& t, const Tensor5& g) {
    Tensor5& gx = t.grad_buffer(x);
    for (std::size_t i = 0; i < g.numel(); ++i) gx[i] += factor * g[i];
  });
}

Var scale_channels(Var x, Var gate) {
  const Shape5 xs = x.shape();
  require_same_shape("scale_channels", Shape5(xs.n(), xs.c(), 1, 1, 1), gate.shape());
  const std::size_t m = xs.spatial();
  Tensor5 out = x.value();
  for (std::size_t k = 0; k < xs.n() * xs.c(); ++k) {
    const double s = gate.value()[k];
    double* p = out.raw() + k * m;
    for (std::size_t i = 0; i < m; ++i) p[i] *= s;
  }
  return x.tape->record("scale_channels", std::move(out), {x, gate}, [x, gate, m](Tape& t, const Tensor5& g) {
    const std::size_t groups = g.numel() / m;
    const bool want_x = t.requires_grad(x);
    const bool want_s = t.requires_grad(gate);
    for (std::size_t k = 0; k < groups; ++k) {
      const double* gp = g.raw() + k * m;
      if (want_x) {
        const double s = t.value(gate)[k];
        double* gx = t.grad_buffer(x).raw() + k * m;
        for (std::size_t i = 0; i < m; ++i) gx[i] += gp[i] * s;
      }
      if (want_s) {
        const double* xp = t.value(x).raw() + k * m;
        double acc = 0.0;
        for (std::size_t i = 0; i < m; ++i) acc += gp[i] * xp[i];
        t.grad_buffer(gate)[k] += acc;
      }
    }
  });
}

Var concat_channels(Var a, Var b) {
  const Shape5 as = a.shape();
  const Shape5 bs = b.shape();
  if (as.n() != bs.n()) throw DimensionMismatch("concat_channels", "batch", as.n(), bs.n());
  if (as.d() != bs.d()) throw DimensionMismatch("concat_channels", "depth", as.d(), bs.d());
  if (as.h() != bs.h()) throw DimensionMismatch("concat_channels", "height", as.h(), bs.h());
  if (as.w() != bs.w()) throw DimensionMismatch("concat_channels", "width", as.w(), bs.w());
  const std::size_t na = as.c() * as.spatial();
  const std::size_t nb = bs.c() * bs.spatial();
  Tensor5 out(Shape5(as.n(), as.c() + bs.c(), as.d(), as.h(), as.w()));
  for (std::size_t n = 0; n < as.n(); ++n) {
    std::copy_n(a.value().raw() + n * na, na, out.raw() + n * (na + nb));
    std::copy_n(b.value().raw() + n * nb, nb, out.raw() + n * (na + nb) + na);
  }
  return a.tape->record("concat_channels", std::move(out), {a, b}, [a, b, na, nb](Tape& t, const Tensor5& g) {
    const std::size_t batches = g.numel() / (na + nb);
    for (std::size_t n = 0; n < batches; ++n) {
      const double* src = g.raw() + n * (na + nb);
      if (t.requires_grad(a)) {
        double* ga = t.grad_buffer(a).raw() + n * na;
        for (std::size_t i = 0; i < na; ++i) ga[i] += src[i];
      }
      if (t.requires_grad(b)) {
        double* gb = t.grad_buffer(b).raw() + n * nb;
        for (std::size_t i = 0; i < nb; ++i) gb[i] += src[na + i];
      }
    }
  });
}

Var concat_batch(const std::vector<Var>& parts) {
  if (parts.empty()) throw DimensionMismatch("concat_batch", "batch", 1, 0);
  const Shape5 s0 = parts.front().shape();
  std::size_t total = 0;
  for (const Var& p : parts) {
    require_same_shape("concat_batch", Shape5(p.shape().n(), s0.c(), s0.d(), s0.h(), s0.w()), p.shape());
    total += p.shape().n();
  }
  Tensor5 out(Shape5(total, s0.c(), s0.d(), s0.h(), s0.w()));
  std::size_t off = 0;
  for (const Var& p : parts) {
    std::copy_n(p.value().raw(), p.value().numel(), out.raw() + off);
    off += p.value().numel();
  }
  return parts.front().tape->record("concat_batch", std::move(out), parts, [parts](Tape& t, const Tensor5& g) {
    std::size_t o = 0;
    for (const Var& p : parts) {
      const std::size_t len = t.value(p).numel();
      if (t.requires_grad(p)) {
        Tensor5& gp = t.grad_buffer(p);
        for (std::size_t i = 0; i < len; ++i) gp[i] += g[o + i];
      }
      o += len;
    }
  });
}

Var select_channel(Var x, std::size_t channel) {
  const Shape5 xs = x.shape();
  if (channel >= xs.c()) throw DimensionMismatch("select_channel", "channel", xs.c(), channel);
  const std::size_t m = xs.spatial();
  Tensor5 out(Shape5(xs.n(), 1, xs.d(), xs.h(), xs.w()));
  for (std::size_t n = 0; n < xs.n(); ++n) std::copy_n(x.value().channel(n, channel), m, out.channel(n, 0));
  return x.tape->record("select_channel", std::move(out), {x}, [x, channel, m](Tape& t, const Tensor5& g) {
    Tensor5& gx = t.grad_buffer(x);
    for (std::size_t n = 0; n < g.shape().n(); ++n) {
      double* dst = gx.channel(n, channel);
      const double* src = g.channel(n, 0);
      for (std::size_t i = 0; i < m; ++i) dst[i] += src[i];
    }
  });
}

Var reshape(Var x, Shape5 shape) {
  Tensor5 out = x.value().reshaped(shape);
  return x.tape->record("reshape", std::move(out), {x}, [x](Tape& t, const Tensor5& g) {
    Tensor5& gx = t.grad_buffer(x);
    for (std::size_t i = 0; i < g.numel(); ++i) gx[i] += g[i];
  });
}

Var sum(Var x) {
  double s = 0.0;
  for (double v : x.value().data()) s += v;
  return x.tape->record("sum", Tensor5(Shape5::scalar(), s), {x}, [x](Tape& t, const Tensor5& g) {
    Tensor5& gx = t.grad_buffer(x);
    for (double& v : gx.data()) v += g[0];
  });
}

Var weighted_sum(const std::vector<Var>& terms, const std::vector<double>& weights) {
  if (terms.empty() || terms.size() != weights.size()) {
    throw DimensionMismatch("weighted_sum", "terms", weights.size(), terms.size());
  }
  double s = 0.0;
  for (std::size_t i = 0; i < terms.size(); ++i) {
    if (terms[i].value().numel() != 1) throw DimensionMismatch("weighted_sum", "numel", 1, terms[i].value().numel());
    s += weights[i] * terms[i].value()[0];
  }
  return terms.front().tape->record("weighted_sum", Tensor5(Shape5::scalar(), s), terms, [terms, weights](Tape& t, const Tensor5& g) {
    for (std::size_t i = 0; i < terms.size(); ++i) {
      if (t.requires_grad(terms[i])) t.grad_buffer(terms[i])[0] += weights[i] * g[0];
    }
  });
}

}  // namespace vig3d::ops
