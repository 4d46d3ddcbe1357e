#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "vig3d/tensor.hpp"

// Procedural vessel phantoms: branching centerline trees, capsule voxelization, intensity
// rendering, the VVOL file format, dataset manifests and patch sampling.
namespace vig3d::synth {

using Dims3 = std::array<std::size_t, 3>;
using Point3 = std::array<double, 3>;
using Spacing3 = std::array<float, 3>;

struct GenParams {
  Dims3 dims{64, 64, 64};
  Spacing3 spacing{0.4f, 0.4f, 0.4f};  ///< mm / voxel
  double root_radius = 3.0;            ///< voxels
  double branch_prob = 0.08;           ///< per walk step
  double branch_angle_min = 0.35;      ///< radians
  double branch_angle_max = 1.05;
  double radius_decay = 0.75;
  double min_radius = 0.75;  ///< branches thinner than this are not spawned
  double step_length = 3.0;  ///< voxels per walk step
  double turn_sigma = 0.15;  ///< radians, per-step direction jitter
  std::size_t max_steps = 40;
  std::size_t max_depth = 3;
  std::size_t trees = 2;
  double fg_mean = 0.8;
  double bg_mean = 0.2;
  double noise_sigma = 0.05;
  double blur_radius = 1.0;  ///< Gaussian sigma in voxels; 0 disables

  /// ConfigError on the first invalid field.
  void validate() const;
  void set(const std::string& key, const std::string& value);
  std::string to_text() const;
};

struct Segment {
  Point3 start{};
  Point3 end{};
  double start_radius = 0;
  double end_radius = 0;
  int parent = -1;  ///< index into VesselTree::segments, -1 for a root
  std::size_t depth = 0;
};

struct VesselTree {
  std::vector<Segment> segments;
  /// Segments whose parent lies at a shallower depth, i.e. the first segment of a branch.
  std::size_t branch_points() const;
};

/// Binary mask plus intensity image on one grid.
struct LabeledVolume {
  Dims3 dims{};
  Spacing3 spacing{1.0f, 1.0f, 1.0f};
  std::vector<double> image;        ///< d*h*w, row-major
  std::vector<std::uint8_t> label;  ///< d*h*w, values 0/1
  std::string meta;                 ///< generator seed and parameters

  std::size_t voxels() const { return dims[0] * dims[1] * dims[2]; }
  /// Image as a (1, 1, d, h, w) tensor.
  Tensor5 image_tensor() const;
};

/// Random walk with branching. Roots enter through a random grid face; every branch
/// multiplies the radius by `radius_decay`. Pure function of (seed, params).
VesselTree generate_vessel_tree(std::uint64_t seed, const GenParams& params);

/// Label 1 iff the voxel centre lies within the interpolated radius of a segment.
std::vector<std::uint8_t> voxelize_tree(const VesselTree& tree, const Dims3& dims);

/// fg/bg intensities, separable Gaussian blur, seeded additive noise, clip to [0, 1].
std::vector<double> render_intensity(const std::vector<std::uint8_t>& label, const Dims3& dims, const GenParams& params,
                                     std::uint64_t seed);

/// Tree, mask and image for one sample.
LabeledVolume generate_volume(std::uint64_t seed, const GenParams& params);
/// Independent per-sample seed from (master seed, sample index).
std::uint64_t sample_seed(std::uint64_t master, std::uint64_t index);

// VVOL v1: "VVOL", u8 version, u8 dtype (1 f64 image, 2 u8 label), 3 x u32 dims (d, h, w),
// 3 x f32 spacing, row-major payload, all little-endian.
inline constexpr std::uint8_t kDtypeImage = 1;
inline constexpr std::uint8_t kDtypeLabel = 2;

void write_vvol_image(const std::filesystem::path& path, const Dims3& dims, const Spacing3& spacing, const std::vector<double>& data);
void write_vvol_label(const std::filesystem::path& path, const Dims3& dims, const Spacing3& spacing, const std::vector<std::uint8_t>& data);

struct VvolFile {
  std::uint8_t dtype = 0;
  Dims3 dims{};
  Spacing3 spacing{};
  std::vector<double> image;
  std::vector<std::uint8_t> label;
};
/// ParseError with the failing byte offset on malformed input.
VvolFile read_vvol(const std::filesystem::path& path);

/// `<stem>.img.vvol`, `<stem>.lbl.vvol`, `<stem>.meta`.
void write_volume(const std::filesystem::path& stem, const LabeledVolume& vol);
LabeledVolume read_volume(const std::filesystem::path& stem);
std::filesystem::path image_path(const std::filesystem::path& stem);
std::filesystem::path label_path(const std::filesystem::path& stem);

struct Manifest {
  std::vector<std::string> train;
  std::vector<std::string> test;
};
void write_manifest(const std::filesystem::path& path, const Manifest& m);
Manifest read_manifest(const std::filesystem::path& path);

struct Patch {
  Tensor5 image;  ///< (1, 1, pd, ph, pw)
  Tensor5 label;  ///< (1, 1, pd, ph, pw), values 0/1
  Dims3 origin{};
  bool foreground_centred = false;
  std::array<bool, 3> flipped{};
};

/// With probability fg_bias centre on a uniformly chosen foreground voxel, else on a
/// uniform voxel; clamp the window inside the volume; optionally flip axes.
Patch sample_patch(const LabeledVolume& vol, const Dims3& patch, std::uint64_t seed, double fg_bias, bool flips);

}  // namespace vig3d::synth
