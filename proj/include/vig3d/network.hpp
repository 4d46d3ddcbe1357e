#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <deque>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "vig3d/graph.hpp"
#include "vig3d/tape.hpp"
#include "vig3d/tensor.hpp"

namespace vig3d {

/// Architecture hyper-parameters.
///
/// `stages` counts CNN pyramid levels; level i emits input/2^(i+1). The two shallowest
/// levels are texture skips, the remaining `stages - 2` are fused with a ViG stage, so
/// `vig_channels` and `vig_units_per_stage` hold one entry per fused level.
struct ModelConfig {
  std::string profile = "tiny";
  std::size_t stages = 4;
  std::size_t in_channels = 1;
  std::vector<std::size_t> cnn_channels{16, 32, 64, 64};
  std::vector<std::size_t> vig_channels{32, 64};
  std::vector<std::size_t> vig_units_per_stage{1, 2};
  std::size_t ffn_layers_per_block = 2;  // E
  std::size_t ffn_expansion = 4;
  std::size_t knn_k = 7;
  graph::KnnSpace knn_space = graph::KnnSpace::kFeature;
  std::size_t num_classes = 2;
  std::size_t attention_reduction = 4;
  std::array<std::size_t, 3> patch_shape{32, 64, 64};
  bool use_vig3d = true;
  bool use_channel_attention = true;
  bool use_offset_decoder = true;

  static ModelConfig tiny();
  /// Smallest model that exercises every component; for gradient checks.
  static ModelConfig micro();
  /// Paper-scale settings, for documentation and arithmetic checks only.
  static ModelConfig large();
  static ModelConfig profile_named(const std::string& name);

  std::size_t fused_levels() const { return stages - 2; }
  std::size_t vig_block_count() const;
  /// Number of supervised decoder outputs (depth 0 .. stages-2).
  std::size_t head_count() const { return stages - 1; }

  /// Throws ConfigError describing the first violated constraint.
  void validate() const;

  /// Assign one field from its textual form; ConfigError on unknown key or bad value.
  void set(const std::string& key, const std::string& value);
  /// key = value lines, parseable by `parse`.
  std::string to_text() const;
  static ModelConfig parse(const std::string& text);

  bool operator==(const ModelConfig&) const = default;
};

/// Tensors emitted by a forward pass.
struct ForwardResult {
  /// heads[d] holds logits at input/2^d; heads[0] is the final full-resolution output.
  std::vector<Var> heads;
  Var logits() const { return heads.front(); }
};

/// A built ViG3D-UNet: configuration plus named parameters.
///
/// Parameters are never mutated by a forward pass; each pass binds them to its own tape.
class Model {
 public:
  Model(ModelConfig config, std::uint64_t seed);
  Model(const Model&) = delete;
  Model& operator=(const Model&) = delete;
  Model(Model&&) = default;
  Model& operator=(Model&&) = default;

  const ModelConfig& config() const { return config_; }
  std::vector<Parameter*> parameters();
  std::vector<const Parameter*> parameters() const;
  /// Total number of scalar weights.
  std::size_t parameter_count() const;
  Parameter& parameter(const std::string& name);
  const Parameter* find(const std::string& name) const;
  std::size_t vig_block_count() const { return config_.vig_block_count(); }

  // Forward stages. Each call binds the model's parameters to the image's tape.
  Var stem_forward(Var image) const;
  std::vector<Var> cnn_branch_forward(Var image) const;
  /// One map per fused level, aligned with CNN levels 2..stages-1.
  std::vector<Var> vig_branch_forward(Var image) const;
  /// concat(cnn, vig) gated by sigmoid(MLP(GAP(.))); with the ViG branch disabled the
  /// gate acts on `cnn_feat` alone and `vig_feat` must be empty.
  Var channel_attention_fuse(Var cnn_feat, std::optional<Var> vig_feat, std::size_t fused_index) const;
  std::vector<Var> offset_decoder_forward(const std::vector<Var>& fused, const std::vector<Var>& texture) const;
  ForwardResult forward(Var image) const;

 private:
  Parameter& add(const std::string& name, Shape5 shape, double bound);
  Parameter& add_conv(const std::string& name, std::size_t cin, std::size_t cout, std::size_t k, bool bias);
  void add_linear(const std::string& name, std::size_t in, std::size_t out);
  void add_norm(const std::string& name, std::size_t c);
  void build();

  Var bind(Tape& tape, const std::string& name) const;
  Var conv(Var x, const std::string& name, std::size_t stride, std::size_t pad, bool bias) const;
  Var norm_relu(Var x, const std::string& name) const;
  graph::LinearVars linear_vars(Tape& tape, const std::string& name) const;
  std::vector<Var> skip_maps(const std::vector<Var>& cnn, const std::vector<Var>& vig) const;
  std::vector<std::size_t> skip_widths() const;
  std::size_t vig_stage_out(std::size_t j) const;

  ModelConfig config_;
  std::uint64_t seed_;
  std::deque<Parameter> params_;
  std::map<std::string, Parameter*> by_name_;
};

/// Whole-volume inference: tiles `image` (1, C, D, H, W) with patch windows at stride
/// patch*(1-overlap), averages softmax probabilities, returns the per-voxel argmax.
/// Volumes smaller than the patch are reflect-padded and cropped back.
std::vector<std::uint8_t> sliding_window_predict(const Model& model, const Tensor5& image, double overlap);
/// Same, returning the averaged class probabilities (1, classes, D, H, W).
Tensor5 sliding_window_probabilities(const Model& model, const Tensor5& image, double overlap);
/// Window origins along one axis (last one flush to the end).
std::vector<std::size_t> window_origins(std::size_t extent, std::size_t patch, double overlap);

void save_checkpoint(const std::filesystem::path& path, const Model& model);
/// ParseError on malformed input, ConfigError on an invalid embedded config.
Model load_checkpoint(const std::filesystem::path& path);

}  // namespace vig3d
