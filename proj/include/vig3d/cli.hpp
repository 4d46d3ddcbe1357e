#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "vig3d/network.hpp"
#include "vig3d/synthvessel.hpp"
#include "vig3d/training.hpp"

namespace vig3d::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitFailure = 1;  ///< gradcheck found a bad derivative
inline constexpr int kExitUsage = 2;
inline constexpr int kExitNumerical = 3;

/// Every section of a run file. Unknown sections and keys are rejected.
///
///   [run]      seed
///   [data]     generator parameters (see synth::GenParams)
///   [dataset]  n_train, n_test, manifest
///   [model]    architecture (see ModelConfig); `profile` resets all other fields
///   [train]    epochs, iters_per_epoch, batch_size, lr0, power, momentum, fg_bias, flips,
///              checkpoint_every, eval_every, target_dsc, eval_overlap
///   [loss]     lambda_dice, lambda_ce, dice_smooth, ds_weights
///   [predict]  checkpoint, volume, split, overlap
///   [eval]     pred_dir, split, connectivity
///   [gradcheck] seeds
struct RunConfig {
  std::uint64_t seed = 0;
  synth::GenParams data;
  std::size_t n_train = 2;
  std::size_t n_test = 1;
  std::filesystem::path manifest;
  ModelConfig model = ModelConfig::tiny();
  train::TrainConfig train;
  /// Stop once the mean training-set DSC reaches this (checked every eval_every); 0 disables.
  double target_dsc = 0;
  double eval_overlap = 0;
  std::filesystem::path checkpoint;
  /// Single volume stem to predict; empty predicts the manifest split.
  std::string volume;
  std::string predict_split = "test";
  double overlap = 0.5;
  std::filesystem::path pred_dir;
  std::string eval_split = "test";
  int connectivity = 26;
  std::vector<std::uint64_t> gradcheck_seeds{1, 2, 3};

  /// Apply `section.key = value`; ConfigError naming the key otherwise.
  void set(const std::string& section, const std::string& key, const std::string& value);
  /// Canonical text of every section, parseable by `parse_run_config`.
  std::string to_text() const;
};

/// INI-style text: `[section]` headers, `key = value`, `#` or `;` comments.
RunConfig parse_run_config(const std::string& text);

/// Entry point shared by the `vig3d` binary, tests and the acceptance driver.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace vig3d::cli
