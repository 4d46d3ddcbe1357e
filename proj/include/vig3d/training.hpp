#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <vector>

#include "vig3d/network.hpp"
#include "vig3d/synthvessel.hpp"
#include "vig3d/tape.hpp"

namespace vig3d::train {

struct LossConfig {
  double lambda_dice = 0.5;
  double lambda_ce = 0.5;
  double dice_smooth = 1e-5;
  /// Per-head weights, finest first. Empty selects `halving_weights(heads)`.
  std::vector<double> ds_weights;

  /// 2^(n-1), ..., 2, 1 normalized to sum 1.
  static std::vector<double> halving_weights(std::size_t heads);
  /// Validated weights for `heads` outputs.
  std::vector<double> weights_for(std::size_t heads) const;
  void validate() const;
};

/// Soft Dice loss, averaged over the batch. `probs` and `target` are (N, 1, D, H, W).
Var dice_loss(Var probs, const Tensor5& target, double smooth);
/// Mean voxelwise cross-entropy of `logits` (N, K, ...) against class indices (N, 1, ...).
Var cross_entropy_loss(Var logits, const Tensor5& target);
/// Keeps every `factor`-th voxel along each spatial axis.
Tensor5 downsample_nearest(const Tensor5& target, std::size_t factor);

struct LossTerms {
  Var total;
  double dice = 0;  ///< head-weighted Dice component
  double ce = 0;    ///< head-weighted cross-entropy component
};

/// Σ_i w_i (λ_dice Dice_i + λ_ce CE_i), each head scored against a downsampled target.
/// Dice scores the class-1 probability.
LossTerms deep_supervision_loss(const std::vector<Var>& heads, const Tensor5& target, const LossConfig& cfg);

struct OptimState {
  double lr0 = 1e-2;
  std::size_t total_iters = 1;
  double power = 0.9;
  double momentum = 0.99;
  std::vector<Tensor5> velocity;
  std::size_t iter = 0;

  /// lr0 (1 - t/T)^power.
  double lr_at(std::size_t t) const;
  double lr() const { return lr_at(iter); }
};

/// v <- momentum v + g; p <- p - lr v; iter += 1. Gradients are read from Parameter::grad.
/// NumericalError naming the parameter on a non-finite gradient.
void sgd_poly_step(const std::vector<Parameter*>& params, OptimState& state);

struct TrainConfig {
  std::size_t epochs = 1;
  std::size_t iters_per_epoch = 250;
  std::size_t batch_size = 2;
  double lr0 = 1e-2;
  double power = 0.9;
  double momentum = 0.99;
  LossConfig loss;
  double fg_bias = 0.5;
  bool flips = true;
  std::uint64_t seed = 0;
  /// Write `iter_<n>.ckpt` every this many iterations; 0 disables.
  std::size_t checkpoint_every = 0;
  /// Trace and checkpoints go here; empty keeps everything in memory.
  std::filesystem::path out_dir;
  /// Call the stop predicate every this many iterations; 0 disables.
  std::size_t eval_every = 0;

  std::size_t total_iters() const { return epochs * iters_per_epoch; }
  void validate() const;
};

struct TraceRecord {
  std::size_t iter = 0;
  double lr = 0;
  double total = 0;
  double dice = 0;
  double ce = 0;

  bool operator==(const TraceRecord&) const = default;
};

struct TrainResult {
  std::vector<TraceRecord> trace;
  std::size_t iterations = 0;
  bool stopped_early = false;
};

/// Returns true to end training after the given (1-based) iteration count.
using StopFn = std::function<bool(std::size_t iterations_done, const Model& model)>;

/// Patch-based SGD with deep supervision. Data order and augmentation derive from
/// `cfg.seed`. With `cfg.out_dir` set, streams `trace.tsv` and writes `final.ckpt`,
/// `best.ckpt` (lowest epoch-mean loss) and periodic checkpoints.
/// NumericalError carrying the iteration index on a non-finite loss.
TrainResult train_loop(Model& model, const std::vector<synth::LabeledVolume>& data, const TrainConfig& cfg,
                       const StopFn& stop = {});

void write_trace(const std::filesystem::path& path, const std::vector<TraceRecord>& trace);
std::vector<TraceRecord> read_trace(const std::filesystem::path& path);

}  // namespace vig3d::train
