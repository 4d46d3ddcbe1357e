#include "vig3d/training.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <random>
#include <sstream>
#include <utility>

#include "vig3d/error.hpp"
#include "vig3d/ops.hpp"

namespace vig3d::train {

// ---------------------------------------------------------------------------------------
// Losses

std::vector<double> LossConfig::halving_weights(std::size_t heads) {
  if (heads == 0) throw ConfigError("loss: at least one head is required");
  std::vector<double> w(heads);
  double total = 0;
  for (std::size_t i = 0; i < heads; ++i) total += w[i] = std::ldexp(1.0, static_cast<int>(heads - 1 - i));
  for (double& v : w) v /= total;
  return w;
}

void LossConfig::validate() const {
  if (!(lambda_dice >= 0 && lambda_ce >= 0 && lambda_dice + lambda_ce > 0)) {
    throw ConfigError("loss: lambda_dice and lambda_ce must be non-negative with a positive sum");
  }
  if (!(dice_smooth > 0)) throw ConfigError("loss.dice_smooth: must be positive");
  if (ds_weights.empty()) return;
  double total = 0;
  for (std::size_t i = 0; i < ds_weights.size(); ++i) {
    if (!(ds_weights[i] > 0)) throw ConfigError("loss.ds_weights: weights must be positive");
    if (i > 0 && !(ds_weights[i] < ds_weights[i - 1])) throw ConfigError("loss.ds_weights: weights must decrease with depth");
    total += ds_weights[i];
  }
  if (std::abs(total - 1.0) > 1e-12) throw ConfigError("loss.ds_weights: weights must sum to 1");
}

std::vector<double> LossConfig::weights_for(std::size_t heads) const {
  validate();
  if (ds_weights.empty()) return halving_weights(heads);
  if (ds_weights.size() != heads) throw DimensionMismatch("deep_supervision_loss", "heads", ds_weights.size(), heads);
  return ds_weights;
}

namespace {

void require_same_shape(const char* op, const Shape5& a, const Shape5& b) {
  static const char* kAxis[5] = {"n", "c", "d", "h", "w"};
  for (std::size_t i = 0; i < 5; ++i)
    if (a.dims[i] != b.dims[i]) throw DimensionMismatch(op, kAxis[i], a.dims[i], b.dims[i]);
}

}  // namespace

Var dice_loss(Var probs, const Tensor5& target, double smooth) {
  const Shape5& s = probs.shape();
  require_same_shape("dice_loss", target.shape(), s);
  if (s.c() != 1) throw DimensionMismatch("dice_loss", "c", 1, s.c());
  const std::size_t n = s.n(), m = s.spatial();
  const Tensor5& p = probs.value();
  std::vector<double> inter(n, 0.0), denom(n, smooth);
  double score = 0;
  for (std::size_t b = 0; b < n; ++b) {
    const double* pb = p.channel(b, 0);
    const double* tb = target.channel(b, 0);
    for (std::size_t i = 0; i < m; ++i) {
      inter[b] += pb[i] * tb[i];
      denom[b] += pb[i] + tb[i];
    }
    score += (2.0 * inter[b] + smooth) / denom[b];
  }
  const double loss = 1.0 - score / static_cast<double>(n);
  return probs.tape->record("dice_loss", Tensor5(Shape5::scalar(), loss), {probs},
                            [probs, target, inter, denom, smooth, n, m](Tape& t, const Tensor5& g) {
                              Tensor5& gp = t.grad_buffer(probs);
                              for (std::size_t b = 0; b < n; ++b) {
                                const double num = 2.0 * inter[b] + smooth;
                                const double scale = -g[0] / (static_cast<double>(n) * denom[b] * denom[b]);
                                const double* tb = target.channel(b, 0);
                                double* gb = gp.channel(b, 0);
                                for (std::size_t i = 0; i < m; ++i) gb[i] += scale * (2.0 * tb[i] * denom[b] - num);
                              }
                            });
}

Var cross_entropy_loss(Var logits, const Tensor5& target) {
  const Shape5& s = logits.shape();
  const Shape5& ts = target.shape();
  require_same_shape("cross_entropy_loss", ts, Shape5(s.n(), 1, s.d(), s.h(), s.w()));
  const std::size_t n = s.n(), k = s.c(), m = s.spatial();
  const Tensor5& z = logits.value();
  std::vector<std::size_t> cls(n * m);
  for (std::size_t i = 0; i < n * m; ++i) {
    const double v = target.data()[i];
    if (!(v >= 0) || v != std::floor(v) || v >= static_cast<double>(k)) {
      std::ostringstream msg;
      msg << "cross_entropy_loss: target value " << v << " at voxel " << i << " is not a class index below " << k;
      throw Error(msg.str());
    }
    cls[i] = static_cast<std::size_t>(v);
  }

  // Softmax is kept for the backward pass.
  Tensor5 soft(s);
  double total = 0;
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t i = 0; i < m; ++i) {
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t c = 0; c < k; ++c) mx = std::max(mx, z.channel(b, c)[i]);
      double se = 0;
      for (std::size_t c = 0; c < k; ++c) se += soft.channel(b, c)[i] = std::exp(z.channel(b, c)[i] - mx);
      for (std::size_t c = 0; c < k; ++c) soft.channel(b, c)[i] /= se;
      total += mx + std::log(se) - z.channel(b, cls[b * m + i])[i];
    }
  const double count = static_cast<double>(n * m);
  return logits.tape->record("cross_entropy_loss", Tensor5(Shape5::scalar(), total / count), {logits},
                             [logits, soft = std::move(soft), cls = std::move(cls), n, k, m, count](Tape& t, const Tensor5& g) {
                               Tensor5& gz = t.grad_buffer(logits);
                               const double scale = g[0] / count;
                               for (std::size_t b = 0; b < n; ++b)
                                 for (std::size_t c = 0; c < k; ++c) {
                                   const double* sc = soft.channel(b, c);
                                   double* gc = gz.channel(b, c);
                                   for (std::size_t i = 0; i < m; ++i) {
                                     gc[i] += scale * (sc[i] - (cls[b * m + i] == c ? 1.0 : 0.0));
                                   }
                                 }
                             });
}

Tensor5 downsample_nearest(const Tensor5& target, std::size_t factor) {
  const Shape5& s = target.shape();
  if (factor == 0) throw DimensionMismatch("downsample_nearest", "factor", 1, 0);
  if (factor == 1) return target;
  static const char* kAxis[3] = {"d", "h", "w"};
  const std::array<std::size_t, 3> ext{s.d(), s.h(), s.w()};
  for (std::size_t a = 0; a < 3; ++a)
    if (ext[a] % factor != 0) throw DimensionMismatch("downsample_nearest", kAxis[a], (ext[a] / factor + 1) * factor, ext[a]);
  Tensor5 out(Shape5(s.n(), s.c(), s.d() / factor, s.h() / factor, s.w() / factor));
  const Shape5& o = out.shape();
  for (std::size_t b = 0; b < s.n(); ++b)
    for (std::size_t c = 0; c < s.c(); ++c)
      for (std::size_t z = 0; z < o.d(); ++z)
        for (std::size_t y = 0; y < o.h(); ++y)
          for (std::size_t x = 0; x < o.w(); ++x) out.at(b, c, z, y, x) = target.at(b, c, z * factor, y * factor, x * factor);
  return out;
}

LossTerms deep_supervision_loss(const std::vector<Var>& heads, const Tensor5& target, const LossConfig& cfg) {
  const std::vector<double> w = cfg.weights_for(heads.size());
  LossTerms out;
  std::vector<Var> per_head;
  for (std::size_t i = 0; i < heads.size(); ++i) {
    const Shape5& hs = heads[i].shape();
    if (hs.c() < 2) throw DimensionMismatch("deep_supervision_loss", "c", 2, hs.c());
    const std::size_t factor = hs.d() ? target.shape().d() / hs.d() : 0;
    const Tensor5 t = downsample_nearest(target, factor);
    require_same_shape("deep_supervision_loss", Shape5(hs.n(), 1, hs.d(), hs.h(), hs.w()), t.shape());

    Tensor5 fg(t.shape());
    for (std::size_t v = 0; v < t.numel(); ++v) fg[v] = t[v] == 1.0 ? 1.0 : 0.0;
    Var dice = dice_loss(ops::select_channel(ops::softmax_channel(heads[i]), 1), fg, cfg.dice_smooth);
    Var ce = cross_entropy_loss(heads[i], t);
    out.dice += w[i] * dice.value()[0];
    out.ce += w[i] * ce.value()[0];
    per_head.push_back(ops::weighted_sum({dice, ce}, {cfg.lambda_dice, cfg.lambda_ce}));
  }
  out.total = ops::weighted_sum(per_head, w);
  return out;
}

// ---------------------------------------------------------------------------------------
// Optimizer

double OptimState::lr_at(std::size_t t) const {
  if (t > total_iters) throw Error("lr_at: iteration " + std::to_string(t) + " beyond schedule end " + std::to_string(total_iters));
  return lr0 * std::pow(1.0 - static_cast<double>(t) / static_cast<double>(total_iters), power);
}

void sgd_poly_step(const std::vector<Parameter*>& params, OptimState& state) {
  if (state.iter >= state.total_iters) {
    throw Error("sgd_poly_step: schedule exhausted after " + std::to_string(state.total_iters) + " iterations");
  }
  if (state.velocity.empty()) {
    for (const Parameter* p : params) state.velocity.emplace_back(p->value.shape());
  }
  if (state.velocity.size() != params.size()) throw DimensionMismatch("sgd_poly_step", "parameters", state.velocity.size(), params.size());
  for (std::size_t i = 0; i < params.size(); ++i) {
    require_same_shape("sgd_poly_step", state.velocity[i].shape(), params[i]->value.shape());
    if (!params[i]->grad.all_finite()) {
      throw NumericalError("non-finite gradient in '" + params[i]->name + "' at iteration " + std::to_string(state.iter),
                           static_cast<std::int64_t>(state.iter));
    }
  }
  const double lr = state.lr();
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto v = state.velocity[i].data();
    const auto p = params[i]->value.data();
    const auto g = std::as_const(params[i]->grad).data();
    for (std::size_t j = 0; j < v.size(); ++j) {
      v[j] = state.momentum * v[j] + g[j];
      p[j] -= lr * v[j];
    }
  }
  ++state.iter;
}

// ---------------------------------------------------------------------------------------
// Loop

void TrainConfig::validate() const {
  if (epochs == 0 || iters_per_epoch == 0) throw ConfigError("train: epochs and iters_per_epoch must be positive");
  if (batch_size == 0) throw ConfigError("train.batch_size: must be positive");
  if (!(lr0 >= 0) || !std::isfinite(lr0)) throw ConfigError("train.lr0: must be non-negative");
  if (!(power >= 0)) throw ConfigError("train.power: must be non-negative");
  if (!(momentum >= 0 && momentum < 1)) throw ConfigError("train.momentum: must lie in [0, 1)");
  if (!(fg_bias >= 0 && fg_bias <= 1)) throw ConfigError("train.fg_bias: must lie in [0, 1]");
  loss.validate();
}

namespace {

constexpr const char* kTraceHeader = "iter\tlr\ttotal\tdice\tce";

std::string trace_line(const TraceRecord& r) {
  char buf[160];
  std::snprintf(buf, sizeof buf, "%zu\t%.17g\t%.17g\t%.17g\t%.17g", r.iter, r.lr, r.total, r.dice, r.ce);
  return buf;
}

}  // namespace

TrainResult train_loop(Model& model, const std::vector<synth::LabeledVolume>& data, const TrainConfig& cfg, const StopFn& stop) {
  cfg.validate();
  if (data.empty()) throw ConfigError("train: dataset is empty");
  const auto& ps = model.config().patch_shape;
  const synth::Dims3 patch{ps[0], ps[1], ps[2]};
  const std::size_t voxels = ps[0] * ps[1] * ps[2];
  const auto params = model.parameters();

  OptimState state;
  state.lr0 = cfg.lr0;
  state.total_iters = cfg.total_iters();
  state.power = cfg.power;
  state.momentum = cfg.momentum;

  std::ofstream trace;
  if (!cfg.out_dir.empty()) {
    std::filesystem::create_directories(cfg.out_dir);
    trace.open(cfg.out_dir / "trace.tsv", std::ios::trunc);
    if (!trace) throw ParseError(ParseError::Kind::kIo, 0, "cannot write '" + (cfg.out_dir / "trace.tsv").string() + "'");
    trace << kTraceHeader << "\n";
  }

  std::mt19937_64 rng(cfg.seed);
  std::uniform_int_distribution<std::size_t> pick(0, data.size() - 1);
  TrainResult result;
  double epoch_sum = 0, best = std::numeric_limits<double>::infinity();
  const Shape5 batch_shape(cfg.batch_size, 1, ps[0], ps[1], ps[2]);

  for (std::size_t it = 0; it < state.total_iters; ++it) {
    Tensor5 image(batch_shape), target(batch_shape);
    for (std::size_t b = 0; b < cfg.batch_size; ++b) {
      const std::size_t vi = pick(rng);
      const std::uint64_t patch_seed = rng();
      const synth::Patch p = synth::sample_patch(data[vi], patch, patch_seed, cfg.fg_bias, cfg.flips);
      std::copy(p.image.data().begin(), p.image.data().end(), image.data().begin() + static_cast<std::ptrdiff_t>(b * voxels));
      std::copy(p.label.data().begin(), p.label.data().end(), target.data().begin() + static_cast<std::ptrdiff_t>(b * voxels));
    }

    Tape tape;
    const ForwardResult fr = model.forward(tape.constant(std::move(image)));
    const LossTerms loss = deep_supervision_loss(fr.heads, target, cfg.loss);
    const double total = loss.total.value()[0];
    if (!std::isfinite(total)) {
      throw NumericalError("non-finite training loss at iteration " + std::to_string(it), static_cast<std::int64_t>(it));
    }
    for (Parameter* p : params) p->zero_grad();
    tape.backward(loss.total);

    const TraceRecord rec{it, state.lr(), total, loss.dice, loss.ce};
    sgd_poly_step(params, state);
    result.trace.push_back(rec);
    result.iterations = it + 1;
    if (trace) trace << trace_line(rec) << "\n" << std::flush;

    epoch_sum += total;
    if (!cfg.out_dir.empty()) {
      if ((it + 1) % cfg.iters_per_epoch == 0) {
        const double mean = epoch_sum / static_cast<double>(cfg.iters_per_epoch);
        if (mean < best) {
          best = mean;
          save_checkpoint(cfg.out_dir / "best.ckpt", model);
        }
      }
      if (cfg.checkpoint_every && (it + 1) % cfg.checkpoint_every == 0) {
        save_checkpoint(cfg.out_dir / ("iter_" + std::to_string(it + 1) + ".ckpt"), model);
      }
    }
    if ((it + 1) % cfg.iters_per_epoch == 0) epoch_sum = 0;

    if (stop && cfg.eval_every && (it + 1) % cfg.eval_every == 0 && stop(it + 1, model)) {
      result.stopped_early = true;
      break;
    }
  }

  if (!cfg.out_dir.empty()) {
    save_checkpoint(cfg.out_dir / "final.ckpt", model);
    if (!std::filesystem::exists(cfg.out_dir / "best.ckpt")) save_checkpoint(cfg.out_dir / "best.ckpt", model);
  }
  return result;
}

void write_trace(const std::filesystem::path& path, const std::vector<TraceRecord>& trace) {
  std::ofstream o(path, std::ios::trunc);
  if (!o) throw ParseError(ParseError::Kind::kIo, 0, "cannot write '" + path.string() + "'");
  o << kTraceHeader << "\n";
  for (const auto& r : trace) o << trace_line(r) << "\n";
}

std::vector<TraceRecord> read_trace(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ParseError(ParseError::Kind::kIo, 0, "cannot open trace '" + path.string() + "'");
  std::string line;
  std::uint64_t offset = 0;
  if (!std::getline(in, line) || line != kTraceHeader) throw ParseError(ParseError::Kind::kBadField, 0, "trace header missing");
  offset += line.size() + 1;
  std::vector<TraceRecord> out;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream ss(line);
    TraceRecord r;
    if (!(ss >> r.iter >> r.lr >> r.total >> r.dice >> r.ce)) throw ParseError(ParseError::Kind::kBadField, offset, "malformed trace record");
    out.push_back(r);
    offset += line.size() + 1;
  }
  return out;
}

}  // namespace vig3d::train
