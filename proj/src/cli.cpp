#include "vig3d/cli.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <charconv>
#include <cstdio>
#include <fstream>
#include <iomanip>
#include <map>
#include <optional>
#include <ostream>
#include <sstream>

#include "vig3d/error.hpp"
#include "vig3d/gradcheck_suite.hpp"
#include "vig3d/metrics.hpp"
#include "vig3d/tape.hpp"

namespace vig3d::cli {
namespace fs = std::filesystem;

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
}

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::uint64_t parse_u64(const std::string& name, const std::string& v) {
  std::uint64_t out = 0;
  const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size() || v.empty())
    throw ConfigError(name + ": expected a non-negative integer, got '" + v + "'");
  return out;
}

double parse_real(const std::string& name, const std::string& v) {
  char* end = nullptr;
  const double d = std::strtod(v.c_str(), &end);
  if (v.empty() || end != v.c_str() + v.size() || !std::isfinite(d))
    throw ConfigError(name + ": expected a finite number, got '" + v + "'");
  return d;
}

bool parse_flag(const std::string& name, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  throw ConfigError(name + ": expected true or false, got '" + v + "'");
}

template <class T, class F>
std::vector<T> parse_csv(const std::string& name, const std::string& v, F parse) {
  std::vector<T> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(static_cast<T>(parse(name, trim(item))));
  if (out.empty()) throw ConfigError(name + ": expected a comma-separated list");
  return out;
}

std::string join_reals(const std::vector<double>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + fmt(v[i]);
  return s;
}

}  // namespace

void RunConfig::set(const std::string& section, const std::string& key, const std::string& raw) {
  const std::string value = trim(raw);
  const std::string name = section + "." + key;
  auto unknown = [&] { throw ConfigError(section + ": unknown key '" + key + "'"); };
  if (section == "run") {
    if (key == "seed") seed = parse_u64(name, value);
    else unknown();
  } else if (section == "data") {
    data.set(key, value);
  } else if (section == "dataset") {
    if (key == "n_train") n_train = parse_u64(name, value);
    else if (key == "n_test") n_test = parse_u64(name, value);
    else if (key == "manifest") manifest = value;
    else unknown();
  } else if (section == "model") {
    model.set(key, value);
  } else if (section == "train") {
    if (key == "epochs") train.epochs = parse_u64(name, value);
    else if (key == "iters_per_epoch") train.iters_per_epoch = parse_u64(name, value);
    else if (key == "batch_size") train.batch_size = parse_u64(name, value);
    else if (key == "lr0") train.lr0 = parse_real(name, value);
    else if (key == "power") train.power = parse_real(name, value);
    else if (key == "momentum") train.momentum = parse_real(name, value);
    else if (key == "fg_bias") train.fg_bias = parse_real(name, value);
    else if (key == "flips") train.flips = parse_flag(name, value);
    else if (key == "checkpoint_every") train.checkpoint_every = parse_u64(name, value);
    else if (key == "eval_every") train.eval_every = parse_u64(name, value);
    else if (key == "target_dsc") target_dsc = parse_real(name, value);
    else if (key == "eval_overlap") eval_overlap = parse_real(name, value);
    else unknown();
  } else if (section == "loss") {
    if (key == "lambda_dice") train.loss.lambda_dice = parse_real(name, value);
    else if (key == "lambda_ce") train.loss.lambda_ce = parse_real(name, value);
    else if (key == "dice_smooth") train.loss.dice_smooth = parse_real(name, value);
    else if (key == "ds_weights") train.loss.ds_weights = value.empty() ? std::vector<double>{} : parse_csv<double>(name, value, parse_real);
    else unknown();
  } else if (section == "predict") {
    if (key == "checkpoint") checkpoint = value;
    else if (key == "volume") volume = value;
    else if (key == "split") predict_split = value;
    else if (key == "overlap") overlap = parse_real(name, value);
    else unknown();
  } else if (section == "eval") {
    if (key == "pred_dir") pred_dir = value;
    else if (key == "split") eval_split = value;
    else if (key == "connectivity") connectivity = static_cast<int>(parse_u64(name, value));
    else unknown();
  } else if (section == "gradcheck") {
    if (key == "seeds") gradcheck_seeds = parse_csv<std::uint64_t>(name, value, parse_u64);
    else unknown();
  } else {
    throw ConfigError("unknown section [" + section + "]");
  }
}

std::string RunConfig::to_text() const {
  std::ostringstream o;
  o << "[run]\nseed = " << seed << "\n\n[data]\n" << data.to_text();
  o << "\n[dataset]\nn_train = " << n_train << "\nn_test = " << n_test << "\nmanifest = " << manifest.string() << "\n";
  o << "\n[model]\n" << model.to_text();
  o << "\n[train]\nepochs = " << train.epochs << "\niters_per_epoch = " << train.iters_per_epoch
    << "\nbatch_size = " << train.batch_size << "\nlr0 = " << fmt(train.lr0) << "\npower = " << fmt(train.power)
    << "\nmomentum = " << fmt(train.momentum) << "\nfg_bias = " << fmt(train.fg_bias)
    << "\nflips = " << (train.flips ? "true" : "false") << "\ncheckpoint_every = " << train.checkpoint_every
    << "\neval_every = " << train.eval_every << "\ntarget_dsc = " << fmt(target_dsc)
    << "\neval_overlap = " << fmt(eval_overlap) << "\n";
  o << "\n[loss]\nlambda_dice = " << fmt(train.loss.lambda_dice) << "\nlambda_ce = " << fmt(train.loss.lambda_ce)
    << "\ndice_smooth = " << fmt(train.loss.dice_smooth) << "\nds_weights = " << join_reals(train.loss.ds_weights) << "\n";
  o << "\n[predict]\ncheckpoint = " << checkpoint.string() << "\nvolume = " << volume << "\nsplit = " << predict_split
    << "\noverlap = " << fmt(overlap) << "\n";
  o << "\n[eval]\npred_dir = " << pred_dir.string() << "\nsplit = " << eval_split << "\nconnectivity = " << connectivity << "\n";
  o << "\n[gradcheck]\nseeds = ";
  for (std::size_t i = 0; i < gradcheck_seeds.size(); ++i) o << (i ? "," : "") << gradcheck_seeds[i];
  o << "\n";
  return o.str();
}

RunConfig parse_run_config(const std::string& text) {
  RunConfig cfg;
  std::istringstream in(text);
  std::string line, section;
  for (std::size_t no = 1; std::getline(in, line); ++no) {
    const std::string t = trim(line);
    if (t.empty() || t[0] == '#' || t[0] == ';') continue;
    const std::string where = "config line " + std::to_string(no) + ": ";
    if (t.front() == '[') {
      if (t.back() != ']') throw ConfigError(where + "malformed section header '" + t + "'");
      section = trim(t.substr(1, t.size() - 2));
      static const char* known[] = {"run", "data", "dataset", "model", "train", "loss", "predict", "eval", "gradcheck"};
      if (std::find(std::begin(known), std::end(known), section) == std::end(known))
        throw ConfigError(where + "unknown section [" + section + "]");
      continue;
    }
    const auto eq = t.find('=');
    if (eq == std::string::npos) throw ConfigError(where + "expected 'key = value', got '" + t + "'");
    const std::string key = trim(t.substr(0, eq));
    if (section.empty()) throw ConfigError(where + "key '" + key + "' appears before any [section]");
    try {
      cfg.set(section, key, t.substr(eq + 1));
    } catch (const ConfigError& e) {
      throw ConfigError(where + e.what());
    }
  }
  return cfg;
}

namespace {

std::string read_text(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw ConfigError("cannot read '" + p.string() + "'");
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

void write_text(const fs::path& p, const std::string& text) {
  std::ofstream o(p, std::ios::binary);
  o << text;
  if (!o) throw Error("cannot write '" + p.string() + "'");
}

// Claims an output directory for one run: refuses a non-empty directory unless forced and
// holds a lock file until destruction.
class OutputDir {
 public:
  OutputDir(const fs::path& dir, bool force) : lock_(dir / ".vig3d.lock") {
    if (dir.empty()) throw ConfigError("--out is required for this command");
    if (fs::exists(lock_)) throw ConfigError("output directory '" + dir.string() + "' is locked by another run");
    if (fs::exists(dir) && !fs::is_directory(dir)) throw ConfigError("--out '" + dir.string() + "' is not a directory");
    if (fs::exists(dir) && !fs::is_empty(dir) && !force)
      throw ConfigError("output directory '" + dir.string() + "' is not empty (use --force to overwrite)");
    fs::create_directories(dir);
    std::FILE* f = std::fopen(lock_.c_str(), "wx");
    if (!f) throw ConfigError("output directory '" + dir.string() + "' is locked by another run");
    std::fclose(f);
  }
  ~OutputDir() {
    std::error_code ec;
    fs::remove(lock_, ec);
  }
  OutputDir(const OutputDir&) = delete;
  OutputDir& operator=(const OutputDir&) = delete;

 private:
  fs::path lock_;
};

struct Case {
  std::string id;
  fs::path stem;
};

std::vector<Case> manifest_cases(const RunConfig& cfg, const std::string& split) {
  if (cfg.manifest.empty()) throw ConfigError("dataset.manifest is not set");
  if (!fs::exists(cfg.manifest)) throw ConfigError("dataset manifest '" + cfg.manifest.string() + "' not found");
  const synth::Manifest m = synth::read_manifest(cfg.manifest);
  const std::vector<std::string>* stems = nullptr;
  if (split == "train") stems = &m.train;
  else if (split == "test") stems = &m.test;
  else throw ConfigError("split must be train or test, got '" + split + "'");
  std::vector<Case> out;
  for (const std::string& s : *stems) out.push_back({fs::path(s).filename().string(), cfg.manifest.parent_path() / s});
  return out;
}

Tensor5 image_of(const synth::VvolFile& f) {
  return Tensor5(Shape5(1, 1, f.dims[0], f.dims[1], f.dims[2]), f.image);
}

double mean_train_dsc(const Model& model, const std::vector<synth::LabeledVolume>& data, double overlap) {
  double s = 0;
  for (const auto& vol : data) {
    const auto pred = sliding_window_predict(model, vol.image_tensor(), overlap);
    s += metrics::overlap_metrics(metrics::confusion_counts(pred, vol.label)).dsc;
  }
  return s / double(data.size());
}

struct Globals {
  RunConfig cfg;
  fs::path out;
  bool force = false;
  std::string fault;
};

int cmd_gen_data(const Globals& g, std::ostream& out) {
  const RunConfig& cfg = g.cfg;
  cfg.data.validate();
  if (cfg.n_train + cfg.n_test == 0) throw ConfigError("dataset: n_train + n_test must be positive");
  OutputDir dir(g.out, g.force);
  write_text(g.out / "config.ini", cfg.to_text());
  synth::Manifest m;
  char name[32];
  for (std::size_t i = 0; i < cfg.n_train + cfg.n_test; ++i) {
    const bool train = i < cfg.n_train;
    std::snprintf(name, sizeof name, "%s_%03zu", train ? "train" : "test", train ? i : i - cfg.n_train);
    synth::write_volume(g.out / name, synth::generate_volume(synth::sample_seed(cfg.seed, i), cfg.data));
    (train ? m.train : m.test).push_back(name);
  }
  synth::write_manifest(g.out / "manifest.txt", m);
  out << "wrote " << cfg.n_train << " train and " << cfg.n_test << " test volumes to " << g.out.string() << "\n";
  return kExitOk;
}

int cmd_train(const Globals& g, std::ostream& out) {
  RunConfig cfg = g.cfg;
  cfg.model.validate();
  train::TrainConfig tc = cfg.train;
  tc.seed = synth::sample_seed(cfg.seed, 1);
  tc.out_dir = g.out;
  tc.validate();
  const auto cases = manifest_cases(cfg, "train");
  if (cases.empty()) throw ConfigError("dataset manifest has no train cases");
  std::vector<synth::LabeledVolume> data;
  for (const Case& c : cases) data.push_back(synth::read_volume(c.stem));

  OutputDir dir(g.out, g.force);
  write_text(g.out / "config.ini", cfg.to_text());
  Model model(cfg.model, synth::sample_seed(cfg.seed, 0));
  out << "parameters " << model.parameter_count() << "\n";

  train::StopFn stop;
  if (cfg.target_dsc > 0 && tc.eval_every > 0) {
    stop = [&](std::size_t done, const Model& m) {
      const double dsc = mean_train_dsc(m, data, cfg.eval_overlap);
      out << "iter " << done << " train_dsc " << std::setprecision(6) << dsc << "\n" << std::flush;
      return dsc >= cfg.target_dsc;
    };
  }
  const auto r = train::train_loop(model, data, tc, stop);
  out << "iterations " << r.iterations << (r.stopped_early ? " (target reached)" : "") << "\n";
  if (!r.trace.empty()) out << "final_loss " << fmt(r.trace.back().total) << "\n";
  return kExitOk;
}

int cmd_predict(const Globals& g, std::ostream& out) {
  const RunConfig& cfg = g.cfg;
  if (cfg.checkpoint.empty()) throw ConfigError("predict.checkpoint is not set");
  if (!fs::exists(cfg.checkpoint)) throw ConfigError("checkpoint '" + cfg.checkpoint.string() + "' not found");
  if (cfg.overlap < 0 || cfg.overlap >= 1) throw ConfigError("predict.overlap must lie in [0, 1)");
  std::vector<Case> cases;
  if (!cfg.volume.empty()) {
    std::string stem = cfg.volume;
    const std::string suffix = ".img.vvol";
    if (stem.size() > suffix.size() && stem.compare(stem.size() - suffix.size(), suffix.size(), suffix) == 0)
      stem.resize(stem.size() - suffix.size());
    cases.push_back({fs::path(stem).filename().string(), stem});
  } else {
    cases = manifest_cases(cfg, cfg.predict_split);
  }
  const Model model = load_checkpoint(cfg.checkpoint);
  if (model.config().in_channels != 1)
    throw ConfigError("checkpoint/volume mismatch: model expects " + std::to_string(model.config().in_channels) +
                      " input channels, volumes have 1");
  std::vector<synth::VvolFile> images;
  for (const Case& c : cases) {
    images.push_back(synth::read_vvol(synth::image_path(c.stem)));
    if (images.back().dtype != synth::kDtypeImage)
      throw ConfigError("checkpoint/volume mismatch: '" + synth::image_path(c.stem).string() + "' is not an image volume");
  }

  OutputDir dir(g.out, g.force);
  write_text(g.out / "config.ini", cfg.to_text());
  for (std::size_t i = 0; i < cases.size(); ++i) {
    const auto pred = sliding_window_predict(model, image_of(images[i]), cfg.overlap);
    synth::write_vvol_label(synth::label_path(g.out / cases[i].id), images[i].dims, images[i].spacing, pred);
    out << "predicted " << cases[i].id << "\n";
  }
  return kExitOk;
}

int cmd_eval(const Globals& g, std::ostream& out, std::ostream& err) {
  const RunConfig& cfg = g.cfg;
  if (cfg.pred_dir.empty()) throw ConfigError("eval.pred_dir is not set");
  if (!fs::is_directory(cfg.pred_dir)) throw ConfigError("prediction directory '" + cfg.pred_dir.string() + "' not found");
  if (cfg.connectivity != 6 && cfg.connectivity != 26) throw ConfigError("eval.connectivity must be 6 or 26");
  const auto cases = manifest_cases(cfg, cfg.eval_split);
  if (cases.empty()) throw ConfigError("dataset manifest has no " + cfg.eval_split + " cases");

  std::vector<metrics::MetricsReport> reports;
  std::vector<std::string> missing;
  for (const Case& c : cases) {
    const fs::path pred_file = synth::label_path(cfg.pred_dir / c.id);
    if (!fs::exists(pred_file)) {
      missing.push_back(c.id);
      continue;
    }
    const synth::VvolFile pred = synth::read_vvol(pred_file);
    const synth::VvolFile gt = synth::read_vvol(synth::label_path(c.stem));
    if (pred.dtype != synth::kDtypeLabel) throw ConfigError("'" + pred_file.string() + "' is not a label volume");
    if (pred.dims != gt.dims) throw ConfigError("case '" + c.id + "': prediction and ground truth dims differ");
    const metrics::Spacing sp{gt.spacing[0], gt.spacing[1], gt.spacing[2]};
    reports.push_back(metrics::evaluate_case(pred.label, gt.label, gt.dims, sp, c.id, cfg.connectivity));
  }
  if (reports.empty()) {
    err << "error: every case is missing from '" << cfg.pred_dir.string() << "'\n";
    return kExitUsage;
  }
  OutputDir dir(g.out, g.force);
  write_text(g.out / "config.ini", cfg.to_text());
  metrics::write_report(g.out / "report.tsv", reports, missing);
  out << metrics::format_report(reports, missing);
  return kExitOk;
}

int cmd_gradcheck(const Globals& g, std::ostream& out, std::ostream& err) {
  std::optional<OutputDir> dir;
  if (!g.out.empty()) dir.emplace(g.out, g.force);
  set_backward_fault(g.fault);
  std::vector<SuiteEntry> entries;
  try {
    entries = run_gradient_suite(g.cfg.gradcheck_seeds, true);
  } catch (...) {
    set_backward_fault("");
    throw;
  }
  set_backward_fault("");

  std::ostringstream table;
  table << "op\tmax_rel_error\ttolerance\tprobes\tresult\n";
  bool ok = true;
  for (const auto& e : entries) {
    char line[256];
    std::snprintf(line, sizeof line, "%s\t%.3e\t%.0e\t%zu\t%s\n", e.name.c_str(), e.max_rel_error, e.tolerance, e.probes,
                  e.passed() ? "pass" : "FAIL");
    table << line;
    if (!e.passed()) {
      ok = false;
      err << "gradient check failed: " << e.name << " max relative error " << e.max_rel_error << " at " << e.worst << "\n";
    }
  }
  out << table.str();
  if (dir) {
    write_text(g.out / "config.ini", g.cfg.to_text());
    write_text(g.out / "gradcheck.tsv", table.str());
  }
  return ok ? kExitOk : kExitFailure;
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Vessel segmentation with a dual-branch CNN / vision-graph U-Net", "vig3d"};
  std::string config_path, out_dir, fault;
  std::optional<std::uint64_t> seed;
  std::vector<std::string> overrides;
  bool force = false;
  app.add_option("--config", config_path, "Run file (INI sections, key = value)");
  app.add_option("--seed", seed, "Master seed; overrides [run] seed");
  app.add_option("--out", out_dir, "Output directory");
  app.add_flag("--force", force, "Write into a non-empty output directory");
  app.add_option("--set", overrides, "Override a run-file entry, section.key=value (repeatable)")->allow_extra_args(false);
  app.add_option("--fault", fault, "Perturb the backward pass of one op (test fixture)")->group("");
  app.require_subcommand(1, 1);
  const std::vector<std::pair<std::string, std::string>> verbs = {
      {"gen-data", "Generate synthetic vessel volumes and a manifest"},
      {"train", "Train on the manifest's train split"},
      {"predict", "Sliding-window inference with a checkpoint"},
      {"eval", "Score predictions against ground truth labels"},
      {"gradcheck", "Finite-difference check of every differentiable op"}};
  for (const auto& [name, help] : verbs) app.add_subcommand(name, help)->fallthrough();

  try {
    std::vector<std::string> rev(args.rbegin(), args.rend());
    app.parse(rev);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitUsage;
  }
  const std::string verb = app.get_subcommands().front()->get_name();

  try {
    Globals g;
    if (!config_path.empty()) g.cfg = parse_run_config(read_text(config_path));
    for (const std::string& o : overrides) {
      const auto eq = o.find('='), dot = o.find('.');
      if (eq == std::string::npos || dot == std::string::npos || dot > eq)
        throw ConfigError("--set expects section.key=value, got '" + o + "'");
      try {
        g.cfg.set(o.substr(0, dot), trim(o.substr(dot + 1, eq - dot - 1)), o.substr(eq + 1));
      } catch (const ConfigError& e) {
        throw ConfigError(std::string("--set: ") + e.what());
      }
    }
    if (seed) g.cfg.seed = *seed;
    g.out = out_dir;
    g.force = force;
    g.fault = fault;
    if (verb == "gen-data") return cmd_gen_data(g, out);
    if (verb == "train") return cmd_train(g, out);
    if (verb == "predict") return cmd_predict(g, out);
    if (verb == "eval") return cmd_eval(g, out, err);
    return cmd_gradcheck(g, out, err);
  } catch (const NumericalError& e) {
    err << "numerical abort: " << e.what() << "\n";
    return kExitNumerical;
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const ParseError& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const DimensionMismatch& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const fs::filesystem_error& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitFailure;
  }
}

}  // namespace vig3d::cli
