#include "vig3d/network.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <random>
#include <sstream>

#include "vig3d/error.hpp"
#include "vig3d/ops.hpp"

namespace vig3d {

namespace {

std::string join(const std::vector<std::size_t>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
  return s;
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
}

std::size_t parse_count(const std::string& key, const std::string& text) {
  const std::string t = trim(text);
  std::size_t pos = 0;
  unsigned long long v = 0;
  try {
    if (t.empty() || t[0] == '-') throw std::invalid_argument(t);
    v = std::stoull(t, &pos);
  } catch (const std::exception&) {
    throw ConfigError("model." + key + ": expected a non-negative integer, got '" + text + "'");
  }
  if (pos != t.size()) throw ConfigError("model." + key + ": expected a non-negative integer, got '" + text + "'");
  return static_cast<std::size_t>(v);
}

std::vector<std::size_t> parse_list(const std::string& key, const std::string& text) {
  std::vector<std::size_t> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(parse_count(key, item));
  if (out.empty()) throw ConfigError("model." + key + ": empty list");
  return out;
}

bool parse_bool(const std::string& key, const std::string& text) {
  const std::string t = trim(text);
  if (t == "true" || t == "1") return true;
  if (t == "false" || t == "0") return false;
  throw ConfigError("model." + key + ": expected true/false, got '" + text + "'");
}

}  // namespace

// ---------------------------------------------------------------------------------------
// ModelConfig

ModelConfig ModelConfig::tiny() { return ModelConfig{}; }

ModelConfig ModelConfig::micro() {
  ModelConfig c;
  c.profile = "micro";
  c.stages = 3;
  c.cnn_channels = {2, 3, 4};
  c.vig_channels = {4};
  c.vig_units_per_stage = {1};
  c.ffn_expansion = 1;
  c.knn_k = 2;
  c.patch_shape = {8, 8, 8};
  return c;
}

ModelConfig ModelConfig::large() {
  ModelConfig c;
  c.profile = "large";
  c.stages = 6;
  c.cnn_channels = {32, 64, 128, 256, 320, 320};
  c.vig_channels = {64, 128, 256, 320};
  c.vig_units_per_stage = {2, 4, 16, 2};
  c.knn_k = 7;
  c.patch_shape = {128, 192, 192};
  return c;
}

ModelConfig ModelConfig::profile_named(const std::string& name) {
  if (name == "tiny") return tiny();
  if (name == "micro") return micro();
  if (name == "large") return large();
  throw ConfigError("model.profile: unknown profile '" + name + "' (tiny, micro, large)");
}

std::size_t ModelConfig::vig_block_count() const {
  std::size_t n = 0;
  for (std::size_t u : vig_units_per_stage) n += u;
  return use_vig3d ? n : 0;
}

void ModelConfig::validate() const {
  auto fail = [](const std::string& m) { throw ConfigError("model: " + m); };
  if (stages < 3) fail("stages must be >= 3 (two texture levels and at least one fused level)");
  if (in_channels < 1) fail("in_channels must be >= 1");
  if (cnn_channels.size() != stages) fail("cnn_channels must have `stages` entries");
  for (std::size_t c : cnn_channels)
    if (c < 1) fail("cnn_channels entries must be >= 1");
  if (num_classes < 2) fail("num_classes must be >= 2");
  if (ffn_layers_per_block < 1) fail("ffn_layers_per_block must be >= 1");
  if (ffn_expansion < 1) fail("ffn_expansion must be >= 1");
  if (attention_reduction < 1) fail("attention_reduction must be >= 1");
  if (knn_k < 1) fail("knn_k must be >= 1");
  const std::size_t div = std::size_t{1} << stages;
  for (std::size_t a = 0; a < 3; ++a) {
    if (patch_shape[a] == 0 || patch_shape[a] % div != 0) {
      fail("patch_shape axis " + std::to_string(a) + " (" + std::to_string(patch_shape[a]) +
           ") is not divisible by 2^stages = " + std::to_string(div));
    }
  }
  if (!use_vig3d) return;
  if (vig_channels.size() != fused_levels()) fail("vig_channels must have stages-2 entries (one per fused level)");
  if (vig_units_per_stage.size() != fused_levels()) fail("vig_units_per_stage must have stages-2 entries");
  for (std::size_t c : vig_channels)
    if (c < 1) fail("vig_channels entries must be >= 1");
  for (std::size_t u : vig_units_per_stage)
    if (u < 1) fail("vig_units_per_stage entries must be >= 1");
  for (std::size_t j = 0; j < fused_levels(); ++j) {
    const std::size_t f = std::size_t{1} << (j + 2);
    const std::size_t nodes = (patch_shape[0] / f) * (patch_shape[1] / f) * (patch_shape[2] / f);
    if (knn_k + 1 > nodes) {
      fail("knn_k = " + std::to_string(knn_k) + " needs more than " + std::to_string(nodes) +
           " nodes at ViG stage " + std::to_string(j));
    }
  }
}

void ModelConfig::set(const std::string& key, const std::string& value) {
  const std::string v = trim(value);
  if (key == "profile") {
    *this = profile_named(v);
  } else if (key == "stages") {
    stages = parse_count(key, v);
  } else if (key == "in_channels") {
    in_channels = parse_count(key, v);
  } else if (key == "cnn_channels") {
    cnn_channels = parse_list(key, v);
  } else if (key == "vig_channels") {
    vig_channels = parse_list(key, v);
  } else if (key == "vig_units_per_stage") {
    vig_units_per_stage = parse_list(key, v);
  } else if (key == "ffn_layers_per_block") {
    ffn_layers_per_block = parse_count(key, v);
  } else if (key == "ffn_expansion") {
    ffn_expansion = parse_count(key, v);
  } else if (key == "knn_k") {
    knn_k = parse_count(key, v);
  } else if (key == "knn_space") {
    if (v == "feature") knn_space = graph::KnnSpace::kFeature;
    else if (v == "spatial") knn_space = graph::KnnSpace::kSpatial;
    else throw ConfigError("model.knn_space: expected feature or spatial, got '" + v + "'");
  } else if (key == "num_classes") {
    num_classes = parse_count(key, v);
  } else if (key == "attention_reduction") {
    attention_reduction = parse_count(key, v);
  } else if (key == "patch_shape") {
    auto l = parse_list(key, v);
    if (l.size() != 3) throw ConfigError("model.patch_shape: expected three extents");
    patch_shape = {l[0], l[1], l[2]};
  } else if (key == "use_vig3d") {
    use_vig3d = parse_bool(key, v);
  } else if (key == "use_channel_attention") {
    use_channel_attention = parse_bool(key, v);
  } else if (key == "use_offset_decoder") {
    use_offset_decoder = parse_bool(key, v);
  } else {
    throw ConfigError("model: unknown key '" + key + "'");
  }
}

std::string ModelConfig::to_text() const {
  std::ostringstream o;
  o << "profile = " << profile << "\n"
    << "stages = " << stages << "\n"
    << "in_channels = " << in_channels << "\n"
    << "cnn_channels = " << join(cnn_channels) << "\n"
    << "vig_channels = " << join(vig_channels) << "\n"
    << "vig_units_per_stage = " << join(vig_units_per_stage) << "\n"
    << "ffn_layers_per_block = " << ffn_layers_per_block << "\n"
    << "ffn_expansion = " << ffn_expansion << "\n"
    << "knn_k = " << knn_k << "\n"
    << "knn_space = " << (knn_space == graph::KnnSpace::kFeature ? "feature" : "spatial") << "\n"
    << "num_classes = " << num_classes << "\n"
    << "attention_reduction = " << attention_reduction << "\n"
    << "patch_shape = " << patch_shape[0] << "," << patch_shape[1] << "," << patch_shape[2] << "\n"
    << "use_vig3d = " << (use_vig3d ? "true" : "false") << "\n"
    << "use_channel_attention = " << (use_channel_attention ? "true" : "false") << "\n"
    << "use_offset_decoder = " << (use_offset_decoder ? "true" : "false") << "\n";
  return o.str();
}

ModelConfig ModelConfig::parse(const std::string& text) {
  ModelConfig c;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    line = trim(line);
    if (line.empty() || line[0] == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("model: expected 'key = value', got '" + line + "'");
    c.set(trim(line.substr(0, eq)), line.substr(eq + 1));
  }
  return c;
}

// ---------------------------------------------------------------------------------------
// Model construction

Model::Model(ModelConfig config, std::uint64_t seed) : config_(std::move(config)), seed_(seed) {
  config_.validate();
  build();
}

Parameter& Model::add(const std::string& name, Shape5 shape, double bound) {
  Tensor5 t(shape);
  if (bound > 0.0) {
    std::mt19937_64 rng(seed_ + 0x9E3779B97F4A7C15ull * (params_.size() + 1));
    std::uniform_real_distribution<double> u(-bound, bound);
    for (double& v : t.data()) v = u(rng);
  }
  Parameter& p = params_.emplace_back(name, std::move(t));
  by_name_[name] = &p;
  return p;
}

Parameter& Model::add_conv(const std::string& name, std::size_t cin, std::size_t cout, std::size_t k, bool bias) {
  Parameter& w = add(name + ".w", Shape5(cout, cin, k, k, k), 1.0 / std::sqrt(static_cast<double>(cin * k * k * k)));
  if (bias) add(name + ".b", Shape5::vector(cout), 0.0);
  return w;
}

void Model::add_linear(const std::string& name, std::size_t in, std::size_t out) {
  add(name + ".w", Shape5::matrix(out, in), 1.0 / std::sqrt(static_cast<double>(in)));
  add(name + ".b", Shape5::vector(out), 0.0);
}

void Model::add_norm(const std::string& name, std::size_t c) {
  add(name + ".g", Shape5::vector(c), 0.0).value.fill(1.0);
  add(name + ".b", Shape5::vector(c), 0.0);
}

std::size_t Model::vig_stage_out(std::size_t j) const {
  const auto& v = config_.vig_channels;
  return j + 1 < v.size() ? v[j + 1] : v.back();
}

std::vector<std::size_t> Model::skip_widths() const {
  const ModelConfig& c = config_;
  std::vector<std::size_t> w(c.stages);
  const bool fused_differs = c.use_vig3d || c.use_channel_attention;
  for (std::size_t l = 0; l < c.stages; ++l) {
    w[l] = c.cnn_channels[l];
    if (l < 2) continue;
    if (c.use_vig3d) w[l] += c.cnn_channels[l];
    if (!c.use_offset_decoder && fused_differs) w[l] += c.cnn_channels[l];
  }
  return w;
}

void Model::build() {
  const ModelConfig& c = config_;
  for (std::size_t i = 0; i < c.stages; ++i) {
    const std::string p = "cnn." + std::to_string(i);
    const std::size_t cin = i == 0 ? c.in_channels : c.cnn_channels[i - 1];
    add_conv(p + ".conv", cin, c.cnn_channels[i], 3, false);
    add_norm(p + ".norm", c.cnn_channels[i]);
    add_conv(p + ".down", c.cnn_channels[i], c.cnn_channels[i], 3, true);
  }

  if (c.use_vig3d) {
    const std::size_t v0 = c.vig_channels[0];
    add_conv("stem.0", c.in_channels, v0, 3, false);
    add_norm("stem.0.norm", v0);
    add_conv("stem.1", v0, v0, 3, false);
    add_norm("stem.1.norm", v0);
    add_conv("stem.2", v0, v0, 3, true);
    const auto& ps = c.patch_shape;
    add("vig.pos", Shape5(1, v0, ps[0] / 4, ps[1] / 4, ps[2] / 4), 0.02);
    for (std::size_t j = 0; j < c.fused_levels(); ++j) {
      const std::size_t ch = c.vig_channels[j];
      const std::size_t hidden = ch * c.ffn_expansion;
      for (std::size_t u = 0; u < c.vig_units_per_stage[j]; ++u) {
        const std::string p = "vig." + std::to_string(j) + "." + std::to_string(u);
        add_linear(p + ".in", ch, ch);
        add_linear(p + ".update", 2 * ch, ch);
        add_linear(p + ".out", ch, ch);
        for (std::size_t e = 0; e < c.ffn_layers_per_block; ++e) {
          const std::size_t in = e == 0 ? ch : hidden;
          const std::size_t out = e + 1 == c.ffn_layers_per_block ? ch : hidden;
          add_linear(p + ".ffn." + std::to_string(e), in, out);
        }
      }
      const std::string p = "vig." + std::to_string(j);
      add_conv(p + ".down", ch, vig_stage_out(j), 3, true);
      if (vig_stage_out(j) != c.cnn_channels[j + 2]) add_conv(p + ".proj", vig_stage_out(j), c.cnn_channels[j + 2], 1, true);
    }
  }

  if (c.use_channel_attention) {
    for (std::size_t j = 0; j < c.fused_levels(); ++j) {
      const std::size_t l = j + 2;
      const std::size_t w = c.cnn_channels[l] * (c.use_vig3d ? 2 : 1);
      const std::size_t hidden = std::max<std::size_t>(1, w / c.attention_reduction);
      add_linear("fuse." + std::to_string(j) + ".fc1", w, hidden);
      add_linear("fuse." + std::to_string(j) + ".fc2", hidden, w);
    }
  }

  const auto sw = skip_widths();
  const auto& dw = c.cnn_channels;
  for (std::size_t l = c.stages; l-- > 0;) {
    const std::string p = "dec." + std::to_string(l);
    const std::size_t in = l + 1 == c.stages ? sw[l] : sw[l] + dw[l];
    const std::size_t up_out = l > 0 ? dw[l - 1] : dw[0];
    add_conv(p + ".conv1", in, dw[l], 3, false);
    add_norm(p + ".norm1", dw[l]);
    add_conv(p + ".conv2", dw[l], dw[l], 3, false);
    add_norm(p + ".norm2", dw[l]);
    // Transposed-conv kernel in (in, out, k, k, k) layout; each output voxel sees one tap.
    add(p + ".up.w", Shape5(dw[l], up_out, 2, 2, 2), 1.0 / std::sqrt(static_cast<double>(dw[l])));
    add(p + ".up.b", Shape5::vector(up_out), 0.0);
    if (l + 1 < c.stages) add_conv("head." + std::to_string(l), up_out, c.num_classes, 1, true);
  }
}

std::vector<Parameter*> Model::parameters() {
  std::vector<Parameter*> out;
  for (Parameter& p : params_) out.push_back(&p);
  return out;
}

std::vector<const Parameter*> Model::parameters() const {
  std::vector<const Parameter*> out;
  for (const Parameter& p : params_) out.push_back(&p);
  return out;
}

std::size_t Model::parameter_count() const {
  std::size_t n = 0;
  for (const Parameter& p : params_) n += p.value.numel();
  return n;
}

Parameter& Model::parameter(const std::string& name) {
  auto it = by_name_.find(name);
  if (it == by_name_.end()) throw ConfigError("model has no parameter '" + name + "'");
  return *it->second;
}

const Parameter* Model::find(const std::string& name) const {
  auto it = by_name_.find(name);
  return it == by_name_.end() ? nullptr : it->second;
}

// ---------------------------------------------------------------------------------------
// Forward

Var Model::bind(Tape& tape, const std::string& name) const {
  auto it = by_name_.find(name);
  if (it == by_name_.end()) throw ConfigError("model has no parameter '" + name + "'");
  // Binding only reads the value; the tape writes back into `grad`, which is scratch.
  return tape.param(*it->second);
}

Var Model::conv(Var x, const std::string& name, std::size_t stride, std::size_t pad, bool bias) const {
  Tape& t = *x.tape;
  std::optional<Var> b;
  if (bias) b = bind(t, name + ".b");
  return ops::conv3d(x, bind(t, name + ".w"), b, {{stride, stride, stride}, {pad, pad, pad}});
}

Var Model::norm_relu(Var x, const std::string& name) const {
  Tape& t = *x.tape;
  return ops::relu(ops::instance_norm3d(x, bind(t, name + ".g"), bind(t, name + ".b")));
}

graph::LinearVars Model::linear_vars(Tape& tape, const std::string& name) const {
  return {bind(tape, name + ".w"), bind(tape, name + ".b")};
}

Var Model::stem_forward(Var image) const {
  if (!config_.use_vig3d) throw ConfigError("stem_forward: model built without the ViG branch");
  const Shape5 s = image.shape();
  for (std::size_t a = 0; a < 3; ++a) {
    if (s.dims[2 + a] % 4 != 0) throw ConfigError("stem_forward: spatial extent " + std::to_string(s.dims[2 + a]) + " is not divisible by 4");
  }
  Var x = norm_relu(conv(image, "stem.0", 2, 1, false), "stem.0.norm");
  x = norm_relu(conv(x, "stem.1", 2, 1, false), "stem.1.norm");
  return conv(x, "stem.2", 1, 1, true);
}

std::vector<Var> Model::cnn_branch_forward(Var image) const {
  std::vector<Var> out;
  Var x = image;
  for (std::size_t i = 0; i < config_.stages; ++i) {
    const std::string p = "cnn." + std::to_string(i);
    x = norm_relu(conv(x, p + ".conv", 1, 1, false), p + ".norm");
    x = conv(x, p + ".down", 2, 1, true);
    out.push_back(x);
  }
  return out;
}

std::vector<Var> Model::vig_branch_forward(Var image) const {
  const ModelConfig& c = config_;
  Tape& tape = *image.tape;
  Var x = ops::add_broadcast_batch(stem_forward(image), bind(tape, "vig.pos"));
  std::vector<Var> out;
  for (std::size_t j = 0; j < c.fused_levels(); ++j) {
    const Shape5 s = x.shape();
    const auto positions = graph::grid_positions(s.d(), s.h(), s.w());
    std::vector<Var> parts;
    for (std::size_t b = 0; b < s.n(); ++b) {
      Var nodes = graph::grid_to_nodes(x, b);
      for (std::size_t u = 0; u < c.vig_units_per_stage[j]; ++u) {
        const std::string p = "vig." + std::to_string(j) + "." + std::to_string(u);
        graph::GrapherVars g{linear_vars(tape, p + ".in"), linear_vars(tape, p + ".update"), linear_vars(tape, p + ".out"), {}};
        for (std::size_t e = 0; e < c.ffn_layers_per_block; ++e) g.ffn.push_back(linear_vars(tape, p + ".ffn." + std::to_string(e)));
        nodes = graph::vig3d_block(nodes, c.knn_k, g, c.knn_space, &positions);
      }
      parts.push_back(graph::nodes_to_grid(nodes, s.d(), s.h(), s.w()));
    }
    x = parts.size() == 1 ? parts[0] : ops::concat_batch(parts);
    const std::string p = "vig." + std::to_string(j);
    x = conv(x, p + ".down", 2, 1, true);
    out.push_back(find(p + ".proj.w") ? conv(x, p + ".proj", 1, 0, true) : x);
  }
  return out;
}

Var Model::channel_attention_fuse(Var cnn_feat, std::optional<Var> vig_feat, std::size_t fused_index) const {
  if (vig_feat.has_value() != config_.use_vig3d) {
    throw ConfigError("channel_attention_fuse: ViG feature presence does not match the configuration");
  }
  Var fm = cnn_feat;
  if (vig_feat) {
    const Shape5 a = cnn_feat.shape(), b = vig_feat->shape();
    for (std::size_t i : {0, 2, 3, 4}) {
      if (a.dims[i] != b.dims[i]) throw DimensionMismatch("channel_attention_fuse", i == 0 ? "n" : "spatial", a.dims[i], b.dims[i]);
    }
    fm = ops::concat_channels(cnn_feat, *vig_feat);
  }
  if (!config_.use_channel_attention) return fm;
  Tape& tape = *cnn_feat.tape;
  const std::size_t n = fm.shape().n(), ch = fm.shape().c();
  const std::string p = "fuse." + std::to_string(fused_index);
  Var pooled = ops::reshape(ops::global_avg_pool(fm), Shape5::matrix(n, ch));
  Var h = ops::relu(ops::linear(pooled, bind(tape, p + ".fc1.w"), bind(tape, p + ".fc1.b")));
  Var gate = ops::sigmoid(ops::linear(h, bind(tape, p + ".fc2.w"), bind(tape, p + ".fc2.b")));
  return ops::scale_channels(fm, ops::reshape(gate, Shape5(n, ch, 1, 1, 1)));
}

std::vector<Var> Model::offset_decoder_forward(const std::vector<Var>& fused, const std::vector<Var>& texture) const {
  const ModelConfig& c = config_;
  if (texture.size() != 2 || fused.size() != c.fused_levels()) {
    throw ConfigError("offset_decoder_forward: expected 2 texture maps and " + std::to_string(c.fused_levels()) + " fused maps");
  }
  std::vector<Var> skips = texture;
  skips.insert(skips.end(), fused.begin(), fused.end());
  const auto sw = skip_widths();
  for (std::size_t l = 0; l < c.stages; ++l) {
    if (skips[l].shape().c() != sw[l]) throw DimensionMismatch("offset_decoder_forward", "skip_channels", sw[l], skips[l].shape().c());
  }
  Tape& tape = *skips[0].tape;
  std::vector<Var> heads(c.head_count());
  Var up{};
  for (std::size_t l = c.stages; l-- > 0;) {
    const std::string p = "dec." + std::to_string(l);
    Var x = l + 1 == c.stages ? skips[l] : ops::concat_channels(skips[l], up);
    x = norm_relu(conv(x, p + ".conv1", 1, 1, false), p + ".norm1");
    x = norm_relu(conv(x, p + ".conv2", 1, 1, false), p + ".norm2");
    up = ops::conv_transpose3d(x, bind(tape, p + ".up.w"), bind(tape, p + ".up.b"), {{2, 2, 2}, {0, 0, 0}});
    if (l + 1 < c.stages) heads[l] = conv(up, "head." + std::to_string(l), 1, 0, true);
  }
  return heads;
}

std::vector<Var> Model::skip_maps(const std::vector<Var>& cnn, const std::vector<Var>& vig) const {
  const ModelConfig& c = config_;
  std::vector<Var> fused;
  for (std::size_t j = 0; j < c.fused_levels(); ++j) {
    const std::size_t l = j + 2;
    if (!c.use_vig3d && !c.use_channel_attention) {
      fused.push_back(cnn[l]);
      continue;
    }
    std::optional<Var> v;
    if (c.use_vig3d) v = vig[j];
    Var f = channel_attention_fuse(cnn[l], v, j);
    fused.push_back(c.use_offset_decoder ? f : ops::concat_channels(f, cnn[l]));
  }
  return fused;
}

ForwardResult Model::forward(Var image) const {
  const ModelConfig& c = config_;
  const Shape5 s = image.shape();
  if (s.c() != c.in_channels) throw DimensionMismatch("model_forward", "channel", c.in_channels, s.c());
  for (std::size_t a = 0; a < 3; ++a) {
    if (s.dims[2 + a] != c.patch_shape[a]) throw DimensionMismatch("model_forward", std::string(1, "dhw"[a]), c.patch_shape[a], s.dims[2 + a]);
  }
  std::vector<Var> cnn = cnn_branch_forward(image);
  std::vector<Var> vig;
  if (c.use_vig3d) vig = vig_branch_forward(image);
  std::vector<Var> fused = skip_maps(cnn, vig);
  return {offset_decoder_forward(fused, {cnn[0], cnn[1]})};
}

// ---------------------------------------------------------------------------------------
// Sliding-window inference

std::vector<std::size_t> window_origins(std::size_t extent, std::size_t patch, double overlap) {
  if (!(overlap >= 0.0 && overlap < 1.0)) throw ConfigError("sliding window: overlap must be in [0, 1)");
  if (extent <= patch) return {0};
  const auto stride = std::max<std::size_t>(1, static_cast<std::size_t>(std::floor(static_cast<double>(patch) * (1.0 - overlap))));
  std::vector<std::size_t> o;
  for (std::size_t p = 0; p + patch < extent; p += stride) o.push_back(p);
  o.push_back(extent - patch);
  return o;
}

namespace {

std::size_t reflect(long i, long n) {
  if (n == 1) return 0;
  const long period = 2 * (n - 1);
  long m = i % period;
  if (m < 0) m += period;
  return static_cast<std::size_t>(m < n ? m : period - m);
}

}  // namespace

Tensor5 sliding_window_probabilities(const Model& model, const Tensor5& image, double overlap) {
  const ModelConfig& c = model.config();
  const Shape5 s = image.shape();
  if (s.n() != 1) throw DimensionMismatch("sliding_window_predict", "n", 1, s.n());
  if (s.c() != c.in_channels) throw DimensionMismatch("sliding_window_predict", "channel", c.in_channels, s.c());
  const auto& ps = c.patch_shape;
  std::array<std::size_t, 3> ext{s.d(), s.h(), s.w()}, padded{};
  for (std::size_t a = 0; a < 3; ++a) padded[a] = std::max(ext[a], ps[a]);

  Tensor5 vol = image;
  if (padded != ext) {
    vol = Tensor5(Shape5(1, s.c(), padded[0], padded[1], padded[2]));
    for (std::size_t ch = 0; ch < s.c(); ++ch)
      for (std::size_t z = 0; z < padded[0]; ++z)
        for (std::size_t y = 0; y < padded[1]; ++y)
          for (std::size_t x = 0; x < padded[2]; ++x)
            vol.at(0, ch, z, y, x) = image.at(0, ch, reflect(static_cast<long>(z), static_cast<long>(ext[0])),
                                              reflect(static_cast<long>(y), static_cast<long>(ext[1])),
                                              reflect(static_cast<long>(x), static_cast<long>(ext[2])));
  }

  const std::size_t k = c.num_classes;
  Tensor5 acc(Shape5(1, k, padded[0], padded[1], padded[2]));
  std::vector<double> count(padded[0] * padded[1] * padded[2], 0.0);
  const auto oz = window_origins(padded[0], ps[0], overlap);
  const auto oy = window_origins(padded[1], ps[1], overlap);
  const auto ox = window_origins(padded[2], ps[2], overlap);
  Tensor5 window(Shape5(1, s.c(), ps[0], ps[1], ps[2]));
  for (std::size_t z0 : oz)
    for (std::size_t y0 : oy)
      for (std::size_t x0 : ox) {
        for (std::size_t ch = 0; ch < s.c(); ++ch)
          for (std::size_t z = 0; z < ps[0]; ++z)
            for (std::size_t y = 0; y < ps[1]; ++y)
              std::copy_n(&vol.at(0, ch, z0 + z, y0 + y, x0), ps[2], &window.at(0, ch, z, y, 0));
        Tape tape(false);
        Var probs = ops::softmax_channel(model.forward(tape.constant(window)).logits());
        const Tensor5& p = probs.value();
        for (std::size_t z = 0; z < ps[0]; ++z)
          for (std::size_t y = 0; y < ps[1]; ++y)
            for (std::size_t x = 0; x < ps[2]; ++x) {
              for (std::size_t cl = 0; cl < k; ++cl) acc.at(0, cl, z0 + z, y0 + y, x0 + x) += p.at(0, cl, z, y, x);
              count[((z0 + z) * padded[1] + y0 + y) * padded[2] + x0 + x] += 1.0;
            }
      }

  Tensor5 out(Shape5(1, k, ext[0], ext[1], ext[2]));
  for (std::size_t cl = 0; cl < k; ++cl)
    for (std::size_t z = 0; z < ext[0]; ++z)
      for (std::size_t y = 0; y < ext[1]; ++y)
        for (std::size_t x = 0; x < ext[2]; ++x)
          out.at(0, cl, z, y, x) = acc.at(0, cl, z, y, x) / count[(z * padded[1] + y) * padded[2] + x];
  return out;
}

std::vector<std::uint8_t> sliding_window_predict(const Model& model, const Tensor5& image, double overlap) {
  const Tensor5 p = sliding_window_probabilities(model, image, overlap);
  const std::size_t k = p.shape().c(), m = p.shape().spatial();
  std::vector<std::uint8_t> labels(m, 0);
  for (std::size_t i = 0; i < m; ++i) {
    std::size_t best = 0;
    for (std::size_t cl = 1; cl < k; ++cl)
      if (p.channel(0, cl)[i] > p.channel(0, best)[i]) best = cl;
    labels[i] = static_cast<std::uint8_t>(best);
  }
  return labels;
}

// ---------------------------------------------------------------------------------------
// Checkpoints: magic "V3DU" 0x00 '1', u32 config length, config text, u32 tensor count,
// then per tensor u32 name length, name, 5 x u64 extents, little-endian f64 payload.

namespace {

constexpr char kMagic[6] = {'V', '3', 'D', 'U', '\0', '1'};
constexpr std::uint32_t kMaxName = 4096;
constexpr std::uint32_t kMaxConfig = 1u << 20;

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

template <typename T>
void put(std::ostream& o, T v) {
  o.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

class Reader {
 public:
  explicit Reader(std::istream& in) : in_(in) {}

  void bytes(char* dst, std::size_t n, const char* what) {
    in_.read(dst, static_cast<std::streamsize>(n));
    if (static_cast<std::size_t>(in_.gcount()) != n) {
      throw ParseError(ParseError::Kind::kTruncated, offset_ + static_cast<std::uint64_t>(in_.gcount()),
                       std::string("checkpoint truncated while reading ") + what);
    }
    offset_ += n;
  }

  template <typename T>
  T get(const char* what) {
    T v;
    bytes(reinterpret_cast<char*>(&v), sizeof(T), what);
    return v;
  }

  std::uint64_t offset() const { return offset_; }

 private:
  std::istream& in_;
  std::uint64_t offset_ = 0;
};

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const Model& model) {
  std::ofstream o(path, std::ios::binary | std::ios::trunc);
  if (!o) throw ParseError(ParseError::Kind::kIo, 0, "cannot open '" + path.string() + "' for writing");
  o.write(kMagic, sizeof kMagic);
  const std::string cfg = model.config().to_text();
  put<std::uint32_t>(o, static_cast<std::uint32_t>(cfg.size()));
  o.write(cfg.data(), static_cast<std::streamsize>(cfg.size()));
  const auto params = model.parameters();
  put<std::uint32_t>(o, static_cast<std::uint32_t>(params.size()));
  for (const Parameter* p : params) {
    put<std::uint32_t>(o, static_cast<std::uint32_t>(p->name.size()));
    o.write(p->name.data(), static_cast<std::streamsize>(p->name.size()));
    for (std::size_t d : p->value.shape().dims) put<std::uint64_t>(o, d);
    for (double v : p->value.data()) put<std::uint64_t>(o, std::bit_cast<std::uint64_t>(v));
  }
  if (!o) throw ParseError(ParseError::Kind::kIo, 0, "write failed for '" + path.string() + "'");
}

Model load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ParseError(ParseError::Kind::kIo, 0, "cannot open checkpoint '" + path.string() + "'");
  Reader r(in);
  char magic[6];
  r.bytes(magic, 6, "magic");
  if (std::memcmp(magic, kMagic, 5) != 0) throw ParseError(ParseError::Kind::kMagicMismatch, 0, "not a model checkpoint (bad magic)");
  if (magic[5] != kMagic[5]) {
    throw ParseError(ParseError::Kind::kUnsupportedVersion, 5, std::string("unsupported checkpoint version '") + magic[5] + "'");
  }
  const std::uint64_t cfg_at = r.offset();
  const auto cfg_len = r.get<std::uint32_t>("config length");
  if (cfg_len > kMaxConfig) throw ParseError(ParseError::Kind::kBadField, cfg_at, "config block length out of range");
  std::string cfg(cfg_len, '\0');
  r.bytes(cfg.data(), cfg_len, "config block");
  Model model(ModelConfig::parse(cfg), 0);

  const std::uint64_t count_at = r.offset();
  const auto count = r.get<std::uint32_t>("tensor count");
  if (count != model.parameters().size()) {
    throw ParseError(ParseError::Kind::kBadField, count_at,
                     "checkpoint holds " + std::to_string(count) + " tensors, model expects " + std::to_string(model.parameters().size()));
  }
  std::vector<bool> seen(count, false);
  const auto params = model.parameters();
  for (std::uint32_t t = 0; t < count; ++t) {
    const std::uint64_t name_at = r.offset();
    const auto len = r.get<std::uint32_t>("tensor name length");
    if (len == 0 || len > kMaxName) throw ParseError(ParseError::Kind::kBadField, name_at, "tensor name length out of range");
    std::string name(len, '\0');
    r.bytes(name.data(), len, "tensor name");
    const Parameter* found = model.find(name);
    if (!found) throw ParseError(ParseError::Kind::kBadField, name_at, "unknown tensor '" + name + "'");
    Parameter& p = model.parameter(name);
    const auto idx = static_cast<std::size_t>(std::find(params.begin(), params.end(), &p) - params.begin());
    if (seen[idx]) throw ParseError(ParseError::Kind::kBadField, name_at, "duplicate tensor '" + name + "'");
    seen[idx] = true;
    const std::uint64_t shape_at = r.offset();
    Shape5 shape;
    unsigned __int128 numel = 1;
    for (std::size_t a = 0; a < 5; ++a) {
      const auto d = r.get<std::uint64_t>("tensor shape");
      numel *= d;
      if (numel > std::numeric_limits<std::uint32_t>::max()) throw ParseError(ParseError::Kind::kDimOverflow, shape_at, "tensor '" + name + "' is too large");
      shape.dims[a] = static_cast<std::size_t>(d);
    }
    if (!(shape == p.value.shape())) {
      throw ParseError(ParseError::Kind::kBadField, shape_at, "tensor '" + name + "' has shape " + shape.str() + ", model expects " + p.value.shape().str());
    }
    for (double& v : p.value.data()) v = std::bit_cast<double>(r.get<std::uint64_t>("tensor data"));
  }
  if (in.peek() != std::char_traits<char>::eof()) throw ParseError(ParseError::Kind::kBadField, r.offset(), "trailing bytes after last tensor");
  return model;
}

}  // namespace vig3d
