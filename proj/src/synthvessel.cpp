#include "vig3d/synthvessel.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <limits>
#include <random>
#include <sstream>

#include "vig3d/error.hpp"

namespace vig3d::synth {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
}

double parse_real(const std::string& key, const std::string& text) {
  const std::string t = trim(text);
  std::size_t pos = 0;
  double v = 0;
  try {
    v = std::stod(t, &pos);
  } catch (const std::exception&) {
    pos = std::string::npos;
  }
  if (pos != t.size() || t.empty() || !std::isfinite(v)) {
    throw ConfigError("data." + key + ": expected a number, got '" + text + "'");
  }
  return v;
}

std::size_t parse_count(const std::string& key, const std::string& text) {
  const std::string t = trim(text);
  std::size_t pos = 0;
  unsigned long long v = 0;
  try {
    if (t.empty() || t[0] == '-') throw std::invalid_argument(t);
    v = std::stoull(t, &pos);
  } catch (const std::exception&) {
    pos = std::string::npos;
  }
  if (pos != t.size()) throw ConfigError("data." + key + ": expected a non-negative integer, got '" + text + "'");
  return static_cast<std::size_t>(v);
}

template <typename T, typename F>
std::array<T, 3> parse_triple(const std::string& key, const std::string& text, F one) {
  std::vector<std::string> items;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) items.push_back(item);
  if (items.size() == 1) items.assign(3, items[0]);
  if (items.size() != 3) throw ConfigError("data." + key + ": expected 1 or 3 comma-separated values, got '" + text + "'");
  std::array<T, 3> out{};
  for (std::size_t a = 0; a < 3; ++a) out[a] = static_cast<T>(one(key, items[a]));
  return out;
}

std::string fmt(double v) {
  std::ostringstream o;
  o.precision(17);
  o << v;
  return o.str();
}

template <typename T>
std::string fmt3(const std::array<T, 3>& a) {
  return fmt(a[0]) + "," + fmt(a[1]) + "," + fmt(a[2]);
}

using Vec = Point3;

Vec operator+(const Vec& a, const Vec& b) { return {a[0] + b[0], a[1] + b[1], a[2] + b[2]}; }
Vec operator-(const Vec& a, const Vec& b) { return {a[0] - b[0], a[1] - b[1], a[2] - b[2]}; }
Vec operator*(double s, const Vec& a) { return {s * a[0], s * a[1], s * a[2]}; }
double dot(const Vec& a, const Vec& b) { return a[0] * b[0] + a[1] * b[1] + a[2] * b[2]; }

Vec normalized(const Vec& a) {
  const double n = std::sqrt(dot(a, a));
  return (1.0 / n) * a;
}

Vec gaussian_vec(std::mt19937_64& rng) {
  std::normal_distribution<double> g(0.0, 1.0);
  const double x = g(rng), y = g(rng), z = g(rng);
  return {x, y, z};
}

/// Unit vector orthogonal to unit `d`.
Vec perpendicular(const Vec& d, std::mt19937_64& rng) {
  for (;;) {
    Vec u = gaussian_vec(rng);
    u = u - dot(u, d) * d;
    if (dot(u, u) > 1e-12) return normalized(u);
  }
}

bool inside(const Vec& p, const Dims3& dims) {
  for (std::size_t a = 0; a < 3; ++a)
    if (p[a] < 0.0 || p[a] > static_cast<double>(dims[a] - 1)) return false;
  return true;
}

/// Largest t in [0, 1] with p + t*step inside the grid (p is inside).
double clip_fraction(const Vec& p, const Vec& step, const Dims3& dims) {
  double t = 1.0;
  for (std::size_t a = 0; a < 3; ++a) {
    const double hi = static_cast<double>(dims[a] - 1);
    if (step[a] > 0) t = std::min(t, (hi - p[a]) / step[a]);
    if (step[a] < 0) t = std::min(t, -p[a] / step[a]);
  }
  return std::max(t, 0.0);
}

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

}  // namespace

// ---------------------------------------------------------------------------------------
// GenParams

void GenParams::validate() const {
  for (std::size_t a = 0; a < 3; ++a) {
    if (dims[a] < 2) throw ConfigError("data.dims: every extent must be at least 2");
    if (!(spacing[a] > 0.0f) || !std::isfinite(spacing[a])) throw ConfigError("data.spacing: must be positive");
  }
  if (!(root_radius > 0)) throw ConfigError("data.root_radius: must be positive");
  const double min_extent = static_cast<double>(*std::min_element(dims.begin(), dims.end()));
  if (2.0 * root_radius > min_extent) {
    throw ConfigError("data.root_radius: " + fmt(root_radius) + " does not fit a grid of minimum extent " + fmt(min_extent));
  }
  if (!(branch_prob >= 0 && branch_prob <= 1)) throw ConfigError("data.branch_prob: must lie in [0, 1]");
  if (!(branch_angle_min >= 0 && branch_angle_min <= branch_angle_max && branch_angle_max <= M_PI)) {
    throw ConfigError("data.branch_angle_min/max: need 0 <= min <= max <= pi");
  }
  if (!(radius_decay > 0 && radius_decay <= 1)) throw ConfigError("data.radius_decay: must lie in (0, 1]");
  if (!(min_radius > 0)) throw ConfigError("data.min_radius: must be positive");
  if (!(step_length > 0)) throw ConfigError("data.step_length: must be positive");
  if (!(turn_sigma >= 0)) throw ConfigError("data.turn_sigma: must be non-negative");
  if (max_steps == 0) throw ConfigError("data.max_steps: must be positive");
  if (!(fg_mean >= 0 && fg_mean <= 1 && bg_mean >= 0 && bg_mean <= 1)) throw ConfigError("data.fg_mean/bg_mean: must lie in [0, 1]");
  if (!(fg_mean > bg_mean)) throw ConfigError("data.fg_mean: must exceed bg_mean");
  if (!(noise_sigma >= 0)) throw ConfigError("data.noise_sigma: must be non-negative");
  if (!(blur_radius >= 0)) throw ConfigError("data.blur_radius: must be non-negative");
}

void GenParams::set(const std::string& key, const std::string& v) {
  if (key == "dims") {
    dims = parse_triple<std::size_t>(key, v, parse_count);
  } else if (key == "spacing") {
    spacing = parse_triple<float>(key, v, parse_real);
  } else if (key == "root_radius") {
    root_radius = parse_real(key, v);
  } else if (key == "branch_prob") {
    branch_prob = parse_real(key, v);
  } else if (key == "branch_angle_min") {
    branch_angle_min = parse_real(key, v);
  } else if (key == "branch_angle_max") {
    branch_angle_max = parse_real(key, v);
  } else if (key == "radius_decay") {
    radius_decay = parse_real(key, v);
  } else if (key == "min_radius") {
    min_radius = parse_real(key, v);
  } else if (key == "step_length") {
    step_length = parse_real(key, v);
  } else if (key == "turn_sigma") {
    turn_sigma = parse_real(key, v);
  } else if (key == "max_steps") {
    max_steps = parse_count(key, v);
  } else if (key == "max_depth") {
    max_depth = parse_count(key, v);
  } else if (key == "trees") {
    trees = parse_count(key, v);
  } else if (key == "fg_mean") {
    fg_mean = parse_real(key, v);
  } else if (key == "bg_mean") {
    bg_mean = parse_real(key, v);
  } else if (key == "noise_sigma") {
    noise_sigma = parse_real(key, v);
  } else if (key == "blur_radius") {
    blur_radius = parse_real(key, v);
  } else {
    throw ConfigError("data: unknown key '" + key + "'");
  }
}

std::string GenParams::to_text() const {
  std::ostringstream o;
  o << "dims = " << dims[0] << "," << dims[1] << "," << dims[2] << "\n"
    << "spacing = " << fmt3(spacing) << "\n"
    << "root_radius = " << fmt(root_radius) << "\n"
    << "branch_prob = " << fmt(branch_prob) << "\n"
    << "branch_angle_min = " << fmt(branch_angle_min) << "\n"
    << "branch_angle_max = " << fmt(branch_angle_max) << "\n"
    << "radius_decay = " << fmt(radius_decay) << "\n"
    << "min_radius = " << fmt(min_radius) << "\n"
    << "step_length = " << fmt(step_length) << "\n"
    << "turn_sigma = " << fmt(turn_sigma) << "\n"
    << "max_steps = " << max_steps << "\n"
    << "max_depth = " << max_depth << "\n"
    << "trees = " << trees << "\n"
    << "fg_mean = " << fmt(fg_mean) << "\n"
    << "bg_mean = " << fmt(bg_mean) << "\n"
    << "noise_sigma = " << fmt(noise_sigma) << "\n"
    << "blur_radius = " << fmt(blur_radius) << "\n";
  return o.str();
}

// ---------------------------------------------------------------------------------------
// Trees

std::size_t VesselTree::branch_points() const {
  std::size_t n = 0;
  for (const Segment& s : segments)
    if (s.parent >= 0 && segments[static_cast<std::size_t>(s.parent)].depth < s.depth) ++n;
  return n;
}

VesselTree generate_vessel_tree(std::uint64_t seed, const GenParams& params) {
  params.validate();
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const Dims3& dims = params.dims;

  struct Branch {
    Vec start;
    Vec dir;
    double radius;
    std::size_t depth;
    int parent;
  };
  std::vector<Branch> pending;
  VesselTree tree;

  for (std::size_t t = 0; t < params.trees; ++t) {
    const auto face = static_cast<std::size_t>(rng() % 6);
    const std::size_t axis = face / 2;
    const bool far_side = face % 2 == 1;
    Vec start{}, dir{};
    for (std::size_t a = 0; a < 3; ++a) {
      const double hi = static_cast<double>(dims[a] - 1);
      const double margin = std::min(params.root_radius, hi / 2);
      start[a] = margin + unit(rng) * (hi - 2 * margin);
    }
    start[axis] = far_side ? static_cast<double>(dims[axis] - 1) : 0.0;
    dir[axis] = far_side ? -1.0 : 1.0;
    // Enter roughly along the face normal.
    dir = normalized(dir + 0.3 * gaussian_vec(rng));
    const double inward = far_side ? -1.0 : 1.0;
    if (dir[axis] * inward < 0.5) {
      dir[axis] = inward;
      dir = normalized(dir);
    }
    pending.push_back({start, dir, params.root_radius, 0, -1});

    while (!pending.empty()) {
      Branch b = pending.back();
      pending.pop_back();
      Vec pos = b.start, d = b.dir;
      int prev = b.parent;
      for (std::size_t step = 0; step < params.max_steps; ++step) {
        Vec delta = params.step_length * d;
        Vec next = pos + delta;
        bool last = false;
        if (!inside(next, dims)) {
          const double f = clip_fraction(pos, delta, dims);
          if (f * params.step_length < 1e-6) break;
          next = pos + f * delta;
          for (std::size_t a = 0; a < 3; ++a) next[a] = std::clamp(next[a], 0.0, static_cast<double>(dims[a] - 1));
          last = true;
        }
        tree.segments.push_back({pos, next, b.radius, b.radius, prev, b.depth});
        prev = static_cast<int>(tree.segments.size() - 1);
        pos = next;
        if (last) break;
        const double child_radius = b.radius * params.radius_decay;
        if (b.depth < params.max_depth && child_radius >= params.min_radius && unit(rng) < params.branch_prob) {
          const double angle = params.branch_angle_min + unit(rng) * (params.branch_angle_max - params.branch_angle_min);
          const Vec u = perpendicular(d, rng);
          pending.push_back({pos, normalized(std::cos(angle) * d + std::sin(angle) * u), child_radius, b.depth + 1, prev});
        }
        if (params.turn_sigma > 0) d = normalized(d + params.turn_sigma * gaussian_vec(rng));
      }
    }
  }
  return tree;
}

std::vector<std::uint8_t> voxelize_tree(const VesselTree& tree, const Dims3& dims) {
  std::vector<std::uint8_t> label(dims[0] * dims[1] * dims[2], 0);
  for (const Segment& s : tree.segments) {
    const double rmax = std::max(s.start_radius, s.end_radius);
    std::array<std::size_t, 3> lo{}, hi{};
    bool empty = false;
    for (std::size_t a = 0; a < 3; ++a) {
      const double l = std::ceil(std::min(s.start[a], s.end[a]) - rmax);
      const double h = std::floor(std::max(s.start[a], s.end[a]) + rmax);
      if (h < 0 || l > static_cast<double>(dims[a] - 1)) empty = true;
      lo[a] = static_cast<std::size_t>(std::max(l, 0.0));
      hi[a] = static_cast<std::size_t>(std::min(h, static_cast<double>(dims[a] - 1)));
    }
    if (empty) continue;
    const Vec ab = s.end - s.start;
    const double len2 = dot(ab, ab);
    for (std::size_t z = lo[0]; z <= hi[0]; ++z)
      for (std::size_t y = lo[1]; y <= hi[1]; ++y)
        for (std::size_t x = lo[2]; x <= hi[2]; ++x) {
          const Vec p{static_cast<double>(z), static_cast<double>(y), static_cast<double>(x)};
          const double t = len2 > 0 ? std::clamp(dot(p - s.start, ab) / len2, 0.0, 1.0) : 0.0;
          const Vec q = p - (s.start + t * ab);
          const double r = s.start_radius + t * (s.end_radius - s.start_radius);
          if (dot(q, q) <= r * r) label[(z * dims[1] + y) * dims[2] + x] = 1;
        }
  }
  return label;
}

namespace {

void blur_axis(std::vector<double>& v, const Dims3& dims, std::size_t axis, const std::vector<double>& kernel) {
  const long radius = static_cast<long>(kernel.size() / 2);
  const std::array<std::size_t, 3> stride{dims[1] * dims[2], dims[2], 1};
  const long n = static_cast<long>(dims[axis]);
  std::vector<double> line(dims[axis]);
  const std::size_t a1 = (axis + 1) % 3, a2 = (axis + 2) % 3;
  for (std::size_t i = 0; i < dims[a1]; ++i)
    for (std::size_t j = 0; j < dims[a2]; ++j) {
      const std::size_t base = i * stride[a1] + j * stride[a2];
      for (long k = 0; k < n; ++k) line[static_cast<std::size_t>(k)] = v[base + static_cast<std::size_t>(k) * stride[axis]];
      for (long k = 0; k < n; ++k) {
        double acc = 0;
        for (long t = -radius; t <= radius; ++t) {
          const long src = std::clamp(k + t, 0L, n - 1);
          acc += kernel[static_cast<std::size_t>(t + radius)] * line[static_cast<std::size_t>(src)];
        }
        v[base + static_cast<std::size_t>(k) * stride[axis]] = acc;
      }
    }
}

}  // namespace

std::vector<double> render_intensity(const std::vector<std::uint8_t>& label, const Dims3& dims, const GenParams& params,
                                     std::uint64_t seed) {
  const std::size_t m = dims[0] * dims[1] * dims[2];
  if (label.size() != m) throw DimensionMismatch("render_intensity", "voxels", m, label.size());
  std::vector<double> img(m);
  for (std::size_t i = 0; i < m; ++i) img[i] = label[i] ? params.fg_mean : params.bg_mean;

  if (params.blur_radius > 0) {
    const double sigma = params.blur_radius;
    const auto r = static_cast<long>(std::ceil(3.0 * sigma));
    std::vector<double> kernel(static_cast<std::size_t>(2 * r + 1));
    double total = 0;
    for (long t = -r; t <= r; ++t) {
      const double w = std::exp(-0.5 * static_cast<double>(t * t) / (sigma * sigma));
      kernel[static_cast<std::size_t>(t + r)] = w;
      total += w;
    }
    for (double& w : kernel) w /= total;
    for (std::size_t a = 0; a < 3; ++a) blur_axis(img, dims, a, kernel);
  }

  if (params.noise_sigma > 0) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> noise(0.0, params.noise_sigma);
    for (double& v : img) v += noise(rng);
  }
  for (double& v : img) v = std::clamp(v, 0.0, 1.0);
  return img;
}

std::uint64_t sample_seed(std::uint64_t master, std::uint64_t index) {
  return splitmix64(splitmix64(master) ^ (index * 0xD1B54A32D192ED03ull + 1));
}

LabeledVolume generate_volume(std::uint64_t seed, const GenParams& params) {
  LabeledVolume vol;
  vol.dims = params.dims;
  vol.spacing = params.spacing;
  vol.label = voxelize_tree(generate_vessel_tree(seed, params), params.dims);
  vol.image = render_intensity(vol.label, params.dims, params, splitmix64(seed ^ 0x6E6F697365ull));
  vol.meta = "seed = " + std::to_string(seed) + "\n" + params.to_text();
  return vol;
}

Tensor5 LabeledVolume::image_tensor() const {
  Tensor5 t(Shape5(1, 1, dims[0], dims[1], dims[2]));
  std::copy(image.begin(), image.end(), t.data().begin());
  return t;
}

// ---------------------------------------------------------------------------------------
// VVOL files

namespace {

constexpr char kVvolMagic[4] = {'V', 'V', 'O', 'L'};
constexpr std::uint8_t kVvolVersion = 1;
constexpr std::size_t kHeaderBytes = 30;
constexpr std::uint64_t kMaxVoxels = 1ull << 34;

static_assert(std::endian::native == std::endian::little, "VVOL I/O assumes a little-endian host");

template <typename T>
void put(std::ostream& o, T v) {
  o.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T load(const std::vector<char>& buf, std::size_t at) {
  T v;
  std::memcpy(&v, buf.data() + at, sizeof(T));
  return v;
}

void write_header(std::ofstream& o, std::uint8_t dtype, const Dims3& dims, const Spacing3& spacing) {
  o.write(kVvolMagic, 4);
  put<std::uint8_t>(o, kVvolVersion);
  put<std::uint8_t>(o, dtype);
  for (std::size_t d : dims) {
    if (d > std::numeric_limits<std::uint32_t>::max()) throw ConfigError("VVOL extent exceeds u32");
    put<std::uint32_t>(o, static_cast<std::uint32_t>(d));
  }
  for (float s : spacing) put<float>(o, s);
}

std::ofstream open_out(const std::filesystem::path& path) {
  std::ofstream o(path, std::ios::binary | std::ios::trunc);
  if (!o) throw ParseError(ParseError::Kind::kIo, 0, "cannot open '" + path.string() + "' for writing");
  return o;
}

void check_written(const std::ofstream& o, const std::filesystem::path& path) {
  if (!o) throw ParseError(ParseError::Kind::kIo, 0, "write failed for '" + path.string() + "'");
}

std::size_t checked_voxels(const Dims3& dims, std::size_t n, const char* what) {
  const std::size_t m = dims[0] * dims[1] * dims[2];
  if (n != m) throw DimensionMismatch(what, "voxels", m, n);
  return m;
}

}  // namespace

void write_vvol_image(const std::filesystem::path& path, const Dims3& dims, const Spacing3& spacing, const std::vector<double>& data) {
  checked_voxels(dims, data.size(), "write_vvol_image");
  auto o = open_out(path);
  write_header(o, kDtypeImage, dims, spacing);
  o.write(reinterpret_cast<const char*>(data.data()), static_cast<std::streamsize>(data.size() * sizeof(double)));
  check_written(o, path);
}

void write_vvol_label(const std::filesystem::path& path, const Dims3& dims, const Spacing3& spacing, const std::vector<std::uint8_t>& data) {
  checked_voxels(dims, data.size(), "write_vvol_label");
  auto o = open_out(path);
  write_header(o, kDtypeLabel, dims, spacing);
  o.write(reinterpret_cast<const char*>(data.data()), static_cast<std::streamsize>(data.size()));
  check_written(o, path);
}

VvolFile read_vvol(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ParseError(ParseError::Kind::kIo, 0, "cannot open volume '" + path.string() + "'");
  const std::vector<char> buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  const std::string where = " in '" + path.string() + "'";

  const std::size_t magic_bytes = std::min<std::size_t>(buf.size(), 4);
  if (std::memcmp(buf.data(), kVvolMagic, magic_bytes) != 0) {
    throw ParseError(ParseError::Kind::kMagicMismatch, 0, "not a VVOL file (bad magic)" + where);
  }
  if (buf.size() < kHeaderBytes) throw ParseError(ParseError::Kind::kTruncated, buf.size(), "VVOL header truncated" + where);
  const auto version = load<std::uint8_t>(buf, 4);
  if (version != kVvolVersion) {
    throw ParseError(ParseError::Kind::kUnsupportedVersion, 4, "unsupported VVOL version " + std::to_string(version) + where);
  }
  VvolFile f;
  f.dtype = load<std::uint8_t>(buf, 5);
  if (f.dtype != kDtypeImage && f.dtype != kDtypeLabel) {
    throw ParseError(ParseError::Kind::kBadField, 5, "unknown VVOL dtype code " + std::to_string(f.dtype) + where);
  }
  unsigned __int128 voxels = 1;
  for (std::size_t a = 0; a < 3; ++a) {
    const auto d = load<std::uint32_t>(buf, 6 + 4 * a);
    if (d == 0) throw ParseError(ParseError::Kind::kBadField, 6 + 4 * a, "zero VVOL extent" + where);
    f.dims[a] = d;
    voxels *= d;
  }
  if (voxels > kMaxVoxels) throw ParseError(ParseError::Kind::kDimOverflow, 6, "VVOL dims product exceeds the supported size" + where);
  for (std::size_t a = 0; a < 3; ++a) {
    f.spacing[a] = load<float>(buf, 18 + 4 * a);
    if (!(f.spacing[a] > 0.0f) || !std::isfinite(f.spacing[a])) {
      throw ParseError(ParseError::Kind::kBadField, 18 + 4 * a, "non-positive VVOL spacing" + where);
    }
  }
  const auto m = static_cast<std::size_t>(voxels);
  const std::size_t elem = f.dtype == kDtypeImage ? sizeof(double) : 1;
  const std::size_t want = m * elem, have = buf.size() - kHeaderBytes;
  if (have < want) {
    throw ParseError(ParseError::Kind::kTruncated, buf.size(),
                     "VVOL payload holds " + std::to_string(have) + " bytes, header dims need " + std::to_string(want) + where);
  }
  if (have > want) throw ParseError(ParseError::Kind::kBadField, kHeaderBytes + want, "trailing bytes after VVOL payload" + where);
  if (f.dtype == kDtypeImage) {
    f.image.resize(m);
    std::memcpy(f.image.data(), buf.data() + kHeaderBytes, want);
  } else {
    f.label.assign(buf.begin() + kHeaderBytes, buf.end());
    for (std::size_t i = 0; i < m; ++i)
      if (f.label[i] > 1) throw ParseError(ParseError::Kind::kBadField, kHeaderBytes + i, "label value outside {0, 1}" + where);
  }
  return f;
}

std::filesystem::path image_path(const std::filesystem::path& stem) { return stem.string() + ".img.vvol"; }
std::filesystem::path label_path(const std::filesystem::path& stem) { return stem.string() + ".lbl.vvol"; }

void write_volume(const std::filesystem::path& stem, const LabeledVolume& vol) {
  write_vvol_image(image_path(stem), vol.dims, vol.spacing, vol.image);
  write_vvol_label(label_path(stem), vol.dims, vol.spacing, vol.label);
  const std::filesystem::path meta = stem.string() + ".meta";
  auto o = open_out(meta);
  o << vol.meta;
  check_written(o, meta);
}

LabeledVolume read_volume(const std::filesystem::path& stem) {
  VvolFile img = read_vvol(image_path(stem));
  VvolFile lbl = read_vvol(label_path(stem));
  if (img.dtype != kDtypeImage) throw ParseError(ParseError::Kind::kBadField, 5, "'" + image_path(stem).string() + "' is not an image volume");
  if (lbl.dtype != kDtypeLabel) throw ParseError(ParseError::Kind::kBadField, 5, "'" + label_path(stem).string() + "' is not a label volume");
  for (std::size_t a = 0; a < 3; ++a)
    if (img.dims[a] != lbl.dims[a]) throw DimensionMismatch("read_volume", std::string(1, "dhw"[a]), img.dims[a], lbl.dims[a]);
  LabeledVolume vol;
  vol.dims = img.dims;
  vol.spacing = img.spacing;
  vol.image = std::move(img.image);
  vol.label = std::move(lbl.label);
  std::ifstream meta(stem.string() + ".meta");
  if (meta) vol.meta.assign(std::istreambuf_iterator<char>(meta), std::istreambuf_iterator<char>());
  return vol;
}

// ---------------------------------------------------------------------------------------
// Manifest

void write_manifest(const std::filesystem::path& path, const Manifest& m) {
  auto o = open_out(path);
  o << "split: train\n";
  for (const auto& s : m.train) o << s << "\n";
  o << "split: test\n";
  for (const auto& s : m.test) o << s << "\n";
  check_written(o, path);
}

Manifest read_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ParseError(ParseError::Kind::kIo, 0, "cannot open manifest '" + path.string() + "'");
  Manifest m;
  std::vector<std::string>* current = nullptr;
  std::string line;
  std::uint64_t offset = 0;
  while (std::getline(in, line)) {
    const std::uint64_t at = offset;
    offset += line.size() + 1;
    const std::string t = trim(line);
    if (t.empty() || t[0] == '#') continue;
    if (t.rfind("split:", 0) == 0) {
      const std::string name = trim(t.substr(6));
      if (name == "train") {
        current = &m.train;
      } else if (name == "test") {
        current = &m.test;
      } else {
        throw ParseError(ParseError::Kind::kBadField, at, "unknown split '" + name + "' in manifest");
      }
      continue;
    }
    if (!current) throw ParseError(ParseError::Kind::kBadField, at, "manifest entry before any 'split:' header");
    current->push_back(t);
  }
  return m;
}

// ---------------------------------------------------------------------------------------
// Patch sampling

Patch sample_patch(const LabeledVolume& vol, const Dims3& patch, std::uint64_t seed, double fg_bias, bool flips) {
  static const char* kAxis[3] = {"d", "h", "w"};
  for (std::size_t a = 0; a < 3; ++a) {
    if (patch[a] == 0 || patch[a] > vol.dims[a]) throw DimensionMismatch("sample_patch", kAxis[a], vol.dims[a], patch[a]);
  }
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);

  Patch out;
  Dims3 centre{};
  const bool want_fg = unit(rng) < fg_bias;
  const auto fg = static_cast<std::size_t>(std::count(vol.label.begin(), vol.label.end(), 1));
  if (want_fg && fg > 0) {
    std::size_t pick = std::uniform_int_distribution<std::size_t>(0, fg - 1)(rng);
    std::size_t idx = 0;
    for (; idx < vol.label.size(); ++idx)
      if (vol.label[idx] && pick-- == 0) break;
    centre = {idx / (vol.dims[1] * vol.dims[2]), (idx / vol.dims[2]) % vol.dims[1], idx % vol.dims[2]};
    out.foreground_centred = true;
  } else {
    for (std::size_t a = 0; a < 3; ++a) centre[a] = std::uniform_int_distribution<std::size_t>(0, vol.dims[a] - 1)(rng);
  }
  for (std::size_t a = 0; a < 3; ++a) {
    const std::size_t half = patch[a] / 2;
    out.origin[a] = std::min(centre[a] > half ? centre[a] - half : 0, vol.dims[a] - patch[a]);
    out.flipped[a] = flips && unit(rng) < 0.5;
  }

  const Shape5 shape(1, 1, patch[0], patch[1], patch[2]);
  out.image = Tensor5(shape);
  out.label = Tensor5(shape);
  for (std::size_t z = 0; z < patch[0]; ++z)
    for (std::size_t y = 0; y < patch[1]; ++y)
      for (std::size_t x = 0; x < patch[2]; ++x) {
        const std::size_t sz = out.origin[0] + (out.flipped[0] ? patch[0] - 1 - z : z);
        const std::size_t sy = out.origin[1] + (out.flipped[1] ? patch[1] - 1 - y : y);
        const std::size_t sx = out.origin[2] + (out.flipped[2] ? patch[2] - 1 - x : x);
        const std::size_t src = (sz * vol.dims[1] + sy) * vol.dims[2] + sx;
        out.image.at(0, 0, z, y, x) = vol.image[src];
        out.label.at(0, 0, z, y, x) = vol.label[src];
      }
  return out;
}

}  // namespace vig3d::synth
