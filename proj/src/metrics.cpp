#include "vig3d/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <sstream>

#include "vig3d/error.hpp"

namespace vig3d::metrics {

namespace {

std::size_t voxel_count(const Dims3& dims) { return dims[0] * dims[1] * dims[2]; }

void check_size(const char* op, const Dims3& dims, std::size_t n) {
  if (voxel_count(dims) != n) throw DimensionMismatch(op, "voxels", voxel_count(dims), n);
}

double ratio(std::uint64_t num, std::uint64_t den, bool both_empty) {
  if (den == 0) return both_empty ? 1.0 : 0.0;
  return static_cast<double>(num) / static_cast<double>(den);
}

std::array<double, 3> to_mm(const Voxel& v, const Spacing& s) {
  return {v[0] * s[0], v[1] * s[1], v[2] * s[2]};
}

double dist2(const std::array<double, 3>& a, const std::array<double, 3>& b) {
  const double dz = a[0] - b[0], dy = a[1] - b[1], dx = a[2] - b[2];
  return dz * dz + dy * dy + dx * dx;
}

void require_points(const SurfacePointSet& a, const SurfacePointSet& b, const char* metric, const std::string& case_id) {
  if (a.points.empty() || b.points.empty()) throw UndefinedMetric(metric, case_id);
  if (a.spacing != b.spacing) throw Error(std::string(metric) + ": surfaces use different spacings");
}

std::vector<double> pooled(const SurfacePointSet& a, const SurfacePointSet& b) {
  std::vector<double> d = directed_distances(a, b);
  const std::vector<double> back = directed_distances(b, a);
  d.insert(d.end(), back.begin(), back.end());
  return d;
}

}  // namespace

ConfusionCounts confusion_counts(const std::vector<std::uint8_t>& pred, const std::vector<std::uint8_t>& gt) {
  if (pred.size() != gt.size()) throw DimensionMismatch("confusion_counts", "voxels", gt.size(), pred.size());
  ConfusionCounts c;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const bool p = pred[i] != 0, g = gt[i] != 0;
    if (p && g) {
      ++c.tp;
    } else if (p) {
      ++c.fp;
    } else if (g) {
      ++c.fn;
    } else {
      ++c.tn;
    }
  }
  return c;
}

Overlap overlap_metrics(const ConfusionCounts& c) {
  const bool empty = c.tp + c.fp + c.fn == 0;
  return {ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn, empty), ratio(c.tp, c.tp + c.fp + c.fn, empty),
          ratio(c.tp, c.tp + c.fp, empty), ratio(c.tp, c.tp + c.fn, empty)};
}

SurfacePointSet extract_surface(const std::vector<std::uint8_t>& mask, const Dims3& dims, const Spacing& spacing) {
  check_size("extract_surface", dims, mask.size());
  SurfacePointSet s;
  s.spacing = spacing;
  const auto at = [&](std::size_t z, std::size_t y, std::size_t x) { return mask[(z * dims[1] + y) * dims[2] + x] != 0; };
  for (std::size_t z = 0; z < dims[0]; ++z)
    for (std::size_t y = 0; y < dims[1]; ++y)
      for (std::size_t x = 0; x < dims[2]; ++x) {
        if (!at(z, y, x)) continue;
        const bool boundary = z == 0 || y == 0 || x == 0 || z + 1 == dims[0] || y + 1 == dims[1] || x + 1 == dims[2] ||
                              !at(z - 1, y, x) || !at(z + 1, y, x) || !at(z, y - 1, x) || !at(z, y + 1, x) ||
                              !at(z, y, x - 1) || !at(z, y, x + 1);
        if (boundary) s.points.push_back({static_cast<std::int32_t>(z), static_cast<std::int32_t>(y), static_cast<std::int32_t>(x)});
      }
  return s;
}

// ---------------------------------------------------------------------------------------
// KD-tree

namespace {
constexpr std::uint32_t kLeafSize = 8;
}

KdTree::KdTree(const std::vector<Voxel>& points, const Spacing& spacing) : spacing_(spacing) {
  pts_.reserve(points.size());
  for (const Voxel& v : points) pts_.push_back(to_mm(v, spacing));
  if (!pts_.empty()) build(0, static_cast<std::uint32_t>(pts_.size()));
}

std::int32_t KdTree::build(std::uint32_t begin, std::uint32_t end) {
  const auto id = static_cast<std::int32_t>(nodes_.size());
  nodes_.push_back({begin, end});
  if (end - begin <= kLeafSize) return id;

  std::array<double, 3> lo{}, hi{};
  lo.fill(std::numeric_limits<double>::infinity());
  hi.fill(-std::numeric_limits<double>::infinity());
  for (std::uint32_t i = begin; i < end; ++i)
    for (std::size_t a = 0; a < 3; ++a) lo[a] = std::min(lo[a], pts_[i][a]), hi[a] = std::max(hi[a], pts_[i][a]);
  std::uint8_t axis = 0;
  for (std::uint8_t a = 1; a < 3; ++a)
    if (hi[a] - lo[a] > hi[axis] - lo[axis]) axis = a;
  if (hi[axis] == lo[axis]) return id;  // all points coincide

  const std::uint32_t mid = begin + (end - begin) / 2;
  std::nth_element(pts_.begin() + begin, pts_.begin() + mid, pts_.begin() + end,
                   [axis](const auto& p, const auto& q) { return p[axis] < q[axis]; });
  const double split = pts_[mid][axis];
  const std::int32_t l = build(begin, mid);
  const std::int32_t r = build(mid, end);
  Node& n = nodes_[static_cast<std::size_t>(id)];
  n.axis = axis;
  n.split = split;
  n.left = l;
  n.right = r;
  return id;
}

void KdTree::search(std::int32_t node, const std::array<double, 3>& q, double& best) const {
  const Node& n = nodes_[static_cast<std::size_t>(node)];
  if (n.left < 0) {
    for (std::uint32_t i = n.begin; i < n.end; ++i) best = std::min(best, dist2(q, pts_[i]));
    return;
  }
  // Left holds coordinates <= split, right >= split.
  const double delta = q[n.axis] - n.split;
  const std::int32_t near = delta < 0 ? n.left : n.right;
  const std::int32_t far = delta < 0 ? n.right : n.left;
  search(near, q, best);
  if (delta * delta <= best) search(far, q, best);
}

double KdTree::nearest(const Voxel& q) const {
  if (pts_.empty()) throw Error("KdTree::nearest on an empty tree");
  double best = std::numeric_limits<double>::infinity();
  search(0, to_mm(q, spacing_), best);
  return std::sqrt(best);
}

// ---------------------------------------------------------------------------------------
// Surface distances

std::vector<double> directed_distances(const SurfacePointSet& from, const SurfacePointSet& to) {
  const KdTree tree(to.points, to.spacing);
  std::vector<double> d;
  d.reserve(from.points.size());
  for (const Voxel& p : from.points) d.push_back(tree.nearest(p));
  return d;
}

double percentile(std::vector<double> values, double q) {
  if (values.empty()) throw Error("percentile of an empty list");
  if (!(q >= 0 && q <= 100)) throw Error("percentile rank outside [0, 100]");
  std::sort(values.begin(), values.end());
  const double rank = q / 100.0 * static_cast<double>(values.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(rank));
  const std::size_t hi = std::min(lo + 1, values.size() - 1);
  const double frac = rank - static_cast<double>(lo);
  return values[lo] + frac * (values[hi] - values[lo]);
}

double assd(const SurfacePointSet& a, const SurfacePointSet& b, const std::string& case_id) {
  require_points(a, b, "ASSD", case_id);
  double sab = 0, sba = 0;
  for (double d : directed_distances(a, b)) sab += d;
  for (double d : directed_distances(b, a)) sba += d;
  return (sab + sba) / static_cast<double>(a.points.size() + b.points.size());
}

double hd95(const SurfacePointSet& a, const SurfacePointSet& b, const std::string& case_id) {
  require_points(a, b, "HD95", case_id);
  return percentile(pooled(a, b), 95.0);
}

double hd100(const SurfacePointSet& a, const SurfacePointSet& b, const std::string& case_id) {
  require_points(a, b, "HD", case_id);
  const auto d = pooled(a, b);
  return *std::max_element(d.begin(), d.end());
}

// ---------------------------------------------------------------------------------------
// Components

Components connected_components(const std::vector<std::uint8_t>& mask, const Dims3& dims, int connectivity) {
  check_size("connected_components", dims, mask.size());
  if (connectivity != 6 && connectivity != 26) throw ConfigError("connectivity must be 6 or 26, got " + std::to_string(connectivity));
  std::vector<std::array<int, 3>> offsets;
  for (int dz = -1; dz <= 1; ++dz)
    for (int dy = -1; dy <= 1; ++dy)
      for (int dx = -1; dx <= 1; ++dx) {
        const int manhattan = std::abs(dz) + std::abs(dy) + std::abs(dx);
        if (manhattan == 0 || (connectivity == 6 && manhattan > 1)) continue;
        offsets.push_back({dz, dy, dx});
      }

  Components out;
  std::vector<std::uint8_t> seen(mask.size(), 0);
  std::vector<std::size_t> stack;
  const long d0 = static_cast<long>(dims[0]), d1 = static_cast<long>(dims[1]), d2 = static_cast<long>(dims[2]);
  for (std::size_t start = 0; start < mask.size(); ++start) {
    if (!mask[start] || seen[start]) continue;
    std::size_t size = 0;
    seen[start] = 1;
    stack.push_back(start);
    while (!stack.empty()) {
      const std::size_t v = stack.back();
      stack.pop_back();
      ++size;
      const long z = static_cast<long>(v / (dims[1] * dims[2])), y = static_cast<long>((v / dims[2]) % dims[1]),
                 x = static_cast<long>(v % dims[2]);
      for (const auto& o : offsets) {
        const long nz = z + o[0], ny = y + o[1], nx = x + o[2];
        if (nz < 0 || ny < 0 || nx < 0 || nz >= d0 || ny >= d1 || nx >= d2) continue;
        const auto n = static_cast<std::size_t>((nz * d1 + ny) * d2 + nx);
        if (mask[n] && !seen[n]) {
          seen[n] = 1;
          stack.push_back(n);
        }
      }
    }
    out.sizes.push_back(size);
  }
  std::sort(out.sizes.rbegin(), out.sizes.rend());
  out.count = out.sizes.size();
  return out;
}

// ---------------------------------------------------------------------------------------
// Cases and reports

MetricsReport evaluate_case(const std::vector<std::uint8_t>& pred, const std::vector<std::uint8_t>& gt, const Dims3& dims,
                            const Spacing& spacing, const std::string& case_id, int connectivity) {
  check_size("evaluate_case", dims, pred.size());
  check_size("evaluate_case", dims, gt.size());
  MetricsReport r;
  r.case_id = case_id;
  const Overlap o = overlap_metrics(confusion_counts(pred, gt));
  r.dsc = o.dsc;
  r.iou = o.iou;
  r.precision = o.precision;
  r.recall = o.recall;
  const SurfacePointSet sp = extract_surface(pred, dims, spacing), sg = extract_surface(gt, dims, spacing);
  if (!sp.points.empty() && !sg.points.empty()) {
    r.assd = assd(sp, sg, case_id);
    r.hd95 = hd95(sp, sg, case_id);
  }
  r.cc_pred = connected_components(pred, dims, connectivity).count;
  r.cc_gt = connected_components(gt, dims, connectivity).count;
  return r;
}

namespace {

struct Stat {
  std::vector<double> v;
  void add(double x) { v.push_back(x); }
  double mean() const {
    double s = 0;
    for (double x : v) s += x;
    return v.empty() ? std::nan("") : s / static_cast<double>(v.size());
  }
  double stdev() const {
    if (v.empty()) return std::nan("");
    const double m = mean();
    double s = 0;
    for (double x : v) s += (x - m) * (x - m);
    return std::sqrt(s / static_cast<double>(v.size()));
  }
  double max() const { return v.empty() ? std::nan("") : *std::max_element(v.begin(), v.end()); }
};

std::string num(double v) {
  if (std::isnan(v)) return "nan";
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

std::string opt_num(const std::optional<double>& v) { return v ? num(*v) : "nan"; }

std::string summary_line(const char* tag, const Summary& s) {
  std::ostringstream o;
  o << tag << '\t' << num(s.dsc) << '\t' << num(s.iou) << '\t' << num(s.precision) << '\t' << num(s.recall) << '\t'
    << num(s.assd) << '\t' << num(s.hd95) << '\t' << num(s.cc_pred) << '\t' << num(s.cc_gt) << '\n';
  return o.str();
}

constexpr const char* kReportHeader = "case\tdsc\tiou\tprecision\trecall\tassd_mm\thd95_mm\tcc_pred\tcc_gt";

}  // namespace

Aggregate aggregate(const std::vector<MetricsReport>& reports) {
  if (reports.empty()) throw ConfigError("aggregate: no reports");
  Stat dsc, iou, pr, rc, as, hd, cp, cg;
  Aggregate a;
  a.cases = reports.size();
  for (const auto& r : reports) {
    dsc.add(r.dsc);
    iou.add(r.iou);
    pr.add(r.precision);
    rc.add(r.recall);
    cp.add(static_cast<double>(r.cc_pred));
    cg.add(static_cast<double>(r.cc_gt));
    if (r.assd && r.hd95) {
      as.add(*r.assd);
      hd.add(*r.hd95);
    } else {
      ++a.excluded;
    }
  }
  const auto fill = [&](Summary& s, double (Stat::*f)() const) {
    s = {(dsc.*f)(), (iou.*f)(), (pr.*f)(), (rc.*f)(), (as.*f)(), (hd.*f)(), (cp.*f)(), (cg.*f)()};
  };
  fill(a.mean, &Stat::mean);
  fill(a.std, &Stat::stdev);
  fill(a.max, &Stat::max);
  return a;
}

std::string format_report(const std::vector<MetricsReport>& reports, const std::vector<std::string>& missing) {
  std::ostringstream o;
  o << kReportHeader << '\n';
  for (const auto& r : reports) {
    o << r.case_id << '\t' << num(r.dsc) << '\t' << num(r.iou) << '\t' << num(r.precision) << '\t' << num(r.recall) << '\t'
      << opt_num(r.assd) << '\t' << opt_num(r.hd95) << '\t' << r.cc_pred << '\t' << r.cc_gt << '\n';
  }
  if (!reports.empty()) {
    const Aggregate a = aggregate(reports);
    o << summary_line("#mean", a.mean) << summary_line("#std", a.std) << summary_line("#max", a.max);
    o << "#excluded\t" << a.excluded << '\n';
  }
  if (!missing.empty()) {
    o << "#missing";
    for (const auto& m : missing) o << '\t' << m;
    o << '\n';
  }
  return o.str();
}

void write_report(const std::filesystem::path& path, const std::vector<MetricsReport>& reports, const std::vector<std::string>& missing) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw ParseError(ParseError::Kind::kIo, 0, "cannot write report '" + path.string() + "'");
  out << format_report(reports, missing);
  if (!out) throw ParseError(ParseError::Kind::kIo, 0, "write failed for '" + path.string() + "'");
}

ParsedReport read_report(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ParseError(ParseError::Kind::kIo, 0, "cannot open report '" + path.string() + "'");
  ParsedReport out;
  std::string line;
  std::uint64_t offset = 0;
  if (!std::getline(in, line) || line != kReportHeader) throw ParseError(ParseError::Kind::kBadField, 0, "report header missing");
  offset += line.size() + 1;
  while (std::getline(in, line)) {
    std::vector<std::string> f;
    std::stringstream ss(line);
    std::string item;
    while (std::getline(ss, item, '\t')) f.push_back(item);
    if (!f.empty() && !f[0].empty() && f[0][0] == '#') {
      out.footers[f[0]] = std::vector<std::string>(f.begin() + 1, f.end());
    } else if (f.size() == 9) {
      MetricsReport r;
      const auto opt = [](const std::string& s) -> std::optional<double> {
        if (s == "nan") return std::nullopt;
        return std::stod(s);
      };
      try {
        r.case_id = f[0];
        r.dsc = std::stod(f[1]);
        r.iou = std::stod(f[2]);
        r.precision = std::stod(f[3]);
        r.recall = std::stod(f[4]);
        r.assd = opt(f[5]);
        r.hd95 = opt(f[6]);
        r.cc_pred = std::stoull(f[7]);
        r.cc_gt = std::stoull(f[8]);
      } catch (const std::exception&) {
        throw ParseError(ParseError::Kind::kBadField, offset, "malformed report line");
      }
      out.cases.push_back(r);
    } else if (!line.empty()) {
      throw ParseError(ParseError::Kind::kBadField, offset, "report line has " + std::to_string(f.size()) + " fields, expected 9");
    }
    offset += line.size() + 1;
  }
  return out;
}

}  // namespace vig3d::metrics
