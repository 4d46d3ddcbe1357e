#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

// Segmentation scores on binary voxel masks. Masks are row-major (d, h, w) byte arrays;
// any nonzero value is foreground.
namespace vig3d::metrics {

using Dims3 = std::array<std::size_t, 3>;
using Spacing = std::array<double, 3>;
using Voxel = std::array<std::int32_t, 3>;

struct ConfusionCounts {
  std::uint64_t tp = 0;
  std::uint64_t fp = 0;
  std::uint64_t fn = 0;
  std::uint64_t tn = 0;

  std::uint64_t total() const { return tp + fp + fn + tn; }
  bool operator==(const ConfusionCounts&) const = default;
};

ConfusionCounts confusion_counts(const std::vector<std::uint8_t>& pred, const std::vector<std::uint8_t>& gt);

struct Overlap {
  double dsc = 0;
  double iou = 0;
  double precision = 0;
  double recall = 0;
};

/// Two empty masks score 1 everywhere. A ratio whose denominator is zero while the other
/// mask is non-empty scores 0.
Overlap overlap_metrics(const ConfusionCounts& c);

struct SurfacePointSet {
  std::vector<Voxel> points;  ///< (z, y, x), in scan order
  Spacing spacing{1, 1, 1};
};

/// Foreground voxels with at least one face neighbour that is background or outside.
SurfacePointSet extract_surface(const std::vector<std::uint8_t>& mask, const Dims3& dims, const Spacing& spacing);

/// Exact Euclidean nearest-neighbour search over one point set, in mm.
class KdTree {
 public:
  KdTree(const std::vector<Voxel>& points, const Spacing& spacing);
  /// Distance in mm from `q` to the closest stored point. Requires a non-empty tree.
  double nearest(const Voxel& q) const;
  std::size_t size() const { return pts_.size(); }

 private:
  struct Node {
    std::uint32_t begin, end;  // range into pts_ when leaf
    std::int32_t left = -1, right = -1;
    std::uint8_t axis = 0;
    double split = 0;
  };
  std::int32_t build(std::uint32_t begin, std::uint32_t end);
  void search(std::int32_t node, const std::array<double, 3>& q, double& best) const;

  std::vector<std::array<double, 3>> pts_;
  std::vector<Node> nodes_;
  Spacing spacing_;
};

/// For each point of `from`, the distance to the nearest point of `to`.
std::vector<double> directed_distances(const SurfacePointSet& from, const SurfacePointSet& to);

/// UndefinedMetric (carrying `case_id`) when either set is empty.
double assd(const SurfacePointSet& a, const SurfacePointSet& b, const std::string& case_id = "");
/// 95th percentile, with linear interpolation, of both directed distance lists pooled.
double hd95(const SurfacePointSet& a, const SurfacePointSet& b, const std::string& case_id = "");
double hd100(const SurfacePointSet& a, const SurfacePointSet& b, const std::string& case_id = "");
/// Percentile `q` in [0, 100] of `values` by linear interpolation between order statistics.
double percentile(std::vector<double> values, double q);

struct Components {
  std::size_t count = 0;
  std::vector<std::size_t> sizes;  ///< descending
};

/// Flood fill with face (6) or face/edge/corner (26) adjacency; ConfigError otherwise.
Components connected_components(const std::vector<std::uint8_t>& mask, const Dims3& dims, int connectivity);

struct MetricsReport {
  std::string case_id;
  double dsc = 0;
  double iou = 0;
  double precision = 0;
  double recall = 0;
  /// Absent when either surface is empty.
  std::optional<double> assd;
  std::optional<double> hd95;
  std::size_t cc_pred = 0;
  std::size_t cc_gt = 0;
};

MetricsReport evaluate_case(const std::vector<std::uint8_t>& pred, const std::vector<std::uint8_t>& gt, const Dims3& dims,
                            const Spacing& spacing, const std::string& case_id, int connectivity = 26);

struct Summary {
  double dsc = 0, iou = 0, precision = 0, recall = 0, assd = 0, hd95 = 0, cc_pred = 0, cc_gt = 0;
};

struct Aggregate {
  std::size_t cases = 0;
  /// Cases whose distance metrics are undefined; they are left out of the assd/hd95 statistics.
  std::size_t excluded = 0;
  Summary mean, std, max;  ///< std is the population standard deviation
};

/// ConfigError on an empty list.
Aggregate aggregate(const std::vector<MetricsReport>& reports);

/// Header, one tab-separated line per case, then `#mean` / `#std` / `#max` footers,
/// `#excluded` with its count and, if any, `#missing` listing absent cases.
std::string format_report(const std::vector<MetricsReport>& reports, const std::vector<std::string>& missing = {});
void write_report(const std::filesystem::path& path, const std::vector<MetricsReport>& reports,
                  const std::vector<std::string>& missing = {});

struct ParsedReport {
  std::vector<MetricsReport> cases;
  std::map<std::string, std::vector<std::string>> footers;  ///< "#mean" -> fields after the tag
};
ParsedReport read_report(const std::filesystem::path& path);

}  // namespace vig3d::metrics
