#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <utility>
#include <vector>

#include "vig3d/tape.hpp"
#include "vig3d/tensor.hpp"

// Voxel-grid <-> node-graph conversion, exact KNN edges, max-relative aggregation and
// the ViG3D block built from them.
namespace vig3d::graph {

using GridPos = std::array<std::uint32_t, 3>;

/// K nearest neighbours per node. Row i holds the sources feeding target i, ordered by
/// (squared distance, node index) ascending.
struct EdgeList {
  std::size_t num_nodes = 0;
  std::size_t k = 0;
  std::vector<std::uint32_t> neighbors;  ///< num_nodes * k

  std::span<const std::uint32_t> of(std::size_t node) const { return {neighbors.data() + node * k, k}; }
  /// (target, source) pairs, exactly k per target.
  std::vector<std::pair<std::uint32_t, std::uint32_t>> pairs() const;
};

/// Flattened voxel nodes with grid coordinates and (optionally) KNN edges.
struct NodeGraph {
  Tensor5 features;  ///< matrix N x C, row-major voxel order
  std::vector<GridPos> positions;
  EdgeList edges;

  std::size_t num_nodes() const { return features.shape().rows(); }
};

enum class KnnSpace {
  kFeature,  ///< squared Euclidean distance between (projected) node features
  kSpatial,  ///< squared Euclidean distance between grid coordinates
};

/// Row-major voxel enumeration of a d x h x w grid.
std::vector<GridPos> grid_positions(std::size_t d, std::size_t h, std::size_t w);

/// Node table of one batch entry; edges left empty.
NodeGraph grid_to_nodes(const Tensor5& feature_map, std::size_t batch_index);
/// Inverse of grid_to_nodes: (1, C, d, h, w) map from an N x C table.
Tensor5 nodes_to_grid(const Tensor5& nodes, std::size_t d, std::size_t h, std::size_t w);

/// Differentiable forms of the two conversions.
Var grid_to_nodes(Var feature_map, std::size_t batch_index);
Var nodes_to_grid(Var nodes, std::size_t d, std::size_t h, std::size_t w);

/// Exact KNN over the rows of an N x C matrix. Requires 1 <= k <= N-1 (ConfigError otherwise).
EdgeList knn_graph(const Tensor5& features, std::size_t k);
EdgeList knn_graph_spatial(const std::vector<GridPos>& positions, std::size_t k);

/// Row i -> [x_i, max_{j in N(i)} (x_j - x_i)], an N x 2C matrix. The subgradient of the
/// max routes to the arg-max neighbour; ties go to the smallest node index.
Var max_relative_aggregate(Var features, const EdgeList& edges);

struct LinearVars {
  Var weight;
  std::optional<Var> bias;
};

/// update(max_relative_aggregate(features)), update mapping 2C -> C.
Var graph_conv(Var features, const EdgeList& edges, const LinearVars& update);

struct GrapherVars {
  LinearVars w_in;    ///< C -> C
  LinearVars update;  ///< 2C -> C
  LinearVars w_out;   ///< C -> C
  std::vector<LinearVars> ffn;  ///< C -> hidden -> ... -> C, GeLU between layers
};

/// Graph stage Y = gelu(graph_conv(X W_in)) W_out + X, then Z = FFN(Y) + Y.
/// KNN edges are rebuilt from X W_in on every call (or from `positions` in spatial mode).
Var vig3d_block(Var features, std::size_t k, const GrapherVars& params, KnnSpace space = KnnSpace::kFeature,
                const std::vector<GridPos>* positions = nullptr);

}  // namespace vig3d::graph
