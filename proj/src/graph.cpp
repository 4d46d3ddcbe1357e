#include "vig3d/graph.hpp"

#include <algorithm>
#include <string>

#include "vig3d/error.hpp"
#include "vig3d/ops.hpp"

namespace vig3d::graph {

namespace {

void check_k(std::size_t n, std::size_t k) {
  if (k < 1 || k + 1 > n) {
    throw ConfigError("knn_graph: k must satisfy 1 <= k <= N-1 (k=" + std::to_string(k) +
                      ", N=" + std::to_string(n) + ")");
  }
}

// Row i keeps the k smallest (distance, index) pairs. `fill(i, dist)` writes the
// distances from node i to every node.
template <typename FillFn>
EdgeList select_neighbors(std::size_t n, std::size_t k, FillFn fill) {
  check_k(n, k);
  EdgeList edges;
  edges.num_nodes = n;
  edges.k = k;
  edges.neighbors.resize(n * k);
  std::vector<double> dist(n);
  std::vector<std::pair<double, std::uint32_t>> best;
  best.reserve(k + 1);
  for (std::size_t i = 0; i < n; ++i) {
    fill(i, dist.data());
    best.clear();
    for (std::size_t j = 0; j < n; ++j) {
      if (j == i) continue;
      const std::pair<double, std::uint32_t> cand{dist[j], static_cast<std::uint32_t>(j)};
      if (best.size() == k && !(cand < best.back())) continue;
      best.insert(std::upper_bound(best.begin(), best.end(), cand), cand);
      if (best.size() > k) best.pop_back();
    }
    for (std::size_t s = 0; s < k; ++s) edges.neighbors[i * k + s] = best[s].second;
  }
  return edges;
}

}  // namespace

std::vector<std::pair<std::uint32_t, std::uint32_t>> EdgeList::pairs() const {
  std::vector<std::pair<std::uint32_t, std::uint32_t>> out;
  out.reserve(neighbors.size());
  for (std::size_t i = 0; i < num_nodes; ++i) {
    for (std::uint32_t j : of(i)) out.emplace_back(static_cast<std::uint32_t>(i), j);
  }
  return out;
}

std::vector<GridPos> grid_positions(std::size_t d, std::size_t h, std::size_t w) {
  std::vector<GridPos> pos;
  pos.reserve(d * h * w);
  for (std::size_t z = 0; z < d; ++z)
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x)
        pos.push_back({static_cast<std::uint32_t>(z), static_cast<std::uint32_t>(y), static_cast<std::uint32_t>(x)});
  return pos;
}

NodeGraph grid_to_nodes(const Tensor5& feature_map, std::size_t batch_index) {
  const Shape5 s = feature_map.shape();
  if (batch_index >= s.n()) throw DimensionMismatch("grid_to_nodes", "batch", s.n(), batch_index);
  const std::size_t n = s.spatial();
  NodeGraph g;
  g.features = Tensor5::matrix(n, s.c());
  for (std::size_t c = 0; c < s.c(); ++c) {
    const double* src = feature_map.channel(batch_index, c);
    for (std::size_t i = 0; i < n; ++i) g.features[i * s.c() + c] = src[i];
  }
  g.positions = grid_positions(s.d(), s.h(), s.w());
  return g;
}

Tensor5 nodes_to_grid(const Tensor5& nodes, std::size_t d, std::size_t h, std::size_t w) {
  const Shape5 s = nodes.shape();
  if (s.rows() != d * h * w) throw DimensionMismatch("nodes_to_grid", "nodes", d * h * w, s.rows());
  const std::size_t c = s.cols();
  Tensor5 out(Shape5(1, c, d, h, w));
  for (std::size_t ch = 0; ch < c; ++ch) {
    double* dst = out.channel(0, ch);
    for (std::size_t i = 0; i < s.rows(); ++i) dst[i] = nodes[i * c + ch];
  }
  return out;
}

Var grid_to_nodes(Var feature_map, std::size_t batch_index) {
  Tensor5 table = grid_to_nodes(feature_map.value(), batch_index).features;
  return feature_map.tape->record("grid_to_nodes", std::move(table), {feature_map}, [feature_map, batch_index](Tape& t, const Tensor5& g) {
    const std::size_t c = g.shape().cols();
    const std::size_t n = g.shape().rows();
    Tensor5& gx = t.grad_buffer(feature_map);
    for (std::size_t ch = 0; ch < c; ++ch) {
      double* dst = gx.channel(batch_index, ch);
      for (std::size_t i = 0; i < n; ++i) dst[i] += g[i * c + ch];
    }
  });
}

Var nodes_to_grid(Var nodes, std::size_t d, std::size_t h, std::size_t w) {
  Tensor5 map = nodes_to_grid(nodes.value(), d, h, w);
  return nodes.tape->record("nodes_to_grid", std::move(map), {nodes}, [nodes](Tape& t, const Tensor5& g) {
    const std::size_t c = g.shape().c();
    const std::size_t n = g.shape().spatial();
    Tensor5& gx = t.grad_buffer(nodes);
    for (std::size_t ch = 0; ch < c; ++ch) {
      const double* src = g.channel(0, ch);
      for (std::size_t i = 0; i < n; ++i) gx[i * c + ch] += src[i];
    }
  });
}

EdgeList knn_graph(const Tensor5& features, std::size_t k) {
  const std::size_t n = features.shape().rows();
  const std::size_t c = features.shape().cols();
  // Feature-major copy so the distance loop runs across nodes; each pair still sums its
  // squared differences in feature order.
  std::vector<double> cols(n * c);
  for (std::size_t j = 0; j < n; ++j)
    for (std::size_t q = 0; q < c; ++q) cols[q * n + j] = features[j * c + q];
  return select_neighbors(n, k, [&](std::size_t i, double* dist) {
    std::fill(dist, dist + n, 0.0);
    for (std::size_t q = 0; q < c; ++q) {
      const double xi = cols[q * n + i];
      const double* col = cols.data() + q * n;
      for (std::size_t j = 0; j < n; ++j) {
        const double diff = col[j] - xi;
        dist[j] += diff * diff;
      }
    }
  });
}

EdgeList knn_graph_spatial(const std::vector<GridPos>& positions, std::size_t k) {
  const std::size_t n = positions.size();
  return select_neighbors(n, k, [&](std::size_t i, double* dist) {
    for (std::size_t j = 0; j < n; ++j) {
      double s = 0.0;
      for (int a = 0; a < 3; ++a) {
        const double diff = static_cast<double>(positions[j][a]) - static_cast<double>(positions[i][a]);
        s += diff * diff;
      }
      dist[j] = s;
    }
  });
}

Var max_relative_aggregate(Var features, const EdgeList& edges) {
  const Shape5 s = features.shape();
  const std::size_t n = s.rows();
  const std::size_t c = s.cols();
  if (edges.num_nodes != n || edges.neighbors.size() != n * edges.k) {
    throw DimensionMismatch("max_relative_aggregate", "nodes", n, edges.num_nodes);
  }
  if (edges.k == 0) throw ConfigError("max_relative_aggregate: node without neighbours");
  const double* x = features.value().raw();
  Tensor5 out = Tensor5::matrix(n, 2 * c);
  std::vector<std::uint32_t> argmax(n * c);
  for (std::size_t i = 0; i < n; ++i) {
    const double* xi = x + i * c;
    double* row = out.raw() + i * 2 * c;
    std::copy_n(xi, c, row);
    for (std::size_t q = 0; q < c; ++q) {
      std::uint32_t best = 0;
      double best_v = 0.0;
      bool first = true;
      for (std::uint32_t j : edges.of(i)) {
        const double v = x[j * c + q] - xi[q];
        if (first || v > best_v || (v == best_v && j < best)) {
          best = j;
          best_v = v;
          first = false;
        }
      }
      row[c + q] = best_v;
      argmax[i * c + q] = best;
    }
  }
  return features.tape->record("max_relative_aggregate", std::move(out), {features}, [features, argmax = std::move(argmax), n, c](Tape& t, const Tensor5& g) {
    Tensor5& gx = t.grad_buffer(features);
    for (std::size_t i = 0; i < n; ++i) {
      const double* gr = g.raw() + i * 2 * c;
      for (std::size_t q = 0; q < c; ++q) {
        gx[i * c + q] += gr[q] - gr[c + q];
        gx[argmax[i * c + q] * c + q] += gr[c + q];
      }
    }
  });
}

Var graph_conv(Var features, const EdgeList& edges, const LinearVars& update) {
  const std::size_t c = features.shape().cols();
  const Shape5 ws = update.weight.shape();
  if (ws.cols() != 2 * c) throw DimensionMismatch("graph_conv", "update_in", 2 * c, ws.cols());
  if (ws.rows() != c) throw DimensionMismatch("graph_conv", "update_out", c, ws.rows());
  return ops::linear(max_relative_aggregate(features, edges), update.weight, update.bias);
}

Var vig3d_block(Var features, std::size_t k, const GrapherVars& params, KnnSpace space,
                const std::vector<GridPos>* positions) {
  Tape& tape = *features.tape;
  Var h = ops::linear(features, params.w_in.weight, params.w_in.bias);
  tape.note("knn_graph");
  EdgeList edges;
  if (space == KnnSpace::kSpatial) {
    if (positions == nullptr) throw ConfigError("vig3d_block: spatial KNN requires node positions");
    edges = knn_graph_spatial(*positions, k);
  } else {
    edges = knn_graph(h.value(), k);
  }
  Var g = graph_conv(h, edges, params.update);
  Var y = ops::add(ops::linear(ops::gelu(g), params.w_out.weight, params.w_out.bias), features);
  Var f = y;
  for (std::size_t l = 0; l < params.ffn.size(); ++l) {
    f = ops::linear(f, params.ffn[l].weight, params.ffn[l].bias);
    if (l + 1 < params.ffn.size()) f = ops::gelu(f);
  }
  return params.ffn.empty() ? y : ops::add(f, y);
}

}  // namespace vig3d::graph
