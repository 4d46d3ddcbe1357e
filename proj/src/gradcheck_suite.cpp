#include "vig3d/gradcheck_suite.hpp"

#include <algorithm>
#include <functional>
#include <random>

#include "vig3d/gradcheck.hpp"
#include "vig3d/graph.hpp"
#include "vig3d/network.hpp"
#include "vig3d/ops.hpp"
#include "vig3d/training.hpp"

namespace vig3d {
namespace {

using graph::EdgeList;
using graph::GrapherVars;
using graph::LinearVars;

Tensor5 uniform(Shape5 s, std::uint64_t seed, double lo, double hi) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(lo, hi);
  Tensor5 t(s);
  for (double& v : t.data()) v = u(rng);
  return t;
}

Tensor5 labels(Shape5 s, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  Tensor5 t(s);
  for (double& v : t.data()) v = double(rng() % 2);
  return t;
}

// <x, r> for a fixed random r. Recorded under its own name so that a broken op never
// contaminates the entries of ops it is not part of.
Var probe(Var x, std::uint64_t seed) {
  Tensor5 r = uniform(x.shape(), seed ^ 0x9E3779B97F4A7C15ull, -1, 1);
  double s = 0;
  const auto xv = x.value().data();
  for (std::size_t i = 0; i < xv.size(); ++i) s += r[i] * xv[i];
  return x.tape->record("probe", Tensor5(Shape5::scalar(), s), {x}, [x, r = std::move(r)](Tape& t, const Tensor5& g) {
    auto gx = t.grad_buffer(x).data();
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g[0] * r[i];
  });
}

struct Input {
  Shape5 shape;
  double lo = -1, hi = 1;
};

struct Case {
  std::string name;
  std::function<Var(Tape&, const std::vector<Var>&, std::uint64_t)> fn;
  std::vector<Input> inputs;
  // Keeps piecewise-linear ops away from their kinks.
  std::function<void(std::vector<Tensor5>&)> adjust;
};

ops::ConvGeometry geom(std::size_t stride, std::size_t pad) { return {{stride, stride, stride}, {pad, pad, pad}}; }

void away_from_zero(Tensor5& t) {
  for (double& v : t.data()) v = (v < 0 ? -1 : 1) * (0.1 + 0.9 * std::abs(v));
}

// n x c features, then w_in, update, w_out and a two-layer FFN.
std::vector<Input> block_inputs(std::size_t n, std::size_t c, std::size_t hidden) {
  return {{Shape5::matrix(n, c)},        {Shape5::matrix(c, c)}, {Shape5::vector(c)},
          {Shape5::matrix(c, 2 * c)},    {Shape5::vector(c)},    {Shape5::matrix(c, c)},
          {Shape5::vector(c)},           {Shape5::matrix(hidden, c)}, {Shape5::vector(hidden)},
          {Shape5::matrix(c, hidden)},   {Shape5::vector(c)}};
}

GrapherVars bind_block(const std::vector<Var>& v) {
  return {{v[1], v[2]}, {v[3], v[4]}, {v[5], v[6]}, {{v[7], v[8]}, {v[9], v[10]}}};
}

std::vector<Case> op_cases() {
  using V = const std::vector<Var>&;
  std::vector<Case> cases;
  auto add = [&cases](std::string name, auto fn, std::vector<Input> in, std::function<void(std::vector<Tensor5>&)> adj = {}) {
    cases.push_back({std::move(name), fn, std::move(in), std::move(adj)});
  };

  add("conv3d", [](Tape&, V v, std::uint64_t s) { return probe(ops::conv3d(v[0], v[1], v[2], geom(1, 1)), s); },
      {{Shape5(2, 2, 3, 3, 3)}, {Shape5(3, 2, 3, 3, 3)}, {Shape5::vector(3)}});
  add("conv3d_stride2", [](Tape&, V v, std::uint64_t s) { return probe(ops::conv3d(v[0], v[1], v[2], geom(2, 1)), s); },
      {{Shape5(2, 2, 4, 4, 4)}, {Shape5(3, 2, 3, 3, 3)}, {Shape5::vector(3)}});
  add("conv_transpose3d", [](Tape&, V v, std::uint64_t s) { return probe(ops::conv_transpose3d(v[0], v[1], v[2], geom(2, 0)), s); },
      {{Shape5(2, 3, 2, 2, 2)}, {Shape5(3, 2, 2, 2, 2)}, {Shape5::vector(2)}});
  add("instance_norm3d", [](Tape&, V v, std::uint64_t s) { return probe(ops::instance_norm3d(v[0], v[1], v[2]), s); },
      {{Shape5(2, 3, 2, 3, 2)}, {Shape5::vector(3)}, {Shape5::vector(3)}});
  add("gelu", [](Tape&, V v, std::uint64_t s) { return probe(ops::gelu(v[0]), s); }, {{Shape5(1, 2, 2, 2, 2), -3, 3}});
  add("relu", [](Tape&, V v, std::uint64_t s) { return probe(ops::relu(v[0]), s); }, {{Shape5(1, 2, 2, 2, 2)}},
      [](std::vector<Tensor5>& t) { away_from_zero(t[0]); });
  add("sigmoid", [](Tape&, V v, std::uint64_t s) { return probe(ops::sigmoid(v[0]), s); }, {{Shape5(1, 2, 2, 2, 2), -4, 4}});
  add("linear", [](Tape&, V v, std::uint64_t s) { return probe(ops::linear(v[0], v[1], v[2]), s); },
      {{Shape5::matrix(5, 4)}, {Shape5::matrix(3, 4)}, {Shape5::vector(3)}});
  add("global_avg_pool", [](Tape&, V v, std::uint64_t s) { return probe(ops::global_avg_pool(v[0]), s); }, {{Shape5(2, 3, 2, 2, 3)}});
  add("softmax_channel", [](Tape&, V v, std::uint64_t s) { return probe(ops::softmax_channel(v[0]), s); }, {{Shape5(2, 3, 2, 2, 2), -3, 3}});
  add("add", [](Tape&, V v, std::uint64_t s) { return probe(ops::add(v[0], v[1]), s); }, {{Shape5(1, 2, 2, 2, 2)}, {Shape5(1, 2, 2, 2, 2)}});
  add("add_broadcast_batch", [](Tape&, V v, std::uint64_t s) { return probe(ops::add_broadcast_batch(v[0], v[1]), s); },
      {{Shape5(2, 2, 2, 1, 2)}, {Shape5(1, 2, 2, 1, 2)}});
  add("scale", [](Tape&, V v, std::uint64_t s) { return probe(ops::scale(v[0], -0.7), s); }, {{Shape5(1, 2, 2, 2, 2)}});
  add("scale_channels", [](Tape&, V v, std::uint64_t s) { return probe(ops::scale_channels(v[0], v[1]), s); },
      {{Shape5(2, 3, 2, 2, 2)}, {Shape5(2, 3, 1, 1, 1)}});
  add("concat_channels", [](Tape&, V v, std::uint64_t s) { return probe(ops::concat_channels(v[0], v[1]), s); },
      {{Shape5(2, 1, 2, 2, 2)}, {Shape5(2, 3, 2, 2, 2)}});
  add("concat_batch", [](Tape&, V v, std::uint64_t s) { return probe(ops::concat_batch({v[0], v[1]}), s); },
      {{Shape5(1, 2, 2, 2, 2)}, {Shape5(1, 2, 2, 2, 2)}});
  add("select_channel", [](Tape&, V v, std::uint64_t s) { return probe(ops::select_channel(v[0], 1), s); }, {{Shape5(2, 3, 2, 2, 1)}});
  add("reshape", [](Tape&, V v, std::uint64_t s) { return probe(ops::reshape(v[0], Shape5::matrix(4, 6)), s); }, {{Shape5(1, 3, 2, 2, 2)}});
  add("sum", [](Tape&, V v, std::uint64_t) { return ops::sum(v[0]); }, {{Shape5(1, 2, 2, 2, 2)}});
  add("weighted_sum", [](Tape&, V v, std::uint64_t s) { return ops::weighted_sum({probe(v[0], s), probe(v[1], s + 1)}, {0.3, -1.7}); },
      {{Shape5(1, 2, 2, 2, 1)}, {Shape5(1, 2, 2, 1, 2)}});

  add("grid_to_nodes", [](Tape&, V v, std::uint64_t s) { return probe(graph::grid_to_nodes(v[0], 1), s); }, {{Shape5(2, 3, 2, 2, 2)}});
  add("nodes_to_grid", [](Tape&, V v, std::uint64_t s) { return probe(graph::nodes_to_grid(v[0], 2, 1, 3), s); }, {{Shape5::matrix(6, 3)}});
  add("max_relative_aggregate",
      [](Tape&, V v, std::uint64_t s) {
        const EdgeList e = graph::knn_graph(uniform(Shape5::matrix(10, 2), s + 9, -1, 1), 3);
        return probe(graph::max_relative_aggregate(v[0], e), s);
      },
      {{Shape5::matrix(10, 3)}});
  add("graph_conv",
      [](Tape&, V v, std::uint64_t s) {
        const EdgeList e = graph::knn_graph(uniform(Shape5::matrix(10, 2), s + 9, -1, 1), 3);
        return probe(graph::graph_conv(v[0], e, LinearVars{v[1], v[2]}), s);
      },
      {{Shape5::matrix(10, 3)}, {Shape5::matrix(3, 6)}, {Shape5::vector(3)}});
  add("vig3d_block", [](Tape&, V v, std::uint64_t s) { return probe(graph::vig3d_block(v[0], 3, bind_block(v)), s); },
      block_inputs(10, 3, 6));

  add("dice_loss",
      [](Tape&, V v, std::uint64_t s) { return train::dice_loss(v[0], labels(Shape5(2, 1, 2, 2, 2), s + 5), 1e-5); },
      {{Shape5(2, 1, 2, 2, 2), 0.05, 0.95}});
  add("cross_entropy_loss",
      [](Tape&, V v, std::uint64_t s) { return train::cross_entropy_loss(v[0], labels(Shape5(2, 1, 2, 2, 2), s + 5)); },
      {{Shape5(2, 2, 2, 2, 2), -3, 3}});
  add("deep_supervision_loss",
      [](Tape&, V v, std::uint64_t s) {
        return train::deep_supervision_loss({v[0], v[1]}, labels(Shape5(1, 1, 4, 4, 4), s + 5), train::LossConfig{}).total;
      },
      {{Shape5(1, 2, 4, 4, 4), -3, 3}, {Shape5(1, 2, 2, 2, 2), -3, 3}});
  return cases;
}

void merge(SuiteEntry& e, const GradCheckResult& r) {
  e.probes += r.probes;
  if (r.max_rel_error >= e.max_rel_error) {
    e.max_rel_error = r.max_rel_error;
    e.worst = r.worst;
  }
}

}  // namespace

std::vector<SuiteEntry> run_gradient_suite(const std::vector<std::uint64_t>& seeds, bool include_model) {
  std::vector<SuiteEntry> out;
  for (const Case& c : op_cases()) {
    SuiteEntry e{c.name, 0, kOpTolerance, 0, ""};
    for (std::uint64_t seed : seeds) {
      std::vector<Tensor5> inputs;
      std::uint64_t s = seed * 1000;
      for (const Input& in : c.inputs) inputs.push_back(uniform(in.shape, s++, in.lo, in.hi));
      if (c.adjust) c.adjust(inputs);
      const auto fn = [&c, seed](Tape& t, const std::vector<Var>& v) { return c.fn(t, v, seed); };
      merge(e, gradient_check(fn, inputs));
    }
    out.push_back(std::move(e));
  }

  if (include_model) {
    SuiteEntry e{"model_micro", 0, kModelTolerance, 0, ""};
    for (std::uint64_t seed : seeds) {
      Model model(ModelConfig::micro(), seed);
      // Zero-initialised biases leave ReLUs exactly on their kink; move to a generic point.
      std::mt19937_64 rng(seed);
      std::uniform_real_distribution<double> jitter(-0.1, 0.1);
      for (Parameter* p : model.parameters())
        for (double& v : p->value.data()) v += jitter(rng);
      const Tensor5 image = uniform(Shape5(1, 1, 8, 8, 8), seed + 10, 0, 1);
      const Tensor5 target = labels(Shape5(1, 1, 8, 8, 8), seed + 20);
      GradCheckOptions opt;
      opt.max_probes_per_tensor = 16;
      opt.probe_seed = seed;
      merge(e, gradient_check_params(
                   [&](Tape& tape) {
                     return train::deep_supervision_loss(model.forward(tape.constant(image)).heads, target, train::LossConfig{}).total;
                   },
                   model.parameters(), opt));
    }
    out.push_back(std::move(e));
  }
  return out;
}

}  // namespace vig3d
