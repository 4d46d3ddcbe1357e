#include "vig3d/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "vig3d/error.hpp"

namespace vig3d {

namespace {

std::vector<std::size_t> probe_indices(std::size_t n, const GradCheckOptions& o, std::uint64_t salt) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  if (n > o.max_probes_per_tensor) {
    std::mt19937_64 rng(o.probe_seed ^ (salt * 0x9E3779B97F4A7C15ull));
    std::shuffle(idx.begin(), idx.end(), rng);
    idx.resize(o.max_probes_per_tensor);
    std::sort(idx.begin(), idx.end());
  }
  return idx;
}

double scalar_of(const Tensor5& t) {
  if (t.numel() != 1) throw DimensionMismatch("gradient_check", "numel", 1, t.numel());
  if (!std::isfinite(t[0])) throw NumericalError("gradient_check: non-finite objective");
  return t[0];
}

void update(GradCheckResult& r, double analytic, double numeric, const GradCheckOptions& o, const std::string& where) {
  if (!std::isfinite(analytic) || !std::isfinite(numeric)) {
    throw NumericalError("gradient_check: non-finite gradient at " + where);
  }
  const double denom = std::max({std::abs(analytic), std::abs(numeric), o.floor});
  const double rel = std::abs(analytic - numeric) / denom;
  ++r.probes;
  if (r.probes == 1 || rel > r.max_rel_error) {
    r.max_rel_error = rel;
    r.worst = where;
  }
}

}  // namespace

GradCheckResult gradient_check(const ScalarFn& fn, const std::vector<Tensor5>& inputs, const GradCheckOptions& options) {
  std::vector<Tensor5> analytic;
  {
    Tape tape;
    std::vector<Var> vars;
    for (const Tensor5& in : inputs) {
      if (!in.all_finite()) throw NumericalError("gradient_check: non-finite input");
      vars.push_back(tape.input(in));
    }
    Var out = fn(tape, vars);
    scalar_of(out.value());
    tape.backward(out);
    for (const Var& v : vars) {
      const Tensor5* g = tape.grad(v);
      analytic.push_back(g ? *g : Tensor5(v.shape()));
    }
  }

  auto evaluate = [&](const std::vector<Tensor5>& xs) {
    Tape tape(false);
    std::vector<Var> vars;
    for (const Tensor5& in : xs) vars.push_back(tape.input(in));
    return scalar_of(fn(tape, vars).value());
  };

  GradCheckResult result;
  std::vector<Tensor5> probe = inputs;
  for (std::size_t t = 0; t < inputs.size(); ++t) {
    for (std::size_t i : probe_indices(inputs[t].numel(), options, t)) {
      const double x0 = inputs[t][i];
      probe[t][i] = x0 + options.step;
      const double fp = evaluate(probe);
      probe[t][i] = x0 - options.step;
      const double fm = evaluate(probe);
      probe[t][i] = x0;
      update(result, analytic[t][i], (fp - fm) / (2.0 * options.step), options,
             "input" + std::to_string(t) + "[" + std::to_string(i) + "]");
    }
  }
  return result;
}

GradCheckResult gradient_check_params(const ParamScalarFn& fn, const std::vector<Parameter*>& params,
                                      const GradCheckOptions& options) {
  for (Parameter* p : params) p->zero_grad();
  {
    Tape tape;
    Var out = fn(tape);
    scalar_of(out.value());
    tape.backward(out);
  }
  std::vector<Tensor5> analytic;
  for (Parameter* p : params) analytic.push_back(p->grad);

  auto evaluate = [&] {
    Tape tape(false);
    return scalar_of(fn(tape).value());
  };

  GradCheckResult result;
  for (std::size_t t = 0; t < params.size(); ++t) {
    Parameter& p = *params[t];
    for (std::size_t i : probe_indices(p.value.numel(), options, t)) {
      const double x0 = p.value[i];
      p.value[i] = x0 + options.step;
      const double fp = evaluate();
      p.value[i] = x0 - options.step;
      const double fm = evaluate();
      p.value[i] = x0;
      update(result, analytic[t][i], (fp - fm) / (2.0 * options.step), options,
             p.name + "[" + std::to_string(i) + "]");
    }
  }
  return result;
}

}  // namespace vig3d
