#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <string>
#include <vector>

#include "vig3d/tape.hpp"

namespace vig3d {

struct GradCheckOptions {
  double step = 1e-5;
  /// Denominator floor of the relative error.
  double floor = 1e-8;
  /// Upper bound on probed entries per tensor; entries are drawn without replacement.
  std::size_t max_probes_per_tensor = std::numeric_limits<std::size_t>::max();
  std::uint64_t probe_seed = 0;
};

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t probes = 0;
  std::string worst;  ///< "tensor[index]" of the worst entry
};

/// Builds a scalar on a fresh tape from leaf inputs.
using ScalarFn = std::function<Var(Tape&, const std::vector<Var>&)>;
/// Builds a scalar on a fresh tape from bound parameters.
using ParamScalarFn = std::function<Var(Tape&)>;

/// Central-difference check of d(fn)/d(inputs). Throws NumericalError on non-finite values.
GradCheckResult gradient_check(const ScalarFn& fn, const std::vector<Tensor5>& inputs,
                               const GradCheckOptions& options = {});

/// Same check against every tensor in `params`; `fn` must bind them with Tape::param.
GradCheckResult gradient_check_params(const ParamScalarFn& fn, const std::vector<Parameter*>& params,
                                      const GradCheckOptions& options = {});

}  // namespace vig3d
