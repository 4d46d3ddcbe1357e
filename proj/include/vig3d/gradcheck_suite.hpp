#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

namespace vig3d {

/// Worst finite-difference agreement of one differentiable op across the suite's seeds.
struct SuiteEntry {
  std::string name;
  double max_rel_error = 0;
  double tolerance = 0;
  std::size_t probes = 0;
  std::string worst;

  bool passed() const { return max_rel_error < tolerance; }
};

inline constexpr double kOpTolerance = 1e-4;
inline constexpr double kModelTolerance = 1e-3;

/// Central-difference check of every differentiable op (tolerance 1e-4) and of the
/// micro-profile total loss with respect to all parameters (1e-3), once per seed.
std::vector<SuiteEntry> run_gradient_suite(const std::vector<std::uint64_t>& seeds = {1, 2, 3}, bool include_model = true);

}  // namespace vig3d
