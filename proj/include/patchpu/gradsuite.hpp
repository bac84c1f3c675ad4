#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include "patchpu/autodiff.hpp"

namespace patchpu {

/// Every loss, the negative estimator with attached targets, the attention
/// head and a small two-block embedder, packaged like registered ops.
const std::vector<RegisteredOp>& composite_checks();

struct GradSuiteOptions {
  std::size_t points = 100;
  double eps = 1e-5;
  double tolerance = 1e-4;
  std::uint64_t seed = 1;
};

/// Runs the finite-difference check over registered_ops() followed by
/// composite_checks(); `progress` sees each report as it completes.
std::vector<GradCheckReport> run_gradient_suite(const GradSuiteOptions& opts,
                                                const std::function<void(const GradCheckReport&)>& progress = {});

}  // namespace patchpu
