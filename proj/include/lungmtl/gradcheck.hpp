#pragma once

#include <functional>
#include <string>
#include <vector>

#include "lungmtl/tape.hpp"

namespace lungmtl::autodiff {

// Compares reverse-mode gradients against central finite differences. The
// builder receives a fresh tape plus the leaf ids of `params` (same order)
// and returns the scalar loss id.
struct GradCheckReport {
  double max_rel_error = 0.0;
  bool pass = false;
  std::vector<std::string> failures;  // "param[i]: rev=..., fd=..."
};

using LossBuilder = std::function<Tape::Id(Tape&, const std::vector<Tape::Id>&)>;

GradCheckReport grad_check(const LossBuilder& build, std::vector<Parameter> params,
                           double tolerance, double step = 1e-5);

}  // namespace lungmtl::autodiff
