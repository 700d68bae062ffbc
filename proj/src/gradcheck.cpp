#include "lungmtl/gradcheck.hpp"

#include <cmath>

namespace lungmtl::autodiff {

namespace {

double eval_loss(const LossBuilder& build, const std::vector<Parameter>& params) {
  Tape tape;
  std::vector<Tape::Id> ids;
  ids.reserve(params.size());
  for (const auto& p : params) ids.push_back(tape.leaf(p));
  return tape.value(build(tape, ids)).item();
}

}  // namespace

GradCheckReport grad_check(const LossBuilder& build, std::vector<Parameter> params,
                           double tolerance, double step) {
  GradCheckReport report;

  // reverse-mode gradients once
  Tape tape;
  std::vector<Tape::Id> ids;
  for (const auto& p : params) ids.push_back(tape.leaf(p));
  Tape::Id loss = build(tape, ids);
  tape.backward(loss);
  std::vector<Tensor> rev;
  rev.reserve(params.size());
  for (Tape::Id id : ids) rev.push_back(tape.grad(id));

  for (size_t p = 0; p < params.size(); ++p) {
    for (size_t i = 0; i < params[p].value.values.size(); ++i) {
      const double keep = params[p].value.values[i];
      params[p].value.values[i] = keep + step;
      const double up = eval_loss(build, params);
      params[p].value.values[i] = keep - step;
      const double down = eval_loss(build, params);
      params[p].value.values[i] = keep;

      const double fd = (up - down) / (2.0 * step);
      const double rv = rev[p].values[i];
      const double denom = std::max({std::abs(fd), std::abs(rv), 1e-8});
      const double rel = std::abs(fd - rv) / denom;
      if (rel > report.max_rel_error) report.max_rel_error = rel;
      if (rel > tolerance)
        report.failures.push_back(params[p].name + "[" + std::to_string(i) +
                                  "]: rev=" + std::to_string(rv) + ", fd=" + std::to_string(fd));
    }
  }
  report.pass = report.failures.empty();
  return report;
}

}  // namespace lungmtl::autodiff
