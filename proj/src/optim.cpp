#include "lungmtl/optim.hpp"

#include <cmath>

namespace lungmtl::autodiff {

AdamState AdamState::init(const std::vector<Parameter>& params, AdamConfig cfg) {
  AdamState st;
  st.cfg = cfg;
  st.m.reserve(params.size());
  st.v.reserve(params.size());
  for (const auto& p : params) {
    st.m.emplace_back(p.value.shape);
    st.v.emplace_back(p.value.shape);
  }
  return st;
}

void adam_step(std::vector<Parameter>& params, const std::vector<Tensor>& grads,
               AdamState& state) {
  if (params.size() != grads.size() || params.size() != state.m.size())
    throw ShapeMismatch("adam_step parameter/gradient/state counts differ");
  state.t += 1;
  const double b1 = state.cfg.beta1, b2 = state.cfg.beta2;
  const double bc1 = 1.0 - std::pow(b1, static_cast<double>(state.t));
  const double bc2 = 1.0 - std::pow(b2, static_cast<double>(state.t));
  for (size_t p = 0; p < params.size(); ++p) {
    Tensor& theta = params[p].value;
    const Tensor& g = grads[p];
    if (!same_shape(theta, g))
      throw ShapeMismatch("gradient shape " + shape_str(g.shape) + " for parameter '" +
                          params[p].name + "' " + shape_str(theta.shape));
    Tensor& m = state.m[p];
    Tensor& v = state.v[p];
    for (size_t i = 0; i < theta.values.size(); ++i) {
      const double gi = g.values[i];
      m.values[i] = b1 * m.values[i] + (1.0 - b1) * gi;
      v.values[i] = b2 * v.values[i] + (1.0 - b2) * gi * gi;
      const double mhat = m.values[i] / bc1;
      const double vhat = v.values[i] / bc2;
      theta.values[i] -= state.cfg.lr * mhat / (std::sqrt(vhat) + state.cfg.eps);
    }
  }
}

}  // namespace lungmtl::autodiff
