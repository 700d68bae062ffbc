#pragma once

#include <vector>

#include "lungmtl/tensor.hpp"

namespace lungmtl::autodiff {

struct AdamConfig {
  double lr = 5e-5;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// First/second moment buffers aligned with a fixed parameter list.
struct AdamState {
  AdamConfig cfg;
  int64_t t = 0;
  std::vector<Tensor> m;
  std::vector<Tensor> v;

  static AdamState init(const std::vector<Parameter>& params, AdamConfig cfg);
};

// One Adam update with bias correction:
//   m <- b1 m + (1-b1) g;  v <- b2 v + (1-b2) g^2
//   theta <- theta - lr * m/(1-b1^t) / (sqrt(v/(1-b2^t)) + eps)
void adam_step(std::vector<Parameter>& params, const std::vector<Tensor>& grads, AdamState& state);

}  // namespace lungmtl::autodiff
