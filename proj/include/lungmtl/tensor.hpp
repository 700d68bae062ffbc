#pragma once

#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include "lungmtl/error.hpp"

namespace lungmtl::autodiff {

LUNGMTL_ERROR(ShapeMismatch)
LUNGMTL_ERROR(AxisOutOfRange)

using Shape = std::vector<int64_t>;

int64_t numel(const Shape& s);
std::string shape_str(const Shape& s);

// Dense row-major tensor of doubles. Rank 0 (empty shape) is a scalar with
// one value.
struct Tensor {
  Shape shape;
  std::vector<double> values;

  Tensor() = default;
  explicit Tensor(Shape s) : shape(std::move(s)), values(static_cast<size_t>(numel(shape)), 0.0) {}
  Tensor(Shape s, double fill)
      : shape(std::move(s)), values(static_cast<size_t>(numel(shape)), fill) {}
  Tensor(Shape s, std::vector<double> v);

  static Tensor scalar(double v) {
    Tensor t;
    t.values.assign(1, v);
    return t;
  }

  int64_t size() const { return static_cast<int64_t>(values.size()); }
  bool is_scalar() const { return shape.empty() && values.size() == 1; }
  double item() const;
};

bool same_shape(const Tensor& a, const Tensor& b);

// Named trainable tensor. Parameters always take gradients.
struct Parameter {
  std::string name;
  Tensor value;
};

}  // namespace lungmtl::autodiff
