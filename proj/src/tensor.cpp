#include "lungmtl/tensor.hpp"

#include <sstream>

namespace lungmtl::autodiff {

int64_t numel(const Shape& s) {
  int64_t n = 1;
  for (int64_t d : s) {
    if (d < 0) throw ShapeMismatch("negative extent in " + shape_str(s));
    n *= d;
  }
  return n;
}

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < s.size(); ++i) os << (i ? ", " : "") << s[i];
  os << "]";
  return os.str();
}

Tensor::Tensor(Shape s, std::vector<double> v) : shape(std::move(s)), values(std::move(v)) {
  if (numel(shape) != static_cast<int64_t>(values.size()))
    throw ShapeMismatch("value count " + std::to_string(values.size()) + " does not fill " +
                        shape_str(shape));
}

double Tensor::item() const {
  if (values.size() != 1) throw ShapeMismatch("item() on tensor of shape " + shape_str(shape));
  return values[0];
}

bool same_shape(const Tensor& a, const Tensor& b) { return a.shape == b.shape; }

}  // namespace lungmtl::autodiff
