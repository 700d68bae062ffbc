#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "lungmtl/tensor.hpp"

namespace lungmtl::autodiff {

LUNGMTL_ERROR(NonScalarLoss)
LUNGMTL_ERROR(DetachedLoss)
LUNGMTL_ERROR(AllMasked)
LUNGMTL_ERROR(ClassIndexOutOfRange)
LUNGMTL_ERROR(NameSetMismatch)
LUNGMTL_ERROR(InvalidWeight)

// Reverse-mode tape. Every op records its output as a new node whose parents
// precede it, so one backward sweep in decreasing id order visits the graph
// topologically. Gradients accumulate additively; calling backward twice on
// the same tape (for two losses) sums both gradients into the same slots.
class Tape {
 public:
  using Id = int32_t;

  Id leaf(Tensor value, bool requires_grad);
  Id leaf(const Parameter& p) { return leaf(p.value, true); }

  // -- core forward ops ------------------------------------------------
  // matmul over the trailing two axes. Accepts 2-D x 2-D, batched x batched
  // with identical leading axes, or batched x 2-D (shared weight).
  Id matmul(Id a, Id b);
  // elementwise add; b may also be a trailing-shape broadcast (bias).
  Id add(Id a, Id b);
  Id sub(Id a, Id b);
  // elementwise product, equal shapes.
  Id mul(Id a, Id b);
  Id scale(Id a, double c);
  Id gelu(Id a);
  Id layer_norm(Id x, Id gamma, Id beta, int axis, double eps);
  Id softmax(Id a, int axis);
  Id mean(Id a, int axis);
  Id mean_all(Id a);
  Id sum_all(Id a);
  Id reshape(Id a, Shape s);
  Id transpose(Id a, std::vector<int> perm);
  Id concat(const std::vector<Id>& xs, int axis);
  // embedding lookup / row gather along an axis
  Id index_select(Id a, int axis, std::vector<int64_t> indices);
  // tiles a leading axis of extent 1 up to n (backward sums over the copies)
  Id broadcast_axis0(Id a, int64_t n);

  // -- fused loss primitives -------------------------------------------
  // -sum_i mask_i w_{y_i} log softmax(logits_i)[y_i] / sum_i mask_i w_{y_i}
  Id weighted_cross_entropy(Id logits, const std::vector<int64_t>& targets,
                            const std::vector<double>& weights,
                            const std::vector<uint8_t>& mask);

  // lambda * sum over unordered tower pairs of the squared parameter
  // differences. Towers are given as name-aligned (name, leaf id) lists.
  using NamedIds = std::vector<std::pair<std::string, Id>>;
  Id l2_pairwise_reg(const std::vector<NamedIds>& towers, double lambda);

  // -- backward ---------------------------------------------------------
  void backward(Id loss);

  const Tensor& value(Id id) const;
  // Gradient of the node; zero tensor when nothing has flowed into it yet.
  const Tensor& grad(Id id) const;
  bool requires_grad(Id id) const;
  size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor value;
    mutable Tensor grad;  // lazily sized
    bool requires_grad = false;
    mutable bool grad_alloc = false;
    const char* op = "leaf";
    std::vector<Id> parents;
    std::function<void(Tape&, Id)> backprop;
  };

  Id push(Node n);
  Tensor& grad_buf(Id id);
  const Node& node(Id id) const;

  std::vector<Node> nodes_;
};

// w_c = N / (C * n_c): inverse-frequency weights with mean 1 under the
// class distribution.
LUNGMTL_ERROR(EmptyClass)
std::vector<double> class_weights(const std::vector<int64_t>& counts);

}  // namespace lungmtl::autodiff
