#include "lungmtl/tape.hpp"

#include <algorithm>
#include <cmath>

namespace lungmtl::autodiff {

namespace {

constexpr double kInvSqrt2 = 0.70710678118654752440;
constexpr double kInvSqrt2Pi = 0.39894228040143267794;

int norm_axis(int axis, int rank) {
  int a = axis < 0 ? axis + rank : axis;
  if (a < 0 || a >= rank)
    throw AxisOutOfRange("axis " + std::to_string(axis) + " for rank " + std::to_string(rank));
  return a;
}

// outer * L * inner decomposition around one axis
struct AxisSplit {
  int64_t outer = 1, len = 1, inner = 1;
};

AxisSplit split_axis(const Shape& s, int axis) {
  AxisSplit sp;
  sp.len = s[static_cast<size_t>(axis)];
  for (int i = 0; i < axis; ++i) sp.outer *= s[static_cast<size_t>(i)];
  for (size_t i = static_cast<size_t>(axis) + 1; i < s.size(); ++i) sp.inner *= s[i];
  return sp;
}

// C += A * B          (A: m x k, B: k x n)
void gemm_nn(const double* A, const double* B, double* C, int64_t m, int64_t k, int64_t n) {
  for (int64_t i = 0; i < m; ++i) {
    const double* ai = A + i * k;
    double* ci = C + i * n;
    for (int64_t p = 0; p < k; ++p) {
      const double a = ai[p];
      const double* bp = B + p * n;
      for (int64_t j = 0; j < n; ++j) ci[j] += a * bp[j];
    }
  }
}

// C += A * B^T        (A: m x k, B: n x k)
void gemm_nt(const double* A, const double* B, double* C, int64_t m, int64_t k, int64_t n) {
  for (int64_t i = 0; i < m; ++i) {
    const double* ai = A + i * k;
    for (int64_t j = 0; j < n; ++j) {
      const double* bj = B + j * k;
      double acc = 0.0;
      for (int64_t p = 0; p < k; ++p) acc += ai[p] * bj[p];
      C[i * n + j] += acc;
    }
  }
}

// C += A^T * B        (A: k x m, B: k x n)
void gemm_tn(const double* A, const double* B, double* C, int64_t m, int64_t k, int64_t n) {
  for (int64_t p = 0; p < k; ++p) {
    const double* ap = A + p * m;
    const double* bp = B + p * n;
    for (int64_t i = 0; i < m; ++i) {
      const double a = ap[i];
      double* ci = C + i * n;
      for (int64_t j = 0; j < n; ++j) ci[j] += a * bp[j];
    }
  }
}

std::vector<int64_t> row_strides(const Shape& s) {
  std::vector<int64_t> st(s.size(), 1);
  for (int i = static_cast<int>(s.size()) - 2; i >= 0; --i)
    st[static_cast<size_t>(i)] = st[static_cast<size_t>(i) + 1] * s[static_cast<size_t>(i) + 1];
  return st;
}

}  // namespace

Tape::Id Tape::push(Node n) {
  nodes_.push_back(std::move(n));
  return static_cast<Id>(nodes_.size() - 1);
}

const Tape::Node& Tape::node(Id id) const {
  if (id < 0 || static_cast<size_t>(id) >= nodes_.size())
    throw DetachedLoss("node " + std::to_string(id) + " is not on this tape");
  return nodes_[static_cast<size_t>(id)];
}

const Tensor& Tape::value(Id id) const { return node(id).value; }

bool Tape::requires_grad(Id id) const { return node(id).requires_grad; }

Tensor& Tape::grad_buf(Id id) {
  Node& n = nodes_[static_cast<size_t>(id)];
  if (!n.grad_alloc) {
    n.grad = Tensor(n.value.shape);
    n.grad_alloc = true;
  }
  return n.grad;
}

const Tensor& Tape::grad(Id id) const {
  const Node& n = node(id);
  if (!n.grad_alloc) {
    n.grad = Tensor(n.value.shape);
    n.grad_alloc = true;
  }
  return n.grad;
}

Tape::Id Tape::leaf(Tensor value, bool requires_grad) {
  Node n;
  n.value = std::move(value);
  n.requires_grad = requires_grad;
  if (requires_grad) {
    n.grad = Tensor(n.value.shape);
    n.grad_alloc = true;
  }
  return push(n);
}

// ---------------------------------------------------------------------------
// matmul

Tape::Id Tape::matmul(Id a, Id b) {
  const Tensor& A = value(a);
  const Tensor& B = value(b);
  const size_t ra = A.shape.size(), rb = B.shape.size();
  if (ra < 2 || rb < 2)
    throw ShapeMismatch("matmul needs rank >= 2, got " + shape_str(A.shape) + " x " +
                        shape_str(B.shape));
  const int64_t m = A.shape[ra - 2], k = A.shape[ra - 1];
  const int64_t k2 = B.shape[rb - 2], n = B.shape[rb - 1];
  if (k != k2)
    throw ShapeMismatch("matmul inner extents " + shape_str(A.shape) + " x " + shape_str(B.shape));

  bool b_shared = false;  // B is a 2-D weight broadcast over A's batch
  Shape lead;
  if (ra == 2 && rb == 2) {
    // plain
  } else if (rb == 2) {
    lead.assign(A.shape.begin(), A.shape.end() - 2);
    b_shared = true;
  } else if (ra == rb &&
             std::equal(A.shape.begin(), A.shape.end() - 2, B.shape.begin(), B.shape.end() - 2)) {
    lead.assign(A.shape.begin(), A.shape.end() - 2);
  } else {
    throw ShapeMismatch("matmul batch extents " + shape_str(A.shape) + " x " + shape_str(B.shape));
  }
  const int64_t batch = numel(lead);

  Shape out_shape = lead;
  out_shape.push_back(m);
  out_shape.push_back(n);
  Tensor out(out_shape);
  for (int64_t s = 0; s < batch; ++s) {
    const double* pa = A.values.data() + s * m * k;
    const double* pb = b_shared ? B.values.data() : B.values.data() + s * k * n;
    gemm_nn(pa, pb, out.values.data() + s * m * n, m, k, n);
  }

  Node nd;
  nd.value = std::move(out);
  nd.op = "matmul";
  nd.parents = {a, b};
  nd.requires_grad = requires_grad(a) || requires_grad(b);
  if (nd.requires_grad) {
    nd.backprop = [a, b, m, k, n, batch, b_shared](Tape& t, Id self) {
      const Tensor& g = t.grad(self);
      const Tensor& A = t.value(a);
      const Tensor& B = t.value(b);
      if (t.requires_grad(a)) {
        Tensor& da = t.grad_buf(a);
        for (int64_t s = 0; s < batch; ++s) {
          const double* pg = g.values.data() + s * m * n;
          const double* pb = b_shared ? B.values.data() : B.values.data() + s * k * n;
          gemm_nt(pg, pb, da.values.data() + s * m * k, m, n, k);
        }
      }
      if (t.requires_grad(b)) {
        Tensor& db = t.grad_buf(b);
        for (int64_t s = 0; s < batch; ++s) {
          const double* pa = A.values.data() + s * m * k;
          const double* pg = g.values.data() + s * m * n;
          double* pd = b_shared ? db.values.data() : db.values.data() + s * k * n;
          gemm_tn(pa, pg, pd, k, m, n);
        }
      }
    };
  }
  return push(std::move(nd));
}

// ---------------------------------------------------------------------------
// elementwise / broadcast

Tape::Id Tape::add(Id a, Id b) {
  const Tensor& A = value(a);
  const Tensor& B = value(b);
  const int64_t na = A.size(), nb = B.size();
  bool suffix = false;
  if (A.shape != B.shape) {
    // bias broadcast: B's shape must be a trailing slice of A's
    if (B.shape.size() >= A.shape.size() ||
        !std::equal(B.shape.begin(), B.shape.end(), A.shape.end() - B.shape.size()))
      throw ShapeMismatch("add " + shape_str(A.shape) + " + " + shape_str(B.shape));
    suffix = true;
  }
  Tensor out(A.shape);
  if (!suffix) {
    for (int64_t i = 0; i < na; ++i) out.values[i] = A.values[i] + B.values[i];
  } else {
    for (int64_t i = 0; i < na; ++i) out.values[i] = A.values[i] + B.values[i % nb];
  }
  Node nd;
  nd.value = std::move(out);
  nd.op = "add";
  nd.parents = {a, b};
  nd.requires_grad = requires_grad(a) || requires_grad(b);
  if (nd.requires_grad) {
    nd.backprop = [a, b, na, nb](Tape& t, Id self) {
      const Tensor& g = t.grad(self);
      if (t.requires_grad(a)) {
        Tensor& da = t.grad_buf(a);
        for (int64_t i = 0; i < na; ++i) da.values[i] += g.values[i];
      }
      if (t.requires_grad(b)) {
        Tensor& db = t.grad_buf(b);
        for (int64_t i = 0; i < na; ++i) db.values[i % nb] += g.values[i];
      }
    };
  }
  return push(std::move(nd));
}

Tape::Id Tape::sub(Id a, Id b) { return add(a, scale(b, -1.0)); }

Tape::Id Tape::mul(Id a, Id b) {
  const Tensor& A = value(a);
  const Tensor& B = value(b);
  if (A.shape != B.shape)
    throw ShapeMismatch("mul " + shape_str(A.shape) + " * " + shape_str(B.shape));
  const int64_t n = A.size();
  Tensor out(A.shape);
  for (int64_t i = 0; i < n; ++i) out.values[i] = A.values[i] * B.values[i];
  Node nd;
  nd.value = std::move(out);
  nd.op = "mul";
  nd.parents = {a, b};
  nd.requires_grad = requires_grad(a) || requires_grad(b);
  if (nd.requires_grad) {
    nd.backprop = [a, b, n](Tape& t, Id self) {
      const Tensor& g = t.grad(self);
      const Tensor& A = t.value(a);
      const Tensor& B = t.value(b);
      if (t.requires_grad(a)) {
        Tensor& da = t.grad_buf(a);
        for (int64_t i = 0; i < n; ++i) da.values[i] += g.values[i] * B.values[i];
      }
      if (t.requires_grad(b)) {
        Tensor& db = t.grad_buf(b);
        for (int64_t i = 0; i < n; ++i) db.values[i] += g.values[i] * A.values[i];
      }
    };
  }
  return push(std::move(nd));
}

Tape::Id Tape::scale(Id a, double c) {
  const Tensor& A = value(a);
  const int64_t n = A.size();
  Tensor out(A.shape);
  for (int64_t i = 0; i < n; ++i) out.values[i] = c * A.values[i];
  Node nd;
  nd.value = std::move(out);
  nd.op = "scale";
  nd.parents = {a};
  nd.requires_grad = requires_grad(a);
  if (nd.requires_grad) {
    nd.backprop = [a, c, n](Tape& t, Id self) {
      const Tensor& g = t.grad(self);
      Tensor& da = t.grad_buf(a);
      for (int64_t i = 0; i < n; ++i) da.values[i] += c * g.values[i];
    };
  }
  return push(std::move(nd));
}

Tape::Id Tape::gelu(Id a) {
  const Tensor& A = value(a);
  const int64_t n = A.size();
  Tensor out(A.shape);
  for (int64_t i = 0; i < n; ++i) {
    const double x = A.values[i];
    out.values[i] = x * 0.5 * std::erfc(-x * kInvSqrt2);
  }
  Node nd;
  nd.value = std::move(out);
  nd.op = "gelu";
  nd.parents = {a};
  nd.requires_grad = requires_grad(a);
  if (nd.requires_grad) {
    nd.backprop = [a, n](Tape& t, Id self) {
      const Tensor& g = t.grad(self);
      const Tensor& A = t.value(a);
      Tensor& da = t.grad_buf(a);
      for (int64_t i = 0; i < n; ++i) {
        const double x = A.values[i];
        const double cdf = 0.5 * std::erfc(-x * kInvSqrt2);
        const double pdf = kInvSqrt2Pi * std::exp(-0.5 * x * x);
        da.values[i] += g.values[i] * (cdf + x * pdf);
      }
    };
  }
  return push(std::move(nd));
}

// ---------------------------------------------------------------------------
// normalization / softmax

Tape::Id Tape::layer_norm(Id x, Id gamma, Id beta, int axis, double eps) {
  const Tensor& X = value(x);
  const int rank = static_cast<int>(X.shape.size());
  const int ax = norm_axis(axis, rank);
  const AxisSplit sp = split_axis(X.shape, ax);
  const Tensor& G = value(gamma);
  const Tensor& Bt = value(beta);
  if (G.shape != Shape{sp.len} || Bt.shape != Shape{sp.len})
    throw ShapeMismatch("layer_norm affine params must have shape [" + std::to_string(sp.len) +
                        "]");

  Tensor out(X.shape);
  // saved for backward: normalized values and per-lane 1/std
  auto xhat = std::make_shared<std::vector<double>>(X.values.size());
  auto inv_std = std::make_shared<std::vector<double>>(static_cast<size_t>(sp.outer * sp.inner));
  const int64_t L = sp.len;
  for (int64_t o = 0; o < sp.outer; ++o) {
    for (int64_t i = 0; i < sp.inner; ++i) {
      const int64_t base = o * L * sp.inner + i;
      double mu = 0.0;
      for (int64_t l = 0; l < L; ++l) mu += X.values[base + l * sp.inner];
      mu /= static_cast<double>(L);
      double var = 0.0;
      for (int64_t l = 0; l < L; ++l) {
        const double d = X.values[base + l * sp.inner] - mu;
        var += d * d;
      }
      var /= static_cast<double>(L);
      const double is = 1.0 / std::sqrt(var + eps);
      (*inv_std)[static_cast<size_t>(o * sp.inner + i)] = is;
      for (int64_t l = 0; l < L; ++l) {
        const double xh = (X.values[base + l * sp.inner] - mu) * is;
        (*xhat)[static_cast<size_t>(base + l * sp.inner)] = xh;
        out.values[base + l * sp.inner] = G.values[l] * xh + Bt.values[l];
      }
    }
  }

  Node nd;
  nd.value = std::move(out);
  nd.op = "layer_norm";
  nd.parents = {x, gamma, beta};
  nd.requires_grad = requires_grad(x) || requires_grad(gamma) || requires_grad(beta);
  if (nd.requires_grad) {
    nd.backprop = [x, gamma, beta, sp, xhat, inv_std](Tape& t, Id self) {
      const Tensor& g = t.grad(self);
      const Tensor& G = t.value(gamma);
      const int64_t L = sp.len;
      if (t.requires_grad(gamma)) {
        Tensor& dg = t.grad_buf(gamma);
        for (int64_t o = 0; o < sp.outer; ++o)
          for (int64_t i = 0; i < sp.inner; ++i) {
            const int64_t base = o * L * sp.inner + i;
            for (int64_t l = 0; l < L; ++l)
              dg.values[l] +=
                  g.values[base + l * sp.inner] * (*xhat)[static_cast<size_t>(base + l * sp.inner)];
          }
      }
      if (t.requires_grad(beta)) {
        Tensor& db = t.grad_buf(beta);
        for (int64_t o = 0; o < sp.outer; ++o)
          for (int64_t i = 0; i < sp.inner; ++i) {
            const int64_t base = o * L * sp.inner + i;
            for (int64_t l = 0; l < L; ++l) db.values[l] += g.values[base + l * sp.inner];
          }
      }
      if (t.requires_grad(x)) {
        Tensor& dx = t.grad_buf(x);
        for (int64_t o = 0; o < sp.outer; ++o)
          for (int64_t i = 0; i < sp.inner; ++i) {
            const int64_t base = o * L * sp.inner + i;
            const double is = (*inv_std)[static_cast<size_t>(o * sp.inner + i)];
            double s1 = 0.0, s2 = 0.0;
            for (int64_t l = 0; l < L; ++l) {
              const double dxh = g.values[base + l * sp.inner] * G.values[l];
              s1 += dxh;
              s2 += dxh * (*xhat)[static_cast<size_t>(base + l * sp.inner)];
            }
            const double invL = 1.0 / static_cast<double>(L);
            for (int64_t l = 0; l < L; ++l) {
              const double dxh = g.values[base + l * sp.inner] * G.values[l];
              const double xh = (*xhat)[static_cast<size_t>(base + l * sp.inner)];
              dx.values[base + l * sp.inner] += is * (dxh - s1 * invL - xh * s2 * invL);
            }
          }
      }
    };
  }
  return push(std::move(nd));
}

Tape::Id Tape::softmax(Id a, int axis) {
  const Tensor& A = value(a);
  const int rank = static_cast<int>(A.shape.size());
  const int ax = norm_axis(axis, rank);
  const AxisSplit sp = split_axis(A.shape, ax);
  Tensor out(A.shape);
  const int64_t L = sp.len;
  for (int64_t o = 0; o < sp.outer; ++o) {
    for (int64_t i = 0; i < sp.inner; ++i) {
      const int64_t base = o * L * sp.inner + i;
      double mx = A.values[base];
      for (int64_t l = 1; l < L; ++l) mx = std::max(mx, A.values[base + l * sp.inner]);
      double z = 0.0;
      for (int64_t l = 0; l < L; ++l) {
        const double e = std::exp(A.values[base + l * sp.inner] - mx);
        out.values[base + l * sp.inner] = e;
        z += e;
      }
      const double inv = 1.0 / z;
      for (int64_t l = 0; l < L; ++l) out.values[base + l * sp.inner] *= inv;
    }
  }
  Node nd;
  nd.value = std::move(out);
  nd.op = "softmax";
  nd.parents = {a};
  nd.requires_grad = requires_grad(a);
  if (nd.requires_grad) {
    nd.backprop = [a, sp](Tape& t, Id self) {
      const Tensor& g = t.grad(self);
      const Tensor& y = t.value(self);
      Tensor& da = t.grad_buf(a);
      const int64_t L = sp.len;
      for (int64_t o = 0; o < sp.outer; ++o)
        for (int64_t i = 0; i < sp.inner; ++i) {
          const int64_t base = o * L * sp.inner + i;
          double dot = 0.0;
          for (int64_t l = 0; l < L; ++l)
            dot += g.values[base + l * sp.inner] * y.values[base + l * sp.inner];
          for (int64_t l = 0; l < L; ++l)
            da.values[base + l * sp.inner] +=
                y.values[base + l * sp.inner] * (g.values[base + l * sp.inner] - dot);
        }
    };
  }
  return push(std::move(nd));
}

// ---------------------------------------------------------------------------
// reductions

Tape::Id Tape::mean(Id a, int axis) {
  const Tensor& A = value(a);
  const int rank = static_cast<int>(A.shape.size());
  const int ax = norm_axis(axis, rank);
  const AxisSplit sp = split_axis(A.shape, ax);
  Shape out_shape;
  for (int i = 0; i < rank; ++i)
    if (i != ax) out_shape.push_back(A.shape[static_cast<size_t>(i)]);
  Tensor out(out_shape);
  const int64_t L = sp.len;
  const double invL = 1.0 / static_cast<double>(L);
  for (int64_t o = 0; o < sp.outer; ++o)
    for (int64_t i = 0; i < sp.inner; ++i) {
      double acc = 0.0;
      const int64_t base = o * L * sp.inner + i;
      for (int64_t l = 0; l < L; ++l) acc += A.values[base + l * sp.inner];
      out.values[o * sp.inner + i] = acc * invL;
    }
  Node nd;
  nd.value = std::move(out);
  nd.op = "mean";
  nd.parents = {a};
  nd.requires_grad = requires_grad(a);
  if (nd.requires_grad) {
    nd.backprop = [a, sp, invL](Tape& t, Id self) {
      const Tensor& g = t.grad(self);
      Tensor& da = t.grad_buf(a);
      const int64_t L = sp.len;
      for (int64_t o = 0; o < sp.outer; ++o)
        for (int64_t i = 0; i < sp.inner; ++i) {
          const double gv = g.values[o * sp.inner + i] * invL;
          const int64_t base = o * L * sp.inner + i;
          for (int64_t l = 0; l < L; ++l) da.values[base + l * sp.inner] += gv;
        }
    };
  }
  return push(std::move(nd));
}

Tape::Id Tape::mean_all(Id a) {
  const int64_t n = value(a).size();
  Id s = sum_all(a);
  return scale(s, 1.0 / static_cast<double>(n));
}

Tape::Id Tape::sum_all(Id a) {
  const Tensor& A = value(a);
  const int64_t n = A.size();
  double acc = 0.0;
  for (int64_t i = 0; i < n; ++i) acc += A.values[i];
  Node nd;
  nd.value = Tensor::scalar(acc);
  nd.op = "sum_all";
  nd.parents = {a};
  nd.requires_grad = requires_grad(a);
  if (nd.requires_grad) {
    nd.backprop = [a, n](Tape& t, Id self) {
      const double gv = t.grad(self).values[0];
      Tensor& da = t.grad_buf(a);
      for (int64_t i = 0; i < n; ++i) da.values[i] += gv;
    };
  }
  return push(std::move(nd));
}

// ---------------------------------------------------------------------------
// shape ops

Tape::Id Tape::reshape(Id a, Shape s) {
  const Tensor& A = value(a);
  if (numel(s) != A.size())
    throw ShapeMismatch("reshape " + shape_str(A.shape) + " -> " + shape_str(s));
  Tensor out(std::move(s), A.values);
  Node nd;
  nd.value = std::move(out);
  nd.op = "reshape";
  nd.parents = {a};
  nd.requires_grad = requires_grad(a);
  if (nd.requires_grad) {
    nd.backprop = [a](Tape& t, Id self) {
      const Tensor& g = t.grad(self);
      Tensor& da = t.grad_buf(a);
      for (size_t i = 0; i < g.values.size(); ++i) da.values[i] += g.values[i];
    };
  }
  return push(std::move(nd));
}

Tape::Id Tape::transpose(Id a, std::vector<int> perm) {
  const Tensor& A = value(a);
  const int rank = static_cast<int>(A.shape.size());
  if (static_cast<int>(perm.size()) != rank)
    throw AxisOutOfRange("transpose permutation rank " + std::to_string(perm.size()) + " vs " +
                         std::to_string(rank));
  std::vector<char> seen(static_cast<size_t>(rank), 0);
  for (int p : perm) {
    const int q = norm_axis(p, rank);
    if (seen[static_cast<size_t>(q)]) throw AxisOutOfRange("transpose repeats axis");
    seen[static_cast<size_t>(q)] = 1;
  }
  Shape out_shape(static_cast<size_t>(rank));
  for (int i = 0; i < rank; ++i)
    out_shape[static_cast<size_t>(i)] = A.shape[static_cast<size_t>(norm_axis(perm[i], rank))];

  const auto in_st = row_strides(A.shape);
  const auto out_st = row_strides(out_shape);
  Tensor out(out_shape);
  const int64_t n = A.size();
  for (int64_t idx = 0; idx < n; ++idx) {
    int64_t rem = idx, src = 0;
    for (int d = 0; d < rank; ++d) {
      const int64_t c = rem / out_st[static_cast<size_t>(d)];
      rem %= out_st[static_cast<size_t>(d)];
      src += c * in_st[static_cast<size_t>(norm_axis(perm[d], rank))];
    }
    out.values[idx] = A.values[src];
  }

  Node nd;
  nd.value = std::move(out);
  nd.op = "transpose";
  nd.parents = {a};
  nd.requires_grad = requires_grad(a);
  if (nd.requires_grad) {
    nd.backprop = [a, perm, in_st, out_st, rank, n](Tape& t, Id self) {
      const Tensor& g = t.grad(self);
      Tensor& da = t.grad_buf(a);
      for (int64_t idx = 0; idx < n; ++idx) {
        int64_t rem = idx, src = 0;
        for (int d = 0; d < rank; ++d) {
          const int64_t c = rem / out_st[static_cast<size_t>(d)];
          rem %= out_st[static_cast<size_t>(d)];
          src += c * in_st[static_cast<size_t>(norm_axis(perm[d], rank))];
        }
        da.values[src] += g.values[idx];
      }
    };
  }
  return push(std::move(nd));
}

Tape::Id Tape::concat(const std::vector<Id>& xs, int axis) {
  if (xs.empty()) throw ShapeMismatch("concat of zero tensors");
  const Tensor& first = value(xs[0]);
  const int rank = static_cast<int>(first.shape.size());
  const int ax = norm_axis(axis, rank);
  Shape out_shape = first.shape;
  int64_t total_axis = 0;
  for (Id x : xs) {
    const Tensor& X = value(x);
    if (static_cast<int>(X.shape.size()) != rank)
      throw ShapeMismatch("concat rank mismatch");
    for (int d = 0; d < rank; ++d)
      if (d != ax && X.shape[static_cast<size_t>(d)] != first.shape[static_cast<size_t>(d)])
        throw ShapeMismatch("concat extent mismatch at axis " + std::to_string(d));
    total_axis += X.shape[static_cast<size_t>(ax)];
  }
  out_shape[static_cast<size_t>(ax)] = total_axis;

  const AxisSplit osp = split_axis(out_shape, ax);
  Tensor out(out_shape);
  // chunk offsets along the concat axis
  std::vector<int64_t> axis_off(xs.size() + 1, 0);
  for (size_t t = 0; t < xs.size(); ++t)
    axis_off[t + 1] = axis_off[t] + value(xs[t]).shape[static_cast<size_t>(ax)];
  for (size_t t = 0; t < xs.size(); ++t) {
    const Tensor& X = value(xs[t]);
    const int64_t lx = X.shape[static_cast<size_t>(ax)];
    for (int64_t o = 0; o < osp.outer; ++o)
      for (int64_t l = 0; l < lx; ++l) {
        const double* src = X.values.data() + (o * lx + l) * osp.inner;
        double* dst = out.values.data() + (o * osp.len + axis_off[t] + l) * osp.inner;
        std::copy(src, src + osp.inner, dst);
      }
  }

  Node nd;
  nd.value = std::move(out);
  nd.op = "concat";
  nd.parents = xs;
  nd.requires_grad = false;
  for (Id x : xs) nd.requires_grad = nd.requires_grad || requires_grad(x);
  if (nd.requires_grad) {
    std::vector<Id> parents = xs;
    nd.backprop = [parents, axis_off, osp, ax](Tape& t, Id self) {
      const Tensor& g = t.grad(self);
      for (size_t p = 0; p < parents.size(); ++p) {
        if (!t.requires_grad(parents[p])) continue;
        Tensor& da = t.grad_buf(parents[p]);
        const int64_t lx = da.shape[static_cast<size_t>(ax)];
        for (int64_t o = 0; o < osp.outer; ++o)
          for (int64_t l = 0; l < lx; ++l) {
            const double* src = g.values.data() + (o * osp.len + axis_off[p] + l) * osp.inner;
            double* dst = da.values.data() + (o * lx + l) * osp.inner;
            for (int64_t i = 0; i < osp.inner; ++i) dst[i] += src[i];
          }
      }
    };
  }
  return push(std::move(nd));
}

Tape::Id Tape::index_select(Id a, int axis, std::vector<int64_t> indices) {
  const Tensor& A = value(a);
  const int rank = static_cast<int>(A.shape.size());
  const int ax = norm_axis(axis, rank);
  const AxisSplit sp = split_axis(A.shape, ax);
  for (int64_t ix : indices)
    if (ix < 0 || ix >= sp.len)
      throw AxisOutOfRange("index " + std::to_string(ix) + " outside axis extent " +
                           std::to_string(sp.len));
  Shape out_shape = A.shape;
  out_shape[static_cast<size_t>(ax)] = static_cast<int64_t>(indices.size());
  Tensor out(out_shape);
  const int64_t L = sp.len, K = static_cast<int64_t>(indices.size());
  for (int64_t o = 0; o < sp.outer; ++o)
    for (int64_t j = 0; j < K; ++j) {
      const double* src = A.values.data() + (o * L + indices[static_cast<size_t>(j)]) * sp.inner;
      double* dst = out.values.data() + (o * K + j) * sp.inner;
      std::copy(src, src + sp.inner, dst);
    }
  Node nd;
  nd.value = std::move(out);
  nd.op = "index_select";
  nd.parents = {a};
  nd.requires_grad = requires_grad(a);
  if (nd.requires_grad) {
    nd.backprop = [a, sp, indices](Tape& t, Id self) {
      const Tensor& g = t.grad(self);
      Tensor& da = t.grad_buf(a);
      const int64_t L = sp.len, K = static_cast<int64_t>(indices.size());
      for (int64_t o = 0; o < sp.outer; ++o)
        for (int64_t j = 0; j < K; ++j) {
          const double* src = g.values.data() + (o * K + j) * sp.inner;
          double* dst = da.values.data() + (o * L + indices[static_cast<size_t>(j)]) * sp.inner;
          for (int64_t i = 0; i < sp.inner; ++i) dst[i] += src[i];
        }
    };
  }
  return push(std::move(nd));
}

Tape::Id Tape::broadcast_axis0(Id a, int64_t n) {
  const Tensor& A = value(a);
  if (A.shape.empty() || A.shape[0] != 1)
    throw ShapeMismatch("broadcast_axis0 needs leading extent 1, got " + shape_str(A.shape));
  Shape out_shape = A.shape;
  out_shape[0] = n;
  Tensor out(out_shape);
  const int64_t chunk = A.size();
  for (int64_t r = 0; r < n; ++r)
    std::copy(A.values.begin(), A.values.end(), out.values.begin() + r * chunk);
  Node nd;
  nd.value = std::move(out);
  nd.op = "broadcast_axis0";
  nd.parents = {a};
  nd.requires_grad = requires_grad(a);
  if (nd.requires_grad) {
    nd.backprop = [a, n, chunk](Tape& t, Id self) {
      const Tensor& g = t.grad(self);
      Tensor& da = t.grad_buf(a);
      for (int64_t r = 0; r < n; ++r)
        for (int64_t i = 0; i < chunk; ++i) da.values[i] += g.values[r * chunk + i];
    };
  }
  return push(std::move(nd));
}

// ---------------------------------------------------------------------------
// fused losses

Tape::Id Tape::weighted_cross_entropy(Id logits, const std::vector<int64_t>& targets,
                                      const std::vector<double>& weights,
                                      const std::vector<uint8_t>& mask) {
  const Tensor& L = value(logits);
  if (L.shape.size() != 2)
    throw ShapeMismatch("weighted_cross_entropy expects [batch, classes] logits, got " +
                        shape_str(L.shape));
  const int64_t N = L.shape[0], C = L.shape[1];
  if (static_cast<int64_t>(targets.size()) != N || static_cast<int64_t>(mask.size()) != N)
    throw ShapeMismatch("targets/mask length must equal batch " + std::to_string(N));
  if (static_cast<int64_t>(weights.size()) != C)
    throw ShapeMismatch("weights length must equal class count " + std::to_string(C));
  for (double w : weights)
    if (!(w > 0.0)) throw InvalidWeight("class weights must be positive");

  // Masked rows are skipped entirely; their targets may be sentinels.
  auto probs = std::make_shared<std::vector<double>>(L.values.size(), 0.0);
  double wsum = 0.0, acc = 0.0;
  int64_t unmasked = 0;
  for (int64_t i = 0; i < N; ++i) {
    if (!mask[static_cast<size_t>(i)]) continue;
    const int64_t y = targets[static_cast<size_t>(i)];
    if (y < 0 || y >= C)
      throw ClassIndexOutOfRange("target " + std::to_string(y) + " for " + std::to_string(C) +
                                 " classes");
    ++unmasked;
    const double* row = L.values.data() + i * C;
    double mx = row[0];
    for (int64_t c = 1; c < C; ++c) mx = std::max(mx, row[c]);
    double z = 0.0;
    for (int64_t c = 0; c < C; ++c) z += std::exp(row[c] - mx);
    const double lse = mx + std::log(z);
    for (int64_t c = 0; c < C; ++c)
      (*probs)[static_cast<size_t>(i * C + c)] = std::exp(row[c] - lse);
    const double w = weights[static_cast<size_t>(y)];
    wsum += w;
    acc += w * (lse - row[y]);
  }
  if (unmasked == 0) throw AllMasked("no unmasked examples in batch");

  Node nd;
  nd.value = Tensor::scalar(acc / wsum);
  nd.op = "weighted_cross_entropy";
  nd.parents = {logits};
  nd.requires_grad = requires_grad(logits);
  if (nd.requires_grad) {
    nd.backprop = [logits, targets, weights, mask, probs, wsum, N, C](Tape& t, Id self) {
      const double gv = t.grad(self).values[0];
      Tensor& dl = t.grad_buf(logits);
      for (int64_t i = 0; i < N; ++i) {
        if (!mask[static_cast<size_t>(i)]) continue;
        const int64_t y = targets[static_cast<size_t>(i)];
        const double w = weights[static_cast<size_t>(y)] / wsum;
        for (int64_t c = 0; c < C; ++c) {
          double d = (*probs)[static_cast<size_t>(i * C + c)];
          if (c == y) d -= 1.0;
          dl.values[i * C + c] += gv * w * d;
        }
      }
    };
  }
  return push(std::move(nd));
}

Tape::Id Tape::l2_pairwise_reg(const std::vector<NamedIds>& towers, double lambda) {
  const size_t T = towers.size();
  // order each tower's layers by name, then verify the name sets align
  std::vector<NamedIds> sorted(towers);
  for (auto& tw : sorted)
    std::sort(tw.begin(), tw.end(),
              [](const auto& a, const auto& b) { return a.first < b.first; });
  for (size_t t = 1; t < T; ++t) {
    if (sorted[t].size() != sorted[0].size())
      throw NameSetMismatch("tower " + std::to_string(t) + " has " +
                            std::to_string(sorted[t].size()) + " layers vs " +
                            std::to_string(sorted[0].size()));
    for (size_t l = 0; l < sorted[0].size(); ++l) {
      if (sorted[t][l].first != sorted[0][l].first)
        throw NameSetMismatch("'" + sorted[t][l].first + "' vs '" + sorted[0][l].first + "'");
      if (value(sorted[t][l].second).shape != value(sorted[0][l].second).shape)
        throw ShapeMismatch("regularized layer '" + sorted[0][l].first + "' shape differs");
    }
  }

  double acc = 0.0;
  for (size_t t = 0; t + 1 < T; ++t)
    for (size_t s = t + 1; s < T; ++s)
      for (size_t l = 0; l < sorted[t].size(); ++l) {
        const Tensor& a = value(sorted[t][l].second);
        const Tensor& b = value(sorted[s][l].second);
        for (size_t i = 0; i < a.values.size(); ++i) {
          const double d = a.values[i] - b.values[i];
          acc += d * d;
        }
      }

  Node nd;
  nd.value = Tensor::scalar(lambda * acc);
  nd.op = "l2_pairwise_reg";
  nd.requires_grad = false;
  for (const auto& tw : sorted)
    for (const auto& [name, id] : tw) {
      nd.parents.push_back(id);
      nd.requires_grad = nd.requires_grad || requires_grad(id);
    }
  if (nd.requires_grad) {
    nd.backprop = [sorted, lambda, T](Tape& t, Id self) {
      const double gv = t.grad(self).values[0];
      if (T < 2) return;
      const size_t nlayers = sorted[0].size();
      for (size_t l = 0; l < nlayers; ++l) {
        // sum over towers once; each tower then sees 2*lambda*(T*own - sum)
        const size_t n = t.value(sorted[0][l].second).values.size();
        std::vector<double> sum(n, 0.0);
        for (size_t tw = 0; tw < T; ++tw) {
          const Tensor& v = t.value(sorted[tw][l].second);
          for (size_t i = 0; i < n; ++i) sum[i] += v.values[i];
        }
        for (size_t tw = 0; tw < T; ++tw) {
          if (!t.requires_grad(sorted[tw][l].second)) continue;
          const Tensor& v = t.value(sorted[tw][l].second);
          Tensor& d = t.grad_buf(sorted[tw][l].second);
          const double k = gv * 2.0 * lambda;
          for (size_t i = 0; i < n; ++i)
            d.values[i] += k * (static_cast<double>(T) * v.values[i] - sum[i]);
        }
      }
    };
  }
  return push(std::move(nd));
}

// ---------------------------------------------------------------------------
// backward

void Tape::backward(Id loss) {
  const Node& ln = node(loss);
  if (ln.value.size() != 1 || !ln.value.shape.empty())
    throw NonScalarLoss("loss has shape " + shape_str(ln.value.shape));
  if (!ln.requires_grad)
    throw DetachedLoss("loss does not depend on any gradient-requiring input");

  // Interior gradients are scratch space for this pass; leaf gradients
  // persist so several backward calls accumulate.
  for (size_t i = 0; i < nodes_.size(); ++i) {
    Node& n = nodes_[i];
    if (n.grad_alloc && n.backprop)
      std::fill(n.grad.values.begin(), n.grad.values.end(), 0.0);
  }

  std::vector<char> needed(nodes_.size(), 0);
  needed[static_cast<size_t>(loss)] = 1;
  grad_buf(loss).values[0] += 1.0;

  for (Id id = loss; id >= 0; --id) {
    if (!needed[static_cast<size_t>(id)]) continue;
    Node& n = nodes_[static_cast<size_t>(id)];
    if (!n.requires_grad || !n.backprop) continue;
    for (Id p : n.parents)
      if (nodes_[static_cast<size_t>(p)].requires_grad) needed[static_cast<size_t>(p)] = 1;
    n.backprop(*this, id);
  }
}

// ---------------------------------------------------------------------------

std::vector<double> class_weights(const std::vector<int64_t>& counts) {
  const size_t C = counts.size();
  if (C == 0) throw EmptyClass("no classes");
  int64_t total = 0;
  for (size_t c = 0; c < C; ++c) {
    if (counts[c] <= 0) throw EmptyClass("class " + std::to_string(c) + " has no examples");
    total += counts[c];
  }
  std::vector<double> w(C);
  for (size_t c = 0; c < C; ++c)
    w[c] = static_cast<double>(total) / (static_cast<double>(C) * static_cast<double>(counts[c]));
  return w;
}

}  // namespace lungmtl::autodiff
