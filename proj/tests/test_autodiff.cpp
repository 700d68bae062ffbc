#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>

#include "doctest.h"
#include "lungmtl/gradcheck.hpp"
#include "lungmtl/optim.hpp"
#include "lungmtl/rng.hpp"
#include "lungmtl/tape.hpp"
#include "support/test_util.hpp"

using namespace lungmtl;
using namespace lungmtl::autodiff;
using testutil::random_tensor;

TEST_CASE("matmul identity and shapes") {
  Tape t;
  Tensor I({3, 3});
  for (int i = 0; i < 3; ++i) I.values[static_cast<size_t>(i * 3 + i)] = 1.0;
  Rng rng(7);
  Tensor A = random_tensor({3, 4}, rng);
  auto out = t.matmul(t.leaf(I, false), t.leaf(A, false));
  CHECK(t.value(out).shape == Shape{3, 4});
  for (size_t i = 0; i < A.values.size(); ++i)
    CHECK(t.value(out).values[i] == doctest::Approx(A.values[i]).epsilon(1e-15));

  // batched x shared weight
  Tensor B = random_tensor({2, 3, 4}, rng);
  Tensor W = random_tensor({4, 5}, rng);
  auto out2 = t.matmul(t.leaf(B, false), t.leaf(W, false));
  CHECK(t.value(out2).shape == Shape{2, 3, 5});

  CHECK_THROWS_AS(t.matmul(t.leaf(Tensor({2, 3}), false), t.leaf(Tensor({4, 2}), false)),
                  ShapeMismatch);
}

TEST_CASE("softmax symmetry, normalization, positivity") {
  Tape t;
  auto out = t.softmax(t.leaf(Tensor({2}, {0.0, 0.0}), false), 0);
  CHECK(t.value(out).values[0] == doctest::Approx(0.5).epsilon(1e-15));
  CHECK(t.value(out).values[1] == doctest::Approx(0.5).epsilon(1e-15));

  Rng rng(11);
  for (int rep = 0; rep < 20; ++rep) {
    Tensor x = random_tensor({4, 6}, rng, -30.0, 30.0);
    Tape tp;
    auto sm = tp.softmax(tp.leaf(x, false), -1);
    const Tensor& y = tp.value(sm);
    for (int r = 0; r < 4; ++r) {
      double s = 0.0;
      for (int c = 0; c < 6; ++c) {
        double v = y.values[static_cast<size_t>(r * 6 + c)];
        CHECK(v > 0.0);
        s += v;
      }
      CHECK(std::abs(s - 1.0) < 1e-12);
    }
  }
}

TEST_CASE("layer_norm normalizes to mean zero variance one") {
  Tape t;
  Tensor g({3}, 1.0), b({3}, 0.0);
  auto out =
      t.layer_norm(t.leaf(Tensor({3}, {1.0, 2.0, 3.0}), false), t.leaf(g, false),
                   t.leaf(b, false), -1, 1e-5);
  const auto& y = t.value(out).values;
  double mu = (y[0] + y[1] + y[2]) / 3.0;
  double var = 0.0;
  for (double v : y) var += (v - mu) * (v - mu);
  var /= 3.0;
  CHECK(std::abs(mu) < 1e-5);
  CHECK(std::abs(var - 1.0) < 1e-4);
}

TEST_CASE("backward of linear loss gives the fixed factor") {
  Rng rng(3);
  Tensor w = random_tensor({5}, rng);
  Tensor x = random_tensor({5}, rng);
  Tape t;
  auto wi = t.leaf(w, true);
  auto xi = t.leaf(x, false);
  auto loss = t.sum_all(t.mul(wi, xi));
  t.backward(loss);
  for (int i = 0; i < 5; ++i)
    CHECK(t.grad(wi).values[static_cast<size_t>(i)] ==
          doctest::Approx(x.values[static_cast<size_t>(i)]).epsilon(1e-15));
}

TEST_CASE("gradients of two losses on one tape accumulate additively") {
  Rng rng(5);
  Tensor w = random_tensor({4}, rng);
  Tensor x1 = random_tensor({4}, rng);
  Tensor x2 = random_tensor({4}, rng);

  // separate tapes
  std::vector<double> sep(4);
  {
    Tape t;
    auto wi = t.leaf(w, true);
    t.backward(t.sum_all(t.mul(wi, t.leaf(x1, false))));
    for (int i = 0; i < 4; ++i) sep[static_cast<size_t>(i)] = t.grad(wi).values[static_cast<size_t>(i)];
  }
  {
    Tape t;
    auto wi = t.leaf(w, true);
    t.backward(t.sum_all(t.mul(wi, t.leaf(x2, false))));
    for (int i = 0; i < 4; ++i) sep[static_cast<size_t>(i)] += t.grad(wi).values[static_cast<size_t>(i)];
  }

  // one tape, two backward calls
  Tape t;
  auto wi = t.leaf(w, true);
  auto l1 = t.sum_all(t.mul(wi, t.leaf(x1, false)));
  auto l2 = t.sum_all(t.mul(wi, t.leaf(x2, false)));
  t.backward(l1);
  t.backward(l2);
  for (int i = 0; i < 4; ++i)
    CHECK(testutil::rel_err(t.grad(wi).values[static_cast<size_t>(i)], sep[static_cast<size_t>(i)]) <
          1e-12);

  // and as a summed loss
  Tape t2;
  auto wi2 = t2.leaf(w, true);
  auto l = t2.add(t2.sum_all(t2.mul(wi2, t2.leaf(x1, false))),
                  t2.sum_all(t2.mul(wi2, t2.leaf(x2, false))));
  t2.backward(l);
  for (int i = 0; i < 4; ++i)
    CHECK(testutil::rel_err(t2.grad(wi2).values[static_cast<size_t>(i)], sep[static_cast<size_t>(i)]) <
          1e-12);
}

TEST_CASE("backward linearity: grad(a*L1 + L2) = a*grad(L1) + grad(L2)") {
  Rng rng(17);
  Tensor w = random_tensor({3, 3}, rng);
  Tensor x = random_tensor({3, 3}, rng);
  const double alpha = 2.75;

  auto grad_of = [&](auto&& make_loss) {
    Tape t;
    auto wi = t.leaf(w, true);
    t.backward(make_loss(t, wi));
    return t.grad(wi).values;
  };
  auto loss1 = [&](Tape& t, Tape::Id wi) { return t.sum_all(t.mul(wi, t.leaf(x, false))); };
  auto loss2 = [&](Tape& t, Tape::Id wi) { return t.mean_all(t.gelu(wi)); };

  auto g1 = grad_of(loss1);
  auto g2 = grad_of(loss2);
  auto gc = grad_of([&](Tape& t, Tape::Id wi) {
    return t.add(t.scale(loss1(t, wi), alpha), loss2(t, wi));
  });
  for (size_t i = 0; i < gc.size(); ++i)
    CHECK(testutil::rel_err(gc[i], alpha * g1[i] + g2[i]) < 1e-12);
}

TEST_CASE("finite differences confirm a 3-layer MLP gradient") {
  Rng rng(23);
  std::vector<Parameter> params;
  params.push_back({"w0", random_tensor({6, 8}, rng)});
  params.push_back({"b0", random_tensor({8}, rng)});
  params.push_back({"w1", random_tensor({8, 8}, rng)});
  params.push_back({"b1", random_tensor({8}, rng)});
  params.push_back({"w2", random_tensor({8, 4}, rng)});
  params.push_back({"b2", random_tensor({4}, rng)});
  Tensor x = random_tensor({5, 6}, rng);
  std::vector<int64_t> targets = {0, 1, 2, 3, 1};
  std::vector<double> weights = {1.0, 2.0, 0.5, 1.5};
  std::vector<uint8_t> mask(5, 1);

  auto build = [&](Tape& t, const std::vector<Tape::Id>& ids) {
    auto h = t.gelu(t.add(t.matmul(t.leaf(x, false), ids[0]), ids[1]));
    h = t.gelu(t.add(t.matmul(h, ids[2]), ids[3]));
    auto logits = t.add(t.matmul(h, ids[4]), ids[5]);
    return t.weighted_cross_entropy(logits, targets, weights, mask);
  };
  auto report = grad_check(build, params, 1e-4);
  CHECK(report.pass);
  CHECK(report.max_rel_error <= 1e-4);
}

TEST_CASE("finite differences per core op") {
  Rng rng(31);
  auto check_unary = [&](const char* name, auto&& f, Shape shape) {
    std::vector<Parameter> params{{name, random_tensor(shape, rng)}};
    auto build = [&](Tape& t, const std::vector<Tape::Id>& ids) {
      return t.mean_all(f(t, ids[0]));
    };
    auto rep = grad_check(build, params, 1e-4);
    INFO(name);
    CHECK(rep.pass);
  };

  check_unary("gelu", [](Tape& t, Tape::Id x) { return t.gelu(x); }, {3, 4});
  check_unary("softmax", [](Tape& t, Tape::Id x) { return t.softmax(x, -1); }, {3, 4});
  check_unary("transpose",
              [](Tape& t, Tape::Id x) { return t.gelu(t.transpose(x, {1, 0})); }, {3, 4});
  check_unary("reshape",
              [](Tape& t, Tape::Id x) { return t.gelu(t.reshape(x, {4, 3})); }, {3, 4});
  check_unary("mean_axis", [](Tape& t, Tape::Id x) { return t.mean(x, 0); }, {3, 4});
  check_unary("index_select",
              [](Tape& t, Tape::Id x) { return t.index_select(x, 0, {2, 0, 2}); }, {3, 4});
  check_unary("broadcast_axis0",
              [](Tape& t, Tape::Id x) { return t.gelu(t.broadcast_axis0(x, 5)); }, {1, 4});

  // binary ops
  {
    std::vector<Parameter> params{{"a", random_tensor({4, 3}, rng)},
                                  {"b", random_tensor({3, 5}, rng)}};
    auto rep = grad_check(
        [](Tape& t, const std::vector<Tape::Id>& ids) {
          return t.mean_all(t.matmul(ids[0], ids[1]));
        },
        params, 1e-4);
    CHECK(rep.pass);
  }
  {
    // batched matmul both sides
    std::vector<Parameter> params{{"a", random_tensor({2, 4, 3}, rng)},
                                  {"b", random_tensor({2, 3, 5}, rng)}};
    auto rep = grad_check(
        [](Tape& t, const std::vector<Tape::Id>& ids) {
          return t.mean_all(t.matmul(ids[0], ids[1]));
        },
        params, 1e-4);
    CHECK(rep.pass);
  }
  {
    // bias broadcast add + elementwise mul + concat
    std::vector<Parameter> params{{"a", random_tensor({4, 3}, rng)},
                                  {"bias", random_tensor({3}, rng)},
                                  {"c", random_tensor({4, 3}, rng)}};
    auto rep = grad_check(
        [](Tape& t, const std::vector<Tape::Id>& ids) {
          auto s = t.add(ids[0], ids[1]);
          auto m = t.mul(s, ids[2]);
          return t.mean_all(t.concat({s, m}, 1));
        },
        params, 1e-4);
    CHECK(rep.pass);
  }
  {
    // layer_norm with affine params
    std::vector<Parameter> params{{"x", random_tensor({5, 6}, rng)},
                                  {"gamma", random_tensor({6}, rng, 0.5, 1.5)},
                                  {"beta", random_tensor({6}, rng)}};
    auto rep = grad_check(
        [](Tape& t, const std::vector<Tape::Id>& ids) {
          return t.mean_all(t.layer_norm(ids[0], ids[1], ids[2], -1, 1e-5));
        },
        params, 1e-4);
    CHECK(rep.pass);
  }
}

TEST_CASE("grad_check is a real oracle: corrupted evaluation fails") {
  Rng rng(41);
  std::vector<Parameter> params{{"w", random_tensor({4}, rng)}};
  Tensor x = random_tensor({4}, rng);
  int calls = 0;
  auto build = [&](Tape& t, const std::vector<Tape::Id>& ids) {
    // first call feeds the reverse pass; later (finite difference) calls see
    // a scaled objective, mimicking an inconsistent backward rule
    ++calls;
    auto base = t.sum_all(t.mul(ids[0], t.leaf(x, false)));
    return calls == 1 ? base : t.scale(base, 1.05);
  };
  auto rep = grad_check(build, params, 1e-4);
  CHECK_FALSE(rep.pass);

  // linear model passes at machine-epsilon scale
  std::vector<Parameter> lin{{"w", random_tensor({6}, rng)}};
  Tensor x2 = random_tensor({6}, rng);
  auto rep2 = grad_check(
      [&](Tape& t, const std::vector<Tape::Id>& ids) {
        return t.sum_all(t.mul(ids[0], t.leaf(x2, false)));
      },
      lin, 1e-10);
  CHECK(rep2.pass);
  CHECK(rep2.max_rel_error < 1e-10);
}

TEST_CASE("adam closed-form first step and two-step unroll") {
  AdamConfig cfg;
  cfg.lr = 0.1;
  std::vector<Parameter> params{{"theta", Tensor({1}, {1.0})}};
  auto st = AdamState::init(params, cfg);
  std::vector<Tensor> grads{Tensor({1}, {1.0})};
  adam_step(params, grads, st);
  const double expected1 = 1.0 - 0.1 * 1.0 / (1.0 + 1e-8);
  CHECK(params[0].value.values[0] == doctest::Approx(expected1).epsilon(1e-14));

  // zero gradient leaves parameters unchanged
  {
    std::vector<Parameter> p2{{"theta", Tensor({3}, {0.3, -0.7, 2.0})}};
    auto s2 = AdamState::init(p2, cfg);
    std::vector<Tensor> g2{Tensor({3})};
    adam_step(p2, g2, s2);
    CHECK(p2[0].value.values[0] == 0.3);
    CHECK(p2[0].value.values[1] == -0.7);
    CHECK(p2[0].value.values[2] == 2.0);
  }

  // two steps with constant gradient match a scalar unroll
  {
    const double g = 0.37, lr = 0.05, b1 = 0.9, b2 = 0.999, eps = 1e-8;
    double theta = 0.5, m = 0.0, v = 0.0;
    for (int step = 1; step <= 2; ++step) {
      m = b1 * m + (1 - b1) * g;
      v = b2 * v + (1 - b2) * g * g;
      theta -= lr * (m / (1 - std::pow(b1, step))) / (std::sqrt(v / (1 - std::pow(b2, step))) + eps);
    }
    AdamConfig c2;
    c2.lr = lr;
    std::vector<Parameter> p{{"theta", Tensor({1}, {0.5})}};
    auto s = AdamState::init(p, c2);
    std::vector<Tensor> gr{Tensor({1}, {g})};
    adam_step(p, gr, s);
    adam_step(p, gr, s);
    CHECK(testutil::rel_err(p[0].value.values[0], theta) < 1e-12);
  }

  // lr = 0 is the identity
  {
    AdamConfig c0;
    c0.lr = 0.0;
    std::vector<Parameter> p{{"theta", Tensor({2}, {1.5, -2.5})}};
    auto s = AdamState::init(p, c0);
    std::vector<Tensor> gr{Tensor({2}, {3.0, -1.0})};
    adam_step(p, gr, s);
    CHECK(p[0].value.values[0] == 1.5);
    CHECK(p[0].value.values[1] == -2.5);
  }
}

TEST_CASE("weighted cross entropy values") {
  // probability 1 on the target -> loss 0
  {
    Tape t;
    Tensor logits({1, 3}, {100.0, 0.0, 0.0});
    auto l = t.weighted_cross_entropy(t.leaf(logits, false), {0}, {5.0, 1.0, 1.0}, {1});
    CHECK(t.value(l).item() == doctest::Approx(0.0).epsilon(1e-12));
  }
  // two-class uniform logits, uniform weights -> ln 2
  {
    Tape t;
    Tensor logits({1, 2}, {0.0, 0.0});
    auto l = t.weighted_cross_entropy(t.leaf(logits, false), {1}, {1.0, 1.0}, {1});
    CHECK(t.value(l).item() == doctest::Approx(std::log(2.0)).epsilon(1e-12));
  }
  // hand-computed weighted batch: rows (1,0) and (0,2), targets (0,1), weights (1,3)
  {
    Tape t;
    Tensor logits({2, 2}, {1.0, 0.0, 0.0, 2.0});
    auto l = t.weighted_cross_entropy(t.leaf(logits, false), {0, 1}, {1.0, 3.0}, {1, 1});
    const double ce0 = std::log(std::exp(1.0) + 1.0) - 1.0;
    const double ce1 = std::log(1.0 + std::exp(2.0)) - 2.0;
    const double expected = (1.0 * ce0 + 3.0 * ce1) / 4.0;
    CHECK(t.value(l).item() == doctest::Approx(expected).epsilon(1e-14));
  }
  // uniform weights + full mask equals unweighted mean cross entropy
  {
    Rng rng(51);
    Tensor logits = random_tensor({6, 4}, rng, -3.0, 3.0);
    std::vector<int64_t> targets = {0, 3, 1, 2, 2, 0};
    Tape t;
    auto l = t.weighted_cross_entropy(t.leaf(logits, false), targets, {2.0, 2.0, 2.0, 2.0},
                                      std::vector<uint8_t>(6, 1));
    double mean_ce = 0.0;
    for (int i = 0; i < 6; ++i) {
      double mx = -1e300, z = 0.0;
      for (int c = 0; c < 4; ++c) mx = std::max(mx, logits.values[static_cast<size_t>(i * 4 + c)]);
      for (int c = 0; c < 4; ++c) z += std::exp(logits.values[static_cast<size_t>(i * 4 + c)] - mx);
      mean_ce += mx + std::log(z) - logits.values[static_cast<size_t>(i * 4 + targets[static_cast<size_t>(i)])];
    }
    mean_ce /= 6.0;
    CHECK(testutil::rel_err(t.value(l).item(), mean_ce) < 1e-12);
  }
  // masked rows are ignored; sentinel targets allowed there
  {
    Tape t;
    Tensor logits({2, 2}, {0.0, 0.0, 9.0, -9.0});
    auto l = t.weighted_cross_entropy(t.leaf(logits, false), {1, -1}, {1.0, 1.0}, {1, 0});
    CHECK(t.value(l).item() == doctest::Approx(std::log(2.0)).epsilon(1e-12));
  }
  // errors
  {
    Tape t;
    Tensor logits({2, 2});
    CHECK_THROWS_AS(
        t.weighted_cross_entropy(t.leaf(logits, false), {0, 1}, {1.0, 1.0}, {0, 0}),
        AllMasked);
    CHECK_THROWS_AS(
        t.weighted_cross_entropy(t.leaf(logits, false), {0, 5}, {1.0, 1.0}, {1, 1}),
        ClassIndexOutOfRange);
    CHECK_THROWS_AS(
        t.weighted_cross_entropy(t.leaf(logits, false), {0, 1}, {1.0, 0.0}, {1, 1}),
        InvalidWeight);
  }
}

TEST_CASE("class weights: inverse frequency with mean one") {
  auto w = class_weights({147, 3995});
  CHECK(std::abs(w[0] - 4142.0 / (2.0 * 147.0)) < 1e-12);
  CHECK(std::abs(w[1] - 4142.0 / (2.0 * 3995.0)) < 1e-12);
  CHECK(w[0] == doctest::Approx(14.088).epsilon(1e-3));
  CHECK(w[1] == doctest::Approx(0.5184).epsilon(1e-3));

  auto balanced = class_weights({10, 10});
  CHECK(balanced[0] == 1.0);
  CHECK(balanced[1] == 1.0);

  auto three = class_weights({1, 1, 2});
  CHECK(three[0] == doctest::Approx(4.0 / 3.0).epsilon(1e-15));
  CHECK(three[1] == doctest::Approx(4.0 / 3.0).epsilon(1e-15));
  CHECK(three[2] == doctest::Approx(2.0 / 3.0).epsilon(1e-15));

  CHECK_THROWS_AS(class_weights({3, 0}), EmptyClass);
  CHECK_THROWS_AS(class_weights({}), EmptyClass);
}

TEST_CASE("pairwise L2 regularizer") {
  Rng rng(61);
  // two identical towers -> 0
  {
    Tape t;
    Tensor w = random_tensor({3, 2}, rng);
    Tape::NamedIds a{{"w", t.leaf(w, true)}};
    Tape::NamedIds b{{"w", t.leaf(w, true)}};
    auto reg = t.l2_pairwise_reg({a, b}, 0.5);
    CHECK(t.value(reg).item() == 0.0);
  }
  // single differing entry
  {
    Tape t;
    Tape::NamedIds a{{"w", t.leaf(Tensor({2}, {1.0, 0.0}), true)}};
    Tape::NamedIds b{{"w", t.leaf(Tensor({2}, {0.0, 0.0}), true)}};
    auto reg = t.l2_pairwise_reg({a, b}, 1.0);
    CHECK(t.value(reg).item() == doctest::Approx(1.0).epsilon(1e-15));
  }
  // three towers with scalar layers 0, 1, 3 at lambda 0.1 -> 1.4
  {
    Tape t;
    Tape::NamedIds a{{"w", t.leaf(Tensor({1}, {0.0}), true)}};
    Tape::NamedIds b{{"w", t.leaf(Tensor({1}, {1.0}), true)}};
    Tape::NamedIds c{{"w", t.leaf(Tensor({1}, {3.0}), true)}};
    auto reg = t.l2_pairwise_reg({a, b, c}, 0.1);
    CHECK(t.value(reg).item() == doctest::Approx(1.4).epsilon(1e-15));
  }
  // permutation invariance
  {
    Tensor w1 = random_tensor({4}, rng), w2 = random_tensor({4}, rng), w3 = random_tensor({4}, rng);
    auto eval = [&](std::vector<Tensor> order) {
      Tape t;
      std::vector<Tape::NamedIds> towers;
      for (auto& w : order) towers.push_back({{"w", t.leaf(w, true)}});
      return t.value(t.l2_pairwise_reg(towers, 0.3)).item();
    };
    const double base = eval({w1, w2, w3});
    CHECK(testutil::rel_err(eval({w3, w1, w2}), base) < 1e-12);
    CHECK(testutil::rel_err(eval({w2, w3, w1}), base) < 1e-12);
  }
  // gradient matches finite differences
  {
    std::vector<Parameter> params{{"a.w", random_tensor({3}, rng)},
                                  {"b.w", random_tensor({3}, rng)},
                                  {"c.w", random_tensor({3}, rng)}};
    auto rep = grad_check(
        [](Tape& t, const std::vector<Tape::Id>& ids) {
          return t.l2_pairwise_reg(
              {{{"w", ids[0]}}, {{"w", ids[1]}}, {{"w", ids[2]}}}, 0.1);
        },
        params, 1e-6);
    CHECK(rep.pass);
  }
  // name set mismatch
  {
    Tape t;
    Tape::NamedIds a{{"w", t.leaf(Tensor({1}), true)}};
    Tape::NamedIds b{{"v", t.leaf(Tensor({1}), true)}};
    CHECK_THROWS_AS(t.l2_pairwise_reg({a, b}, 1.0), NameSetMismatch);
  }
  // shape mismatch
  {
    Tape t;
    Tape::NamedIds a{{"w", t.leaf(Tensor({1}), true)}};
    Tape::NamedIds b{{"w", t.leaf(Tensor({2}), true)}};
    CHECK_THROWS_AS(t.l2_pairwise_reg({a, b}, 1.0), ShapeMismatch);
  }
}

TEST_CASE("backward error conditions") {
  Tape t;
  auto vec = t.leaf(Tensor({3}, {1.0, 2.0, 3.0}), true);
  CHECK_THROWS_AS(t.backward(vec), NonScalarLoss);

  auto detached = t.sum_all(t.leaf(Tensor({3}, {1.0, 2.0, 3.0}), false));
  CHECK_THROWS_AS(t.backward(detached), DetachedLoss);

  CHECK_THROWS_AS(t.value(static_cast<Tape::Id>(999)), DetachedLoss);
  CHECK_THROWS_AS(t.softmax(vec, 3), AxisOutOfRange);
  CHECK_THROWS_AS(t.mul(vec, t.leaf(Tensor({4}), false)), ShapeMismatch);
}
