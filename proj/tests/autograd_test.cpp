#include <gtest/gtest.h>

#include "kn/autograd.hpp"
#include "kn/ops.hpp"
#include "test_util.hpp"

using kn::backward;
using kn::leaf;
using kn::Rng;
using kn::Tensor4;
using kn::Value;

TEST(Autograd, LeafIdentityVJP) {
  auto x = leaf(Tensor4<double>(2, 1, 3, 3, 2.0), true);
  backward(x);  // seed of ones
  ASSERT_EQ(x->grad.size(), x->value.size());
  for (double g : x->grad.data) EXPECT_EQ(g, 1.0);
}

TEST(Autograd, QuadraticGradient) {
  Rng rng(3);
  auto xv = kntest::random_tensor<double>(1, 2, 3, 4, rng);
  auto x = leaf(xv, true);
  auto y = kn::sum_all(kn::mul(x, x));
  backward(y);
  for (std::size_t i = 0; i < xv.size(); ++i)
    EXPECT_NEAR(x->grad.data[i], 2.0 * xv.data[i], 1e-12);
}

TEST(Autograd, SeedShapeMismatchThrows) {
  auto x = leaf(Tensor4<double>(1, 1, 2, 2), true);
  EXPECT_THROW(backward(x, Tensor4<double>(1, 1, 2, 3, 1.0)),
               std::runtime_error);
}

TEST(Autograd, CycleDetected) {
  auto a = leaf(Tensor4<double>(1, 1, 1, 1, 1.0), true);
  auto b = kn::scale(a, 2.0);
  // corrupt the graph on purpose
  a->parents.push_back(b);
  EXPECT_THROW(kn::topo_order(b), std::runtime_error);
}

TEST(Autograd, GradientOfSumIsSumOfGradients) {
  Rng rng(5);
  auto xv = kntest::random_tensor<double>(1, 1, 4, 4, rng);
  // gradient of sum(relu(x)*x) seeded once vs seeded output-by-output
  auto x1 = leaf(xv, true);
  auto y1 = kn::mul(kn::relu(x1), x1);
  backward(y1);  // all-ones seed = sum over outputs

  std::vector<double> acc(xv.size(), 0.0);
  for (std::size_t k = 0; k < xv.size(); ++k) {
    auto x2 = leaf(xv, true);
    auto y2 = kn::mul(kn::relu(x2), x2);
    Tensor4<double> seed(y2->value.n, y2->value.c, y2->value.h, y2->value.w);
    seed.data[k] = 1.0;
    backward(y2, seed);
    for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += x2->grad.data[i];
  }
  for (std::size_t i = 0; i < acc.size(); ++i)
    EXPECT_NEAR(x1->grad.data[i], acc[i], 1e-12);
}

TEST(Autograd, DiamondGraphAccumulates) {
  auto x = leaf(Tensor4<double>(1, 1, 1, 1, 3.0), true);
  auto a = kn::scale(x, 2.0);
  auto b = kn::scale(x, 5.0);
  auto y = kn::add(a, b);
  backward(y);
  EXPECT_DOUBLE_EQ(x->grad.data[0], 7.0);
}

TEST(Autograd, CompositeGraphMatchesFiniteDifferences) {
  Rng rng(11);
  auto xv = kntest::random_tensor<double>(2, 3, 4, 4, rng);
  auto wv = kntest::random_tensor<double>(4, 3, 3, 3, rng, 0.5);

  auto run = [&]() {
    auto x = leaf(xv, true);
    auto w = leaf(wv, true);
    auto h = kn::conv2d(x, w, std::optional<Value<double>>{}, 1, 1, 1, 1);
    auto act = kn::mish(h);
    auto y = kn::sum_all(kn::mul(act, act));
    return std::tuple{x, w, y};
  };

  auto [x, w, y] = run();
  backward(y);
  auto ga = kntest::grad_as_doubles(x);
  auto scalar = [&]() {
    auto [x2, w2, y2] = run();
    return y2->value.data[0];
  };
  auto res = kntest::finite_diff_check(xv, scalar, ga);
  EXPECT_LE(res.max_rel_err, 1e-5)
      << "analytic " << res.analytic << " numeric " << res.numeric;

  auto gw = kntest::grad_as_doubles(w);
  auto resw = kntest::finite_diff_check(wv, scalar, gw);
  EXPECT_LE(resw.max_rel_err, 1e-5);
}
