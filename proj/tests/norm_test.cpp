#include <gtest/gtest.h>

#include <cmath>

#include "kn/norm.hpp"
#include "test_util.hpp"

using kn::backward;
using kn::kernel_norm;
using kn::kernel_norm_output_shape;
using kn::KernelNormConfig;
using kn::kn_mean_var;
using kn::leaf;
using kn::Rng;
using kn::Tensor4;
using kn::Value;

namespace {

KernelNormConfig cfg(int k, int s, int p, double drop = 0.0) {
  KernelNormConfig c;
  c.kh = c.kw = k;
  c.sh = c.sw = s;
  c.ph = c.pw = p;
  c.dropout_p = drop;
  return c;
}

}  // namespace

// --------------------------------------------------------------------------
// kn_mean_var
// --------------------------------------------------------------------------

TEST(KnMeanVar, ConstantInput) {
  Tensor4<double> x(2, 3, 6, 6, 4.25);
  auto st = kn_mean_var(x, cfg(3, 2, 0));
  for (double m : st.mu.data) EXPECT_NEAR(m, 4.25, 1e-12);
  for (double v : st.var.data) EXPECT_NEAR(v, 0.0, 1e-12);
}

TEST(KnMeanVar, HandComputedThreeByThree) {
  Tensor4<double> x(1, 1, 3, 3);
  for (int i = 0; i < 9; ++i) x.data[i] = i + 1;  // 1..9
  auto st = kn_mean_var(x, cfg(3, 1, 0));
  ASSERT_EQ(st.mu.size(), 1u);
  EXPECT_NEAR(st.mu.data[0], 5.0, 1e-12);
  EXPECT_NEAR(st.var.data[0], 60.0 / 9.0, 1e-12);
}

TEST(KnMeanVar, MatchesUnfoldOracle) {
  Rng rng(17);
  auto x = kntest::random_tensor<double>(2, 3, 9, 8, rng);
  const auto c = cfg(3, 2, 1);
  auto st = kn_mean_var(x, c);
  auto xp = kn::pad2d_raw(x, 1, 1);
  auto u = kn::unfold(xp, 3, 3, 2, 2);
  ASSERT_EQ(u.nh, st.mu.h);
  ASSERT_EQ(u.nw, st.mu.w);
  for (int i = 0; i < x.n; ++i)
    for (int wi = 0; wi < u.nh; ++wi)
      for (int wj = 0; wj < u.nw; ++wj) {
        const double* w = u.window(i, wi, wj);
        const std::size_t sz = u.window_size();
        double s = 0;
        for (std::size_t k = 0; k < sz; ++k) s += w[k];
        const double mu = s / sz;
        double v = 0;
        for (std::size_t k = 0; k < sz; ++k) v += (w[k] - mu) * (w[k] - mu);
        v /= sz;
        EXPECT_NEAR(st.mu.at(i, 0, wi, wj), mu,
                    1e-6 * std::max(1.0, std::fabs(mu)));
        EXPECT_NEAR(st.var.at(i, 0, wi, wj), v, 1e-6 * std::max(1.0, v));
      }
}

TEST(KnMeanVar, KernelExceedsPaddedInputThrows) {
  Tensor4<double> x(1, 1, 3, 3);
  EXPECT_THROW(kn_mean_var(x, cfg(6, 1, 1)), std::invalid_argument);
}

// full-count denominator: dropped elements are zeros, count stays c*kh*kw
TEST(KnMeanVar, DropoutUsesFullCountDenominator) {
  Tensor4<double> x(1, 1, 2, 2, 1.0);
  Tensor4<double> mask(1, 1, 2, 2, 2.0);  // p = 0.5 scale on all-kept
  mask.data[3] = 0.0;                     // one element dropped
  auto st = kn_mean_var(x, cfg(2, 1, 0), &mask);
  // masked window: {2, 2, 2, 0}; mean = 6/4
  EXPECT_NEAR(st.mu.data[0], 1.5, 1e-12);
  EXPECT_NEAR(st.var.data[0], (3 * 0.25 + 2.25) / 4.0, 1e-12);
}

TEST(KnMeanVar, InvertedDropoutMeanIsUnbiased) {
  Rng rng(23);
  auto x = kntest::random_tensor<double>(1, 2, 4, 4, rng);
  const auto c0 = cfg(4, 1, 0);
  const double mu0 = kn_mean_var(x, c0).mu.data[0];

  const double p = 0.3;
  const int trials = 10000;
  double s = 0, s2 = 0;
  Rng mrng(900);
  for (int t = 0; t < trials; ++t) {
    auto mask = kn::dropout_mask<double>(1, 2, 4, 4, p, mrng.split(t));
    const double m = kn_mean_var(x, c0, &mask).mu.data[0];
    s += m;
    s2 += m * m;
  }
  const double mean = s / trials;
  const double var = s2 / trials - mean * mean;
  const double stderr3 = 3.0 * std::sqrt(var / trials);
  EXPECT_NEAR(mean, mu0, stderr3);
}

// --------------------------------------------------------------------------
// kernel_norm_output_shape
// --------------------------------------------------------------------------

TEST(KnShape, ExactTilingPreservesSize) {
  for (int k : {1, 2, 4}) {
    auto [ho, wo] = kernel_norm_output_shape(16, 8, cfg(k, k, 0));
    EXPECT_EQ(ho, 16);
    EXPECT_EQ(wo, 8);
  }
}

TEST(KnShape, PaperFormulaExamples) {
  auto [h1, w1] = kernel_norm_output_shape(32, 32, cfg(3, 2, 1));
  EXPECT_EQ(h1, 48);
  EXPECT_EQ(w1, 48);
  auto [h2, w2] = kernel_norm_output_shape(5, 5, cfg(3, 4, 0));
  EXPECT_EQ(h2, 3);  // stride > kernel skips elements
  EXPECT_EQ(w2, 3);
}

TEST(KnShape, MatchesBruteForceEnumeration) {
  // window count by explicit enumeration over start positions
  for (int h = 1; h <= 12; ++h)
    for (int k = 1; k <= 5; ++k)
      for (int s = 1; s <= 4; ++s)
        for (int p = 0; p <= 2; ++p) {
          const int hp = h + 2 * p;
          if (k > hp) continue;
          int count = 0;
          for (int y = 0; y + k <= hp; y += s) ++count;
          auto [ho, wo] = kernel_norm_output_shape(h, h, cfg(k, s, p));
          EXPECT_EQ(ho, k * count) << "h=" << h << " k=" << k << " s=" << s;
        }
}

// --------------------------------------------------------------------------
// kernel_norm
// --------------------------------------------------------------------------

TEST(KernelNorm, ConstantInputGivesZeros) {
  auto x = leaf(Tensor4<double>(1, 2, 4, 4, 3.0));
  auto y = kernel_norm(x, cfg(2, 2, 0), nullptr);
  for (double v : y->value.data) EXPECT_NEAR(v, 0.0, 1e-9);
}

TEST(KernelNorm, OutputShape) {
  auto x = leaf(Tensor4<float>(2, 3, 32, 32, 1.f));
  auto y = kernel_norm(x, cfg(3, 2, 1), nullptr);
  EXPECT_EQ(y->value.n, 2);
  EXPECT_EQ(y->value.c, 3);
  EXPECT_EQ(y->value.h, 48);
  EXPECT_EQ(y->value.w, 48);
}

TEST(KernelNorm, NormalizedUnitsHaveZeroMeanUnitVariance) {
  Rng rng(29);
  auto xv = kntest::random_tensor<double>(2, 3, 10, 10, rng);
  const auto c = cfg(3, 2, 1);
  auto y = kernel_norm(leaf(xv), c, nullptr);
  const int nh = y->value.h / 3, nw = y->value.w / 3;
  const double N = 3.0 * 3 * 3;
  for (int i = 0; i < 2; ++i)
    for (int wi = 0; wi < nh; ++wi)
      for (int wj = 0; wj < nw; ++wj) {
        double s = 0, s2 = 0;
        for (int j = 0; j < 3; ++j)
          for (int a = 0; a < 3; ++a)
            for (int b = 0; b < 3; ++b) {
              const double v = y->value.at(i, j, wi * 3 + a, wj * 3 + b);
              s += v;
              s2 += v * v;
            }
        const double mean = s / N;
        const double var = s2 / N - mean * mean;
        EXPECT_LE(std::fabs(mean), 1e-6);
        EXPECT_GE(var, 1.0 - 10 * 1e-5);
        EXPECT_LE(var, 1.0 + 1e-9);
      }
}

TEST(KernelNorm, WindowOrderIsWidthMajor) {
  // stride < kernel: overlapping columns appear once per window
  Tensor4<double> x(1, 1, 1, 3);
  x.data = {1.0, 2.0, 10.0};
  KernelNormConfig c;
  c.kh = 1;
  c.kw = 2;
  c.sh = 1;
  c.sw = 1;
  auto y = kernel_norm(leaf(x), c, nullptr);
  ASSERT_EQ(y->value.w, 4);
  // window 0 = {1,2} -> normalized {-1,1}; window 1 = {2,10} -> {-1,1}
  EXPECT_NEAR(y->value.data[0], -1.0, 1e-4);
  EXPECT_NEAR(y->value.data[1], 1.0, 1e-4);
  EXPECT_NEAR(y->value.data[2], -1.0, 1e-4);
  EXPECT_NEAR(y->value.data[3], 1.0, 1e-4);
}

TEST(KernelNorm, UnitCountMatchesFormula) {
  Rng rng(31);
  auto xv = kntest::random_tensor<double>(3, 2, 9, 7, rng);
  const auto c = cfg(3, 2, 1);
  auto y = kernel_norm(leaf(xv), c, nullptr);
  auto [ho, wo] = kernel_norm_output_shape(9, 7, c);
  EXPECT_EQ(y->value.h, ho);
  EXPECT_EQ(y->value.w, wo);
  // normalization units per sample = (h_out/kh) * (w_out/kw)
  auto st = kn_mean_var(xv, c);
  EXPECT_EQ(st.mu.h * st.mu.w, (ho / 3) * (wo / 3));
}

TEST(KernelNorm, AffineInputInvariance) {
  Rng rng(37);
  auto xv = kntest::random_tensor<double>(1, 3, 8, 8, rng);
  const auto c = cfg(3, 2, 1);
  auto y1 = kernel_norm(leaf(xv), c, nullptr);
  Tensor4<double> xs = xv;
  for (auto& v : xs.data) v = 2.5 * v - 1.25;
  auto y2 = kernel_norm(leaf(xs), c, nullptr);
  for (std::size_t i = 0; i < y1->value.size(); ++i)
    EXPECT_NEAR(y1->value.data[i], y2->value.data[i], 1e-5);
}

TEST(KernelNorm, GradientMatchesFiniteDifferences) {
  Rng rng(41);
  auto xv = kntest::random_tensor<double>(1, 2, 6, 6, rng);
  const auto c = cfg(3, 2, 1);
  Tensor4<double> probe;
  auto run = [&](bool grad) {
    auto x = leaf(xv, grad);
    return std::pair{x, kernel_norm(x, c, nullptr)};
  };
  auto [x, y] = run(true);
  probe = Tensor4<double>(y->value.n, y->value.c, y->value.h, y->value.w);
  Rng prng(7);
  for (auto& v : probe.data) v = prng.next_normal();
  backward(y, probe);
  auto scalar = [&]() {
    auto [x2, y2] = run(false);
    double s = 0;
    for (std::size_t i = 0; i < probe.size(); ++i)
      s += probe.data[i] * y2->value.data[i];
    return s;
  };
  auto res = kntest::finite_diff_check(xv, scalar, kntest::grad_as_doubles(x));
  EXPECT_LE(res.max_rel_err, 1e-5) << res.analytic << " vs " << res.numeric;
}

TEST(KernelNorm, GradientWithDropoutMask) {
  Rng rng(43);
  auto xv = kntest::random_tensor<double>(1, 2, 5, 5, rng);
  auto mask = kn::dropout_mask<double>(1, 2, 5, 5, 0.4, Rng(77));
  const auto c = cfg(2, 2, 1, 0.4);
  Tensor4<double> probe;
  auto run = [&](bool grad) {
    auto x = leaf(xv, grad);
    return std::pair{x, kernel_norm(x, c, &mask)};
  };
  auto [x, y] = run(true);
  probe = Tensor4<double>(y->value.n, y->value.c, y->value.h, y->value.w);
  Rng prng(8);
  for (auto& v : probe.data) v = prng.next_normal();
  backward(y, probe);
  auto scalar = [&]() {
    auto [x2, y2] = run(false);
    double s = 0;
    for (std::size_t i = 0; i < probe.size(); ++i)
      s += probe.data[i] * y2->value.data[i];
    return s;
  };
  auto res = kntest::finite_diff_check(xv, scalar, kntest::grad_as_doubles(x));
  EXPECT_LE(res.max_rel_err, 1e-5);
}

TEST(KnStatsNodes, GradientsMatchFiniteDifferences) {
  Rng rng(47);
  auto xv = kntest::random_tensor<double>(1, 2, 5, 5, rng);
  auto mask = kn::dropout_mask<double>(1, 2, 5, 5, 0.3, Rng(78));
  const auto c = cfg(3, 2, 1, 0.3);
  Tensor4<double> probe_mu, probe_var;
  auto run = [&](bool grad) {
    auto x = leaf(xv, grad);
    auto [mu, var] = kn::kn_stats_nodes(x, c, &mask);
    return std::tuple{x, mu, var};
  };
  auto [x, mu, var] = run(true);
  Rng prng(9);
  probe_mu = Tensor4<double>(mu->value.n, 1, mu->value.h, mu->value.w);
  probe_var = probe_mu;
  for (auto& v : probe_mu.data) v = prng.next_normal();
  for (auto& v : probe_var.data) v = prng.next_normal();
  backward(mu, probe_mu);
  backward(var, probe_var);
  auto scalar = [&]() {
    auto [x2, mu2, var2] = run(false);
    double s = 0;
    for (std::size_t i = 0; i < probe_mu.size(); ++i)
      s += probe_mu.data[i] * mu2->value.data[i] +
           probe_var.data[i] * var2->value.data[i];
    return s;
  };
  auto res = kntest::finite_diff_check(xv, scalar, kntest::grad_as_doubles(x));
  EXPECT_LE(res.max_rel_err, 1e-5);
}

// --------------------------------------------------------------------------
// batch / group / layer / instance norm
// --------------------------------------------------------------------------

namespace {

template <typename T>
kn::Value<T> ones_param(int c) {
  return leaf(Tensor4<T>(c, 1, 1, 1, T(1)), true);
}
template <typename T>
kn::Value<T> zeros_param(int c) {
  return leaf(Tensor4<T>(c, 1, 1, 1, T(0)), true);
}

}  // namespace

TEST(BatchNorm, ConstantChannelsGiveBeta) {
  Tensor4<double> x(3, 2, 4, 4);
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 2; ++j)
      for (int k = 0; k < 16; ++k)
        x.data[(i * 2 + j) * 16 + k] = j + 1.0;
  auto gamma = ones_param<double>(2);
  auto beta = leaf(Tensor4<double>(2, 1, 1, 1), true);
  beta->value.data = {0.7, -1.2};
  kn::BatchNormState<double> st;
  auto y = kn::batch_norm(leaf(x), gamma, beta, st, true);
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 2; ++j)
      for (int k = 0; k < 16; ++k)
        EXPECT_NEAR(y->value.data[(i * 2 + j) * 16 + k], beta->value.data[j], 1e-6);
}

TEST(BatchNorm, TrainingStandardizesChannels) {
  Rng rng(53);
  auto xv = kntest::random_tensor<double>(4, 3, 5, 5, rng);
  kn::BatchNormState<double> st;
  auto y = kn::batch_norm(leaf(xv), ones_param<double>(3), zeros_param<double>(3),
                          st, true);
  const int plane = 25;
  for (int j = 0; j < 3; ++j) {
    double s = 0, s2 = 0;
    for (int i = 0; i < 4; ++i)
      for (int k = 0; k < plane; ++k) {
        const double v = y->value.data[(i * 3 + j) * plane + k];
        s += v;
        s2 += v * v;
      }
    const double mean = s / (4 * plane);
    EXPECT_LE(std::fabs(mean), 1e-6);
    EXPECT_NEAR(s2 / (4 * plane) - mean * mean, 1.0, 1e-3);
  }
}

TEST(BatchNorm, RunningStatsFollowMomentumRecurrence) {
  Rng rng(59);
  kn::BatchNormState<double> st;
  auto gamma = ones_param<double>(2);
  auto beta = zeros_param<double>(2);
  const double momentum = 0.1;
  // independent recurrence oracle
  std::vector<double> rm(2, 0.0), rv(2, 1.0);
  for (int step = 0; step < 5; ++step) {
    auto xv = kntest::random_tensor<double>(3, 2, 4, 4, rng);
    for (int j = 0; j < 2; ++j) {
      double s = 0, s2 = 0;
      for (int i = 0; i < 3; ++i)
        for (int k = 0; k < 16; ++k) {
          const double v = xv.at(i, j, k / 4, k % 4);
          s += v;
          s2 += v * v;
        }
      const double m = s / 48.0, var = s2 / 48.0 - m * m;
      rm[j] = (1 - momentum) * rm[j] + momentum * m;
      rv[j] = (1 - momentum) * rv[j] + momentum * var;
    }
    kn::batch_norm(leaf(xv), gamma, beta, st, true, momentum);
  }
  for (int j = 0; j < 2; ++j) {
    EXPECT_NEAR(st.running_mean.data[j], rm[j], 1e-9);
    EXPECT_NEAR(st.running_var.data[j], rv[j], 1e-9);
  }
  // eval mode standardizes with the stored statistics
  Tensor4<double> probe(1, 2, 1, 1);
  probe.data = {rm[0], rm[1]};
  auto y = kn::batch_norm(leaf(probe), gamma, beta, st, false, momentum);
  EXPECT_NEAR(y->value.data[0], 0.0, 1e-9);
  EXPECT_NEAR(y->value.data[1], 0.0, 1e-9);
}

TEST(GroupNorm, OneGroupEqualsLayerNorm) {
  Rng rng(61);
  auto xv = kntest::random_tensor<double>(2, 6, 4, 4, rng);
  auto gamma = ones_param<double>(6);
  auto beta = zeros_param<double>(6);
  auto a = kn::group_norm(leaf(xv), gamma, beta, 6);
  auto b = kn::layer_norm(leaf(xv), gamma, beta);
  EXPECT_EQ(a->value.data, b->value.data);
}

TEST(GroupNorm, GroupSizeOneEqualsInstanceNorm) {
  Rng rng(62);
  auto xv = kntest::random_tensor<double>(2, 4, 3, 3, rng);
  auto gamma = ones_param<double>(4);
  auto beta = zeros_param<double>(4);
  auto a = kn::group_norm(leaf(xv), gamma, beta, 1);
  auto b = kn::instance_norm(leaf(xv), gamma, beta);
  EXPECT_EQ(a->value.data, b->value.data);
}

TEST(GroupNorm, UnitsStandardizedPreAffine) {
  Rng rng(63);
  auto xv = kntest::random_tensor<double>(2, 6, 5, 5, rng);
  auto y = kn::group_norm(leaf(xv), ones_param<double>(6), zeros_param<double>(6), 2);
  const int plane = 25;
  for (int i = 0; i < 2; ++i)
    for (int g = 0; g < 3; ++g) {
      double s = 0, s2 = 0;
      for (int jj = 0; jj < 2; ++jj)
        for (int k = 0; k < plane; ++k) {
          const double v = y->value.data[((i * 6) + g * 2 + jj) * plane + k];
          s += v;
          s2 += v * v;
        }
      const double mean = s / (2 * plane);
      EXPECT_LE(std::fabs(mean), 1e-6);
      EXPECT_NEAR(s2 / (2 * plane) - mean * mean, 1.0, 1e-3);
    }
}

TEST(GroupNorm, IndivisibleChannelsThrow) {
  auto x = leaf(Tensor4<double>(1, 5, 2, 2, 1.0));
  EXPECT_THROW(
      kn::group_norm(x, ones_param<double>(5), zeros_param<double>(5), 2),
      std::invalid_argument);
}

template <typename NormFn>
void check_norm_gradients(NormFn make, int channels) {
  Rng rng(71);
  auto xv = kntest::random_tensor<double>(2, channels, 4, 4, rng);
  auto gamma = leaf(Tensor4<double>(channels, 1, 1, 1, 1.0), true);
  auto beta = leaf(Tensor4<double>(channels, 1, 1, 1, 0.0), true);
  for (auto& v : gamma->value.data) v = 1.0 + 0.1 * rng.next_normal();

  Tensor4<double> probe;
  auto run = [&](bool grad) {
    auto x = leaf(xv, grad);
    return std::pair{x, make(x, gamma, beta)};
  };
  auto [x, y] = run(true);
  probe = Tensor4<double>(y->value.n, y->value.c, y->value.h, y->value.w);
  Rng prng(72);
  for (auto& v : probe.data) v = prng.next_normal();
  backward(y, probe);
  auto scalar = [&]() {
    auto [x2, y2] = run(false);
    double s = 0;
    for (std::size_t i = 0; i < probe.size(); ++i)
      s += probe.data[i] * y2->value.data[i];
    return s;
  };
  auto res = kntest::finite_diff_check(xv, scalar, kntest::grad_as_doubles(x));
  EXPECT_LE(res.max_rel_err, 1e-5) << res.analytic << " vs " << res.numeric;
  auto resg =
      kntest::finite_diff_check(gamma->value, scalar, kntest::grad_as_doubles(gamma));
  EXPECT_LE(resg.max_rel_err, 1e-5);
  auto resb =
      kntest::finite_diff_check(beta->value, scalar, kntest::grad_as_doubles(beta));
  EXPECT_LE(resb.max_rel_err, 1e-5);
}

TEST(NormGradients, BatchNormTraining) {
  check_norm_gradients(
      [](const Value<double>& x, const Value<double>& g, const Value<double>& b) {
        kn::BatchNormState<double> st;
        return kn::batch_norm(x, g, b, st, true);
      },
      3);
}

TEST(NormGradients, BatchNormEval) {
  kn::BatchNormState<double> st;
  st.init(3);
  Rng r(73);
  for (auto& v : st.running_mean.data) v = r.next_normal();
  for (auto& v : st.running_var.data) v = 1.0 + r.next_uniform();
  check_norm_gradients(
      [&](const Value<double>& x, const Value<double>& g, const Value<double>& b) {
        return kn::batch_norm(x, g, b, st, false);
      },
      3);
}

TEST(NormGradients, GroupNorm) {
  check_norm_gradients(
      [](const Value<double>& x, const Value<double>& g, const Value<double>& b) {
        return kn::group_norm(x, g, b, 2);
      },
      4);
}

// --------------------------------------------------------------------------
// batch independence
// --------------------------------------------------------------------------

TEST(BatchIndependence, AllLayersExceptTrainingBatchNorm) {
  Rng rng(81);
  auto x1 = kntest::random_tensor<double>(2, 4, 6, 6, rng);
  auto x2 = kntest::random_tensor<double>(3, 4, 6, 6, rng);
  Tensor4<double> joint(5, 4, 6, 6);
  std::copy(x1.data.begin(), x1.data.end(), joint.data.begin());
  std::copy(x2.data.begin(), x2.data.end(), joint.data.begin() + x1.size());

  auto gamma = ones_param<double>(4);
  auto beta = zeros_param<double>(4);
  Rng drop_base(500);

  auto check = [&](auto&& fn, const std::string& name) {
    auto yj = fn(leaf(joint), 0);
    auto y1 = fn(leaf(x1), 0);
    auto y2 = fn(leaf(x2), 2);  // sample offset continues after x1 rows
    ASSERT_EQ(yj->value.size(), y1->value.size() + y2->value.size()) << name;
    for (std::size_t i = 0; i < y1->value.size(); ++i)
      EXPECT_NEAR(yj->value.data[i], y1->value.data[i], 1e-6) << name;
    for (std::size_t i = 0; i < y2->value.size(); ++i)
      EXPECT_NEAR(yj->value.data[y1->value.size() + i], y2->value.data[i], 1e-6)
          << name;
  };

  check(
      [&](Value<double> x, std::int64_t off) {
        auto c = cfg(3, 2, 1, 0.5);
        auto mask =
            kn::dropout_mask<double>(x->value.n, 4, 6, 6, 0.5, drop_base, off);
        return kernel_norm(x, c, &mask);
      },
      "kernel_norm+dropout");
  check([&](Value<double> x, std::int64_t) {
    return kn::group_norm(x, gamma, beta, 2);
  }, "group_norm");
  check([&](Value<double> x, std::int64_t) {
    return kn::layer_norm(x, gamma, beta);
  }, "layer_norm");
  check([&](Value<double> x, std::int64_t) {
    return kn::instance_norm(x, gamma, beta);
  }, "instance_norm");
  check([&](Value<double> x, std::int64_t) {
    kn::BatchNormState<double> st;
    return kn::batch_norm(x, gamma, beta, st, false);  // eval mode
  }, "batch_norm eval");

  // training-mode batch norm couples the samples
  kn::BatchNormState<double> stj, st1;
  auto yj = kn::batch_norm(leaf(joint), gamma, beta, stj, true);
  auto y1 = kn::batch_norm(leaf(x1), gamma, beta, st1, true);
  double max_dev = 0;
  for (std::size_t i = 0; i < y1->value.size(); ++i)
    max_dev = std::max(max_dev, std::fabs(yj->value.data[i] - y1->value.data[i]));
  EXPECT_GE(max_dev, 1e-3);
}

TEST(DropoutMask, DeterministicPerStream) {
  auto a = kn::dropout_mask<float>(2, 3, 4, 4, 0.5, Rng(123), 7);
  auto b = kn::dropout_mask<float>(2, 3, 4, 4, 0.5, Rng(123), 7);
  EXPECT_EQ(a.data, b.data);
  auto c = kn::dropout_mask<float>(2, 3, 4, 4, 0.5, Rng(123), 8);
  EXPECT_NE(a.data, c.data);
}

TEST(DropoutMask, PlainMaskingFlag) {
  auto m = kn::dropout_mask<double>(1, 1, 8, 8, 0.25, Rng(5), 0, /*scaled=*/false);
  for (double v : m.data) EXPECT_TRUE(v == 0.0 || v == 1.0);
  auto s = kn::dropout_mask<double>(1, 1, 8, 8, 0.25, Rng(5), 0, /*scaled=*/true);
  for (std::size_t i = 0; i < m.data.size(); ++i)
    EXPECT_NEAR(s.data[i], m.data[i] / 0.75, 1e-12);
}
