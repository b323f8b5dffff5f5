#pragma once

#include <chrono>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "kn/norm.hpp"
#include "kn/ops.hpp"

namespace kn {

/// Hyper-parameters and learnables of a kernel-normalized convolution.
/// The parameter count is exactly that of a plain convolution with the same
/// geometry: weights (ch_out, ch_in, kh, kw) plus the optional bias.
template <typename T>
struct KnConvParams {
  int ch_in = 0, ch_out = 0;
  int kh = 1, kw = 1;
  int sh = 1, sw = 1;
  int ph = 0, pw = 0;
  double dropout_p = 0.0;
  double eps = 1e-5;
  Value<T> weights;              // (ch_out, ch_in, kh, kw)
  std::optional<Value<T>> bias;  // (ch_out, 1, 1, 1)

  KernelNormConfig norm_config() const {
    KernelNormConfig cfg;
    cfg.kh = kh;
    cfg.kw = kw;
    cfg.sh = sh;
    cfg.sw = sw;
    cfg.ph = ph;
    cfg.pw = pw;
    cfg.dropout_p = dropout_p;
    cfg.eps = eps;
    return cfg;
  }

  void validate(const Tensor4<T>& x) const {
    if (x.c != ch_in)
      throw std::invalid_argument("knconv: input channels " +
                                  std::to_string(x.c) + " != ch_in " +
                                  std::to_string(ch_in));
    auto [nh, nw] = kn_window_grid(x.h, x.w, norm_config());
    if (nh < 1 || nw < 1) throw std::invalid_argument("degenerate window count");
  }
};

/// Reference form: KernelNorm on the input, then a convolution with kernel
/// (kh, kw), stride (kh, kw) and zero padding over the normalized units.
template <typename T>
Value<T> knconv_naive(const Value<T>& x, const KnConvParams<T>& p,
                      const Tensor4<std::type_identity_t<T>>* mask) {
  p.validate(x->value);
  Value<T> normed = kernel_norm(x, p.norm_config(), mask);
  return conv2d(normed, p.weights, p.bias, p.kh, p.kw, 0, 0);
}

template <typename T>
Value<T> knconv_naive(const Value<T>& x, const KnConvParams<T>& p,
                      const Rng& rng, bool training,
                      std::int64_t sample_offset = 0) {
  if (training && p.dropout_p > 0.0) {
    Tensor4<T> m = dropout_mask<T>(x->value.n, x->value.c, x->value.h,
                                   x->value.w, p.dropout_p, rng, sample_offset);
    return knconv_naive(x, p, &m);
  }
  return knconv_naive<T>(x, p, nullptr);
}

/// Efficient form: one plain convolution of the raw input, adjusted by the
/// window statistics: (conv_out - mu * sum(Z_f)) / sqrt(var + eps) + b.
template <typename T>
Value<T> knconv_efficient(const Value<T>& x, const KnConvParams<T>& p,
                          const Tensor4<std::type_identity_t<T>>* mask) {
  p.validate(x->value);
  Value<T> conv_out =
      conv2d(x, p.weights, std::optional<Value<T>>{}, p.sh, p.sw, p.ph, p.pw);
  auto [mu, var] = kn_stats_nodes(x, p.norm_config(), mask);
  Value<T> wsum = filter_weight_sum(p.weights);
  Value<T> inv = rsqrt_add(var, static_cast<T>(p.eps));
  Value<T> out = mul(sub(conv_out, mul(mu, wsum)), inv);
  if (p.bias) out = add_channel_bias(out, *p.bias);
  return out;
}

template <typename T>
Value<T> knconv_efficient(const Value<T>& x, const KnConvParams<T>& p,
                          const Rng& rng, bool training,
                          std::int64_t sample_offset = 0) {
  if (training && p.dropout_p > 0.0) {
    Tensor4<T> m = dropout_mask<T>(x->value.n, x->value.c, x->value.h,
                                   x->value.w, p.dropout_p, rng, sample_offset);
    return knconv_efficient(x, p, &m);
  }
  return knconv_efficient<T>(x, p, nullptr);
}

// ===========================================================================
// Micro-benchmark
// ===========================================================================

struct BenchShape {
  int n = 1, c = 1, h = 8, w = 8;
};

struct BenchReport {
  BenchShape shape;
  int ch_out = 0, kh = 0, kw = 0, sh = 0, sw = 0, ph = 0, pw = 0;
  int repeats = 0;
  std::string dtype;
  double naive_fwd_ms = 0, efficient_fwd_ms = 0;
  double naive_fb_ms = 0, efficient_fb_ms = 0;

  double speedup_fwd() const { return naive_fwd_ms / efficient_fwd_ms; }
  double speedup_fb() const { return naive_fb_ms / efficient_fb_ms; }

  nlohmann::json to_json() const {
    return nlohmann::json{
        {"shape", {shape.n, shape.c, shape.h, shape.w}},
        {"params",
         {{"ch_out", ch_out},
          {"kernel", {kh, kw}},
          {"stride", {sh, sw}},
          {"padding", {ph, pw}}}},
        {"naive_ms", {{"forward", naive_fwd_ms}, {"forward_backward", naive_fb_ms}}},
        {"efficient_ms",
         {{"forward", efficient_fwd_ms}, {"forward_backward", efficient_fb_ms}}},
        {"speedup", {{"forward", speedup_fwd()}, {"forward_backward", speedup_fb()}}},
        {"dtype", dtype},
        {"repeats", repeats}};
  }
};

namespace detail {

inline double median_ms(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t m = v.size() / 2;
  return v.size() % 2 ? v[m] : 0.5 * (v[m - 1] + v[m]);
}

template <typename F>
double time_repeats_ms(int repeats, F&& fn) {
  std::vector<double> times;
  times.reserve(repeats);
  for (int r = 0; r < repeats; ++r) {
    const auto t0 = std::chrono::steady_clock::now();
    fn();
    const auto t1 = std::chrono::steady_clock::now();
    times.push_back(
        std::chrono::duration<double, std::milli>(t1 - t0).count());
  }
  return median_ms(std::move(times));
}

}  // namespace detail

/// Median wall times of both KNConv forms, forward and forward+backward.
template <typename T>
BenchReport bench_knconv(const BenchShape& shape, KnConvParams<T> p,
                         int repeats, std::uint64_t seed = 17) {
  if (repeats < 3) throw std::invalid_argument("bench: repeats >= 3");
  Rng rng(seed);
  Tensor4<T> xv(shape.n, shape.c, shape.h, shape.w);
  for (auto& v : xv.data) v = static_cast<T>(rng.next_normal());

  BenchReport rep;
  rep.shape = shape;
  rep.ch_out = p.ch_out;
  rep.kh = p.kh;
  rep.kw = p.kw;
  rep.sh = p.sh;
  rep.sw = p.sw;
  rep.ph = p.ph;
  rep.pw = p.pw;
  rep.repeats = repeats;
  rep.dtype = std::is_same_v<T, float> ? "f32" : "f64";

  volatile T sink = T(0);
  auto run = [&](bool efficient, bool train) {
    auto x = leaf(xv, train);
    Value<T> y = efficient ? knconv_efficient<T>(x, p, nullptr)
                           : knconv_naive<T>(x, p, nullptr);
    if (train) backward(sum_all(y));
    sink = sink + y->value.data[0];
  };

  rep.naive_fwd_ms = detail::time_repeats_ms(repeats, [&] { run(false, false); });
  rep.efficient_fwd_ms =
      detail::time_repeats_ms(repeats, [&] { run(true, false); });
  rep.naive_fb_ms = detail::time_repeats_ms(repeats, [&] { run(false, true); });
  rep.efficient_fb_ms =
      detail::time_repeats_ms(repeats, [&] { run(true, true); });
  return rep;
}

}  // namespace kn
