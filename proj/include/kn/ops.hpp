#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "kn/autograd.hpp"
#include "kn/conv_avx512.hpp"
#include "kn/tensor.hpp"

namespace kn {

// ===========================================================================
// Raw tensor kernels (no autograd)
// ===========================================================================

inline int conv_out_dim(int in, int pad, int k, int stride) {
  return (in + 2 * pad - k) / stride + 1;
}

template <typename T>
Tensor4<T> pad2d_raw(const Tensor4<T>& x, int ph, int pw) {
  if (ph < 0 || pw < 0) throw std::invalid_argument("pad2d: negative padding");
  if (ph == 0 && pw == 0) return x;
  Tensor4<T> y(x.n, x.c, x.h + 2 * ph, x.w + 2 * pw);
  for (int i = 0; i < x.n; ++i)
    for (int j = 0; j < x.c; ++j)
      for (int yy = 0; yy < x.h; ++yy)
        std::copy(x.row(i, j, yy), x.row(i, j, yy) + x.w,
                  y.row(i, j, yy + ph) + pw);
  return y;
}

template <typename T>
Tensor4<T> crop_center_raw(const Tensor4<T>& x, int ph, int pw) {
  if (x.h <= 2 * ph || x.w <= 2 * pw)
    throw std::invalid_argument("crop: nothing left");
  if (ph == 0 && pw == 0) return x;
  Tensor4<T> y(x.n, x.c, x.h - 2 * ph, x.w - 2 * pw);
  for (int i = 0; i < y.n; ++i)
    for (int j = 0; j < y.c; ++j)
      for (int yy = 0; yy < y.h; ++yy)
        std::copy(x.row(i, j, yy + ph) + pw, x.row(i, j, yy + ph) + pw + y.w,
                  y.row(i, j, yy));
  return y;
}

/// Sliding windows of x, width-major then height, each of shape (c, kh, kw),
/// stored window-major and contiguous: data[n][wi][wj][c][a][b].
template <typename T>
struct Unfolded {
  int n = 0, c = 0, kh = 0, kw = 0, nh = 0, nw = 0;
  std::vector<T> data;

  std::size_t window_size() const {
    return static_cast<std::size_t>(c) * kh * kw;
  }
  // pointer to window (wi, wj) of sample i
  const T* window(int i, int wi, int wj) const {
    return data.data() +
           ((static_cast<std::size_t>(i) * nh + wi) * nw + wj) * window_size();
  }
  T* window(int i, int wi, int wj) {
    return data.data() +
           ((static_cast<std::size_t>(i) * nh + wi) * nw + wj) * window_size();
  }
};

template <typename T>
Unfolded<T> unfold(const Tensor4<T>& x, int kh, int kw, int sh, int sw) {
  if (kh < 1 || kw < 1 || sh < 1 || sw < 1)
    throw std::invalid_argument("unfold: kernel/stride must be >= 1");
  if (kh > x.h || kw > x.w)
    throw std::invalid_argument("kernel exceeds input extent");
  Unfolded<T> u;
  u.n = x.n;
  u.c = x.c;
  u.kh = kh;
  u.kw = kw;
  u.nh = (x.h - kh) / sh + 1;
  u.nw = (x.w - kw) / sw + 1;
  u.data.resize(static_cast<std::size_t>(u.n) * u.nh * u.nw * u.window_size());
  for (int i = 0; i < x.n; ++i)
    for (int wi = 0; wi < u.nh; ++wi)
      for (int wj = 0; wj < u.nw; ++wj) {
        T* dst = u.window(i, wi, wj);
        for (int j = 0; j < x.c; ++j)
          for (int a = 0; a < kh; ++a) {
            const T* src = x.row(i, j, wi * sh + a) + wj * sw;
            for (int b = 0; b < kw; ++b) *dst++ = src[b];
          }
      }
  return u;
}

namespace detail {

// Generic direct convolution on an already-padded input. Per output element
// the accumulation runs strictly sequentially over (ic, kh, kw).
template <typename T>
void conv_generic(const Tensor4<T>& xp, const Tensor4<T>& wgt, const T* bias,
                  int sh, int sw, Tensor4<T>& out) {
  const int C = xp.c, F = wgt.n, KH = wgt.h, KW = wgt.w;
  for (int i = 0; i < xp.n; ++i)
    for (int f = 0; f < F; ++f)
      for (int oh = 0; oh < out.h; ++oh)
        for (int ow = 0; ow < out.w; ++ow) {
          T acc = T(0);
          for (int ic = 0; ic < C; ++ic)
            for (int a = 0; a < KH; ++a) {
              const T* xr = xp.row(i, ic, oh * sh + a) + ow * sw;
              const T* wr = wgt.row(f, ic, a);
              for (int b = 0; b < KW; ++b) acc += wr[b] * xr[b];
            }
          if (bias) acc += bias[f];
          out.at(i, f, oh, ow) = acc;
        }
}

template <typename T>
bool use_fast_conv(const Tensor4<T>& wgt, int sh, int sw) {
  if constexpr (!kHasAvx512 || !std::is_same_v<T, float>)
    return false;
  else
    return sh == 1 && sw == 1 && wgt.n % 16 == 0;
}

}  // namespace detail

/// conv weights are (f, c, kh, kw); bias, when present, has f entries.
template <typename T>
Tensor4<T> conv2d_raw(const Tensor4<T>& x, const Tensor4<T>& wgt,
                      const std::vector<std::type_identity_t<T>>* bias, int sh,
                      int sw, int ph, int pw) {
  if (wgt.c != x.c)
    throw std::invalid_argument("conv2d: weight channels " +
                                std::to_string(wgt.c) + " != input channels " +
                                std::to_string(x.c));
  if (sh < 1 || sw < 1) throw std::invalid_argument("conv2d: stride >= 1");
  if (wgt.h > x.h + 2 * ph || wgt.w > x.w + 2 * pw)
    throw std::invalid_argument("kernel exceeds input extent");
  if (bias && static_cast<int>(bias->size()) != wgt.n)
    throw std::invalid_argument("conv2d: bias size != filter count");
  const Tensor4<T> xp = pad2d_raw(x, ph, pw);
  Tensor4<T> out(x.n, wgt.n, conv_out_dim(x.h, ph, wgt.h, sh),
                 conv_out_dim(x.w, pw, wgt.w, sw));
#if defined(__AVX512F__)
  if constexpr (std::is_same_v<T, float>) {
    if (detail::use_fast_conv(wgt, sh, sw)) {
      detail::conv_s1_f32_avx512(xp.data.data(), xp.n, xp.c, xp.h, xp.w,
                                 wgt.data.data(), bias ? bias->data() : nullptr,
                                 wgt.n, wgt.h, wgt.w, out.data.data());
      return out;
    }
  }
#endif
  detail::conv_generic(xp, wgt, bias ? bias->data() : nullptr, sh, sw, out);
  return out;
}

namespace detail {

// dX for a stride-1 conv equals a stride-1 conv of the (KH-1, KW-1)-padded
// cotangent with channel-transposed, spatially flipped weights.
template <typename T>
Tensor4<T> flip_transpose_weights(const Tensor4<T>& wgt) {
  Tensor4<T> wt(wgt.c, wgt.n, wgt.h, wgt.w);
  for (int f = 0; f < wgt.n; ++f)
    for (int c = 0; c < wgt.c; ++c)
      for (int a = 0; a < wgt.h; ++a)
        for (int b = 0; b < wgt.w; ++b)
          wt.at(c, f, wgt.h - 1 - a, wgt.w - 1 - b) = wgt.at(f, c, a, b);
  return wt;
}

template <typename T>
void conv_backward_raw(const Tensor4<T>& x, const Tensor4<T>& wgt,
                       const Tensor4<T>& dy, int sh, int sw, int ph, int pw,
                       Tensor4<T>* dx, Tensor4<T>* dw, std::vector<T>* db) {
  const int C = x.c, F = wgt.n, KH = wgt.h, KW = wgt.w;
  const Tensor4<T> xp = pad2d_raw(x, ph, pw);

  if (db) {
    db->assign(F, T(0));
    for (int i = 0; i < dy.n; ++i)
      for (int f = 0; f < F; ++f) {
        T s = T(0);
        const T* p = dy.row(i, f, 0);
        for (std::size_t k = 0; k < static_cast<std::size_t>(dy.h) * dy.w; ++k)
          s += p[k];
        (*db)[f] += s;
      }
  }

  if (dw) {
    *dw = Tensor4<T>(F, C, KH, KW);
    bool done = false;
#if defined(__AVX512F__)
    if constexpr (std::is_same_v<T, float>) {
      if (sh == 1 && sw == 1 && F % 16 == 0) {
        conv_s1_dw_f32_avx512(xp.data.data(), xp.n, C, xp.h, xp.w,
                              dy.data.data(), F, dy.h, dy.w, KH, KW,
                              dw->data.data());
        done = true;
      }
    }
#endif
    if (!done) {
      for (int f = 0; f < F; ++f)
        for (int ic = 0; ic < C; ++ic)
          for (int a = 0; a < KH; ++a)
            for (int b = 0; b < KW; ++b) {
              T acc = T(0);
              for (int i = 0; i < dy.n; ++i)
                for (int oh = 0; oh < dy.h; ++oh) {
                  const T* dr = dy.row(i, f, oh);
                  const T* xr = xp.row(i, ic, oh * sh + a) + b;
                  if (sw == 1) {
                    for (int ow = 0; ow < dy.w; ++ow) acc += dr[ow] * xr[ow];
                  } else {
                    for (int ow = 0; ow < dy.w; ++ow)
                      acc += dr[ow] * xr[static_cast<std::size_t>(ow) * sw];
                  }
                }
              dw->at(f, ic, a, b) = acc;
            }
    }
  }

  if (dx) {
    bool done = false;
#if defined(__AVX512F__)
    if constexpr (std::is_same_v<T, float>) {
      if (sh == 1 && sw == 1 && C % 16 == 0) {
        const Tensor4<T> dyp = pad2d_raw(dy, KH - 1, KW - 1);
        const Tensor4<T> wt = flip_transpose_weights(wgt);
        Tensor4<T> dxp(x.n, C, xp.h, xp.w);
        conv_s1_f32_avx512(dyp.data.data(), dyp.n, F, dyp.h, dyp.w,
                           wt.data.data(), nullptr, C, KH, KW,
                           dxp.data.data());
        *dx = crop_center_raw(dxp, ph, pw);
        done = true;
      }
    }
#endif
    if (!done) {
      Tensor4<T> dxp(x.n, C, xp.h, xp.w);
      for (int i = 0; i < dy.n; ++i)
        for (int f = 0; f < F; ++f)
          for (int oh = 0; oh < dy.h; ++oh)
            for (int ow = 0; ow < dy.w; ++ow) {
              const T g = dy.at(i, f, oh, ow);
              for (int ic = 0; ic < C; ++ic)
                for (int a = 0; a < KH; ++a) {
                  T* xr = dxp.row(i, ic, oh * sh + a) + ow * sw;
                  const T* wr = wgt.row(f, ic, a);
                  for (int b = 0; b < KW; ++b) xr[b] += g * wr[b];
                }
            }
      *dx = crop_center_raw(dxp, ph, pw);
    }
  }
}

inline void check_finite_throw(double v, const char* what) {
  if (!std::isfinite(v)) throw std::runtime_error(what);
}

}  // namespace detail

// ===========================================================================
// Autograd ops
// ===========================================================================

namespace detail {

struct BcastDims {
  int n, c, h, w;
};

inline BcastDims broadcast_shape(int an, int ac, int ah, int aw, int bn,
                                 int bc, int bh, int bw) {
  auto one = [](int a, int b) {
    if (a == b || a == 1 || b == 1) return std::max(a, b);
    throw std::invalid_argument("elementwise op: incompatible shapes");
  };
  return {one(an, bn), one(ac, bc), one(ah, bh), one(aw, bw)};
}

template <typename T>
std::size_t bidx(const Tensor4<T>& t, int i, int j, int y, int x) {
  return t.index(t.n == 1 ? 0 : i, t.c == 1 ? 0 : j, t.h == 1 ? 0 : y,
                 t.w == 1 ? 0 : x);
}

// accumulate g (full shape) into dp (possibly broadcast parent shape)
template <typename T>
void reduce_into(const Tensor4<T>& g, Tensor4<T>& dp) {
  for (int i = 0; i < g.n; ++i)
    for (int j = 0; j < g.c; ++j)
      for (int y = 0; y < g.h; ++y)
        for (int x = 0; x < g.w; ++x)
          dp.data[bidx(dp, i, j, y, x)] += g.at(i, j, y, x);
}

}  // namespace detail

template <typename T, typename Fwd, typename DA, typename DB>
Value<T> binary_op(const char* name, const Value<T>& a, const Value<T>& b,
                   Fwd fwd, DA da, DB db) {
  const auto& av = a->value;
  const auto& bv = b->value;
  auto d = detail::broadcast_shape(av.n, av.c, av.h, av.w, bv.n, bv.c, bv.h,
                                   bv.w);
  Tensor4<T> out(d.n, d.c, d.h, d.w);
  for (int i = 0; i < d.n; ++i)
    for (int j = 0; j < d.c; ++j)
      for (int y = 0; y < d.h; ++y)
        for (int x = 0; x < d.w; ++x)
          out.at(i, j, y, x) = fwd(av.data[detail::bidx(av, i, j, y, x)],
                                   bv.data[detail::bidx(bv, i, j, y, x)]);
  return make_node<T>(
      name, std::move(out), {a, b}, [a, b, da, db](Node<T>& self) {
        const auto& g = self.grad;
        const auto& av = a->value;
        const auto& bv = b->value;
        if (a->requires_grad) {
          a->ensure_grad();
          for (int i = 0; i < g.n; ++i)
            for (int j = 0; j < g.c; ++j)
              for (int y = 0; y < g.h; ++y)
                for (int x = 0; x < g.w; ++x) {
                  const std::size_t ia = detail::bidx(av, i, j, y, x);
                  a->grad.data[ia] +=
                      da(g.at(i, j, y, x), av.data[ia],
                         bv.data[detail::bidx(bv, i, j, y, x)]);
                }
        }
        if (b->requires_grad) {
          b->ensure_grad();
          for (int i = 0; i < g.n; ++i)
            for (int j = 0; j < g.c; ++j)
              for (int y = 0; y < g.h; ++y)
                for (int x = 0; x < g.w; ++x) {
                  const std::size_t ib = detail::bidx(bv, i, j, y, x);
                  b->grad.data[ib] +=
                      db(g.at(i, j, y, x),
                         av.data[detail::bidx(av, i, j, y, x)], bv.data[ib]);
                }
        }
      });
}

template <typename T>
Value<T> add(const Value<T>& a, const Value<T>& b) {
  return binary_op<T>(
      "add", a, b, [](T x, T y) { return x + y; },
      [](T g, T, T) { return g; }, [](T g, T, T) { return g; });
}

template <typename T>
Value<T> sub(const Value<T>& a, const Value<T>& b) {
  return binary_op<T>(
      "sub", a, b, [](T x, T y) { return x - y; },
      [](T g, T, T) { return g; }, [](T g, T, T) { return -g; });
}

template <typename T>
Value<T> mul(const Value<T>& a, const Value<T>& b) {
  return binary_op<T>(
      "mul", a, b, [](T x, T y) { return x * y; },
      [](T g, T, T y) { return g * y; }, [](T g, T x, T) { return g * x; });
}

template <typename T>
Value<T> scale(const Value<T>& a, T s) {
  Tensor4<T> out = a->value;
  for (auto& v : out.data) v *= s;
  return make_node<T>("scale", std::move(out), {a}, [a, s](Node<T>& self) {
    if (!a->requires_grad) return;
    a->ensure_grad();
    for (std::size_t i = 0; i < self.grad.size(); ++i)
      a->grad.data[i] += self.grad.data[i] * s;
  });
}

template <typename T>
Value<T> add_scalar(const Value<T>& a, T s) {
  Tensor4<T> out = a->value;
  for (auto& v : out.data) v += s;
  return make_node<T>("add_scalar", std::move(out), {a}, [a](Node<T>& self) {
    if (!a->requires_grad) return;
    a->accumulate(self.grad);
  });
}

template <typename T>
Value<T> relu(const Value<T>& a) {
  Tensor4<T> out = a->value;
  for (auto& v : out.data) v = v > T(0) ? v : T(0);
  return make_node<T>("relu", std::move(out), {a}, [a](Node<T>& self) {
    if (!a->requires_grad) return;
    a->ensure_grad();
    for (std::size_t i = 0; i < self.grad.size(); ++i)
      if (a->value.data[i] > T(0)) a->grad.data[i] += self.grad.data[i];
  });
}

namespace detail {
template <typename T>
T softplus(T x) {
  if (x > T(20)) return x;
  return std::log1p(std::exp(x));
}
template <typename T>
T sigmoid(T x) {
  if (x >= T(0)) return T(1) / (T(1) + std::exp(-x));
  const T e = std::exp(x);
  return e / (T(1) + e);
}
}  // namespace detail

/// mish(x) = x * tanh(softplus(x))
template <typename T>
Value<T> mish(const Value<T>& a) {
  const auto& av = a->value;
  Tensor4<T> out(av.n, av.c, av.h, av.w);
  auto tsp = std::make_shared<std::vector<T>>(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) {
    const T t = std::tanh(detail::softplus(av.data[i]));
    (*tsp)[i] = t;
    out.data[i] = av.data[i] * t;
  }
  return make_node<T>("mish", std::move(out), {a}, [a, tsp](Node<T>& self) {
    if (!a->requires_grad) return;
    a->ensure_grad();
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      const T x = a->value.data[i];
      const T t = (*tsp)[i];
      const T d = t + x * (T(1) - t * t) * detail::sigmoid(x);
      a->grad.data[i] += self.grad.data[i] * d;
    }
  });
}

template <typename T>
Value<T> pad2d(const Value<T>& a, int ph, int pw) {
  return make_node<T>("pad2d", pad2d_raw(a->value, ph, pw), {a},
                      [a, ph, pw](Node<T>& self) {
                        if (!a->requires_grad) return;
                        a->accumulate(crop_center_raw(self.grad, ph, pw));
                      });
}

template <typename T>
Value<T> conv2d(const Value<T>& x, const Value<T>& wgt,
                const std::optional<Value<std::type_identity_t<T>>>& bias,
                int sh, int sw, int ph, int pw) {
  const std::vector<T>* bptr = nullptr;
  if (bias) {
    if ((*bias)->value.size() != static_cast<std::size_t>(wgt->value.n))
      throw std::invalid_argument("conv2d: bias size != filter count");
    bptr = &(*bias)->value.data;
  }
  Tensor4<T> out = conv2d_raw(x->value, wgt->value, bptr, sh, sw, ph, pw);
  std::vector<Value<T>> parents{x, wgt};
  if (bias) parents.push_back(*bias);
  return make_node<T>(
      "conv2d", std::move(out), std::move(parents),
      [x, wgt, bias, sh, sw, ph, pw](Node<T>& self) {
        Tensor4<T> dx, dw;
        std::vector<T> db;
        detail::conv_backward_raw(x->value, wgt->value, self.grad, sh, sw, ph,
                                  pw, x->requires_grad ? &dx : nullptr,
                                  wgt->requires_grad ? &dw : nullptr,
                                  bias && (*bias)->requires_grad ? &db : nullptr);
        if (x->requires_grad) x->accumulate(dx);
        if (wgt->requires_grad) wgt->accumulate(dw);
        if (bias && (*bias)->requires_grad) {
          auto& bn = **bias;
          bn.ensure_grad();
          for (std::size_t i = 0; i < db.size(); ++i) bn.grad.data[i] += db[i];
        }
      });
}

template <typename T>
Value<T> maxpool2d(const Value<T>& x, int kh, int kw, int sh, int sw,
                   int ph = 0, int pw = 0) {
  const auto& xv = x->value;
  if (kh > xv.h + 2 * ph || kw > xv.w + 2 * pw)
    throw std::invalid_argument("kernel exceeds input extent");
  const int oh = conv_out_dim(xv.h, ph, kh, sh);
  const int ow = conv_out_dim(xv.w, pw, kw, sw);
  Tensor4<T> out(xv.n, xv.c, oh, ow);
  auto arg = std::make_shared<std::vector<std::int32_t>>(out.size());
  std::size_t o = 0;
  for (int i = 0; i < xv.n; ++i)
    for (int j = 0; j < xv.c; ++j)
      for (int y = 0; y < oh; ++y)
        for (int xx = 0; xx < ow; ++xx, ++o) {
          T best = -std::numeric_limits<T>::infinity();
          std::int32_t bidx = -1;
          for (int a = 0; a < kh; ++a) {
            const int iy = y * sh + a - ph;
            if (iy < 0 || iy >= xv.h) continue;
            for (int b = 0; b < kw; ++b) {
              const int ix = xx * sw + b - pw;
              if (ix < 0 || ix >= xv.w) continue;
              const T v = xv.at(i, j, iy, ix);
              if (v > best) {
                best = v;
                bidx = static_cast<std::int32_t>(iy * xv.w + ix);
              }
            }
          }
          out.data[o] = best;
          (*arg)[o] = bidx;
        }
  return make_node<T>("maxpool2d", std::move(out), {x}, [x, arg](Node<T>& self) {
    if (!x->requires_grad) return;
    x->ensure_grad();
    const auto& xv = x->value;
    const int plane = xv.h * xv.w;
    std::size_t o = 0;
    for (int i = 0; i < self.grad.n; ++i)
      for (int j = 0; j < self.grad.c; ++j) {
        T* gx = x->grad.data.data() +
                (static_cast<std::size_t>(i) * xv.c + j) * plane;
        for (int k = 0; k < self.grad.h * self.grad.w; ++k, ++o)
          if ((*arg)[o] >= 0) gx[(*arg)[o]] += self.grad.data[o];
      }
  });
}

template <typename T>
Value<T> avgpool2d(const Value<T>& x, int kh, int kw, int sh, int sw) {
  const auto& xv = x->value;
  if (kh > xv.h || kw > xv.w)
    throw std::invalid_argument("kernel exceeds input extent");
  const int oh = (xv.h - kh) / sh + 1;
  const int ow = (xv.w - kw) / sw + 1;
  const T inv = T(1) / static_cast<T>(kh * kw);
  Tensor4<T> out(xv.n, xv.c, oh, ow);
  for (int i = 0; i < xv.n; ++i)
    for (int j = 0; j < xv.c; ++j)
      for (int y = 0; y < oh; ++y)
        for (int xx = 0; xx < ow; ++xx) {
          T s = T(0);
          for (int a = 0; a < kh; ++a) {
            const T* xr = xv.row(i, j, y * sh + a) + xx * sw;
            for (int b = 0; b < kw; ++b) s += xr[b];
          }
          out.at(i, j, y, xx) = s * inv;
        }
  return make_node<T>(
      "avgpool2d", std::move(out), {x},
      [x, kh, kw, sh, sw, inv](Node<T>& self) {
        if (!x->requires_grad) return;
        x->ensure_grad();
        for (int i = 0; i < self.grad.n; ++i)
          for (int j = 0; j < self.grad.c; ++j)
            for (int y = 0; y < self.grad.h; ++y)
              for (int xx = 0; xx < self.grad.w; ++xx) {
                const T g = self.grad.at(i, j, y, xx) * inv;
                for (int a = 0; a < kh; ++a) {
                  T* xr = x->grad.row(i, j, y * sh + a) + xx * sw;
                  for (int b = 0; b < kw; ++b) xr[b] += g;
                }
              }
      });
}

/// Pools each (h, w) plane onto a fixed (oh, ow) grid; region r along a dim
/// of size s covers [floor(r*s/o), ceil((r+1)*s/o)).
template <typename T>
Value<T> adaptive_avg_pool(const Value<T>& x, int oh, int ow) {
  const auto& xv = x->value;
  Tensor4<T> out(xv.n, xv.c, oh, ow);
  auto region = [](int r, int s, int o) {
    const int lo = (r * s) / o;
    const int hi = ((r + 1) * s + o - 1) / o;
    return std::pair<int, int>{lo, hi};
  };
  for (int i = 0; i < xv.n; ++i)
    for (int j = 0; j < xv.c; ++j)
      for (int y = 0; y < oh; ++y) {
        auto [y0, y1] = region(y, xv.h, oh);
        for (int xx = 0; xx < ow; ++xx) {
          auto [x0, x1] = region(xx, xv.w, ow);
          T s = T(0);
          for (int a = y0; a < y1; ++a) {
            const T* xr = xv.row(i, j, a);
            for (int b = x0; b < x1; ++b) s += xr[b];
          }
          out.at(i, j, y, xx) = s / static_cast<T>((y1 - y0) * (x1 - x0));
        }
      }
  return make_node<T>(
      "adaptive_avg_pool", std::move(out), {x},
      [x, oh, ow, region](Node<T>& self) {
        if (!x->requires_grad) return;
        x->ensure_grad();
        const auto& xv = x->value;
        for (int i = 0; i < self.grad.n; ++i)
          for (int j = 0; j < self.grad.c; ++j)
            for (int y = 0; y < oh; ++y) {
              auto [y0, y1] = region(y, xv.h, oh);
              for (int xx = 0; xx < ow; ++xx) {
                auto [x0, x1] = region(xx, xv.w, ow);
                const T g = self.grad.at(i, j, y, xx) /
                            static_cast<T>((y1 - y0) * (x1 - x0));
                for (int a = y0; a < y1; ++a) {
                  T* xr = x->grad.row(i, j, a);
                  for (int b = x0; b < x1; ++b) xr[b] += g;
                }
              }
            }
      });
}

/// (n, c, h, w) -> (n, c*h*w, 1, 1)
template <typename T>
Value<T> flatten(const Value<T>& x) {
  Tensor4<T> out(x->value.n, x->value.c * x->value.h * x->value.w, 1, 1);
  out.data = x->value.data;
  return make_node<T>("flatten", std::move(out), {x}, [x](Node<T>& self) {
    if (!x->requires_grad) return;
    x->ensure_grad();
    for (std::size_t i = 0; i < self.grad.size(); ++i)
      x->grad.data[i] += self.grad.data[i];
  });
}

/// y = x W^T + b with x (n, in, 1, 1), W (out, in, 1, 1), b (out, 1, 1, 1).
template <typename T>
Value<T> linear(const Value<T>& x, const Value<T>& wgt,
                const std::optional<Value<std::type_identity_t<T>>>& bias) {
  const auto& xv = x->value;
  const auto& wv = wgt->value;
  if (xv.c != wv.c || xv.h != 1 || xv.w != 1)
    throw std::invalid_argument("linear: feature mismatch");
  const int N = xv.n, IN = xv.c, OUT = wv.n;
  Tensor4<T> out(N, OUT, 1, 1);
  for (int i = 0; i < N; ++i) {
    const T* xr = xv.data.data() + static_cast<std::size_t>(i) * IN;
    for (int o = 0; o < OUT; ++o) {
      const T* wr = wv.data.data() + static_cast<std::size_t>(o) * IN;
      T a0 = 0, a1 = 0, a2 = 0, a3 = 0;
      int k = 0;
      for (; k + 4 <= IN; k += 4) {
        a0 += wr[k] * xr[k];
        a1 += wr[k + 1] * xr[k + 1];
        a2 += wr[k + 2] * xr[k + 2];
        a3 += wr[k + 3] * xr[k + 3];
      }
      T acc = (a0 + a1) + (a2 + a3);
      for (; k < IN; ++k) acc += wr[k] * xr[k];
      if (bias) acc += (*bias)->value.data[o];
      out.at(i, o, 0, 0) = acc;
    }
  }
  std::vector<Value<T>> parents{x, wgt};
  if (bias) parents.push_back(*bias);
  return make_node<T>(
      "linear", std::move(out), std::move(parents),
      [x, wgt, bias](Node<T>& self) {
        const auto& xv = x->value;
        const auto& wv = wgt->value;
        const int N = xv.n, IN = xv.c, OUT = wv.n;
        const auto& g = self.grad;
        if (x->requires_grad) {
          x->ensure_grad();
          for (int i = 0; i < N; ++i) {
            T* gx = x->grad.data.data() + static_cast<std::size_t>(i) * IN;
            for (int o = 0; o < OUT; ++o) {
              const T gv = g.at(i, o, 0, 0);
              const T* wr = wv.data.data() + static_cast<std::size_t>(o) * IN;
              for (int k = 0; k < IN; ++k) gx[k] += gv * wr[k];
            }
          }
        }
        if (wgt->requires_grad) {
          wgt->ensure_grad();
          for (int o = 0; o < OUT; ++o) {
            T* gw = wgt->grad.data.data() + static_cast<std::size_t>(o) * IN;
            for (int i = 0; i < N; ++i) {
              const T gv = g.at(i, o, 0, 0);
              const T* xr = xv.data.data() + static_cast<std::size_t>(i) * IN;
              for (int k = 0; k < IN; ++k) gw[k] += gv * xr[k];
            }
          }
        }
        if (bias && (*bias)->requires_grad) {
          auto& bn = **bias;
          bn.ensure_grad();
          for (int o = 0; o < OUT; ++o) {
            T s = T(0);
            for (int i = 0; i < N; ++i) s += g.at(i, o, 0, 0);
            bn.grad.data[o] += s;
          }
        }
      });
}

/// Mean softmax cross-entropy over the batch; logits (n, k, 1, 1).
template <typename T>
Value<T> softmax_cross_entropy(const Value<T>& logits,
                               const std::vector<int>& labels) {
  const auto& lv = logits->value;
  if (static_cast<int>(labels.size()) != lv.n)
    throw std::invalid_argument("loss: label count != batch");
  const int N = lv.n, K = lv.c;
  auto probs = std::make_shared<Tensor4<T>>(N, K, 1, 1);
  double total = 0;
  for (int i = 0; i < N; ++i) {
    const T* r = lv.data.data() + static_cast<std::size_t>(i) * K;
    T mx = r[0];
    for (int k = 1; k < K; ++k) mx = std::max(mx, r[k]);
    T z = T(0);
    for (int k = 0; k < K; ++k) z += std::exp(r[k] - mx);
    const T logz = std::log(z) + mx;
    for (int k = 0; k < K; ++k)
      probs->at(i, k, 0, 0) = std::exp(r[k] - logz);
    if (labels[i] < 0 || labels[i] >= K)
      throw std::invalid_argument("loss: label out of range");
    total += static_cast<double>(logz - r[labels[i]]);
  }
  Tensor4<T> out = scalar_tensor(static_cast<T>(total / N));
  auto labels_copy = std::make_shared<std::vector<int>>(labels);
  return make_node<T>(
      "softmax_xent", std::move(out), {logits},
      [logits, probs, labels_copy](Node<T>& self) {
        if (!logits->requires_grad) return;
        logits->ensure_grad();
        const T g = self.grad.data[0] / static_cast<T>(probs->n);
        const int K = probs->c;
        for (int i = 0; i < probs->n; ++i)
          for (int k = 0; k < K; ++k) {
            T d = probs->at(i, k, 0, 0);
            if (k == (*labels_copy)[i]) d -= T(1);
            logits->grad.at(i, k, 0, 0) += g * d;
          }
      });
}

template <typename T>
Value<T> sum_all(const Value<T>& x) {
  T s = T(0);
  for (const T v : x->value.data) s += v;
  return make_node<T>("sum", scalar_tensor(s), {x}, [x](Node<T>& self) {
    if (!x->requires_grad) return;
    x->ensure_grad();
    const T g = self.grad.data[0];
    for (auto& v : x->grad.data) v += g;
  });
}

/// y = 1 / sqrt(x + eps), elementwise.
template <typename T>
Value<T> rsqrt_add(const Value<T>& x, T eps) {
  Tensor4<T> out = x->value;
  for (auto& v : out.data) v = T(1) / std::sqrt(v + eps);
  auto saved = std::make_shared<Tensor4<T>>(out);
  return make_node<T>("rsqrt_add", std::move(out), {x}, [x, saved](Node<T>& self) {
    if (!x->requires_grad) return;
    x->ensure_grad();
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      const T y = saved->data[i];
      x->grad.data[i] += self.grad.data[i] * (T(-0.5) * y * y * y);
    }
  });
}

/// Per-filter sum of conv weights (f, c, kh, kw) -> (1, f, 1, 1).
template <typename T>
Value<T> filter_weight_sum(const Value<T>& wgt) {
  const auto& wv = wgt->value;
  Tensor4<T> out(1, wv.n, 1, 1);
  const std::size_t per = static_cast<std::size_t>(wv.c) * wv.h * wv.w;
  for (int f = 0; f < wv.n; ++f) {
    T s = T(0);
    const T* p = wv.data.data() + f * per;
    for (std::size_t k = 0; k < per; ++k) s += p[k];
    out.at(0, f, 0, 0) = s;
  }
  return make_node<T>("filter_wsum", std::move(out), {wgt}, [wgt, per](Node<T>& self) {
    if (!wgt->requires_grad) return;
    wgt->ensure_grad();
    for (int f = 0; f < wgt->value.n; ++f) {
      const T g = self.grad.at(0, f, 0, 0);
      T* p = wgt->grad.data.data() + f * per;
      for (std::size_t k = 0; k < per; ++k) p[k] += g;
    }
  });
}

/// y[n][f][h][w] = x[n][f][h][w] + b[f], b stored as (f, 1, 1, 1) or (1, f, 1, 1).
template <typename T>
Value<T> add_channel_bias(const Value<T>& x, const Value<T>& b) {
  const auto& xv = x->value;
  const auto& bv = b->value;
  if (bv.size() != static_cast<std::size_t>(xv.c))
    throw std::invalid_argument("add_channel_bias: size mismatch");
  Tensor4<T> out = xv;
  const int plane = xv.h * xv.w;
  for (int i = 0; i < xv.n; ++i)
    for (int j = 0; j < xv.c; ++j) {
      T* p = out.data.data() + (static_cast<std::size_t>(i) * xv.c + j) * plane;
      const T bb = bv.data[j];
      for (int k = 0; k < plane; ++k) p[k] += bb;
    }
  return make_node<T>("add_channel_bias", std::move(out), {x, b},
                      [x, b, plane](Node<T>& self) {
                        const auto& g = self.grad;
                        if (x->requires_grad) x->accumulate(g);
                        if (b->requires_grad) {
                          b->ensure_grad();
                          for (int i = 0; i < g.n; ++i)
                            for (int j = 0; j < g.c; ++j) {
                              const T* p = g.data.data() +
                                           (static_cast<std::size_t>(i) * g.c + j) * plane;
                              T s = T(0);
                              for (int k = 0; k < plane; ++k) s += p[k];
                              b->grad.data[j] += s;
                            }
                        }
                      });
}

}  // namespace kn
