#pragma once

#include <cmath>
#include <memory>
#include <stdexcept>
#include <utility>
#include <vector>

#include "kn/ops.hpp"
#include "kn/rng.hpp"

namespace kn {

// ===========================================================================
// KernelNorm
// ===========================================================================

struct KernelNormConfig {
  int kh = 1, kw = 1;
  int sh = 1, sw = 1;
  int ph = 0, pw = 0;
  double dropout_p = 0.0;
  double eps = 1e-5;

  void validate() const {
    if (kh < 1 || kw < 1) throw std::invalid_argument("kernel must be >= 1");
    if (sh < 1 || sw < 1) throw std::invalid_argument("stride must be >= 1");
    if (ph < 0 || pw < 0) throw std::invalid_argument("padding must be >= 0");
    if (dropout_p < 0.0 || dropout_p >= 1.0)
      throw std::invalid_argument("dropout_p must be in [0, 1)");
    if (eps <= 0.0) throw std::invalid_argument("eps must be > 0");
  }
};

/// Per-window mean and biased variance, shaped (n, 1, nh, nw).
template <typename T>
struct WindowStats {
  Tensor4<T> mu;
  Tensor4<T> var;
};

inline std::pair<int, int> kn_window_grid(int h, int w,
                                          const KernelNormConfig& cfg) {
  cfg.validate();
  const int hp = h + 2 * cfg.ph;
  const int wp = w + 2 * cfg.pw;
  if (cfg.kh > hp || cfg.kw > wp)
    throw std::invalid_argument("kernel exceeds padded input");
  return {(hp - cfg.kh) / cfg.sh + 1, (wp - cfg.kw) / cfg.sw + 1};
}

/// Output shape of KernelNorm: h_out = kh * floor((h + 2ph - kh)/sh + 1),
/// same along width.
inline std::pair<int, int> kernel_norm_output_shape(int h, int w,
                                                    const KernelNormConfig& cfg) {
  if (h < 1 || w < 1) throw std::invalid_argument("non-positive input dims");
  auto [nh, nw] = kn_window_grid(h, w, cfg);
  if (nh < 1 || nw < 1) throw std::invalid_argument("non-positive window count");
  return {cfg.kh * nh, cfg.kw * nw};
}

/// Inverted dropout mask for an input tensor: kept elements carry 1/(1-p)
/// (or 1 when `scaled` is off), dropped ones 0. Sample r draws from
/// rng.split(sample_offset + r), so masks depend only on a sample's global
/// stream, not on batch composition.
template <typename T>
Tensor4<T> dropout_mask(int n, int c, int h, int w, double p, const Rng& rng,
                        std::int64_t sample_offset = 0, bool scaled = true) {
  if (p < 0.0 || p >= 1.0) throw std::invalid_argument("dropout_p in [0,1)");
  Tensor4<T> m(n, c, h, w, T(1));
  if (p == 0.0) return m;
  const T keep = scaled ? static_cast<T>(1.0 / (1.0 - p)) : T(1);
  for (int i = 0; i < n; ++i) {
    Rng s = rng.split(static_cast<std::uint64_t>(sample_offset + i));
    T* row = m.data.data() + static_cast<std::size_t>(i) * c * h * w;
    const std::size_t plane = static_cast<std::size_t>(c) * h * w;
    for (std::size_t k = 0; k < plane; ++k)
      row[k] = s.next_bernoulli(p) ? T(0) : keep;
  }
  return m;
}

namespace detail {

// Shared forward computation: padded original, padded masked copy, and
// per-window statistics accumulated in double.
template <typename T>
struct KnStatsData {
  Tensor4<T> xpad;    // padded original input
  Tensor4<T> xmpad;   // padded masked input (x * mask)
  Tensor4<T> maskpad; // mask padded with zeros; empty when no dropout
  Tensor4<T> mu, var; // (n, 1, nh, nw)
  int nh = 0, nw = 0;
  KernelNormConfig cfg;
};

template <typename T>
std::shared_ptr<KnStatsData<T>> kn_stats_compute(const Tensor4<T>& x,
                                                 const KernelNormConfig& cfg,
                                                 const Tensor4<std::type_identity_t<T>>* mask) {
  auto d = std::make_shared<KnStatsData<T>>();
  d->cfg = cfg;
  auto [nh, nw] = kn_window_grid(x.h, x.w, cfg);
  d->nh = nh;
  d->nw = nw;
  d->xpad = pad2d_raw(x, cfg.ph, cfg.pw);
  if (mask) {
    if (!mask->same_shape(x))
      throw std::invalid_argument("dropout mask shape mismatch");
    Tensor4<T> xm = x;
    for (std::size_t i = 0; i < xm.size(); ++i) xm.data[i] *= mask->data[i];
    d->xmpad = pad2d_raw(xm, cfg.ph, cfg.pw);
    d->maskpad = pad2d_raw(*mask, cfg.ph, cfg.pw);
  } else {
    d->xmpad = d->xpad;
  }
  d->mu = Tensor4<T>(x.n, 1, nh, nw);
  d->var = Tensor4<T>(x.n, 1, nh, nw);
  const double inv_count = 1.0 / (static_cast<double>(x.c) * cfg.kh * cfg.kw);
  for (int i = 0; i < x.n; ++i)
    for (int wi = 0; wi < nh; ++wi)
      for (int wj = 0; wj < nw; ++wj) {
        double s = 0.0, s2 = 0.0;
        for (int j = 0; j < x.c; ++j)
          for (int a = 0; a < cfg.kh; ++a) {
            const T* r = d->xmpad.row(i, j, wi * cfg.sh + a) + wj * cfg.sw;
            for (int b = 0; b < cfg.kw; ++b) {
              const double v = static_cast<double>(r[b]);
              s += v;
              s2 += v * v;
            }
          }
        const double m = s * inv_count;
        double v = s2 * inv_count - m * m;
        if (v < 0.0) v = 0.0;
        d->mu.at(i, 0, wi, wj) = static_cast<T>(m);
        d->var.at(i, 0, wi, wj) = static_cast<T>(v);
      }
  return d;
}

}  // namespace detail

/// Mean and biased variance of every dropped-out kernel window. The
/// denominator is always c*kh*kw. `mask` may be null (no dropout).
template <typename T>
WindowStats<T> kn_mean_var(const Tensor4<T>& x, const KernelNormConfig& cfg,
                           const Tensor4<std::type_identity_t<T>>* mask = nullptr) {
  auto d = detail::kn_stats_compute(x, cfg, mask);
  return {std::move(d->mu), std::move(d->var)};
}

template <typename T>
WindowStats<T> kn_mean_var(const Tensor4<T>& x, const KernelNormConfig& cfg,
                           const Rng& rng, bool training,
                           std::int64_t sample_offset = 0) {
  if (training && cfg.dropout_p > 0.0) {
    Tensor4<T> m = dropout_mask<T>(x.n, x.c, x.h, x.w, cfg.dropout_p, rng,
                                   sample_offset);
    return kn_mean_var(x, cfg, &m);
  }
  return kn_mean_var(x, cfg, nullptr);
}

/// Differentiable per-window statistics: returns (mu, var) nodes whose
/// cotangents flow back to x.
template <typename T>
std::pair<Value<T>, Value<T>> kn_stats_nodes(const Value<T>& x,
                                             const KernelNormConfig& cfg,
                                             const Tensor4<std::type_identity_t<T>>* mask) {
  auto d = detail::kn_stats_compute(x->value, cfg, mask);
  const int N = x->value.c * cfg.kh * cfg.kw;
  const T invN = T(1) / static_cast<T>(N);

  auto mu_node = make_node<T>(
      "kn_mu", d->mu, {x}, [x, d, invN](Node<T>& self) {
        if (!x->requires_grad) return;
        x->ensure_grad();
        const auto& cfg = d->cfg;
        Tensor4<T> dxp(d->xpad.n, d->xpad.c, d->xpad.h, d->xpad.w);
        const bool masked = d->maskpad.size() != 0;
        for (int i = 0; i < self.grad.n; ++i)
          for (int wi = 0; wi < d->nh; ++wi)
            for (int wj = 0; wj < d->nw; ++wj) {
              const T g = self.grad.at(i, 0, wi, wj) * invN;
              for (int j = 0; j < dxp.c; ++j)
                for (int a = 0; a < cfg.kh; ++a) {
                  T* r = dxp.row(i, j, wi * cfg.sh + a) + wj * cfg.sw;
                  if (masked) {
                    const T* m = d->maskpad.row(i, j, wi * cfg.sh + a) + wj * cfg.sw;
                    for (int b = 0; b < cfg.kw; ++b) r[b] += g * m[b];
                  } else {
                    for (int b = 0; b < cfg.kw; ++b) r[b] += g;
                  }
                }
            }
        x->accumulate(crop_center_raw(dxp, cfg.ph, cfg.pw));
      });

  auto var_node = make_node<T>(
      "kn_var", d->var, {x}, [x, d, invN](Node<T>& self) {
        if (!x->requires_grad) return;
        x->ensure_grad();
        const auto& cfg = d->cfg;
        Tensor4<T> dxp(d->xpad.n, d->xpad.c, d->xpad.h, d->xpad.w);
        const bool masked = d->maskpad.size() != 0;
        for (int i = 0; i < self.grad.n; ++i)
          for (int wi = 0; wi < d->nh; ++wi)
            for (int wj = 0; wj < d->nw; ++wj) {
              const T g2 = self.grad.at(i, 0, wi, wj) * T(2) * invN;
              const T mu = d->mu.at(i, 0, wi, wj);
              for (int j = 0; j < dxp.c; ++j)
                for (int a = 0; a < cfg.kh; ++a) {
                  const int py = wi * cfg.sh + a;
                  T* r = dxp.row(i, j, py) + wj * cfg.sw;
                  const T* xm = d->xmpad.row(i, j, py) + wj * cfg.sw;
                  if (masked) {
                    const T* m = d->maskpad.row(i, j, py) + wj * cfg.sw;
                    for (int b = 0; b < cfg.kw; ++b)
                      r[b] += g2 * m[b] * (xm[b] - mu);
                  } else {
                    for (int b = 0; b < cfg.kw; ++b) r[b] += g2 * (xm[b] - mu);
                  }
                }
            }
        x->accumulate(crop_center_raw(dxp, cfg.ph, cfg.pw));
      });

  return {mu_node, var_node};
}

/// KernelNorm layer: standardizes each kernel window of the original input
/// with the dropped-out window's statistics and concatenates the normalized
/// units along height/width. Output is (n, c, kh*nh, kw*nw).
template <typename T>
Value<T> kernel_norm(const Value<T>& x, const KernelNormConfig& cfg,
                     const Tensor4<std::type_identity_t<T>>* mask) {
  auto d = detail::kn_stats_compute(x->value, cfg, mask);
  const int c = x->value.c;
  const int N = c * cfg.kh * cfg.kw;
  const T invN = T(1) / static_cast<T>(N);
  const T eps = static_cast<T>(cfg.eps);

  Tensor4<T> out(x->value.n, c, cfg.kh * d->nh, cfg.kw * d->nw);
  for (int i = 0; i < out.n; ++i)
    for (int wi = 0; wi < d->nh; ++wi)
      for (int wj = 0; wj < d->nw; ++wj) {
        const T mu = d->mu.at(i, 0, wi, wj);
        const T inv_d = T(1) / std::sqrt(d->var.at(i, 0, wi, wj) + eps);
        for (int j = 0; j < c; ++j)
          for (int a = 0; a < cfg.kh; ++a) {
            const T* src = d->xpad.row(i, j, wi * cfg.sh + a) + wj * cfg.sw;
            T* dst = out.row(i, j, wi * cfg.kh + a) + wj * cfg.kw;
            for (int b = 0; b < cfg.kw; ++b) dst[b] = (src[b] - mu) * inv_d;
          }
      }

  return make_node<T>(
      "kernel_norm", std::move(out), {x}, [x, d, invN, eps](Node<T>& self) {
        if (!x->requires_grad) return;
        x->ensure_grad();
        const auto& cfg = d->cfg;
        const int c = d->xpad.c;
        const bool masked = d->maskpad.size() != 0;
        Tensor4<T> dxp(d->xpad.n, c, d->xpad.h, d->xpad.w);
        for (int i = 0; i < self.grad.n; ++i)
          for (int wi = 0; wi < d->nh; ++wi)
            for (int wj = 0; wj < d->nw; ++wj) {
              const T mu = d->mu.at(i, 0, wi, wj);
              const T inv_d = T(1) / std::sqrt(d->var.at(i, 0, wi, wj) + eps);
              // window reductions: G = sum g, P = sum g * (x - mu)
              T G = T(0), P = T(0);
              for (int j = 0; j < c; ++j)
                for (int a = 0; a < cfg.kh; ++a) {
                  const T* g = self.grad.row(i, j, wi * cfg.kh + a) + wj * cfg.kw;
                  const T* xo = d->xpad.row(i, j, wi * cfg.sh + a) + wj * cfg.sw;
                  for (int b = 0; b < cfg.kw; ++b) {
                    G += g[b];
                    P += g[b] * (xo[b] - mu);
                  }
                }
              const T gmu = G * inv_d * invN;
              const T gvar = P * inv_d * inv_d * inv_d * invN;
              for (int j = 0; j < c; ++j)
                for (int a = 0; a < cfg.kh; ++a) {
                  const int py = wi * cfg.sh + a;
                  const T* g = self.grad.row(i, j, wi * cfg.kh + a) + wj * cfg.kw;
                  const T* xm = d->xmpad.row(i, j, py) + wj * cfg.sw;
                  T* r = dxp.row(i, j, py) + wj * cfg.sw;
                  if (masked) {
                    const T* m = d->maskpad.row(i, j, py) + wj * cfg.sw;
                    for (int b = 0; b < cfg.kw; ++b)
                      r[b] += g[b] * inv_d - m[b] * (gmu + gvar * (xm[b] - mu));
                  } else {
                    for (int b = 0; b < cfg.kw; ++b)
                      r[b] += g[b] * inv_d - (gmu + gvar * (xm[b] - mu));
                  }
                }
            }
        x->accumulate(crop_center_raw(dxp, cfg.ph, cfg.pw));
      });
}

/// Convenience wrapper drawing the dropout mask from a stream.
template <typename T>
Value<T> kernel_norm(const Value<T>& x, const KernelNormConfig& cfg,
                     const Rng& rng, bool training,
                     std::int64_t sample_offset = 0) {
  if (training && cfg.dropout_p > 0.0) {
    Tensor4<T> m = dropout_mask<T>(x->value.n, x->value.c, x->value.h,
                                   x->value.w, cfg.dropout_p, rng,
                                   sample_offset);
    return kernel_norm(x, cfg, &m);
  }
  return kernel_norm<T>(x, cfg, nullptr);
}

// ===========================================================================
// Standard normalization layers
// ===========================================================================

enum class AffineNormKind { Batch, Layer, Instance, Group };

template <typename T>
struct BatchNormState {
  Tensor4<T> running_mean;  // (c, 1, 1, 1)
  Tensor4<T> running_var;

  void init(int c) {
    if (running_mean.size() == 0) {
      running_mean = Tensor4<T>(c, 1, 1, 1, T(0));
      running_var = Tensor4<T>(c, 1, 1, 1, T(1));
    }
  }
};

/// BatchNorm along (N, H, W) per channel. Training mode uses batch
/// statistics (biased variance) and updates the running estimates with
/// `momentum`; eval mode standardizes with the stored running statistics.
template <typename T>
Value<T> batch_norm(const Value<T>& x, const Value<T>& gamma,
                    const Value<T>& beta, BatchNormState<T>& state,
                    bool training, T momentum = T(0.1), T eps = T(1e-5)) {
  const auto& xv = x->value;
  const int C = xv.c;
  state.init(C);
  const std::size_t plane = static_cast<std::size_t>(xv.h) * xv.w;
  const std::size_t count = static_cast<std::size_t>(xv.n) * plane;

  auto mu = std::make_shared<std::vector<T>>(C);
  auto var = std::make_shared<std::vector<T>>(C);
  if (training) {
    for (int j = 0; j < C; ++j) {
      double s = 0, s2 = 0;
      for (int i = 0; i < xv.n; ++i) {
        const T* p = xv.data.data() + (static_cast<std::size_t>(i) * C + j) * plane;
        for (std::size_t k = 0; k < plane; ++k) {
          const double v = static_cast<double>(p[k]);
          s += v;
          s2 += v * v;
        }
      }
      const double m = s / static_cast<double>(count);
      double v = s2 / static_cast<double>(count) - m * m;
      if (v < 0) v = 0;
      (*mu)[j] = static_cast<T>(m);
      (*var)[j] = static_cast<T>(v);
      state.running_mean.data[j] =
          (T(1) - momentum) * state.running_mean.data[j] + momentum * (*mu)[j];
      state.running_var.data[j] =
          (T(1) - momentum) * state.running_var.data[j] + momentum * (*var)[j];
    }
  } else {
    *mu = state.running_mean.data;
    *var = state.running_var.data;
  }

  Tensor4<T> out(xv.n, C, xv.h, xv.w);
  for (int i = 0; i < xv.n; ++i)
    for (int j = 0; j < C; ++j) {
      const T m = (*mu)[j];
      const T inv_d = T(1) / std::sqrt((*var)[j] + eps);
      const T g = gamma->value.data[j], b = beta->value.data[j];
      const T* p = xv.data.data() + (static_cast<std::size_t>(i) * C + j) * plane;
      T* q = out.data.data() + (static_cast<std::size_t>(i) * C + j) * plane;
      for (std::size_t k = 0; k < plane; ++k) q[k] = g * (p[k] - m) * inv_d + b;
    }

  return make_node<T>(
      "batch_norm", std::move(out), {x, gamma, beta},
      [x, gamma, beta, mu, var, training, eps, plane](Node<T>& self) {
        const auto& xv = x->value;
        const int C = xv.c;
        const std::size_t count = static_cast<std::size_t>(xv.n) * plane;
        const auto& g = self.grad;
        for (int j = 0; j < C; ++j) {
          const T m = (*mu)[j];
          const T inv_d = T(1) / std::sqrt((*var)[j] + eps);
          T sg = T(0), sgx = T(0);
          for (int i = 0; i < xv.n; ++i) {
            const T* gp = g.data.data() + (static_cast<std::size_t>(i) * C + j) * plane;
            const T* xp = xv.data.data() + (static_cast<std::size_t>(i) * C + j) * plane;
            for (std::size_t k = 0; k < plane; ++k) {
              sg += gp[k];
              sgx += gp[k] * (xp[k] - m) * inv_d;
            }
          }
          if (gamma->requires_grad) {
            gamma->ensure_grad();
            gamma->grad.data[j] += sgx;
          }
          if (beta->requires_grad) {
            beta->ensure_grad();
            beta->grad.data[j] += sg;
          }
          if (x->requires_grad) {
            x->ensure_grad();
            const T gam = gamma->value.data[j];
            const T mean_g = sg / static_cast<T>(count);
            const T mean_gx = sgx / static_cast<T>(count);
            for (int i = 0; i < xv.n; ++i) {
              const T* gp = g.data.data() + (static_cast<std::size_t>(i) * C + j) * plane;
              const T* xp = xv.data.data() + (static_cast<std::size_t>(i) * C + j) * plane;
              T* dxp = x->grad.data.data() + (static_cast<std::size_t>(i) * C + j) * plane;
              if (training) {
                for (std::size_t k = 0; k < plane; ++k) {
                  const T xhat = (xp[k] - m) * inv_d;
                  dxp[k] += gam * inv_d * (gp[k] - mean_g - xhat * mean_gx);
                }
              } else {
                for (std::size_t k = 0; k < plane; ++k)
                  dxp[k] += gam * inv_d * gp[k];
              }
            }
          }
        }
      });
}

/// GroupNorm with channel group size `group_size` (c_g): standardizes each
/// (c_g, h, w) unit per sample, then applies the per-channel affine.
/// group_size == c is LayerNorm; group_size == 1 is InstanceNorm.
template <typename T>
Value<T> group_norm(const Value<T>& x, const Value<T>& gamma,
                    const Value<T>& beta, int group_size, T eps = T(1e-5)) {
  const auto& xv = x->value;
  const int C = xv.c;
  if (group_size < 1 || C % group_size != 0)
    throw std::invalid_argument("c not divisible by group count");
  const int groups = C / group_size;
  const std::size_t plane = static_cast<std::size_t>(xv.h) * xv.w;
  const std::size_t unit = static_cast<std::size_t>(group_size) * plane;

  auto mu = std::make_shared<Tensor4<T>>(xv.n, groups, 1, 1);
  auto var = std::make_shared<Tensor4<T>>(xv.n, groups, 1, 1);
  for (int i = 0; i < xv.n; ++i)
    for (int gidx = 0; gidx < groups; ++gidx) {
      double s = 0, s2 = 0;
      const T* base = xv.data.data() +
                      (static_cast<std::size_t>(i) * C + gidx * group_size) * plane;
      for (std::size_t k = 0; k < unit; ++k) {
        const double v = static_cast<double>(base[k]);
        s += v;
        s2 += v * v;
      }
      const double m = s / static_cast<double>(unit);
      double v = s2 / static_cast<double>(unit) - m * m;
      if (v < 0) v = 0;
      mu->at(i, gidx, 0, 0) = static_cast<T>(m);
      var->at(i, gidx, 0, 0) = static_cast<T>(v);
    }

  Tensor4<T> out(xv.n, C, xv.h, xv.w);
  for (int i = 0; i < xv.n; ++i)
    for (int j = 0; j < C; ++j) {
      const int gidx = j / group_size;
      const T m = mu->at(i, gidx, 0, 0);
      const T inv_d = T(1) / std::sqrt(var->at(i, gidx, 0, 0) + eps);
      const T gm = gamma->value.data[j], bt = beta->value.data[j];
      const T* p = xv.data.data() + (static_cast<std::size_t>(i) * C + j) * plane;
      T* q = out.data.data() + (static_cast<std::size_t>(i) * C + j) * plane;
      for (std::size_t k = 0; k < plane; ++k) q[k] = gm * (p[k] - m) * inv_d + bt;
    }

  return make_node<T>(
      "group_norm", std::move(out), {x, gamma, beta},
      [x, gamma, beta, mu, var, group_size, eps, plane](Node<T>& self) {
        const auto& xv = x->value;
        const int C = xv.c;
        const int groups = C / group_size;
        const std::size_t unit = static_cast<std::size_t>(group_size) * plane;
        const auto& g = self.grad;
        if (gamma->requires_grad) gamma->ensure_grad();
        if (beta->requires_grad) beta->ensure_grad();
        if (x->requires_grad) x->ensure_grad();
        for (int i = 0; i < xv.n; ++i)
          for (int gidx = 0; gidx < groups; ++gidx) {
            const T m = mu->at(i, gidx, 0, 0);
            const T inv_d = T(1) / std::sqrt(var->at(i, gidx, 0, 0) + eps);
            // unit reductions of gamma-weighted cotangent
            T sg = T(0), sgx = T(0);
            for (int jj = 0; jj < group_size; ++jj) {
              const int j = gidx * group_size + jj;
              const T gam = gamma->value.data[j];
              const T* gp = g.data.data() + (static_cast<std::size_t>(i) * C + j) * plane;
              const T* xp = xv.data.data() + (static_cast<std::size_t>(i) * C + j) * plane;
              T dgam = T(0), dbet = T(0);
              for (std::size_t k = 0; k < plane; ++k) {
                const T xhat = (xp[k] - m) * inv_d;
                const T gg = gp[k] * gam;
                sg += gg;
                sgx += gg * xhat;
                dgam += gp[k] * xhat;
                dbet += gp[k];
              }
              if (gamma->requires_grad) gamma->grad.data[j] += dgam;
              if (beta->requires_grad) beta->grad.data[j] += dbet;
            }
            if (x->requires_grad) {
              const T mean_g = sg / static_cast<T>(unit);
              const T mean_gx = sgx / static_cast<T>(unit);
              for (int jj = 0; jj < group_size; ++jj) {
                const int j = gidx * group_size + jj;
                const T gam = gamma->value.data[j];
                const T* gp = g.data.data() + (static_cast<std::size_t>(i) * C + j) * plane;
                const T* xp = xv.data.data() + (static_cast<std::size_t>(i) * C + j) * plane;
                T* dxp = x->grad.data.data() + (static_cast<std::size_t>(i) * C + j) * plane;
                for (std::size_t k = 0; k < plane; ++k) {
                  const T xhat = (xp[k] - m) * inv_d;
                  dxp[k] += inv_d * (gp[k] * gam - mean_g - xhat * mean_gx);
                }
              }
            }
          }
      });
}

template <typename T>
Value<T> layer_norm(const Value<T>& x, const Value<T>& gamma,
                    const Value<T>& beta, T eps = T(1e-5)) {
  return group_norm(x, gamma, beta, x->value.c, eps);
}

template <typename T>
Value<T> instance_norm(const Value<T>& x, const Value<T>& gamma,
                       const Value<T>& beta, T eps = T(1e-5)) {
  return group_norm(x, gamma, beta, 1, eps);
}

}  // namespace kn
