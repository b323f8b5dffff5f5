#pragma once

// Register-tiled f32 convolution kernels for stride-1 convs, the shape every
// production model here uses. Each output element is accumulated in a single
// register lane, strictly sequentially over (ic, kh, kw), so results are
// bit-identical to the scalar reference loop (both fuse multiply-add).
//
// Only compiled in when AVX-512F is available; ops.hpp falls back to the
// generic loops otherwise.

#if defined(__AVX512F__)

#include <immintrin.h>

#include <cstddef>
#include <vector>

namespace kn::detail {

inline constexpr bool kHasAvx512 = true;

// y[n][f][oh][ow] = sum_{ic,kh,kw} xp[n][ic][oh+kh][ow+kw] * w[f][ic][kh][kw]
// xp is the already-padded input (HP x WP), out is OH x OW with
// OH = HP-KH+1, OW = WP-KW+1. Requires F % 16 == 0.
inline void conv_s1_f32_avx512(const float* xp, int N, int C, int HP, int WP,
                               const float* wgt, const float* bias, int F,
                               int KH, int KW, float* out) {
  const int OH = HP - KH + 1;
  const int OW = WP - KW + 1;
  const int K = C * KH * KW;

  // repack weights as [k][f] so the per-k broadcasts read contiguously
  std::vector<float> wp(static_cast<std::size_t>(K) * F);
  for (int f = 0; f < F; ++f)
    for (int k = 0; k < K; ++k)
      wp[static_cast<std::size_t>(k) * F + f] = wgt[static_cast<std::size_t>(f) * K + k];

  const std::size_t x_sample = static_cast<std::size_t>(C) * HP * WP;
  const std::size_t y_sample = static_cast<std::size_t>(F) * OH * OW;

  for (int n = 0; n < N; ++n) {
    const float* xs = xp + n * x_sample;
    float* ys = out + n * y_sample;
    for (int f0 = 0; f0 < F; f0 += 16) {
      for (int oh = 0; oh < OH; ++oh) {
        for (int ow0 = 0; ow0 < OW; ow0 += 16) {
          const int lanes = OW - ow0 < 16 ? OW - ow0 : 16;
          const __mmask16 m = static_cast<__mmask16>((1u << lanes) - 1u);
          __m512 acc[16];
          for (int t = 0; t < 16; ++t) acc[t] = _mm512_setzero_ps();
          const float* wk = wp.data() + f0;
          for (int ic = 0; ic < C; ++ic) {
            const float* xrow = xs + (static_cast<std::size_t>(ic) * HP + oh) * WP + ow0;
            for (int kh = 0; kh < KH; ++kh, xrow += WP) {
              for (int kw = 0; kw < KW; ++kw, wk += F) {
                const __m512 xv = _mm512_maskz_loadu_ps(m, xrow + kw);
                for (int t = 0; t < 16; ++t)
                  acc[t] = _mm512_fmadd_ps(_mm512_set1_ps(wk[t]), xv, acc[t]);
              }
            }
          }
          for (int t = 0; t < 16; ++t) {
            if (bias)
              acc[t] = _mm512_add_ps(acc[t], _mm512_set1_ps(bias[f0 + t]));
            _mm512_mask_storeu_ps(
                ys + (static_cast<std::size_t>(f0 + t) * OH + oh) * OW + ow0, m, acc[t]);
          }
        }
      }
    }
  }
}

// dW[f][c][kh][kw] += sum_{n,oh,ow} dy[n][f][oh][ow] * xp[n][c][oh+kh][ow+kw]
// (stride 1). Requires F % 16 == 0. Accumulation per dW element is
// sequential over (n, oh, ow); c is tiled by 4 for FMA throughput.
inline void conv_s1_dw_f32_avx512(const float* xp, int N, int C, int HP, int WP,
                                  const float* dy, int F, int OH, int OW,
                                  int KH, int KW, float* dw) {
  const std::size_t x_sample = static_cast<std::size_t>(C) * HP * WP;
  const std::size_t y_sample = static_cast<std::size_t>(F) * OH * OW;
  const int M = OH * OW;

  std::vector<float> dyt(static_cast<std::size_t>(M) * F);  // [m][f]
  std::vector<float> acc_store(static_cast<std::size_t>(F) * C * KH * KW, 0.0f);
  alignas(64) float lane_buf[16];

  for (int n = 0; n < N; ++n) {
    const float* xs = xp + n * x_sample;
    const float* dys = dy + n * y_sample;
    for (int f = 0; f < F; ++f) {
      const float* src = dys + static_cast<std::size_t>(f) * M;
      for (int mi = 0; mi < M; ++mi) dyt[static_cast<std::size_t>(mi) * F + f] = src[mi];
    }
    for (int f0 = 0; f0 < F; f0 += 16) {
      for (int kh = 0; kh < KH; ++kh) {
        for (int kw = 0; kw < KW; ++kw) {
          int c0 = 0;
          for (; c0 + 4 <= C; c0 += 4) {
            __m512 a0 = _mm512_setzero_ps(), a1 = _mm512_setzero_ps();
            __m512 a2 = _mm512_setzero_ps(), a3 = _mm512_setzero_ps();
            const float* x0 = xs + (static_cast<std::size_t>(c0 + 0) * HP + kh) * WP + kw;
            const float* x1 = xs + (static_cast<std::size_t>(c0 + 1) * HP + kh) * WP + kw;
            const float* x2 = xs + (static_cast<std::size_t>(c0 + 2) * HP + kh) * WP + kw;
            const float* x3 = xs + (static_cast<std::size_t>(c0 + 3) * HP + kh) * WP + kw;
            const float* dv = dyt.data() + f0;
            for (int oh = 0; oh < OH; ++oh) {
              const std::size_t roff = static_cast<std::size_t>(oh) * WP;
              for (int ow = 0; ow < OW; ++ow, dv += F) {
                const __m512 d = _mm512_loadu_ps(dv);
                a0 = _mm512_fmadd_ps(_mm512_set1_ps(x0[roff + ow]), d, a0);
                a1 = _mm512_fmadd_ps(_mm512_set1_ps(x1[roff + ow]), d, a1);
                a2 = _mm512_fmadd_ps(_mm512_set1_ps(x2[roff + ow]), d, a2);
                a3 = _mm512_fmadd_ps(_mm512_set1_ps(x3[roff + ow]), d, a3);
              }
            }
            const __m512 accs[4] = {a0, a1, a2, a3};
            for (int ci = 0; ci < 4; ++ci) {
              _mm512_store_ps(lane_buf, accs[ci]);
              for (int t = 0; t < 16; ++t)
                acc_store[((static_cast<std::size_t>(f0 + t) * C + c0 + ci) * KH + kh) * KW +
                          kw] += lane_buf[t];
            }
          }
          for (; c0 < C; ++c0) {
            __m512 a0 = _mm512_setzero_ps();
            const float* x0 = xs + (static_cast<std::size_t>(c0) * HP + kh) * WP + kw;
            const float* dv = dyt.data() + f0;
            for (int oh = 0; oh < OH; ++oh) {
              const std::size_t roff = static_cast<std::size_t>(oh) * WP;
              for (int ow = 0; ow < OW; ++ow, dv += F)
                a0 = _mm512_fmadd_ps(_mm512_set1_ps(x0[roff + ow]), _mm512_loadu_ps(dv), a0);
            }
            _mm512_store_ps(lane_buf, a0);
            for (int t = 0; t < 16; ++t)
              acc_store[((static_cast<std::size_t>(f0 + t) * C + c0) * KH + kh) * KW + kw] +=
                  lane_buf[t];
          }
        }
      }
    }
  }
  const std::size_t wsz = static_cast<std::size_t>(F) * C * KH * KW;
  for (std::size_t i = 0; i < wsz; ++i) dw[i] += acc_store[i];
}

}  // namespace kn::detail

#else

namespace kn::detail {
inline constexpr bool kHasAvx512 = false;
}

#endif
