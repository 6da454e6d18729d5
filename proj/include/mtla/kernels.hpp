// SPDX-License-Identifier: Apache-2.0
#pragma once

// Low-level contiguous-buffer kernels. Everything here is deterministic:
// fixed summation order for a given precision, no threading.
//
// The attention decode kernels process heads in blocks of kHeadBlock
// lanes so one pass over a cache row feeds every head. For double
// precision on AVX-512/AVX2 hardware there are hand-vectorized
// versions; all other type/ISA combinations use the portable loops.

#include <cmath>
#include <cstdint>
#include <cstring>

#include "mtla/common.hpp"

#if defined(__AVX512F__) || defined(__AVX2__)
#include <immintrin.h>
#endif

namespace mtla::kernels {

/// Heads processed per lane-block by the decode kernels.
inline constexpr int kHeadBlock = 8;

// ---------------------------------------------------------------------------
// Generic kernels
// ---------------------------------------------------------------------------

template <typename T>
T vdot(const T* __restrict a, const T* __restrict b, index_t n) {
  constexpr index_t kW = 8;
  T acc[kW] = {};
  index_t i = 0;
  for (; i + kW <= n; i += kW)
    for (index_t l = 0; l < kW; ++l) acc[l] += a[i + l] * b[i + l];
  T tail{};
  for (; i < n; ++i) tail += a[i] * b[i];
  T s{};
  for (index_t l = 0; l < kW; ++l) s += acc[l];
  return s + tail;
}

template <typename T>
void vaxpy(T* __restrict y, T a, const T* __restrict x, index_t n) {
  for (index_t i = 0; i < n; ++i) y[i] += a * x[i];
}

template <typename T>
void vscale(T* __restrict y, T a, index_t n) {
  for (index_t i = 0; i < n; ++i) y[i] *= a;
}

/// y (cols) = x (rows) * M (rows x cols, row-major). The axpy
/// formulation streams M once and vectorizes on every target.
template <typename T>
void matvec_t(const T* __restrict m, const T* __restrict x, T* __restrict y,
              index_t rows, index_t cols) {
  for (index_t j = 0; j < cols; ++j) y[j] = T{};
  for (index_t i = 0; i < rows; ++i) vaxpy(y, x[i], m + i * cols, cols);
}

/// dst (m x n) = a (m x k) * b (k x n), all row-major contiguous.
template <typename T>
void matmul_into(T* __restrict dst, const T* __restrict a, const T* __restrict b,
                 index_t m, index_t k, index_t n) {
  for (index_t i = 0; i < static_cast<index_t>(m) * n; ++i) dst[i] = T{};
  for (index_t i = 0; i < m; ++i) {
    const T* arow = a + i * k;
    T* drow = dst + i * n;
    for (index_t p = 0; p < k; ++p) vaxpy(drow, arow[p], b + p * n, n);
  }
}

// ---------------------------------------------------------------------------
// Batched exp
// ---------------------------------------------------------------------------

/// Branch-free exp over a buffer (Cephes-style Pade after range
/// reduction, < 1 ulp on doubles). Used in the decode hot path where
/// scalar libm calls dominate the profile.
inline void vexp(double* __restrict y, const double* __restrict x, index_t n) {
  constexpr double kLog2E = 1.4426950408889634074;
  constexpr double kC1 = 6.93145751953125e-1;
  constexpr double kC2 = 1.42860682030941723212e-6;
  for (index_t i = 0; i < n; ++i) {
    double v = x[i];
    v = v < -708.0 ? -708.0 : (v > 708.0 ? 708.0 : v);
    const double k = std::nearbyint(v * kLog2E);
    double r = v - k * kC1;
    r -= k * kC2;
    const double r2 = r * r;
    const double p =
        r * (1.26177193074810590878e-4 * r2 * r2 + 3.02994407707441961300e-2 * r2 +
             9.99999999999999999910e-1);
    const double q = 3.00198505138664455042e-6 * r2 * r2 * r2 +
                     2.52448340349684104192e-3 * r2 * r2 +
                     2.27265548208155028766e-1 * r2 + 2.0;
    double e = 1.0 + 2.0 * p / (q - p);
    std::uint64_t bits;
    std::memcpy(&bits, &e, sizeof bits);
    bits += static_cast<std::uint64_t>(static_cast<std::int64_t>(k)) << 52;
    std::memcpy(&e, &bits, sizeof bits);
    y[i] = e;
  }
}

inline void vexp(float* __restrict y, const float* __restrict x, index_t n) {
  for (index_t i = 0; i < n; ++i) y[i] = std::exp(x[i]);
}

// ---------------------------------------------------------------------------
// Decode attention kernels (head-blocked)
// ---------------------------------------------------------------------------

/// S[n*kHeadBlock + h] (+)= dot(qT column h, cache row n).
/// qT is width x kHeadBlock: transposed per-head query vectors, so one
/// cache element broadcast feeds all heads in the block.
template <typename T>
void attn_scores_block(const T* __restrict cache, const T* __restrict qT,
                       T* __restrict s, index_t t, index_t width, bool accumulate) {
  for (index_t n = 0; n < t; ++n) {
    const T* row = cache + n * width;
    T acc[kHeadBlock] = {};
    for (index_t k = 0; k < width; ++k) {
      const T c = row[k];
      const T* qk = qT + k * kHeadBlock;
      for (int h = 0; h < kHeadBlock; ++h) acc[h] += c * qk[h];
    }
    T* out = s + n * kHeadBlock;
    if (accumulate)
      for (int h = 0; h < kHeadBlock; ++h) out[h] += acc[h];
    else
      for (int h = 0; h < kHeadBlock; ++h) out[h] = acc[h];
  }
}

/// ctx[h] (width) += sum_n P[n*kHeadBlock + h] * cache row n.
template <typename T>
void attn_ctx_block(const T* __restrict cache, const T* __restrict p,
                    T* __restrict ctx, index_t t, index_t width) {
  for (index_t n = 0; n < t; ++n) {
    const T* row = cache + n * width;
    const T* pn = p + n * kHeadBlock;
    for (int h = 0; h < kHeadBlock; ++h) vaxpy(ctx + h * width, pn[h], row, width);
  }
}

#if defined(__AVX512F__)

inline void attn_scores_block(const double* __restrict cache, const double* __restrict qT,
                              double* __restrict s, index_t t, index_t width,
                              bool accumulate) {
  index_t n = 0;
  for (; n + 8 <= t; n += 8) {
    const double* r0 = cache + n * width;
    const double* r1 = r0 + width;
    const double* r2 = r1 + width;
    const double* r3 = r2 + width;
    const double* r4 = r3 + width;
    const double* r5 = r4 + width;
    const double* r6 = r5 + width;
    const double* r7 = r6 + width;
    double* out = s + n * 8;
    __m512d a0, a1, a2, a3, a4, a5, a6, a7;
    if (accumulate) {
      a0 = _mm512_loadu_pd(out + 0);
      a1 = _mm512_loadu_pd(out + 8);
      a2 = _mm512_loadu_pd(out + 16);
      a3 = _mm512_loadu_pd(out + 24);
      a4 = _mm512_loadu_pd(out + 32);
      a5 = _mm512_loadu_pd(out + 40);
      a6 = _mm512_loadu_pd(out + 48);
      a7 = _mm512_loadu_pd(out + 56);
    } else {
      a0 = _mm512_setzero_pd();
      a1 = a0; a2 = a0; a3 = a0; a4 = a0; a5 = a0; a6 = a0; a7 = a0;
    }
    for (index_t k = 0; k < width; ++k) {
      const __m512d qk = _mm512_loadu_pd(qT + k * 8);
      a0 = _mm512_fmadd_pd(_mm512_set1_pd(r0[k]), qk, a0);
      a1 = _mm512_fmadd_pd(_mm512_set1_pd(r1[k]), qk, a1);
      a2 = _mm512_fmadd_pd(_mm512_set1_pd(r2[k]), qk, a2);
      a3 = _mm512_fmadd_pd(_mm512_set1_pd(r3[k]), qk, a3);
      a4 = _mm512_fmadd_pd(_mm512_set1_pd(r4[k]), qk, a4);
      a5 = _mm512_fmadd_pd(_mm512_set1_pd(r5[k]), qk, a5);
      a6 = _mm512_fmadd_pd(_mm512_set1_pd(r6[k]), qk, a6);
      a7 = _mm512_fmadd_pd(_mm512_set1_pd(r7[k]), qk, a7);
    }
    _mm512_storeu_pd(out + 0, a0);
    _mm512_storeu_pd(out + 8, a1);
    _mm512_storeu_pd(out + 16, a2);
    _mm512_storeu_pd(out + 24, a3);
    _mm512_storeu_pd(out + 32, a4);
    _mm512_storeu_pd(out + 40, a5);
    _mm512_storeu_pd(out + 48, a6);
    _mm512_storeu_pd(out + 56, a7);
  }
  for (; n < t; ++n) {
    const double* row = cache + n * width;
    double* out = s + n * 8;
    __m512d acc = accumulate ? _mm512_loadu_pd(out) : _mm512_setzero_pd();
    for (index_t k = 0; k < width; ++k)
      acc = _mm512_fmadd_pd(_mm512_set1_pd(row[k]), _mm512_loadu_pd(qT + k * 8), acc);
    _mm512_storeu_pd(out, acc);
  }
}

inline void attn_ctx_block(const double* __restrict cache, const double* __restrict p,
                           double* __restrict ctx, index_t t, index_t width) {
  index_t n = 0;
  for (; n + 8 <= t; n += 8) {
    const double* r0 = cache + n * width;
    const double* r1 = r0 + width;
    const double* r2 = r1 + width;
    const double* r3 = r2 + width;
    const double* r4 = r3 + width;
    const double* r5 = r4 + width;
    const double* r6 = r5 + width;
    const double* r7 = r6 + width;
    const double* pn = p + n * 8;
    index_t k = 0;
    for (; k + 8 <= width; k += 8) {
      const __m512d c0 = _mm512_loadu_pd(r0 + k);
      const __m512d c1 = _mm512_loadu_pd(r1 + k);
      const __m512d c2 = _mm512_loadu_pd(r2 + k);
      const __m512d c3 = _mm512_loadu_pd(r3 + k);
      const __m512d c4 = _mm512_loadu_pd(r4 + k);
      const __m512d c5 = _mm512_loadu_pd(r5 + k);
      const __m512d c6 = _mm512_loadu_pd(r6 + k);
      const __m512d c7 = _mm512_loadu_pd(r7 + k);
      for (int h = 0; h < 8; ++h) {
        double* cx = ctx + h * width + k;
        __m512d acc = _mm512_loadu_pd(cx);
        acc = _mm512_fmadd_pd(_mm512_set1_pd(pn[0 * 8 + h]), c0, acc);
        acc = _mm512_fmadd_pd(_mm512_set1_pd(pn[1 * 8 + h]), c1, acc);
        acc = _mm512_fmadd_pd(_mm512_set1_pd(pn[2 * 8 + h]), c2, acc);
        acc = _mm512_fmadd_pd(_mm512_set1_pd(pn[3 * 8 + h]), c3, acc);
        acc = _mm512_fmadd_pd(_mm512_set1_pd(pn[4 * 8 + h]), c4, acc);
        acc = _mm512_fmadd_pd(_mm512_set1_pd(pn[5 * 8 + h]), c5, acc);
        acc = _mm512_fmadd_pd(_mm512_set1_pd(pn[6 * 8 + h]), c6, acc);
        acc = _mm512_fmadd_pd(_mm512_set1_pd(pn[7 * 8 + h]), c7, acc);
        _mm512_storeu_pd(cx, acc);
      }
    }
    for (; k < width; ++k)
      for (int h = 0; h < 8; ++h)
        ctx[h * width + k] += pn[0 * 8 + h] * r0[k] + pn[1 * 8 + h] * r1[k] +
                              pn[2 * 8 + h] * r2[k] + pn[3 * 8 + h] * r3[k] +
                              pn[4 * 8 + h] * r4[k] + pn[5 * 8 + h] * r5[k] +
                              pn[6 * 8 + h] * r6[k] + pn[7 * 8 + h] * r7[k];
  }
  for (; n < t; ++n) {
    const double* row = cache + n * width;
    const double* pn = p + n * 8;
    for (int h = 0; h < 8; ++h) vaxpy(ctx + h * width, pn[h], row, width);
  }
}

#elif defined(__AVX2__) && defined(__FMA__)

inline void attn_scores_block(const double* __restrict cache, const double* __restrict qT,
                              double* __restrict s, index_t t, index_t width,
                              bool accumulate) {
  // 4-lane halves of the 8-head block, 4 rows at a time.
  index_t n = 0;
  for (; n + 4 <= t; n += 4) {
    const double* r0 = cache + n * width;
    const double* r1 = r0 + width;
    const double* r2 = r1 + width;
    const double* r3 = r2 + width;
    double* out = s + n * 8;
    __m256d a0l, a0h, a1l, a1h, a2l, a2h, a3l, a3h;
    if (accumulate) {
      a0l = _mm256_loadu_pd(out + 0);  a0h = _mm256_loadu_pd(out + 4);
      a1l = _mm256_loadu_pd(out + 8);  a1h = _mm256_loadu_pd(out + 12);
      a2l = _mm256_loadu_pd(out + 16); a2h = _mm256_loadu_pd(out + 20);
      a3l = _mm256_loadu_pd(out + 24); a3h = _mm256_loadu_pd(out + 28);
    } else {
      a0l = _mm256_setzero_pd();
      a0h = a0l; a1l = a0l; a1h = a0l; a2l = a0l; a2h = a0l; a3l = a0l; a3h = a0l;
    }
    for (index_t k = 0; k < width; ++k) {
      const __m256d ql = _mm256_loadu_pd(qT + k * 8);
      const __m256d qh = _mm256_loadu_pd(qT + k * 8 + 4);
      const __m256d b0 = _mm256_set1_pd(r0[k]);
      const __m256d b1 = _mm256_set1_pd(r1[k]);
      const __m256d b2 = _mm256_set1_pd(r2[k]);
      const __m256d b3 = _mm256_set1_pd(r3[k]);
      a0l = _mm256_fmadd_pd(b0, ql, a0l); a0h = _mm256_fmadd_pd(b0, qh, a0h);
      a1l = _mm256_fmadd_pd(b1, ql, a1l); a1h = _mm256_fmadd_pd(b1, qh, a1h);
      a2l = _mm256_fmadd_pd(b2, ql, a2l); a2h = _mm256_fmadd_pd(b2, qh, a2h);
      a3l = _mm256_fmadd_pd(b3, ql, a3l); a3h = _mm256_fmadd_pd(b3, qh, a3h);
    }
    _mm256_storeu_pd(out + 0, a0l);  _mm256_storeu_pd(out + 4, a0h);
    _mm256_storeu_pd(out + 8, a1l);  _mm256_storeu_pd(out + 12, a1h);
    _mm256_storeu_pd(out + 16, a2l); _mm256_storeu_pd(out + 20, a2h);
    _mm256_storeu_pd(out + 24, a3l); _mm256_storeu_pd(out + 28, a3h);
  }
  for (; n < t; ++n) {
    const double* row = cache + n * width;
    double* out = s + n * 8;
    __m256d al = accumulate ? _mm256_loadu_pd(out) : _mm256_setzero_pd();
    __m256d ah = accumulate ? _mm256_loadu_pd(out + 4) : _mm256_setzero_pd();
    for (index_t k = 0; k < width; ++k) {
      const __m256d b = _mm256_set1_pd(row[k]);
      al = _mm256_fmadd_pd(b, _mm256_loadu_pd(qT + k * 8), al);
      ah = _mm256_fmadd_pd(b, _mm256_loadu_pd(qT + k * 8 + 4), ah);
    }
    _mm256_storeu_pd(out, al);
    _mm256_storeu_pd(out + 4, ah);
  }
}

inline void attn_ctx_block(const double* __restrict cache, const double* __restrict p,
                           double* __restrict ctx, index_t t, index_t width) {
  index_t n = 0;
  for (; n + 4 <= t; n += 4) {
    const double* r0 = cache + n * width;
    const double* r1 = r0 + width;
    const double* r2 = r1 + width;
    const double* r3 = r2 + width;
    const double* pn = p + n * 8;
    index_t k = 0;
    for (; k + 4 <= width; k += 4) {
      const __m256d c0 = _mm256_loadu_pd(r0 + k);
      const __m256d c1 = _mm256_loadu_pd(r1 + k);
      const __m256d c2 = _mm256_loadu_pd(r2 + k);
      const __m256d c3 = _mm256_loadu_pd(r3 + k);
      for (int h = 0; h < 8; ++h) {
        double* cx = ctx + h * width + k;
        __m256d acc = _mm256_loadu_pd(cx);
        acc = _mm256_fmadd_pd(_mm256_set1_pd(pn[0 * 8 + h]), c0, acc);
        acc = _mm256_fmadd_pd(_mm256_set1_pd(pn[1 * 8 + h]), c1, acc);
        acc = _mm256_fmadd_pd(_mm256_set1_pd(pn[2 * 8 + h]), c2, acc);
        acc = _mm256_fmadd_pd(_mm256_set1_pd(pn[3 * 8 + h]), c3, acc);
        _mm256_storeu_pd(cx, acc);
      }
    }
    for (; k < width; ++k)
      for (int h = 0; h < 8; ++h)
        ctx[h * width + k] += pn[0 * 8 + h] * r0[k] + pn[1 * 8 + h] * r1[k] +
                              pn[2 * 8 + h] * r2[k] + pn[3 * 8 + h] * r3[k];
  }
  for (; n < t; ++n) {
    const double* row = cache + n * width;
    const double* pn = p + n * 8;
    for (int h = 0; h < 8; ++h) vaxpy(ctx + h * width, pn[h], row, width);
  }
}

#endif  // ISA dispatch

}  // namespace mtla::kernels
