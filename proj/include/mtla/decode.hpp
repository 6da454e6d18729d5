// SPDX-License-Identifier: Apache-2.0
#pragma once

// Incremental decoding. Each cache owns its growth buffers and a fixed
// scratch workspace sized at construction, so a step performs no heap
// allocation: appends are bounded copies into reserved storage and all
// intermediates live in the scratch. The latent variants attend through
// the head-blocked kernels; probabilities for padded head lanes are
// computed but never read.

#include <algorithm>
#include <cstring>
#include <vector>

#include "mtla/attention.hpp"
#include "mtla/kernels.hpp"
#include "mtla/mtla.hpp"

namespace mtla {

namespace detail {

template <typename T>
void layer_norm_row(T* __restrict row, const T* __restrict gain,
                    const T* __restrict bias, index_t c, T eps) {
  T mean{};
  for (index_t j = 0; j < c; ++j) mean += row[j];
  mean /= static_cast<T>(c);
  T var{};
  for (index_t j = 0; j < c; ++j) {
    const T d = row[j] - mean;
    var += d * d;
  }
  var /= static_cast<T>(c);
  const T inv = T{1} / std::sqrt(var + eps);
  for (index_t j = 0; j < c; ++j) row[j] = (row[j] - mean) * inv * gain[j] + bias[j];
}

template <typename T>
Matrix<T> rows_to_matrix(const std::vector<T>& data, index_t rows, index_t cols) {
  Matrix<T> m(rows, cols);
  std::memcpy(m.data(), data.data(),
              static_cast<std::size_t>(rows) * static_cast<std::size_t>(cols) * sizeof(T));
  return m;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Dense KV cache (MHA / GQA / MQA)
// ---------------------------------------------------------------------------

template <typename T>
struct DenseKVCache {
  DenseKVCache(const AttentionConfig& cfg, index_t kv_heads_, index_t max_steps)
      : n_h(cfg.n_h),
        d_h(cfg.d_h),
        kv_heads(kv_heads_),
        kv_width(kv_heads_ * cfg.d_h),
        capacity(max_steps) {
    if (max_steps < 1) throw ConfigError("DenseKVCache: max_steps must be >= 1");
    k.resize(static_cast<std::size_t>(capacity) * kv_width);
    v.resize(static_cast<std::size_t>(capacity) * kv_width);
    q_buf.resize(static_cast<std::size_t>(n_h) * d_h);
    k_row.resize(static_cast<std::size_t>(kv_width));
    v_row.resize(static_cast<std::size_t>(kv_width));
    att.resize(static_cast<std::size_t>(n_h) * d_h);
    scores.resize(static_cast<std::size_t>(n_h) * capacity);
  }

  index_t n_h, d_h, kv_heads, kv_width, capacity;
  index_t step = 0;

  std::vector<T> k, v;

  // fixed scratch
  std::vector<T> q_buf, k_row, v_row, att, scores;

  Matrix<T> keys() const { return detail::rows_to_matrix(k, step, kv_width); }
  Matrix<T> values() const { return detail::rows_to_matrix(v, step, kv_width); }
  index_t element_count() const { return 2 * kv_width * step; }

  void ensure_capacity(index_t steps) {
    if (steps <= capacity) return;
    capacity = std::max(steps, capacity * 2);
    k.resize(static_cast<std::size_t>(capacity) * kv_width);
    v.resize(static_cast<std::size_t>(capacity) * kv_width);
    scores.resize(static_cast<std::size_t>(n_h) * capacity);
  }
};

/// One decode step for the dense variants. Appends the rotated key and
/// the value row, then attends over everything cached so far.
template <typename T>
void dense_step_into(std::span<const T> x, std::span<T> y, DenseKVCache<T>& c,
                     const DenseAttnParams<T>& p, const AttentionConfig& cfg) {
  const index_t d = cfg.d;
  if (static_cast<index_t>(x.size()) != d || static_cast<index_t>(y.size()) != d)
    throw ShapeError("dense_step: x and y must have length d");
  c.ensure_capacity(c.step + 1);
  const index_t i = c.step + 1;

  kernels::matvec_t(p.w_q.data(), x.data(), c.q_buf.data(), d, c.n_h * c.d_h);
  kernels::matvec_t(p.w_k.data(), x.data(), c.k_row.data(), d, c.kv_width);
  kernels::matvec_t(p.w_v.data(), x.data(), c.v_row.data(), d, c.kv_width);
  for (index_t h = 0; h < c.n_h; ++h)
    detail::rope_block(c.q_buf.data() + h * c.d_h, c.q_buf.data() + h * c.d_h, c.d_h, i,
                       kRopeBase, +1);
  for (index_t g = 0; g < c.kv_heads; ++g)
    detail::rope_block(c.k_row.data() + g * c.d_h, c.k_row.data() + g * c.d_h, c.d_h, i,
                       kRopeBase, +1);

  std::memcpy(c.k.data() + c.step * c.kv_width, c.k_row.data(),
              static_cast<std::size_t>(c.kv_width) * sizeof(T));
  std::memcpy(c.v.data() + c.step * c.kv_width, c.v_row.data(),
              static_cast<std::size_t>(c.kv_width) * sizeof(T));
  c.step = i;

  const index_t t = c.step;
  const index_t heads_per_group = c.n_h / c.kv_heads;
  const T inv_scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(c.d_h)));
  for (index_t h = 0; h < c.n_h; ++h) {
    const index_t g = h / heads_per_group;
    T* s = c.scores.data() + h * c.capacity;
    const T* qh = c.q_buf.data() + h * c.d_h;
    for (index_t n = 0; n < t; ++n)
      s[n] = kernels::vdot(qh, c.k.data() + n * c.kv_width + g * c.d_h, c.d_h) * inv_scale;
    T mx = s[0];
    for (index_t n = 1; n < t; ++n)
      if (s[n] > mx) mx = s[n];
    for (index_t n = 0; n < t; ++n) s[n] -= mx;
    kernels::vexp(s, s, t);
    T z{};
    for (index_t n = 0; n < t; ++n) z += s[n];
    kernels::vscale(s, T{1} / z, t);
  }
  std::fill(c.att.begin(), c.att.end(), T{});
  for (index_t n = 0; n < t; ++n) {
    const T* vrow = c.v.data() + n * c.kv_width;
    for (index_t h = 0; h < c.n_h; ++h) {
      const index_t g = h / heads_per_group;
      kernels::vaxpy(c.att.data() + h * c.d_h, c.scores[h * c.capacity + n],
                     vrow + g * c.d_h, c.d_h);
    }
  }
  kernels::matvec_t(p.w_o.data(), c.att.data(), y.data(), c.n_h * c.d_h, d);
}

template <typename T>
Matrix<T> dense_step(const Matrix<T>& x, DenseKVCache<T>& cache,
                     const DenseAttnParams<T>& p, const AttentionConfig& cfg) {
  if (x.rows() != 1 || x.cols() != cfg.d) throw ShapeError("dense_step: x must be 1 x d");
  Matrix<T> y(1, cfg.d);
  dense_step_into(std::span<const T>(x.data(), static_cast<std::size_t>(x.size())),
                  std::span<T>(y.data(), static_cast<std::size_t>(y.size())), cache, p,
                  cfg);
  return y;
}

template <typename T>
Matrix<T> mha_step(const Matrix<T>& x, DenseKVCache<T>& cache, const DenseAttnParams<T>& p,
                   const AttentionConfig& cfg) {
  if (cache.kv_heads != cfg.n_h) throw ConfigError("mha_step: cache has wrong kv head count");
  return dense_step(x, cache, p, cfg);
}

template <typename T>
Matrix<T> gqa_step(const Matrix<T>& x, DenseKVCache<T>& cache, const DenseAttnParams<T>& p,
                   const AttentionConfig& cfg) {
  if (cache.kv_heads != cfg.g) throw ConfigError("gqa_step: cache has wrong kv head count");
  return dense_step(x, cache, p, cfg);
}

template <typename T>
Matrix<T> mqa_step(const Matrix<T>& x, DenseKVCache<T>& cache, const DenseAttnParams<T>& p,
                   const AttentionConfig& cfg) {
  if (cache.kv_heads != 1) throw ConfigError("mqa_step: cache has wrong kv head count");
  return dense_step(x, cache, p, cfg);
}

// ---------------------------------------------------------------------------
// Latent caches (MLA / MTLA)
// ---------------------------------------------------------------------------

template <typename T>
struct LatentScratch {
  LatentScratch() = default;
  LatentScratch(const AttentionConfig& cfg, index_t cap_rows) {
    blocks = (cfg.n_h + kernels::kHeadBlock - 1) / kernels::kHeadBlock;
    q.resize(static_cast<std::size_t>(cfg.n_h) * cfg.d_h);
    qr.resize(static_cast<std::size_t>(cfg.n_h) * cfg.d_h_rope);
    qck_tmp.resize(static_cast<std::size_t>(cfg.r));
    qck_t.resize(static_cast<std::size_t>(blocks) * cfg.r * kernels::kHeadBlock);
    qr_t.resize(static_cast<std::size_t>(blocks) * cfg.d_h_rope * kernels::kHeadBlock);
    s.resize(static_cast<std::size_t>(blocks) * cap_rows * kernels::kHeadBlock);
    ctx.resize(static_cast<std::size_t>(blocks) * kernels::kHeadBlock * cfg.r);
    att.resize(static_cast<std::size_t>(cfg.n_h) * cfg.d_h);
    c_row.resize(static_cast<std::size_t>(cfg.r));
    kr_row.resize(static_cast<std::size_t>(cfg.d_h_rope));
    pe.resize(static_cast<std::size_t>(cfg.r));
    hyp_c.resize(static_cast<std::size_t>(cfg.d_hyper));
    hyp_p.resize(static_cast<std::size_t>(cfg.d_hyper));
  }

  void ensure_rows(index_t cap_rows) {
    const std::size_t need =
        static_cast<std::size_t>(blocks) * cap_rows * kernels::kHeadBlock;
    if (s.size() < need) s.resize(need);
  }

  index_t blocks = 0;
  std::vector<T> q, qr, qck_tmp, qck_t, qr_t, s, ctx, att, c_row, kr_row, pe, hyp_c, hyp_p;
};

namespace detail {

/// Attention over a latent cache via the folded weights: scores against
/// the cached latents plus the decoupled-RoPE term, softmax, context in
/// latent space, then the value/output projections.
template <typename T>
void latent_attend(std::span<const T> x, std::span<T> y, const T* latents,
                   const T* rope_keys, index_t t, index_t position, LatentScratch<T>& w,
                   const MlaParamsT<Matrix<T>>& p, const AbsorbedWeights<T>& a,
                   const AttentionConfig& cfg) {
  constexpr int kHB = kernels::kHeadBlock;
  const index_t d = cfg.d;
  const T inv_scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(cfg.d_h)));

  kernels::matvec_t(p.w_q.data(), x.data(), w.q.data(), d, cfg.n_h * cfg.d_h);
  kernels::matvec_t(p.w_qr.data(), x.data(), w.qr.data(), d, cfg.n_h * cfg.d_h_rope);
  for (index_t h = 0; h < cfg.n_h; ++h)
    rope_block(w.qr.data() + h * cfg.d_h_rope, w.qr.data() + h * cfg.d_h_rope,
               cfg.d_h_rope, position, kRopeBase, +1);

  // transposed, pre-scaled per-head absorbed queries
  std::fill(w.qck_t.begin(), w.qck_t.end(), T{});
  std::fill(w.qr_t.begin(), w.qr_t.end(), T{});
  for (index_t h = 0; h < cfg.n_h; ++h) {
    const index_t b = h / kHB;
    const int lane = static_cast<int>(h % kHB);
    std::fill(w.qck_tmp.begin(), w.qck_tmp.end(), T{});
    for (index_t kk = 0; kk < cfg.d_h; ++kk)
      kernels::vaxpy(w.qck_tmp.data(), w.q[h * cfg.d_h + kk],
                     a.wk_t[static_cast<std::size_t>(h)].data() + kk * cfg.r, cfg.r);
    T* qt = w.qck_t.data() + b * cfg.r * kHB;
    for (index_t i = 0; i < cfg.r; ++i) qt[i * kHB + lane] = w.qck_tmp[i] * inv_scale;
    T* rt = w.qr_t.data() + b * cfg.d_h_rope * kHB;
    for (index_t i = 0; i < cfg.d_h_rope; ++i)
      rt[i * kHB + lane] = w.qr[h * cfg.d_h_rope + i] * inv_scale;
  }

  std::fill(w.ctx.begin(), w.ctx.end(), T{});
  for (index_t b = 0; b < w.blocks; ++b) {
    T* sb = w.s.data() + b * t * kHB;
    kernels::attn_scores_block(latents, w.qck_t.data() + b * cfg.r * kHB, sb, t, cfg.r,
                               false);
    kernels::attn_scores_block(rope_keys, w.qr_t.data() + b * cfg.d_h_rope * kHB, sb, t,
                               cfg.d_h_rope, true);
    T mx[kHB], z[kHB];
    for (int l = 0; l < kHB; ++l) mx[l] = sb[l];
    for (index_t n = 1; n < t; ++n)
      for (int l = 0; l < kHB; ++l)
        if (sb[n * kHB + l] > mx[l]) mx[l] = sb[n * kHB + l];
    for (index_t n = 0; n < t; ++n)
      for (int l = 0; l < kHB; ++l) sb[n * kHB + l] -= mx[l];
    kernels::vexp(sb, sb, t * kHB);
    for (int l = 0; l < kHB; ++l) z[l] = T{};
    for (index_t n = 0; n < t; ++n)
      for (int l = 0; l < kHB; ++l) z[l] += sb[n * kHB + l];
    kernels::attn_ctx_block(latents, sb, w.ctx.data() + b * kHB * cfg.r, t, cfg.r);
    for (int l = 0; l < kHB; ++l) {
      const index_t h = b * kHB + l;
      if (h >= cfg.n_h) break;
      kernels::vscale(w.ctx.data() + (b * kHB + l) * cfg.r, T{1} / z[l], cfg.r);
    }
  }

  std::fill(w.att.begin(), w.att.end(), T{});
  for (index_t h = 0; h < cfg.n_h; ++h) {
    const T* ctx_h = w.ctx.data() + h * cfg.r;
    for (index_t i = 0; i < cfg.r; ++i)
      kernels::vaxpy(w.att.data() + h * cfg.d_h, ctx_h[i],
                     p.w_v.data() + i * (cfg.n_h * cfg.d_h) + h * cfg.d_h, cfg.d_h);
  }
  kernels::matvec_t(p.w_o.data(), w.att.data(), y.data(), cfg.n_h * cfg.d_h, d);
}

}  // namespace detail

/// MLA cache: raw latent rows plus RoPE keys, one row per step.
template <typename T>
struct LatentKVCache {
  LatentKVCache(const AttentionConfig& cfg_, index_t max_steps)
      : cfg(cfg_), capacity(max_steps), scratch(cfg_, max_steps) {
    if (max_steps < 1) throw ConfigError("LatentKVCache: max_steps must be >= 1");
    latents.resize(static_cast<std::size_t>(capacity) * cfg.r);
    rope_keys_buf.resize(static_cast<std::size_t>(capacity) * cfg.d_h_rope);
  }

  AttentionConfig cfg;
  index_t capacity;
  index_t step = 0;
  std::vector<T> latents, rope_keys_buf;
  LatentScratch<T> scratch;

  Matrix<T> latent_rows() const { return detail::rows_to_matrix(latents, step, cfg.r); }
  Matrix<T> rope_key_rows() const {
    return detail::rows_to_matrix(rope_keys_buf, step, cfg.d_h_rope);
  }
  index_t element_count() const { return step * (cfg.r + cfg.d_h_rope); }

  void ensure_capacity(index_t steps) {
    if (steps <= capacity) return;
    capacity = std::max(steps, capacity * 2);
    latents.resize(static_cast<std::size_t>(capacity) * cfg.r);
    rope_keys_buf.resize(static_cast<std::size_t>(capacity) * cfg.d_h_rope);
    scratch.ensure_rows(capacity);
  }
};

template <typename T>
void mla_step_into(std::span<const T> x, std::span<T> y, LatentKVCache<T>& c,
                   const MlaParams<T>& p, const AbsorbedWeights<T>& a,
                   const AttentionConfig& cfg) {
  c.ensure_capacity(c.step + 1);
  const index_t i = c.step + 1;
  auto& w = c.scratch;
  kernels::matvec_t(p.w_r.data(), x.data(), w.c_row.data(), cfg.d, cfg.r);
  detail::layer_norm_row(w.c_row.data(), p.ln_gain.data(), p.ln_bias.data(), cfg.r,
                         static_cast<T>(kLayerNormEps));
  kernels::matvec_t(p.w_kr.data(), w.c_row.data(), w.kr_row.data(), cfg.r, cfg.d_h_rope);
  detail::rope_block(w.kr_row.data(), w.kr_row.data(), cfg.d_h_rope, i, kRopeBase, +1);

  std::memcpy(c.latents.data() + c.step * cfg.r, w.c_row.data(),
              static_cast<std::size_t>(cfg.r) * sizeof(T));
  std::memcpy(c.rope_keys_buf.data() + c.step * cfg.d_h_rope, w.kr_row.data(),
              static_cast<std::size_t>(cfg.d_h_rope) * sizeof(T));
  c.step = i;

  detail::latent_attend(x, y, c.latents.data(), c.rope_keys_buf.data(), c.step, i, w, p,
                        a, cfg);
}

template <typename T>
Matrix<T> mla_step(const Matrix<T>& x, LatentKVCache<T>& cache, const MlaParams<T>& p,
                   const AbsorbedWeights<T>& a, const AttentionConfig& cfg) {
  if (x.rows() != 1 || x.cols() != cfg.d) throw ShapeError("mla_step: x must be 1 x d");
  Matrix<T> y(1, cfg.d);
  mla_step_into(std::span<const T>(x.data(), static_cast<std::size_t>(x.size())),
                std::span<T>(y.data(), static_cast<std::size_t>(y.size())), cache, p, a,
                cfg);
  return y;
}

/// Compressed temporal-latent cache. Holds ceil(step/s) rows; while a
/// chunk is open the last row is the temporary slot: its latent part
/// accumulates w_i * c_i and its RoPE key is overwritten with the most
/// recent rotation.
template <typename T>
struct MtlaCache {
  MtlaCache(const AttentionConfig& cfg_, index_t max_steps)
      : cfg(cfg_),
        capacity((max_steps + cfg_.s - 1) / cfg_.s),
        scratch(cfg_, (max_steps + cfg_.s - 1) / cfg_.s) {
    if (max_steps < 1) throw ConfigError("MtlaCache: max_steps must be >= 1");
    latents.resize(static_cast<std::size_t>(capacity) * cfg.r);
    rope_keys_buf.resize(static_cast<std::size_t>(capacity) * cfg.d_h_rope);
  }

  AttentionConfig cfg;
  index_t capacity;  // rows
  index_t step = 0;  // tokens processed
  index_t rows = 0;  // == ceil(step/s)
  std::vector<T> latents, rope_keys_buf;
  LatentScratch<T> scratch;

  bool in_progress() const { return step % cfg.s != 0; }
  Matrix<T> c_hat() const { return detail::rows_to_matrix(latents, rows, cfg.r); }
  Matrix<T> rope_key_rows() const {
    return detail::rows_to_matrix(rope_keys_buf, rows, cfg.d_h_rope);
  }
  index_t element_count() const { return rows * (cfg.r + cfg.d_h_rope); }

  void ensure_capacity(index_t steps) {
    const index_t need = (steps + cfg.s - 1) / cfg.s;
    if (need <= capacity) return;
    capacity = std::max(need, capacity * 2);
    latents.resize(static_cast<std::size_t>(capacity) * cfg.r);
    rope_keys_buf.resize(static_cast<std::size_t>(capacity) * cfg.d_h_rope);
    scratch.ensure_rows(capacity);
  }
};

/// One MTLA decode step. Chunk starts append a fresh slot; any other
/// step folds w_i * c_i into the open slot and replaces its RoPE key.
template <typename T>
void infer_step_into(std::span<const T> x, std::span<T> y, MtlaCache<T>& c,
                     const MtlaParams<T>& p, const AbsorbedWeights<T>& a,
                     const AttentionConfig& cfg) {
  c.ensure_capacity(c.step + 1);
  const index_t i = c.step + 1;
  const index_t j = (i + cfg.s - 1) / cfg.s;
  auto& w = c.scratch;

  kernels::matvec_t(p.w_r.data(), x.data(), w.c_row.data(), cfg.d, cfg.r);
  detail::layer_norm_row(w.c_row.data(), p.ln_gain.data(), p.ln_bias.data(), cfg.r,
                         static_cast<T>(kLayerNormEps));

  sinusoidal_pe_into(std::span<T>(w.pe), j);
  kernels::matvec_t(p.h_c.data(), w.c_row.data(), w.hyp_c.data(), cfg.r, cfg.d_hyper);
  kernels::matvec_t(p.h_p.data(), w.pe.data(), w.hyp_p.data(), cfg.r, cfg.d_hyper);
  const T weight = sigmoid_scalar(kernels::vdot(w.hyp_p.data(), w.hyp_c.data(), cfg.d_hyper));

  kernels::matvec_t(p.w_kr.data(), w.c_row.data(), w.kr_row.data(), cfg.r, cfg.d_h_rope);
  detail::rope_block(w.kr_row.data(), w.kr_row.data(), cfg.d_h_rope, i, kRopeBase, +1);

  if ((i - 1) % cfg.s == 0) {
    T* slot = c.latents.data() + c.rows * cfg.r;
    for (index_t k = 0; k < cfg.r; ++k) slot[k] = weight * w.c_row[k];
    std::memcpy(c.rope_keys_buf.data() + c.rows * cfg.d_h_rope, w.kr_row.data(),
                static_cast<std::size_t>(cfg.d_h_rope) * sizeof(T));
    c.rows += 1;
  } else {
    kernels::vaxpy(c.latents.data() + (c.rows - 1) * cfg.r, weight, w.c_row.data(), cfg.r);
    std::memcpy(c.rope_keys_buf.data() + (c.rows - 1) * cfg.d_h_rope, w.kr_row.data(),
                static_cast<std::size_t>(cfg.d_h_rope) * sizeof(T));
  }
  c.step = i;

  detail::latent_attend(x, y, c.latents.data(), c.rope_keys_buf.data(), c.rows, i, w, p,
                        a, cfg);
}

template <typename T>
Matrix<T> infer_step(const Matrix<T>& x, MtlaCache<T>& cache, const MtlaParams<T>& p,
                     const AbsorbedWeights<T>& a, const AttentionConfig& cfg) {
  if (x.rows() != 1 || x.cols() != cfg.d) throw ShapeError("infer_step: x must be 1 x d");
  Matrix<T> y(1, cfg.d);
  infer_step_into(std::span<const T>(x.data(), static_cast<std::size_t>(x.size())),
                  std::span<T>(y.data(), static_cast<std::size_t>(y.size())), cache, p, a,
                  cfg);
  return y;
}

}  // namespace mtla
