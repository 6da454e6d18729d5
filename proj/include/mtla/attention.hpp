// SPDX-License-Identifier: Apache-2.0
#pragma once

// Parallel (training-mode) attention forwards, written once over the
// engine interface. The factored projection order (X*Wq then the head
// slice of Wk transposed) keeps the up-projections folded into the
// query/output sides, so the cached latents are consumed directly; the
// decode steps use the same association.

#include <vector>

#include "mtla/config.hpp"
#include "mtla/engine.hpp"
#include "mtla/masks.hpp"
#include "mtla/ops.hpp"

namespace mtla {

inline constexpr double kLayerNormEps = 1e-5;
inline constexpr double kRopeBase = 10000.0;

template <typename V>
struct DenseAttnParamsT {
  V w_q;  // d x (n_h * d_h)
  V w_k;  // d x (kv_heads * d_h)
  V w_v;  // d x (kv_heads * d_h)
  V w_o;  // (n_h * d_h) x d
};

template <typename V>
struct MlaParamsT {
  V w_q;              // d x (n_h * d_h)
  V w_r;              // d x r
  V ln_gain, ln_bias; // 1 x r
  V w_k;              // r x (n_h * d_h)
  V w_v;              // r x (n_h * d_h)
  V w_o;              // (n_h * d_h) x d
  V w_qr;             // d x (n_h * d_h_rope)
  V w_kr;             // r x d_h_rope
};

template <typename V>
struct MtlaParamsT : MlaParamsT<V> {
  V h_c;  // r x d_hyper
  V h_p;  // r x d_hyper
};

template <typename T>
using DenseAttnParams = DenseAttnParamsT<Matrix<T>>;
template <typename T>
using MlaParams = MlaParamsT<Matrix<T>>;
template <typename T>
using MtlaParams = MtlaParamsT<Matrix<T>>;

/// Replicated positional embeddings: row m (1-based) is the sinusoidal
/// embedding of chunk index ceil(m/s), width r.
template <typename T>
Matrix<T> pe_matrix(index_t seq_len, index_t s, index_t r) {
  Matrix<T> pe(seq_len, r);
  for (index_t m = 1; m <= seq_len; ++m) {
    const auto row = sinusoidal_pe<T>((m + s - 1) / s, r);
    for (index_t j = 0; j < r; ++j) pe(m - 1, j) = row[static_cast<std::size_t>(j)];
  }
  return pe;
}

/// MHA/MQA/GQA forward: per-head scaled dot-product attention with
/// standard RoPE on queries and keys. kv_heads = n_h for MHA, g for
/// GQA, 1 for MQA.
template <typename T, class E>
typename E::Val dense_attention(E& eng, const DenseAttnParamsT<typename E::Val>& p,
                                const typename E::Val& x, index_t seq_len,
                                const AttentionConfig& cfg, index_t kv_heads,
                                const Matrix<T>& mask) {
  using Val = typename E::Val;
  if (cfg.n_h % kv_heads != 0) throw ConfigError("dense_attention: n_h % kv_heads != 0");
  const auto pos = iota_positions(seq_len);
  Val q = eng.rope(eng.matmul(x, p.w_q), pos, kRopeBase, cfg.n_h);
  Val k = eng.rope(eng.matmul(x, p.w_k), pos, kRopeBase, kv_heads);
  Val v = eng.matmul(x, p.w_v);
  const T inv_scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(cfg.d_h)));
  const index_t heads_per_group = cfg.n_h / kv_heads;
  std::vector<Val> ctx;
  ctx.reserve(static_cast<std::size_t>(cfg.n_h));
  for (index_t h = 0; h < cfg.n_h; ++h) {
    const index_t g = h / heads_per_group;
    Val qh = eng.slice_cols(q, h * cfg.d_h, (h + 1) * cfg.d_h);
    Val kg = eng.slice_cols(k, g * cfg.d_h, (g + 1) * cfg.d_h);
    Val vg = eng.slice_cols(v, g * cfg.d_h, (g + 1) * cfg.d_h);
    Val scores = eng.scale(eng.matmul(qh, eng.transpose(kg)), inv_scale);
    Val probs = eng.row_softmax(scores, &mask);
    ctx.push_back(eng.matmul(probs, vg));
  }
  return eng.matmul(eng.concat_cols(ctx), p.w_o);
}

namespace detail {

/// Shared score/value path of the latent variants, given the cached
/// sequence `chat` (C for MLA, the replicated compressed sequence for
/// MTLA) and the decoupled-RoPE keys.
template <typename T, class E>
typename E::Val latent_scores_values(E& eng, const MlaParamsT<typename E::Val>& p,
                                     const typename E::Val& x,
                                     const typename E::Val& chat,
                                     const typename E::Val& rope_k, index_t seq_len,
                                     const AttentionConfig& cfg, const Matrix<T>& mask) {
  using Val = typename E::Val;
  const auto pos = iota_positions(seq_len);
  Val q = eng.matmul(x, p.w_q);
  Val q_rope = eng.rope(eng.matmul(x, p.w_qr), pos, kRopeBase, cfg.n_h);
  Val chat_t = eng.transpose(chat);
  Val rope_k_t = eng.transpose(rope_k);
  const T inv_scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(cfg.d_h)));
  std::vector<Val> ctx;
  ctx.reserve(static_cast<std::size_t>(cfg.n_h));
  for (index_t h = 0; h < cfg.n_h; ++h) {
    Val qh = eng.slice_cols(q, h * cfg.d_h, (h + 1) * cfg.d_h);
    Val wk_h_t = eng.transpose(eng.slice_cols(p.w_k, h * cfg.d_h, (h + 1) * cfg.d_h));
    Val q_abs = eng.matmul(qh, wk_h_t);  // T x r
    Val content = eng.matmul(q_abs, chat_t);
    Val qr_h = eng.slice_cols(q_rope, h * cfg.d_h_rope, (h + 1) * cfg.d_h_rope);
    Val scores = eng.scale(eng.add(content, eng.matmul(qr_h, rope_k_t)), inv_scale);
    Val probs = eng.row_softmax(scores, &mask);
    Val ctx_latent = eng.matmul(probs, chat);  // T x r
    Val wv_h = eng.slice_cols(p.w_v, h * cfg.d_h, (h + 1) * cfg.d_h);
    ctx.push_back(eng.matmul(ctx_latent, wv_h));
  }
  return eng.matmul(eng.concat_cols(ctx), p.w_o);
}

template <typename T, class E>
typename E::Val latent_sequence(E& eng, const MlaParamsT<typename E::Val>& p,
                                const typename E::Val& x) {
  return eng.layer_norm(eng.matmul(x, p.w_r), p.ln_gain, p.ln_bias,
                        static_cast<T>(kLayerNormEps));
}

}  // namespace detail

/// MLA forward: latents cached uncompressed, standard causal mask.
template <typename T, class E>
typename E::Val mla_attention(E& eng, const MlaParamsT<typename E::Val>& p,
                              const typename E::Val& x, index_t seq_len,
                              const AttentionConfig& cfg, const Matrix<T>& mask) {
  using Val = typename E::Val;
  Val c = detail::latent_sequence<T>(eng, p, x);
  Val rope_k = eng.rope(eng.matmul(c, p.w_kr), iota_positions(seq_len), kRopeBase, 1);
  return detail::latent_scores_values<T>(eng, p, x, c, rope_k, seq_len, cfg, mask);
}

/// MTLA forward: the hyper-network generates merge weights from the
/// latents, chunk masking turns them into the replicated compressed
/// sequence, and the stride-aware causal mask restricts each query row
/// to the cache rows decoding would hold at that step.
template <typename T, class E>
typename E::Val mtla_attention(E& eng, const MtlaParamsT<typename E::Val>& p,
                               const typename E::Val& x, index_t seq_len,
                               const AttentionConfig& cfg, const Matrix<T>& mask) {
  using Val = typename E::Val;
  Val c = detail::latent_sequence<T>(eng, p, x);
  Val pe = eng.constant(pe_matrix<T>(seq_len, cfg.s, cfg.r));
  Val weights =
      eng.sigmoid(eng.matmul(eng.matmul(pe, p.h_p), eng.transpose(eng.matmul(c, p.h_c))));
  Val chunk01 = eng.constant(allow01(chunk_causal_mask<T>(seq_len, cfg.s)));
  Val chat = eng.matmul(eng.hadamard(weights, chunk01), c);
  Val rope_k = eng.rope(eng.matmul(c, p.w_kr), iota_positions(seq_len), kRopeBase, 1);
  return detail::latent_scores_values<T>(eng, p, x, chat, rope_k, seq_len, cfg, mask);
}

// ---------------------------------------------------------------------------
// Parameter construction
// ---------------------------------------------------------------------------

template <typename T>
DenseAttnParams<T> make_dense_params(const AttentionConfig& cfg, index_t kv_heads,
                                     Rng& rng) {
  DenseAttnParams<T> p;
  p.w_q = init_uniform<T>(cfg.d, cfg.n_h * cfg.d_h, cfg.d, rng);
  p.w_k = init_uniform<T>(cfg.d, kv_heads * cfg.d_h, cfg.d, rng);
  p.w_v = init_uniform<T>(cfg.d, kv_heads * cfg.d_h, cfg.d, rng);
  p.w_o = init_uniform<T>(cfg.n_h * cfg.d_h, cfg.d, cfg.n_h * cfg.d_h, rng);
  return p;
}

template <typename T>
void fill_mla_params(MlaParamsT<Matrix<T>>& p, const AttentionConfig& cfg, Rng& rng) {
  p.w_q = init_uniform<T>(cfg.d, cfg.n_h * cfg.d_h, cfg.d, rng);
  p.w_r = init_uniform<T>(cfg.d, cfg.r, cfg.d, rng);
  p.ln_gain = Matrix<T>(1, cfg.r);
  p.ln_bias = Matrix<T>(1, cfg.r);
  for (index_t j = 0; j < cfg.r; ++j) p.ln_gain(0, j) = T{1};
  p.w_k = init_uniform<T>(cfg.r, cfg.n_h * cfg.d_h, cfg.r, rng);
  p.w_v = init_uniform<T>(cfg.r, cfg.n_h * cfg.d_h, cfg.r, rng);
  p.w_o = init_uniform<T>(cfg.n_h * cfg.d_h, cfg.d, cfg.n_h * cfg.d_h, rng);
  p.w_qr = init_uniform<T>(cfg.d, cfg.n_h * cfg.d_h_rope, cfg.d, rng);
  p.w_kr = init_uniform<T>(cfg.r, cfg.d_h_rope, cfg.r, rng);
}

template <typename T>
MlaParams<T> make_mla_params(const AttentionConfig& cfg, Rng& rng) {
  MlaParams<T> p;
  fill_mla_params(p, cfg, rng);
  return p;
}

template <typename T>
MtlaParams<T> make_mtla_params(const AttentionConfig& cfg, Rng& rng) {
  MtlaParams<T> p;
  fill_mla_params(p, cfg, rng);
  p.h_c = init_uniform<T>(cfg.r, cfg.d_hyper, cfg.r, rng);
  p.h_p = init_uniform<T>(cfg.r, cfg.d_hyper, cfg.r, rng);
  return p;
}

}  // namespace mtla
