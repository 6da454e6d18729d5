// SPDX-License-Identifier: Apache-2.0
#pragma once

// Temporal-latent attention building blocks in eager form: the latent
// projection, the hyper-network merge weights (scalar and matrix
// routes), the chunk-masked compression that builds the replicated
// compressed sequence, decoupled-RoPE projections, and weight
// absorption.

#include <vector>

#include "mtla/attention.hpp"

namespace mtla {

/// C = layer_norm(X * W_r): the low-rank latent sequence, T x r.
template <typename T>
Matrix<T> latent(const Matrix<T>& x, const MlaParamsT<Matrix<T>>& p) {
  EagerEngine<T> eng;
  return detail::latent_sequence<T>(eng, p, x);
}

/// Merge weight for latent c_i at chunk index j:
/// sigmoid(<H_p^T pe_j, H_c^T c_i>). The elementwise product of the two
/// hyper-network outputs is summed to a scalar, consistent with the
/// matrix route below.
template <typename T>
T hyper_weight(std::span<const T> c_i, index_t j, const MtlaParams<T>& p) {
  const index_t r = p.h_c.rows();
  const index_t d_hyp = p.h_c.cols();
  if (static_cast<index_t>(c_i.size()) != r) throw ShapeError("hyper_weight: |c_i| != r");
  const auto pe = sinusoidal_pe<T>(j, r);
  std::vector<T> hc(static_cast<std::size_t>(d_hyp));
  std::vector<T> hp(static_cast<std::size_t>(d_hyp));
  kernels::matvec_t(p.h_c.data(), c_i.data(), hc.data(), r, d_hyp);
  kernels::matvec_t(p.h_p.data(), pe.data(), hp.data(), r, d_hyp);
  return sigmoid_scalar(kernels::vdot(hp.data(), hc.data(), d_hyp));
}

/// All merge weights at once: W = sigmoid((PE * H_p) (C * H_c)^T),
/// T x T, where PE row m is the embedding of chunk ceil(m/s).
template <typename T>
Matrix<T> hyper_weight_matrix(const Matrix<T>& c, index_t s, const MtlaParams<T>& p) {
  if (c.rows() < 1) throw ShapeError("hyper_weight_matrix: empty sequence");
  const Matrix<T> pe = pe_matrix<T>(c.rows(), s, c.cols());
  return sigmoid(matmul(matmul(pe, p.h_p), transpose(matmul(c, p.h_c))));
}

/// Replicated compressed sequence: row m accumulates the weighted
/// latents of m's chunk up to and including position m, which is
/// exactly the cache slot decoding holds after step m.
template <typename T>
Matrix<T> compress_train(const Matrix<T>& c, const Matrix<T>& weights, index_t s) {
  if (weights.rows() != c.rows() || weights.cols() != c.rows())
    throw ShapeError("compress_train: weight matrix must be T x T");
  return matmul(hadamard(weights, allow01(chunk_causal_mask<T>(c.rows(), s))), c);
}

/// RoPE queries: per-head rotation of X * W_QR at positions 1..T.
template <typename T>
Matrix<T> rope_queries(const Matrix<T>& x, const MlaParamsT<Matrix<T>>& p, index_t n_h) {
  const auto pos = iota_positions(x.rows());
  return rope_rotate(matmul(x, p.w_qr), std::span<const index_t>(pos), kRopeBase, n_h);
}

/// RoPE keys: single-head rotation of C * W_KR at positions 1..T; the
/// head dimension is broadcast across query heads at score time.
template <typename T>
Matrix<T> rope_keys(const Matrix<T>& c, const MlaParamsT<Matrix<T>>& p) {
  const auto pos = iota_positions(c.rows());
  return rope_rotate(matmul(c, p.w_kr), std::span<const index_t>(pos), kRopeBase, 1);
}

/// Folded projection matrices. qk[h] = W_Q^h (W_K^h)^T and
/// vo[h] = W_V^h W_O^h realize the absorption identity; wk_t/wv keeps
/// the per-head W_K slice transposed contiguous for the decode path.
template <typename T>
struct AbsorbedWeights {
  std::vector<Matrix<T>> qk;    // n_h entries, d x r
  std::vector<Matrix<T>> vo;    // n_h entries, r x d
  std::vector<Matrix<T>> wk_t;  // n_h entries, d_h x r
};

template <typename T>
AbsorbedWeights<T> absorb(const MlaParamsT<Matrix<T>>& p, const AttentionConfig& cfg) {
  AbsorbedWeights<T> a;
  a.qk.reserve(static_cast<std::size_t>(cfg.n_h));
  a.vo.reserve(static_cast<std::size_t>(cfg.n_h));
  a.wk_t.reserve(static_cast<std::size_t>(cfg.n_h));
  for (index_t h = 0; h < cfg.n_h; ++h) {
    Matrix<T> wq_h = slice_cols(p.w_q, h * cfg.d_h, (h + 1) * cfg.d_h);
    Matrix<T> wk_h = slice_cols(p.w_k, h * cfg.d_h, (h + 1) * cfg.d_h);
    Matrix<T> wv_h = slice_cols(p.w_v, h * cfg.d_h, (h + 1) * cfg.d_h);
    Matrix<T> wo_h(cfg.d_h, p.w_o.cols());
    for (index_t i = 0; i < cfg.d_h; ++i)
      for (index_t j = 0; j < p.w_o.cols(); ++j) wo_h(i, j) = p.w_o(h * cfg.d_h + i, j);
    Matrix<T> wk_h_t = transpose(wk_h);
    a.qk.push_back(matmul(wq_h, wk_h_t));
    a.vo.push_back(matmul(wv_h, wo_h));
    a.wk_t.push_back(std::move(wk_h_t));
  }
  return a;
}

/// Parallel training-mode MTLA forward over the stride-aware mask.
template <typename T>
Matrix<T> train_forward(const Matrix<T>& x, const MtlaParams<T>& p,
                        const AttentionConfig& cfg) {
  if (x.rows() < 1) throw ShapeError("train_forward: empty sequence");
  EagerEngine<T> eng;
  const auto mask = stride_aware_causal_mask<T>(x.rows(), cfg.s);
  return mtla_attention<T>(eng, p, x, x.rows(), cfg, mask.m);
}

}  // namespace mtla
