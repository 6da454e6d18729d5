// SPDX-License-Identifier: Apache-2.0
#pragma once

// Training-mode forwards of the baseline variants over the shared
// dense composition: MHA uses one KV head per query head, GQA one per
// group, MQA a single shared head.

#include "mtla/attention.hpp"
#include "mtla/mtla.hpp"

namespace mtla {

template <typename T>
Matrix<T> mha_forward_train(const Matrix<T>& x, const DenseAttnParams<T>& p,
                            const AdditiveMask<T>& mask, const AttentionConfig& cfg) {
  EagerEngine<T> eng;
  return dense_attention<T>(eng, p, x, x.rows(), cfg, cfg.n_h, mask.m);
}

template <typename T>
Matrix<T> gqa_forward_train(const Matrix<T>& x, const DenseAttnParams<T>& p,
                            const AdditiveMask<T>& mask, const AttentionConfig& cfg) {
  EagerEngine<T> eng;
  return dense_attention<T>(eng, p, x, x.rows(), cfg, cfg.g, mask.m);
}

template <typename T>
Matrix<T> mqa_forward_train(const Matrix<T>& x, const DenseAttnParams<T>& p,
                            const AdditiveMask<T>& mask, const AttentionConfig& cfg) {
  EagerEngine<T> eng;
  return dense_attention<T>(eng, p, x, x.rows(), cfg, 1, mask.m);
}

template <typename T>
Matrix<T> mla_forward_train(const Matrix<T>& x, const MlaParams<T>& p,
                            const AdditiveMask<T>& mask, const AttentionConfig& cfg) {
  EagerEngine<T> eng;
  return mla_attention<T>(eng, p, x, x.rows(), cfg, mask.m);
}

}  // namespace mtla
