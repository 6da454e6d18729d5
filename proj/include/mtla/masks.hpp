// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <limits>

#include "mtla/matrix.hpp"

namespace mtla {

enum class MaskKind { kCausal, kChunkCausal, kStrideAware };

/// Additive pre-softmax mask: entries are exactly 0 or -inf, square,
/// with at least one 0 per row. Indices follow the 1-based convention
/// of the mask rules; storage is 0-based.
template <typename T>
struct AdditiveMask {
  Matrix<T> m;
  MaskKind kind;
};

namespace detail {

template <typename T>
Matrix<T> mask_matrix(index_t t, auto&& allowed_1based) {
  if (t < 1) throw ShapeError("mask: T must be >= 1");
  const T neg_inf = -std::numeric_limits<T>::infinity();
  Matrix<T> out(t, t);
  for (index_t m = 1; m <= t; ++m)
    for (index_t n = 1; n <= t; ++n)
      out(m - 1, n - 1) = allowed_1based(m, n) ? T{} : neg_inf;
  return out;
}

}  // namespace detail

/// Zero iff n <= m.
template <typename T>
AdditiveMask<T> causal_mask(index_t t) {
  return {detail::mask_matrix<T>(t, [](index_t m, index_t n) { return n <= m; }),
          MaskKind::kCausal};
}

/// Zero iff n and m share the chunk of width s and n <= m: causal within
/// each chunk, nothing across chunks. This is the mask applied to the
/// hyper-network weight matrix when building the replicated compressed
/// sequence in parallel.
template <typename T>
AdditiveMask<T> chunk_causal_mask(index_t t, index_t s) {
  if (s < 1) throw ConfigError("chunk_causal_mask: s must be >= 1");
  auto chunk = [s](index_t i) { return (i + s - 1) / s; };
  return {detail::mask_matrix<T>(
              t, [&](index_t m, index_t n) { return chunk(n) == chunk(m) && n <= m; }),
          MaskKind::kChunkCausal};
}

/// Zero iff n == m, or n < m and n mod s == 0. Row m therefore sees its
/// own in-progress slot plus the final position of every completed
/// chunk, matching what the decode cache holds at step m.
template <typename T>
AdditiveMask<T> stride_aware_causal_mask(index_t t, index_t s) {
  if (s < 1) throw ConfigError("stride_aware_causal_mask: s must be >= 1");
  return {detail::mask_matrix<T>(
              t,
              [&](index_t m, index_t n) { return n == m || (n < m && n % s == 0); }),
          MaskKind::kStrideAware};
}

/// 0/1 matrix with 1 where the mask allows. Used to zero the disallowed
/// entries of the hyper-network weight matrix by elementwise product.
template <typename T>
Matrix<T> allow01(const AdditiveMask<T>& mask) {
  Matrix<T> out(mask.m.rows(), mask.m.cols());
  for (index_t i = 0; i < mask.m.size(); ++i)
    out.data()[i] = mask.m.data()[i] == T{} ? T{1} : T{};
  return out;
}

}  // namespace mtla
