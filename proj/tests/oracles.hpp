// SPDX-License-Identifier: Apache-2.0
#pragma once

// Brute-force reference implementations used only by tests. These stay
// deliberately naive and independent of the library's kernels.

#include <cmath>
#include <span>
#include <vector>

#include "mtla/matrix.hpp"

namespace oracles {

template <typename T>
mtla::Matrix<T> matmul_naive(const mtla::Matrix<T>& a, const mtla::Matrix<T>& b) {
  mtla::Matrix<T> out(a.rows(), b.cols());
  for (mtla::index_t i = 0; i < a.rows(); ++i)
    for (mtla::index_t j = 0; j < b.cols(); ++j) {
      T acc{};
      for (mtla::index_t k = 0; k < a.cols(); ++k) acc += a(i, k) * b(k, j);
      out(i, j) = acc;
    }
  return out;
}

/// Direct exp/normalize in double precision regardless of input type.
template <typename T>
std::vector<double> softmax_row_double(const mtla::Matrix<T>& m, mtla::index_t i) {
  std::vector<double> out(static_cast<std::size_t>(m.cols()));
  double mx = -std::numeric_limits<double>::infinity();
  for (mtla::index_t j = 0; j < m.cols(); ++j)
    mx = std::max(mx, static_cast<double>(m(i, j)));
  double sum = 0;
  for (mtla::index_t j = 0; j < m.cols(); ++j) {
    out[static_cast<std::size_t>(j)] = std::exp(static_cast<double>(m(i, j)) - mx);
    sum += out[static_cast<std::size_t>(j)];
  }
  for (auto& v : out) v /= sum;
  return out;
}

template <typename T>
mtla::Matrix<T> layer_norm_naive(const mtla::Matrix<T>& x, const std::vector<T>& gain,
                                 const std::vector<T>& bias, double eps) {
  mtla::Matrix<T> out(x.rows(), x.cols());
  for (mtla::index_t i = 0; i < x.rows(); ++i) {
    double mean = 0;
    for (mtla::index_t j = 0; j < x.cols(); ++j) mean += x(i, j);
    mean /= x.cols();
    double var = 0;
    for (mtla::index_t j = 0; j < x.cols(); ++j)
      var += (x(i, j) - mean) * (x(i, j) - mean);
    var /= x.cols();
    for (mtla::index_t j = 0; j < x.cols(); ++j)
      out(i, j) = static_cast<T>((x(i, j) - mean) / std::sqrt(var + eps) *
                                     static_cast<double>(gain[static_cast<std::size_t>(j)]) +
                                 static_cast<double>(bias[static_cast<std::size_t>(j)]));
  }
  return out;
}

}  // namespace oracles
