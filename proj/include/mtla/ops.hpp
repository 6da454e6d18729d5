// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "mtla/kernels.hpp"
#include "mtla/matrix.hpp"

namespace mtla {

template <typename T>
Matrix<T> matmul(const Matrix<T>& a, const Matrix<T>& b) {
  if (a.cols() != b.rows())
    throw ShapeError("matmul: shape mismatch (" + std::to_string(a.rows()) + "x" +
                     std::to_string(a.cols()) + ") * (" + std::to_string(b.rows()) +
                     "x" + std::to_string(b.cols()) + ")");
  Matrix<T> out(a.rows(), b.cols());
  kernels::matmul_into(out.data(), a.data(), b.data(), a.rows(), a.cols(), b.cols());
  return out;
}

template <typename T>
Matrix<T> transpose(const Matrix<T>& a) {
  Matrix<T> out(a.cols(), a.rows());
  for (index_t i = 0; i < a.rows(); ++i)
    for (index_t j = 0; j < a.cols(); ++j) out(j, i) = a(i, j);
  return out;
}

template <typename T>
Matrix<T> add(const Matrix<T>& a, const Matrix<T>& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw ShapeError("add: shape mismatch");
  Matrix<T> out(a.rows(), a.cols());
  for (index_t i = 0; i < a.size(); ++i) out.data()[i] = a.data()[i] + b.data()[i];
  return out;
}

template <typename T>
Matrix<T> hadamard(const Matrix<T>& a, const Matrix<T>& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw ShapeError("hadamard: shape mismatch");
  Matrix<T> out(a.rows(), a.cols());
  for (index_t i = 0; i < a.size(); ++i) out.data()[i] = a.data()[i] * b.data()[i];
  return out;
}

template <typename T>
Matrix<T> scale(const Matrix<T>& a, T factor) {
  Matrix<T> out(a.rows(), a.cols());
  for (index_t i = 0; i < a.size(); ++i) out.data()[i] = a.data()[i] * factor;
  return out;
}

/// Columns [c0, c1) of a.
template <typename T>
Matrix<T> slice_cols(const Matrix<T>& a, index_t c0, index_t c1) {
  if (c0 < 0 || c1 > a.cols() || c0 > c1) throw ShapeError("slice_cols: bad range");
  Matrix<T> out(a.rows(), c1 - c0);
  for (index_t i = 0; i < a.rows(); ++i)
    for (index_t j = c0; j < c1; ++j) out(i, j - c0) = a(i, j);
  return out;
}

template <typename T>
Matrix<T> concat_cols(const std::vector<Matrix<T>>& parts) {
  if (parts.empty()) throw ShapeError("concat_cols: no parts");
  index_t rows = parts.front().rows();
  index_t cols = 0;
  for (const auto& p : parts) {
    if (p.rows() != rows) throw ShapeError("concat_cols: row mismatch");
    cols += p.cols();
  }
  Matrix<T> out(rows, cols);
  index_t off = 0;
  for (const auto& p : parts) {
    for (index_t i = 0; i < rows; ++i)
      for (index_t j = 0; j < p.cols(); ++j) out(i, off + j) = p(i, j);
    off += p.cols();
  }
  return out;
}

/// Row-wise softmax with optional additive mask (entries in {0, -inf}).
/// Masked positions come out exactly 0. A fully masked row is an error,
/// never a NaN.
template <typename T>
Matrix<T> row_softmax(const Matrix<T>& scores, const Matrix<T>* mask = nullptr) {
  if (mask && (mask->rows() != scores.rows() || mask->cols() != scores.cols()))
    throw ShapeError("row_softmax: mask shape mismatch");
  Matrix<T> out(scores.rows(), scores.cols());
  const T neg_inf = -std::numeric_limits<T>::infinity();
  for (index_t i = 0; i < scores.rows(); ++i) {
    T mx = neg_inf;
    for (index_t j = 0; j < scores.cols(); ++j) {
      T v = scores(i, j) + (mask ? (*mask)(i, j) : T{});
      if (v > mx) mx = v;
    }
    if (!(mx > neg_inf))
      throw NumericError("row_softmax: degenerate row " + std::to_string(i) +
                         " (all positions masked)");
    T sum{};
    for (index_t j = 0; j < scores.cols(); ++j) {
      T v = scores(i, j) + (mask ? (*mask)(i, j) : T{});
      T e = v == neg_inf ? T{} : std::exp(v - mx);
      out(i, j) = e;
      sum += e;
    }
    const T inv = T{1} / sum;
    for (index_t j = 0; j < scores.cols(); ++j) out(i, j) *= inv;
  }
  return out;
}

/// Per-row normalization with biased variance, then gain/bias.
template <typename T>
Matrix<T> layer_norm(const Matrix<T>& x, std::span<const T> gain,
                     std::span<const T> bias, T epsilon = T(1e-5)) {
  if (x.cols() == 0) throw ShapeError("layer_norm: zero columns");
  if (static_cast<index_t>(gain.size()) != x.cols() ||
      static_cast<index_t>(bias.size()) != x.cols())
    throw ShapeError("layer_norm: gain/bias length != cols");
  Matrix<T> out(x.rows(), x.cols());
  const index_t c = x.cols();
  for (index_t i = 0; i < x.rows(); ++i) {
    T mean{};
    for (index_t j = 0; j < c; ++j) mean += x(i, j);
    mean /= static_cast<T>(c);
    T var{};
    for (index_t j = 0; j < c; ++j) {
      const T d = x(i, j) - mean;
      var += d * d;
    }
    var /= static_cast<T>(c);
    const T inv = T{1} / std::sqrt(var + epsilon);
    for (index_t j = 0; j < c; ++j)
      out(i, j) = (x(i, j) - mean) * inv * gain[j] + bias[j];
  }
  return out;
}

/// Logistic function, strictly inside (0,1): results that would round
/// to 1 are clamped to the largest representable value below it.
template <typename T>
T sigmoid_scalar(T x) {
  T y;
  if (x >= T{}) {
    y = T{1} / (T{1} + std::exp(-x));
  } else {
    const T e = std::exp(x);
    y = e / (T{1} + e);
  }
  const T below_one = T{1} - std::numeric_limits<T>::epsilon() / T{2};
  return y < below_one ? y : below_one;
}

/// tanh-approximation GELU.
template <typename T>
T gelu_scalar(T x) {
  const T k = static_cast<T>(0.7978845608028654);  // sqrt(2/pi)
  const T u = k * (x + static_cast<T>(0.044715) * x * x * x);
  return static_cast<T>(0.5) * x * (T{1} + std::tanh(u));
}

template <typename T>
T gelu_grad_scalar(T x) {
  const T k = static_cast<T>(0.7978845608028654);
  const T u = k * (x + static_cast<T>(0.044715) * x * x * x);
  const T t = std::tanh(u);
  const T du = k * (T{1} + static_cast<T>(3.0 * 0.044715) * x * x);
  return static_cast<T>(0.5) * (T{1} + t) + static_cast<T>(0.5) * x * (T{1} - t * t) * du;
}

template <typename T>
Matrix<T> gelu(const Matrix<T>& x) {
  Matrix<T> out(x.rows(), x.cols());
  for (index_t i = 0; i < x.size(); ++i) out.data()[i] = gelu_scalar(x.data()[i]);
  return out;
}

template <typename T>
Matrix<T> sigmoid(const Matrix<T>& x) {
  Matrix<T> out(x.rows(), x.cols());
  for (index_t i = 0; i < x.size(); ++i) out.data()[i] = sigmoid_scalar(x.data()[i]);
  return out;
}

/// Interleaved sin/cos embedding, base 10000. Positions are 1-based;
/// position 1 maps to phase 0.
template <typename T>
void sinusoidal_pe_into(std::span<T> out, index_t position) {
  const index_t dim = static_cast<index_t>(out.size());
  if (dim % 2 != 0) throw ShapeError("sinusoidal_pe: dim must be even");
  if (position < 1) throw ShapeError("sinusoidal_pe: positions are 1-based");
  const double phase = static_cast<double>(position - 1);
  for (index_t k = 0; k < dim / 2; ++k) {
    const double freq =
        std::pow(10000.0, -2.0 * static_cast<double>(k) / static_cast<double>(dim));
    out[2 * k] = static_cast<T>(std::sin(phase * freq));
    out[2 * k + 1] = static_cast<T>(std::cos(phase * freq));
  }
}

template <typename T>
std::vector<T> sinusoidal_pe(index_t position, index_t dim) {
  std::vector<T> pe(static_cast<std::size_t>(dim));
  sinusoidal_pe_into(std::span<T>(pe), position);
  return pe;
}

namespace detail {

/// Rotates adjacent pairs of one contiguous block of width `w` by the
/// angles of `position` (1-based). Forward when dir=+1, inverse when -1.
template <typename T>
void rope_block(const T* in, T* out, index_t w, index_t position, double base, int dir) {
  const double pos = static_cast<double>(position - 1);
  for (index_t k = 0; k < w / 2; ++k) {
    const double theta =
        pos * std::pow(base, -2.0 * static_cast<double>(k) / static_cast<double>(w));
    const T c = static_cast<T>(std::cos(theta));
    const T s = static_cast<T>(std::sin(theta)) * static_cast<T>(dir);
    const T x0 = in[2 * k];
    const T x1 = in[2 * k + 1];
    out[2 * k] = c * x0 - s * x1;
    out[2 * k + 1] = s * x0 + c * x1;
  }
}

}  // namespace detail

/// Per-row rotary embedding over adjacent dimension pairs. With
/// n_heads > 1 each of the equal column blocks is rotated independently
/// (angles use the block width).
template <typename T>
Matrix<T> rope_rotate(const Matrix<T>& x, std::span<const index_t> positions,
                      double base = 10000.0, index_t n_heads = 1) {
  if (static_cast<index_t>(positions.size()) != x.rows())
    throw ShapeError("rope_rotate: positions length != rows");
  if (n_heads < 1 || x.cols() % n_heads != 0)
    throw ShapeError("rope_rotate: cols not divisible by n_heads");
  const index_t w = x.cols() / n_heads;
  if (w % 2 != 0) throw ShapeError("rope_rotate: per-head width must be even");
  Matrix<T> out(x.rows(), x.cols());
  for (index_t i = 0; i < x.rows(); ++i)
    for (index_t h = 0; h < n_heads; ++h)
      detail::rope_block(x.data() + i * x.cols() + h * w,
                         out.data() + i * x.cols() + h * w, w, positions[i], base, +1);
  return out;
}

/// Inverse rotation; used by the reverse-mode rule for rope_rotate.
template <typename T>
Matrix<T> rope_rotate_inverse(const Matrix<T>& x, std::span<const index_t> positions,
                              double base = 10000.0, index_t n_heads = 1) {
  if (static_cast<index_t>(positions.size()) != x.rows())
    throw ShapeError("rope_rotate_inverse: positions length != rows");
  const index_t w = x.cols() / n_heads;
  Matrix<T> out(x.rows(), x.cols());
  for (index_t i = 0; i < x.rows(); ++i)
    for (index_t h = 0; h < n_heads; ++h)
      detail::rope_block(x.data() + i * x.cols() + h * w,
                         out.data() + i * x.cols() + h * w, w, positions[i], base, -1);
  return out;
}

/// Convenience: positions 1..T.
inline std::vector<index_t> iota_positions(index_t t) {
  std::vector<index_t> p(static_cast<std::size_t>(t));
  for (index_t i = 0; i < t; ++i) p[static_cast<std::size_t>(i)] = i + 1;
  return p;
}

template <typename T>
Matrix<T> random_matrix(index_t rows, index_t cols, Rng& rng, double lo = -1.0,
                        double hi = 1.0) {
  Matrix<T> m(rows, cols);
  for (index_t i = 0; i < m.size(); ++i)
    m.data()[i] = static_cast<T>(rng.uniform(lo, hi));
  return m;
}

template <typename T>
T max_abs_diff(const Matrix<T>& a, const Matrix<T>& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw ShapeError("max_abs_diff: shape mismatch");
  T m{};
  for (index_t i = 0; i < a.size(); ++i) {
    const T d = std::abs(a.data()[i] - b.data()[i]);
    if (d > m) m = d;
  }
  return m;
}

}  // namespace mtla
