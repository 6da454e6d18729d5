// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <atomic>
#include <cmath>
#include <cstdint>
#include <random>
#include <span>
#include <type_traits>
#include <vector>

#include "mtla/common.hpp"

namespace mtla {

/// Counts Matrix buffer allocations. Debug builds of the benchmark use
/// this to assert that a decode step allocates nothing beyond cache
/// growth and pre-sized scratch.
struct AllocCounter {
  static std::atomic<std::uint64_t>& count() {
    static std::atomic<std::uint64_t> c{0};
    return c;
  }
};

/// Dense row-major 2-D array, the universal tensor of the core.
/// Element type is float or double; one computation never mixes them.
template <typename T>
class Matrix {
  static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>,
                "Matrix supports IEEE-754 single and double precision only");

 public:
  Matrix() : rows_(0), cols_(0) {}

  Matrix(index_t rows, index_t cols) : rows_(rows), cols_(cols) {
    if (rows < 0 || cols < 0) throw ShapeError("Matrix: negative dimension");
    data_.resize(static_cast<std::size_t>(rows) * static_cast<std::size_t>(cols));
    AllocCounter::count().fetch_add(1, std::memory_order_relaxed);
  }

  Matrix(index_t rows, index_t cols, std::vector<T> data)
      : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (data_.size() != static_cast<std::size_t>(rows) * static_cast<std::size_t>(cols))
      throw ShapeError("Matrix: data length does not match rows*cols");
    AllocCounter::count().fetch_add(1, std::memory_order_relaxed);
  }

  static Matrix zeros(index_t rows, index_t cols) { return Matrix(rows, cols); }

  static Matrix identity(index_t n) {
    Matrix m(n, n);
    for (index_t i = 0; i < n; ++i) m(i, i) = T{1};
    return m;
  }

  static Matrix from_rows(std::initializer_list<std::initializer_list<T>> rows) {
    index_t r = static_cast<index_t>(rows.size());
    index_t c = r > 0 ? static_cast<index_t>(rows.begin()->size()) : 0;
    Matrix m(r, c);
    index_t i = 0;
    for (const auto& row : rows) {
      if (static_cast<index_t>(row.size()) != c)
        throw ShapeError("Matrix::from_rows: ragged rows");
      index_t j = 0;
      for (T v : row) m(i, j++) = v;
      ++i;
    }
    return m;
  }

  index_t rows() const { return rows_; }
  index_t cols() const { return cols_; }
  index_t size() const { return rows_ * cols_; }
  bool empty() const { return size() == 0; }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }

  T& operator()(index_t i, index_t j) { return data_[idx(i, j)]; }
  const T& operator()(index_t i, index_t j) const { return data_[idx(i, j)]; }

  std::span<T> row(index_t i) {
    return std::span<T>(data_.data() + idx(i, 0), static_cast<std::size_t>(cols_));
  }
  std::span<const T> row(index_t i) const {
    return std::span<const T>(data_.data() + idx(i, 0), static_cast<std::size_t>(cols_));
  }

  static constexpr Precision precision() {
    return std::is_same_v<T, float> ? Precision::kSingle : Precision::kDouble;
  }

  bool all_finite() const {
    for (T v : data_)
      if (!std::isfinite(v)) return false;
    return true;
  }

  bool operator==(const Matrix& other) const {
    return rows_ == other.rows_ && cols_ == other.cols_ && data_ == other.data_;
  }

 private:
  std::size_t idx(index_t i, index_t j) const {
    return static_cast<std::size_t>(i) * static_cast<std::size_t>(cols_) +
           static_cast<std::size_t>(j);
  }

  index_t rows_, cols_;
  std::vector<T> data_;
};

using MatrixF = Matrix<float>;
using MatrixD = Matrix<double>;

/// Deterministic stream of uniform values. Wraps std::mt19937_64 with an
/// explicit bit-to-real mapping so sequences are identical across
/// standard library implementations.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : gen_(seed) {}

  std::uint64_t next_u64() { return gen_(); }

  /// Uniform in [0, 1).
  double next_real() { return static_cast<double>(gen_() >> 11) * 0x1.0p-53; }

  /// Uniform in [lo, hi).
  double uniform(double lo, double hi) { return lo + (hi - lo) * next_real(); }

  /// Uniform integer in [0, n).
  std::uint64_t next_below(std::uint64_t n) {
    // Rejection-free modulo is fine here; n is tiny relative to 2^64.
    return gen_() % n;
  }

 private:
  std::mt19937_64 gen_;
};

/// Uniform init in [-1/sqrt(fan_in), +1/sqrt(fan_in)], the scheme used for
/// every weight matrix in this project.
template <typename T>
Matrix<T> init_uniform(index_t rows, index_t cols, index_t fan_in, Rng& rng) {
  Matrix<T> m(rows, cols);
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  for (index_t i = 0; i < m.size(); ++i)
    m.data()[i] = static_cast<T>(rng.uniform(-bound, bound));
  return m;
}

}  // namespace mtla
