// SPDX-License-Identifier: Apache-2.0
#pragma once

// Evaluation engines. Attention layers and the toy decoder are written
// once against this interface; EagerEngine runs them directly on
// matrices, TapedEngine records the identical sequence of primitives on
// a Tape for reverse-mode differentiation. The two paths call the same
// kernels in the same order, so recorded forwards match eager forwards
// bit for bit.

#include <vector>

#include "mtla/ops.hpp"
#include "mtla/tape.hpp"

namespace mtla {

template <typename T>
struct EagerEngine {
  using Val = Matrix<T>;

  Val constant(Matrix<T> m) { return m; }
  Val param(const Matrix<T>& m) { return m; }
  Val matmul(const Val& a, const Val& b) { return mtla::matmul(a, b); }
  Val add(const Val& a, const Val& b) { return mtla::add(a, b); }
  Val hadamard(const Val& a, const Val& b) { return mtla::hadamard(a, b); }
  Val scale(const Val& a, T c) { return mtla::scale(a, c); }
  Val transpose(const Val& a) { return mtla::transpose(a); }
  Val slice_cols(const Val& a, index_t c0, index_t c1) {
    return mtla::slice_cols(a, c0, c1);
  }
  Val concat_cols(const std::vector<Val>& parts) { return mtla::concat_cols(parts); }
  Val row_softmax(const Val& a, const Matrix<T>* mask) {
    return mtla::row_softmax(a, mask);
  }
  Val layer_norm(const Val& x, const Val& gain, const Val& bias, T eps) {
    return mtla::layer_norm(x, std::span<const T>(gain.data(), gain.size()),
                            std::span<const T>(bias.data(), bias.size()), eps);
  }
  Val sigmoid(const Val& a) { return mtla::sigmoid(a); }
  Val gelu(const Val& a) { return mtla::gelu(a); }
  Val rope(const Val& a, std::vector<index_t> positions, double base, index_t heads) {
    return mtla::rope_rotate(a, std::span<const index_t>(positions), base, heads);
  }
  Val gather_rows(const Val& table, const std::vector<index_t>& ids) {
    Matrix<T> out(static_cast<index_t>(ids.size()), table.cols());
    for (index_t i = 0; i < out.rows(); ++i) {
      const index_t id = ids[static_cast<std::size_t>(i)];
      if (id < 0 || id >= table.rows()) throw ShapeError("gather_rows: id out of range");
      for (index_t j = 0; j < table.cols(); ++j) out(i, j) = table(id, j);
    }
    return out;
  }
  Val add_row(const Val& x, const Val& row) {
    if (row.rows() != 1 || row.cols() != x.cols())
      throw ShapeError("add_row: bias must be 1 x cols");
    Matrix<T> out(x.rows(), x.cols());
    for (index_t i = 0; i < x.rows(); ++i)
      for (index_t j = 0; j < x.cols(); ++j) out(i, j) = x(i, j) + row(0, j);
    return out;
  }
  Val cross_entropy(const Val& logits, const std::vector<index_t>& targets,
                    const std::vector<char>& active) {
    Matrix<T> probs = mtla::row_softmax(logits);
    index_t m = 0;
    T loss{};
    for (index_t i = 0; i < logits.rows(); ++i) {
      if (!active[static_cast<std::size_t>(i)]) continue;
      ++m;
      loss -= std::log(probs(i, targets[static_cast<std::size_t>(i)]));
    }
    if (m == 0) throw NumericError("cross_entropy: no active positions");
    Matrix<T> out(1, 1);
    out(0, 0) = loss / static_cast<T>(m);
    return out;
  }
};

template <typename T>
struct TapedEngine {
  using Val = ad::Var;

  explicit TapedEngine(ad::Tape<T>& t) : tape(t) {}
  ad::Tape<T>& tape;
  std::vector<ad::Var>* param_sink = nullptr;

  Val constant(Matrix<T> m) { return tape.constant(std::move(m)); }

  /// Trainable leaf; recorded in param_sink (in call order) so callers
  /// can pair gradients with the model's parameter list.
  Val param(const Matrix<T>& m) {
    Val v = tape.leaf(m);
    if (param_sink) param_sink->push_back(v);
    return v;
  }
  Val matmul(Val a, Val b) { return tape.matmul(a, b); }
  Val add(Val a, Val b) { return tape.add(a, b); }
  Val hadamard(Val a, Val b) { return tape.hadamard(a, b); }
  Val scale(Val a, T c) { return tape.scale(a, c); }
  Val transpose(Val a) { return tape.transpose(a); }
  Val slice_cols(Val a, index_t c0, index_t c1) { return tape.slice_cols(a, c0, c1); }
  Val concat_cols(const std::vector<Val>& parts) { return tape.concat_cols(parts); }
  Val row_softmax(Val a, const Matrix<T>* mask) { return tape.row_softmax(a, mask); }
  Val layer_norm(Val x, Val gain, Val bias, T eps) {
    return tape.layer_norm(x, gain, bias, eps);
  }
  Val sigmoid(Val a) { return tape.sigmoid(a); }
  Val gelu(Val a) { return tape.gelu(a); }
  Val rope(Val a, std::vector<index_t> positions, double base, index_t heads) {
    return tape.rope(a, std::move(positions), base, heads);
  }
  Val gather_rows(Val table, const std::vector<index_t>& ids) {
    return tape.gather_rows(table, ids);
  }
  Val add_row(Val x, Val row) { return tape.add_row(x, row); }
  Val cross_entropy(Val logits, const std::vector<index_t>& targets,
                    const std::vector<char>& active) {
    return tape.cross_entropy(logits, targets, active);
  }
};

}  // namespace mtla
