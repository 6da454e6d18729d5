// SPDX-License-Identifier: Apache-2.0
#pragma once

// Reverse-mode differentiation over the numeric core. A Tape records
// primitive nodes in execution order; backward() walks them once in
// reverse, accumulating gradients additively at fan-out points.
// Gradients never flow into constants, and masked softmax positions
// receive exactly zero gradient (the -inf is resolved in the forward
// pass, so no infinities enter the backward arithmetic).

#include <cmath>
#include <functional>
#include <memory>
#include <utility>
#include <vector>

#include "mtla/ops.hpp"

namespace mtla::ad {

struct Var {
  index_t idx = -1;
  bool valid() const { return idx >= 0; }
};

template <typename T>
class Tape {
 public:
  Var leaf(Matrix<T> v) { return push(std::move(v), true, {}); }
  Var constant(Matrix<T> v) { return push(std::move(v), false, {}); }

  const Matrix<T>& value(Var v) const { return node(v).value; }

  /// Gradient of a node after backward(); zeros if it never received one.
  Matrix<T> grad(Var v) const {
    const Node& n = node(v);
    if (n.grad.empty()) return Matrix<T>::zeros(n.value.rows(), n.value.cols());
    return n.grad;
  }

  index_t size() const { return static_cast<index_t>(nodes_.size()); }

  // --- primitives ------------------------------------------------------

  Var matmul(Var a, Var b) {
    Matrix<T> out = mtla::matmul(value(a), value(b));
    return push(std::move(out), needs_grad(a) || needs_grad(b), [this, a, b](const Matrix<T>& g) {
      if (needs_grad(a)) accumulate(a, mtla::matmul(g, mtla::transpose(value(b))));
      if (needs_grad(b)) accumulate(b, mtla::matmul(mtla::transpose(value(a)), g));
    });
  }

  Var add(Var a, Var b) {
    Matrix<T> out = mtla::add(value(a), value(b));
    return push(std::move(out), needs_grad(a) || needs_grad(b), [this, a, b](const Matrix<T>& g) {
      if (needs_grad(a)) accumulate(a, g);
      if (needs_grad(b)) accumulate(b, g);
    });
  }

  Var hadamard(Var a, Var b) {
    Matrix<T> out = mtla::hadamard(value(a), value(b));
    return push(std::move(out), needs_grad(a) || needs_grad(b), [this, a, b](const Matrix<T>& g) {
      if (needs_grad(a)) accumulate(a, mtla::hadamard(g, value(b)));
      if (needs_grad(b)) accumulate(b, mtla::hadamard(g, value(a)));
    });
  }

  Var scale(Var a, T c) {
    Matrix<T> out = mtla::scale(value(a), c);
    return push(std::move(out), needs_grad(a), [this, a, c](const Matrix<T>& g) {
      if (needs_grad(a)) accumulate(a, mtla::scale(g, c));
    });
  }

  Var transpose(Var a) {
    Matrix<T> out = mtla::transpose(value(a));
    return push(std::move(out), needs_grad(a), [this, a](const Matrix<T>& g) {
      if (needs_grad(a)) accumulate(a, mtla::transpose(g));
    });
  }

  Var slice_cols(Var a, index_t c0, index_t c1) {
    Matrix<T> out = mtla::slice_cols(value(a), c0, c1);
    return push(std::move(out), needs_grad(a), [this, a, c0, c1](const Matrix<T>& g) {
      if (!needs_grad(a)) return;
      Matrix<T> ga = Matrix<T>::zeros(value(a).rows(), value(a).cols());
      for (index_t i = 0; i < g.rows(); ++i)
        for (index_t j = 0; j < g.cols(); ++j) ga(i, c0 + j) = g(i, j);
      accumulate(a, ga);
    });
  }

  Var concat_cols(const std::vector<Var>& parts) {
    std::vector<Matrix<T>> vals;
    vals.reserve(parts.size());
    bool req = false;
    for (Var p : parts) {
      vals.push_back(value(p));
      req = req || needs_grad(p);
    }
    Matrix<T> out = mtla::concat_cols(vals);
    return push(std::move(out), req, [this, parts](const Matrix<T>& g) {
      index_t off = 0;
      for (Var p : parts) {
        const index_t w = value(p).cols();
        if (needs_grad(p)) accumulate(p, mtla::slice_cols(g, off, off + w));
        off += w;
      }
    });
  }

  /// Softmax with optional additive {0,-inf} mask. The mask is data, not
  /// a node; masked positions produce exactly zero output and gradient.
  Var row_softmax(Var a, const Matrix<T>* mask = nullptr) {
    Matrix<T> out = mtla::row_softmax(value(a), mask);
    Var v = push(std::move(out), needs_grad(a), {});
    node(v).backward = [this, a, v](const Matrix<T>& g) {
      if (!needs_grad(a)) return;
      const Matrix<T>& y = value(v);
      Matrix<T> ga(y.rows(), y.cols());
      for (index_t i = 0; i < y.rows(); ++i) {
        T dot{};
        for (index_t j = 0; j < y.cols(); ++j) dot += g(i, j) * y(i, j);
        for (index_t j = 0; j < y.cols(); ++j) ga(i, j) = y(i, j) * (g(i, j) - dot);
      }
      accumulate(a, ga);
    };
    return v;
  }

  Var layer_norm(Var x, Var gain, Var bias, T eps) {
    const Matrix<T>& xv = value(x);
    const index_t c = xv.cols();
    if (value(gain).size() != c || value(bias).size() != c)
      throw ShapeError("tape layer_norm: gain/bias length != cols");
    auto mean = std::make_shared<std::vector<T>>(xv.rows());
    auto inv_std = std::make_shared<std::vector<T>>(xv.rows());
    Matrix<T> out(xv.rows(), c);
    for (index_t i = 0; i < xv.rows(); ++i) {
      T mu{};
      for (index_t j = 0; j < c; ++j) mu += xv(i, j);
      mu /= static_cast<T>(c);
      T var{};
      for (index_t j = 0; j < c; ++j) {
        const T d = xv(i, j) - mu;
        var += d * d;
      }
      var /= static_cast<T>(c);
      const T inv = T{1} / std::sqrt(var + eps);
      (*mean)[static_cast<std::size_t>(i)] = mu;
      (*inv_std)[static_cast<std::size_t>(i)] = inv;
      for (index_t j = 0; j < c; ++j)
        out(i, j) = (xv(i, j) - mu) * inv * value(gain).data()[j] + value(bias).data()[j];
    }
    bool req = needs_grad(x) || needs_grad(gain) || needs_grad(bias);
    return push(std::move(out), req,
                [this, x, gain, bias, mean, inv_std, c](const Matrix<T>& g) {
      const Matrix<T>& xv = value(x);
      const T* gv = value(gain).data();
      if (needs_grad(gain) || needs_grad(bias)) {
        Matrix<T> dgain(1, c), dbias(1, c);
        for (index_t j = 0; j < c; ++j) {
          T sg{}, sb{};
          for (index_t i = 0; i < xv.rows(); ++i) {
            const T xhat = (xv(i, j) - (*mean)[static_cast<std::size_t>(i)]) *
                           (*inv_std)[static_cast<std::size_t>(i)];
            sg += g(i, j) * xhat;
            sb += g(i, j);
          }
          dgain(0, j) = sg;
          dbias(0, j) = sb;
        }
        if (needs_grad(gain)) accumulate(gain, dgain);
        if (needs_grad(bias)) accumulate(bias, dbias);
      }
      if (needs_grad(x)) {
        Matrix<T> gx(xv.rows(), c);
        const T nc = static_cast<T>(c);
        for (index_t i = 0; i < xv.rows(); ++i) {
          const T mu = (*mean)[static_cast<std::size_t>(i)];
          const T inv = (*inv_std)[static_cast<std::size_t>(i)];
          // dxhat = g * gain; dx = inv*(dxhat - mean(dxhat) - xhat*mean(dxhat*xhat))
          T s1{}, s2{};
          for (index_t j = 0; j < c; ++j) {
            const T dxh = g(i, j) * gv[j];
            const T xhat = (xv(i, j) - mu) * inv;
            s1 += dxh;
            s2 += dxh * xhat;
          }
          s1 /= nc;
          s2 /= nc;
          for (index_t j = 0; j < c; ++j) {
            const T dxh = g(i, j) * gv[j];
            const T xhat = (xv(i, j) - mu) * inv;
            gx(i, j) = inv * (dxh - s1 - xhat * s2);
          }
        }
        accumulate(x, gx);
      }
    });
  }

  Var sigmoid(Var a) {
    Matrix<T> out = mtla::sigmoid(value(a));
    Var v = push(std::move(out), needs_grad(a), {});
    node(v).backward = [this, a, v](const Matrix<T>& g) {
      if (!needs_grad(a)) return;
      const Matrix<T>& y = value(v);
      Matrix<T> ga(y.rows(), y.cols());
      for (index_t i = 0; i < y.size(); ++i)
        ga.data()[i] = g.data()[i] * y.data()[i] * (T{1} - y.data()[i]);
      accumulate(a, ga);
    };
    return v;
  }

  Var gelu(Var a) {
    Matrix<T> out = mtla::gelu(value(a));
    return push(std::move(out), needs_grad(a), [this, a](const Matrix<T>& g) {
      if (!needs_grad(a)) return;
      const Matrix<T>& xv = value(a);
      Matrix<T> ga(xv.rows(), xv.cols());
      for (index_t i = 0; i < xv.size(); ++i)
        ga.data()[i] = g.data()[i] * mtla::gelu_grad_scalar(xv.data()[i]);
      accumulate(a, ga);
    });
  }

  Var rope(Var a, std::vector<index_t> positions, double base, index_t n_heads) {
    auto pos = std::make_shared<std::vector<index_t>>(std::move(positions));
    Matrix<T> out = mtla::rope_rotate(value(a), std::span<const index_t>(*pos), base, n_heads);
    return push(std::move(out), needs_grad(a), [this, a, pos, base, n_heads](const Matrix<T>& g) {
      if (needs_grad(a))
        accumulate(a, mtla::rope_rotate_inverse(g, std::span<const index_t>(*pos), base,
                                                n_heads));
    });
  }

  /// rows of `table` selected by token id; backward scatter-adds.
  Var gather_rows(Var table, std::vector<index_t> ids) {
    auto idv = std::make_shared<std::vector<index_t>>(std::move(ids));
    const Matrix<T>& tv = value(table);
    Matrix<T> out(static_cast<index_t>(idv->size()), tv.cols());
    for (index_t i = 0; i < out.rows(); ++i) {
      const index_t id = (*idv)[static_cast<std::size_t>(i)];
      if (id < 0 || id >= tv.rows()) throw ShapeError("gather_rows: id out of range");
      for (index_t j = 0; j < tv.cols(); ++j) out(i, j) = tv(id, j);
    }
    return push(std::move(out), needs_grad(table), [this, table, idv](const Matrix<T>& g) {
      if (!needs_grad(table)) return;
      Matrix<T> gt = Matrix<T>::zeros(value(table).rows(), value(table).cols());
      for (index_t i = 0; i < g.rows(); ++i) {
        const index_t id = (*idv)[static_cast<std::size_t>(i)];
        for (index_t j = 0; j < g.cols(); ++j) gt(id, j) += g(i, j);
      }
      accumulate(table, gt);
    });
  }

  /// x + row broadcast over every row (bias add).
  Var add_row(Var x, Var row) {
    const Matrix<T>& xv = value(x);
    if (value(row).rows() != 1 || value(row).cols() != xv.cols())
      throw ShapeError("add_row: bias must be 1 x cols");
    Matrix<T> out(xv.rows(), xv.cols());
    for (index_t i = 0; i < xv.rows(); ++i)
      for (index_t j = 0; j < xv.cols(); ++j) out(i, j) = xv(i, j) + value(row)(0, j);
    return push(std::move(out), needs_grad(x) || needs_grad(row),
                [this, x, row](const Matrix<T>& g) {
      if (needs_grad(x)) accumulate(x, g);
      if (needs_grad(row)) {
        Matrix<T> gr(1, g.cols());
        for (index_t i = 0; i < g.rows(); ++i)
          for (index_t j = 0; j < g.cols(); ++j) gr(0, j) += g(i, j);
        accumulate(row, gr);
      }
    });
  }

  Var sum_all(Var a) {
    T s{};
    for (index_t i = 0; i < value(a).size(); ++i) s += value(a).data()[i];
    Matrix<T> out(1, 1);
    out(0, 0) = s;
    return push(std::move(out), needs_grad(a), [this, a](const Matrix<T>& g) {
      if (!needs_grad(a)) return;
      Matrix<T> ga(value(a).rows(), value(a).cols());
      for (index_t i = 0; i < ga.size(); ++i) ga.data()[i] = g(0, 0);
      accumulate(a, ga);
    });
  }

  /// Mean cross-entropy over the rows with active[i] != 0; returns 1x1.
  Var cross_entropy(Var logits, std::vector<index_t> targets, std::vector<char> active) {
    const Matrix<T>& lv = value(logits);
    if (static_cast<index_t>(targets.size()) != lv.rows() ||
        static_cast<index_t>(active.size()) != lv.rows())
      throw ShapeError("cross_entropy: targets/active length != rows");
    auto probs = std::make_shared<Matrix<T>>(mtla::row_softmax(lv));
    auto tgt = std::make_shared<std::vector<index_t>>(std::move(targets));
    auto act = std::make_shared<std::vector<char>>(std::move(active));
    index_t m = 0;
    T loss{};
    for (index_t i = 0; i < lv.rows(); ++i) {
      if (!(*act)[static_cast<std::size_t>(i)]) continue;
      ++m;
      loss -= std::log((*probs)(i, (*tgt)[static_cast<std::size_t>(i)]));
    }
    if (m == 0) throw NumericError("cross_entropy: no active positions");
    Matrix<T> out(1, 1);
    out(0, 0) = loss / static_cast<T>(m);
    return push(std::move(out), needs_grad(logits),
                [this, logits, probs, tgt, act, m](const Matrix<T>& g) {
      if (!needs_grad(logits)) return;
      const T w = g(0, 0) / static_cast<T>(m);
      Matrix<T> gl = *probs;
      for (index_t i = 0; i < gl.rows(); ++i) {
        if (!(*act)[static_cast<std::size_t>(i)]) {
          for (index_t j = 0; j < gl.cols(); ++j) gl(i, j) = T{};
          continue;
        }
        gl(i, (*tgt)[static_cast<std::size_t>(i)]) -= T{1};
        for (index_t j = 0; j < gl.cols(); ++j) gl(i, j) *= w;
      }
      accumulate(logits, gl);
    });
  }

  // --- reverse pass ------------------------------------------------------

  void backward(Var out, Matrix<T> seed) {
    Node& o = node(out);
    if (seed.rows() != o.value.rows() || seed.cols() != o.value.cols())
      throw ShapeError("backward: seed gradient shape mismatch");
    accumulate(out, seed);
    for (index_t i = out.idx; i >= 0; --i) {
      Node& n = nodes_[static_cast<std::size_t>(i)];
      if (n.backward && !n.grad.empty()) n.backward(n.grad);
    }
  }

  /// Scalar convenience: seeds d(out)/d(out) = 1.
  void backward_scalar(Var out) {
    Matrix<T> seed(1, 1);
    seed(0, 0) = T{1};
    backward(out, std::move(seed));
  }

 private:
  struct Node {
    Matrix<T> value;
    Matrix<T> grad;  // empty until touched
    bool requires_grad;
    std::function<void(const Matrix<T>&)> backward;
  };

  Var push(Matrix<T> v, bool req, std::function<void(const Matrix<T>&)> back) {
    nodes_.push_back(Node{std::move(v), Matrix<T>(), req, std::move(back)});
    return Var{static_cast<index_t>(nodes_.size()) - 1};
  }

  Node& node(Var v) {
    if (!v.valid() || v.idx >= size()) throw ShapeError("tape: invalid node handle");
    return nodes_[static_cast<std::size_t>(v.idx)];
  }
  const Node& node(Var v) const {
    if (!v.valid() || v.idx >= size()) throw ShapeError("tape: invalid node handle");
    return nodes_[static_cast<std::size_t>(v.idx)];
  }

  bool needs_grad(Var v) const { return node(v).requires_grad; }

  void accumulate(Var v, const Matrix<T>& g) {
    Node& n = node(v);
    if (n.grad.empty()) {
      n.grad = g;
      return;
    }
    for (index_t i = 0; i < g.size(); ++i) n.grad.data()[i] += g.data()[i];
  }

  std::vector<Node> nodes_;
};

/// Central finite differences of a scalar-valued callable with respect
/// to one parameter matrix, perturbing it in place.
template <typename T, typename F>
Matrix<T> finite_difference_gradient(F&& f, Matrix<T>& param, T step) {
  if (!(step > T{})) throw NumericError("finite_difference_gradient: step must be > 0");
  Matrix<T> grad(param.rows(), param.cols());
  for (index_t i = 0; i < param.size(); ++i) {
    const T saved = param.data()[i];
    param.data()[i] = saved + step;
    const T hi = f();
    param.data()[i] = saved - step;
    const T lo = f();
    param.data()[i] = saved;
    if (!std::isfinite(hi) || !std::isfinite(lo))
      throw NumericError("finite_difference_gradient: non-finite evaluation at entry " +
                         std::to_string(i));
    grad.data()[i] = (hi - lo) / (T{2} * step);
  }
  return grad;
}

}  // namespace mtla::ad
