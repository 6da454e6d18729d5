// SPDX-License-Identifier: Apache-2.0
#pragma once

// Synthetic copy-task training: Adam with gradient-norm clipping and a
// linear warmup into a constant rate. Gradients are accumulated over
// per-sequence tapes, so one optimizer step sees the batch mean.

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "mtla/decoder.hpp"

namespace mtla {

inline constexpr index_t kSepToken = 1;
inline constexpr index_t kPadToken = 0;
inline constexpr index_t kFirstContentToken = 2;

struct CopyBatch {
  std::vector<std::vector<index_t>> inputs;   // length 2*len
  std::vector<std::vector<index_t>> targets;  // shifted by one
  std::vector<std::vector<char>> active;      // post-separator positions
};

/// Sequences of the form [t_1..t_len, SEP, t_1..t_len]; the loss covers
/// only the predictions of the copied half.
inline CopyBatch copy_task_batch(Rng& rng, index_t batch, index_t len, index_t vocab,
                                 index_t max_len) {
  if (2 * len + 1 > max_len) throw ConfigError("copy_task_batch: 2*len+1 exceeds max_len");
  if (vocab < 4) throw ConfigError("copy_task_batch: vocab must be >= 4");
  CopyBatch b;
  for (index_t s = 0; s < batch; ++s) {
    std::vector<index_t> content(static_cast<std::size_t>(len));
    for (auto& t : content)
      t = kFirstContentToken +
          static_cast<index_t>(rng.next_below(static_cast<std::uint64_t>(vocab - kFirstContentToken)));
    std::vector<index_t> seq;
    seq.insert(seq.end(), content.begin(), content.end());
    seq.push_back(kSepToken);
    seq.insert(seq.end(), content.begin(), content.end());
    std::vector<index_t> input(seq.begin(), seq.end() - 1);
    std::vector<index_t> target(seq.begin() + 1, seq.end());
    std::vector<char> act(input.size(), 0);
    for (std::size_t i = static_cast<std::size_t>(len); i < input.size(); ++i) act[i] = 1;
    b.inputs.push_back(std::move(input));
    b.targets.push_back(std::move(target));
    b.active.push_back(std::move(act));
  }
  return b;
}

struct TrainOptions {
  double lr = 2e-3;
  double beta1 = 0.9;
  double beta2 = 0.98;
  double adam_eps = 1e-9;
  double clip_norm = 1.0;
  index_t warmup_steps = 100;
  index_t batch = 16;
  index_t copy_len = 16;
};

/// Optimizer state plus bookkeeping for one training run.
template <typename T>
struct TrainRun {
  explicit TrainRun(Decoder<T>& model, TrainOptions opts_, std::uint64_t data_seed)
      : opts(opts_), rng(data_seed) {
    for (auto& [name, m] : model.named_params()) {
      m1.push_back(Matrix<T>::zeros(m->rows(), m->cols()));
      m2.push_back(Matrix<T>::zeros(m->rows(), m->cols()));
    }
  }

  TrainOptions opts;
  Rng rng;
  index_t step = 0;
  std::vector<double> loss_history;
  std::vector<Matrix<T>> m1, m2;
};

/// One optimizer step on one batch; returns the batch loss.
template <typename T>
double train_step(Decoder<T>& model, const CopyBatch& batch, TrainRun<T>& run) {
  auto params = model.named_params();
  std::vector<Matrix<T>> grads;
  grads.reserve(params.size());
  for (auto& [name, m] : params) grads.push_back(Matrix<T>::zeros(m->rows(), m->cols()));

  const index_t bsz = static_cast<index_t>(batch.inputs.size());
  double total_loss = 0.0;
  for (index_t s = 0; s < bsz; ++s) {
    ad::Tape<T> tape;
    TapedEngine<T> eng(tape);
    std::vector<ad::Var> vars;
    eng.param_sink = &vars;
    ad::Var logits = model.forward_eng(eng, batch.inputs[static_cast<std::size_t>(s)]);
    ad::Var loss = tape.cross_entropy(logits, batch.targets[static_cast<std::size_t>(s)],
                                      batch.active[static_cast<std::size_t>(s)]);
    total_loss += static_cast<double>(tape.value(loss)(0, 0));
    tape.backward_scalar(loss);
    if (vars.size() != params.size())
      throw ShapeError("train_step: parameter binding count mismatch");
    for (std::size_t pi = 0; pi < params.size(); ++pi) {
      Matrix<T> g = tape.grad(vars[pi]);
      for (index_t k = 0; k < g.size(); ++k) grads[pi].data()[k] += g.data()[k];
    }
  }
  const T inv_b = static_cast<T>(1.0 / static_cast<double>(bsz));
  double sq_norm = 0.0;
  for (auto& g : grads) {
    for (index_t k = 0; k < g.size(); ++k) {
      g.data()[k] *= inv_b;
      sq_norm += static_cast<double>(g.data()[k]) * static_cast<double>(g.data()[k]);
    }
  }
  const double norm = std::sqrt(sq_norm);
  const T clip = norm > run.opts.clip_norm
                     ? static_cast<T>(run.opts.clip_norm / norm)
                     : T{1};

  run.step += 1;
  const double warm = run.opts.warmup_steps > 0
                          ? std::min(1.0, static_cast<double>(run.step) /
                                              static_cast<double>(run.opts.warmup_steps))
                          : 1.0;
  const double lr = run.opts.lr * warm;
  const double b1 = run.opts.beta1, b2 = run.opts.beta2;
  const double bc1 = 1.0 - std::pow(b1, static_cast<double>(run.step));
  const double bc2 = 1.0 - std::pow(b2, static_cast<double>(run.step));
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    Matrix<T>& p = *params[pi].second;
    Matrix<T>& g = grads[pi];
    Matrix<T>& m1 = run.m1[pi];
    Matrix<T>& m2 = run.m2[pi];
    for (index_t k = 0; k < p.size(); ++k) {
      const double gk = static_cast<double>(g.data()[k] * clip);
      const double nm1 = b1 * static_cast<double>(m1.data()[k]) + (1.0 - b1) * gk;
      const double nm2 = b2 * static_cast<double>(m2.data()[k]) + (1.0 - b2) * gk * gk;
      m1.data()[k] = static_cast<T>(nm1);
      m2.data()[k] = static_cast<T>(nm2);
      const double update =
          lr * (nm1 / bc1) / (std::sqrt(nm2 / bc2) + run.opts.adam_eps);
      p.data()[k] -= static_cast<T>(update);
    }
  }

  const double loss = total_loss / static_cast<double>(bsz);
  if (!std::isfinite(loss))
    throw NumericError("train_step: non-finite loss at step " + std::to_string(run.step));
  run.loss_history.push_back(loss);
  return loss;
}

/// Teacher-forced accuracy on the copied half.
template <typename T>
double copy_accuracy(Decoder<T>& model, const CopyBatch& batch) {
  index_t correct = 0, total = 0;
  for (std::size_t s = 0; s < batch.inputs.size(); ++s) {
    Matrix<T> logits = model.forward(batch.inputs[s]);
    for (index_t i = 0; i < logits.rows(); ++i) {
      if (!batch.active[s][static_cast<std::size_t>(i)]) continue;
      index_t best = 0;
      for (index_t j = 1; j < logits.cols(); ++j)
        if (logits(i, j) > logits(i, best)) best = j;
      correct += best == batch.targets[s][static_cast<std::size_t>(i)] ? 1 : 0;
      ++total;
    }
  }
  return total == 0 ? 0.0 : static_cast<double>(correct) / static_cast<double>(total);
}

/// Runs up to max_steps optimizer steps, stopping early once accuracy on
/// a held-out batch reaches `target_accuracy`. Returns final accuracy.
template <typename T>
double train_copy_task(Decoder<T>& model, TrainRun<T>& run, index_t max_steps,
                       double target_accuracy,
                       const std::function<void(index_t, double)>& log = {}) {
  const DecoderConfig& cfg = model.config();
  Rng eval_rng(model.config().seed + 7919);
  const CopyBatch eval_batch =
      copy_task_batch(eval_rng, 32, run.opts.copy_len, cfg.vocab, cfg.max_len);
  double acc = 0.0;
  for (index_t step = 1; step <= max_steps; ++step) {
    CopyBatch batch =
        copy_task_batch(run.rng, run.opts.batch, run.opts.copy_len, cfg.vocab, cfg.max_len);
    const double loss = train_step(model, batch, run);
    if (log && step % 50 == 0) log(step, loss);
    if (step % 100 == 0 || step == max_steps) {
      acc = copy_accuracy(model, eval_batch);
      if (acc >= target_accuracy) return acc;
    }
  }
  return copy_accuracy(model, eval_batch);
}

}  // namespace mtla
