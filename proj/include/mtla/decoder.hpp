// SPDX-License-Identifier: Apache-2.0
#pragma once

// Small decoder-only model: embedding, N post-norm blocks of
// {attention, residual, layer_norm, feed-forward, residual, layer_norm},
// untied output projection. The attention module is selected by
// variant. The forward is engine-generic so the training path records
// the exact computation the eager path runs.

#include <memory>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include "mtla/decode.hpp"
#include "mtla/variants.hpp"

namespace mtla {

struct DecoderConfig {
  index_t vocab = 32;
  index_t d = 64;
  index_t n_layers = 2;
  index_t ffn_dim = 256;
  index_t max_len = 64;
  std::uint64_t seed = 1;
  Variant variant = Variant::kMtla;
  AttentionConfig attn = AttentionConfig::make(64, 4, 2);

  void validate() const {
    if (vocab < 4) throw ConfigError("decoder: vocab must be >= 4");
    if (max_len < 2) throw ConfigError("decoder: max_len must be >= 2");
    if (n_layers < 1 || ffn_dim < 1) throw ConfigError("decoder: bad layer/ffn config");
    if (attn.d != d) throw ConfigError("decoder: attention d must match model d");
    attn.validate();
  }

  /// Desk-scale defaults for a given variant.
  static DecoderConfig make(Variant v, index_t s = 2, std::uint64_t seed = 1) {
    DecoderConfig c;
    c.variant = v;
    c.seed = seed;
    c.attn = AttentionConfig::make(c.d, 4, s, c.n_layers, v == Variant::kGqa ? 2 : 0);
    if (v == Variant::kMqa) c.attn.g = 1;
    return c;
  }
};

template <typename T>
struct DecoderLayer {
  std::variant<DenseAttnParams<T>, MlaParams<T>, MtlaParams<T>> attn;
  Matrix<T> ln1_gain, ln1_bias;  // 1 x d
  Matrix<T> w_ff1, b_ff1;        // d x ffn, 1 x ffn
  Matrix<T> w_ff2, b_ff2;        // ffn x d, 1 x d
  Matrix<T> ln2_gain, ln2_bias;  // 1 x d
};

template <typename T>
class Decoder {
 public:
  explicit Decoder(const DecoderConfig& cfg) : cfg_(cfg) {
    cfg_.validate();
    Rng rng(cfg_.seed);
    embedding_ = init_uniform<T>(cfg_.vocab, cfg_.d, cfg_.d, rng);
    layers_.resize(static_cast<std::size_t>(cfg_.n_layers));
    for (auto& layer : layers_) {
      switch (cfg_.variant) {
        case Variant::kMha:
          layer.attn = make_dense_params<T>(cfg_.attn, cfg_.attn.n_h, rng);
          break;
        case Variant::kGqa:
          layer.attn = make_dense_params<T>(cfg_.attn, cfg_.attn.g, rng);
          break;
        case Variant::kMqa:
          layer.attn = make_dense_params<T>(cfg_.attn, 1, rng);
          break;
        case Variant::kMla:
          layer.attn = make_mla_params<T>(cfg_.attn, rng);
          break;
        case Variant::kMtla:
          layer.attn = make_mtla_params<T>(cfg_.attn, rng);
          break;
      }
      layer.ln1_gain = ones_row(cfg_.d);
      layer.ln1_bias = Matrix<T>(1, cfg_.d);
      layer.w_ff1 = init_uniform<T>(cfg_.d, cfg_.ffn_dim, cfg_.d, rng);
      layer.b_ff1 = Matrix<T>(1, cfg_.ffn_dim);
      layer.w_ff2 = init_uniform<T>(cfg_.ffn_dim, cfg_.d, cfg_.ffn_dim, rng);
      layer.b_ff2 = Matrix<T>(1, cfg_.d);
      layer.ln2_gain = ones_row(cfg_.d);
      layer.ln2_bias = Matrix<T>(1, cfg_.d);
    }
    w_out_ = init_uniform<T>(cfg_.d, cfg_.vocab, cfg_.d, rng);
    b_out_ = Matrix<T>(1, cfg_.vocab);
  }

  const DecoderConfig& config() const { return cfg_; }
  Matrix<T>& embedding() { return embedding_; }
  Matrix<T>& w_out() { return w_out_; }
  Matrix<T>& b_out() { return b_out_; }
  std::vector<DecoderLayer<T>>& layers() { return layers_; }
  const std::vector<DecoderLayer<T>>& layers() const { return layers_; }

  /// Every trainable matrix in canonical (checkpoint) order.
  std::vector<std::pair<std::string, Matrix<T>*>> named_params() {
    std::vector<std::pair<std::string, Matrix<T>*>> out;
    out.emplace_back("embedding", &embedding_);
    for (std::size_t li = 0; li < layers_.size(); ++li) {
      auto& layer = layers_[li];
      const std::string prefix = "layer" + std::to_string(li) + ".";
      std::visit(
          [&](auto& attn) { collect_attn(prefix, attn, out); },
          layer.attn);
      out.emplace_back(prefix + "ln1_gain", &layer.ln1_gain);
      out.emplace_back(prefix + "ln1_bias", &layer.ln1_bias);
      out.emplace_back(prefix + "w_ff1", &layer.w_ff1);
      out.emplace_back(prefix + "b_ff1", &layer.b_ff1);
      out.emplace_back(prefix + "w_ff2", &layer.w_ff2);
      out.emplace_back(prefix + "b_ff2", &layer.b_ff2);
      out.emplace_back(prefix + "ln2_gain", &layer.ln2_gain);
      out.emplace_back(prefix + "ln2_bias", &layer.ln2_bias);
    }
    out.emplace_back("w_out", &w_out_);
    out.emplace_back("b_out", &b_out_);
    return out;
  }

  index_t param_count() {
    index_t n = 0;
    for (auto& [name, m] : named_params()) n += m->size();
    return n;
  }

  /// Engine-generic forward over a token sequence, returning logits
  /// (T x vocab). Parameters are bound through eng.param() in canonical
  /// order so a taped engine can pair them with named_params().
  template <class E>
  typename E::Val forward_eng(E& eng, const std::vector<index_t>& tokens) {
    using Val = typename E::Val;
    if (tokens.empty()) throw ShapeError("decoder forward: empty token sequence");
    if (static_cast<index_t>(tokens.size()) > cfg_.max_len)
      throw ShapeError("decoder forward: sequence exceeds max_len");
    const index_t seq_len = static_cast<index_t>(tokens.size());
    const T eps = static_cast<T>(kLayerNormEps);
    Val x = eng.gather_rows(eng.param(embedding_), tokens);
    const Matrix<T> causal = causal_mask<T>(seq_len).m;
    const Matrix<T> stride =
        cfg_.variant == Variant::kMtla ? stride_aware_causal_mask<T>(seq_len, cfg_.attn.s).m
                                       : Matrix<T>();
    // param() binds are hoisted into single statements: argument
    // evaluation order is unspecified, but the binding order must match
    // named_params().
    for (auto& layer : layers_) {
      Val attn_out = std::visit(
          [&](auto& attn) -> Val {
            return attention_eng(eng, attn, x, seq_len, causal, stride);
          },
          layer.attn);
      Val ln1_gain = eng.param(layer.ln1_gain);
      Val ln1_bias = eng.param(layer.ln1_bias);
      x = eng.layer_norm(eng.add(x, attn_out), ln1_gain, ln1_bias, eps);
      Val w_ff1 = eng.param(layer.w_ff1);
      Val b_ff1 = eng.param(layer.b_ff1);
      Val ff = eng.gelu(eng.add_row(eng.matmul(x, w_ff1), b_ff1));
      Val w_ff2 = eng.param(layer.w_ff2);
      Val b_ff2 = eng.param(layer.b_ff2);
      ff = eng.add_row(eng.matmul(ff, w_ff2), b_ff2);
      Val ln2_gain = eng.param(layer.ln2_gain);
      Val ln2_bias = eng.param(layer.ln2_bias);
      x = eng.layer_norm(eng.add(x, ff), ln2_gain, ln2_bias, eps);
    }
    Val w_out = eng.param(w_out_);
    Val b_out = eng.param(b_out_);
    return eng.add_row(eng.matmul(x, w_out), b_out);
  }

  Matrix<T> forward(const std::vector<index_t>& tokens) {
    EagerEngine<T> eng;
    return forward_eng(eng, tokens);
  }

 private:
  static Matrix<T> ones_row(index_t n) {
    Matrix<T> m(1, n);
    for (index_t j = 0; j < n; ++j) m(0, j) = T{1};
    return m;
  }

  static void collect_attn(const std::string& prefix, DenseAttnParams<T>& p,
                           std::vector<std::pair<std::string, Matrix<T>*>>& out) {
    out.emplace_back(prefix + "w_q", &p.w_q);
    out.emplace_back(prefix + "w_k", &p.w_k);
    out.emplace_back(prefix + "w_v", &p.w_v);
    out.emplace_back(prefix + "w_o", &p.w_o);
  }
  static void collect_attn(const std::string& prefix, MlaParams<T>& p,
                           std::vector<std::pair<std::string, Matrix<T>*>>& out) {
    out.emplace_back(prefix + "w_q", &p.w_q);
    out.emplace_back(prefix + "w_r", &p.w_r);
    out.emplace_back(prefix + "ln_gain", &p.ln_gain);
    out.emplace_back(prefix + "ln_bias", &p.ln_bias);
    out.emplace_back(prefix + "w_k", &p.w_k);
    out.emplace_back(prefix + "w_v", &p.w_v);
    out.emplace_back(prefix + "w_o", &p.w_o);
    out.emplace_back(prefix + "w_qr", &p.w_qr);
    out.emplace_back(prefix + "w_kr", &p.w_kr);
  }
  static void collect_attn(const std::string& prefix, MtlaParams<T>& p,
                           std::vector<std::pair<std::string, Matrix<T>*>>& out) {
    collect_attn(prefix, static_cast<MlaParams<T>&>(p), out);
    out.emplace_back(prefix + "h_c", &p.h_c);
    out.emplace_back(prefix + "h_p", &p.h_p);
  }

  // Per-variant engine dispatch; param() call order matches collect_attn.
  template <class E>
  typename E::Val attention_eng(E& eng, DenseAttnParams<T>& p, const typename E::Val& x,
                                index_t seq_len, const Matrix<T>& causal,
                                const Matrix<T>&) {
    DenseAttnParamsT<typename E::Val> lp{eng.param(p.w_q), eng.param(p.w_k),
                                         eng.param(p.w_v), eng.param(p.w_o)};
    index_t kv = cfg_.variant == Variant::kMha ? cfg_.attn.n_h
                 : cfg_.variant == Variant::kMqa ? 1
                                                 : cfg_.attn.g;
    return dense_attention<T>(eng, lp, x, seq_len, cfg_.attn, kv, causal);
  }
  template <class E>
  typename E::Val attention_eng(E& eng, MlaParams<T>& p, const typename E::Val& x,
                                index_t seq_len, const Matrix<T>& causal,
                                const Matrix<T>&) {
    MlaParamsT<typename E::Val> lp;
    lift_mla(eng, p, lp);
    return mla_attention<T>(eng, lp, x, seq_len, cfg_.attn, causal);
  }
  template <class E>
  typename E::Val attention_eng(E& eng, MtlaParams<T>& p, const typename E::Val& x,
                                index_t seq_len, const Matrix<T>&,
                                const Matrix<T>& stride) {
    MtlaParamsT<typename E::Val> lp;
    lift_mla(eng, static_cast<MlaParams<T>&>(p), lp);
    lp.h_c = eng.param(p.h_c);
    lp.h_p = eng.param(p.h_p);
    return mtla_attention<T>(eng, lp, x, seq_len, cfg_.attn, stride);
  }

  template <class E>
  static void lift_mla(E& eng, MlaParams<T>& p, MlaParamsT<typename E::Val>& lp) {
    lp.w_q = eng.param(p.w_q);
    lp.w_r = eng.param(p.w_r);
    lp.ln_gain = eng.param(p.ln_gain);
    lp.ln_bias = eng.param(p.ln_bias);
    lp.w_k = eng.param(p.w_k);
    lp.w_v = eng.param(p.w_v);
    lp.w_o = eng.param(p.w_o);
    lp.w_qr = eng.param(p.w_qr);
    lp.w_kr = eng.param(p.w_kr);
  }

  DecoderConfig cfg_;
  Matrix<T> embedding_;
  std::vector<DecoderLayer<T>> layers_;
  Matrix<T> w_out_, b_out_;
};

// ---------------------------------------------------------------------------
// Cached decoding session
// ---------------------------------------------------------------------------

/// Owns one cache per layer plus per-token scratch; exclusively owned by
/// one decoding stream.
template <typename T>
class DecoderSession {
 public:
  DecoderSession(Decoder<T>& model, index_t max_steps) : model_(model) {
    const DecoderConfig& cfg = model.config();
    const AttentionConfig& ac = cfg.attn;
    for (std::size_t li = 0; li < model.layers().size(); ++li) {
      auto& layer = model.layers()[li];
      switch (cfg.variant) {
        case Variant::kMha:
          dense_.emplace_back(ac, ac.n_h, max_steps);
          break;
        case Variant::kGqa:
          dense_.emplace_back(ac, ac.g, max_steps);
          break;
        case Variant::kMqa:
          dense_.emplace_back(ac, 1, max_steps);
          break;
        case Variant::kMla:
          mla_.emplace_back(ac, max_steps);
          absorbed_.push_back(absorb(std::get<MlaParams<T>>(layer.attn), ac));
          break;
        case Variant::kMtla:
          mtla_.emplace_back(ac, max_steps);
          absorbed_.push_back(absorb(
              static_cast<const MlaParams<T>&>(std::get<MtlaParams<T>>(layer.attn)), ac));
          break;
      }
    }
    x_.resize(static_cast<std::size_t>(cfg.d));
    y_.resize(static_cast<std::size_t>(cfg.d));
    ff_.resize(static_cast<std::size_t>(cfg.ffn_dim));
    ff2_.resize(static_cast<std::size_t>(cfg.d));
    logits_.resize(static_cast<std::size_t>(cfg.vocab));
  }

  index_t step_count() const { return steps_; }

  index_t cache_elements() const {
    index_t n = 0;
    for (const auto& c : dense_) n += c.element_count();
    for (const auto& c : mla_) n += c.element_count();
    for (const auto& c : mtla_) n += c.element_count();
    return n;
  }

  /// Feed one token; returns the logits row for the next position.
  std::span<const T> step(index_t token) {
    const DecoderConfig& cfg = model_.config();
    if (token < 0 || token >= cfg.vocab) throw ShapeError("decode step: token out of range");
    const AttentionConfig& ac = cfg.attn;
    const T eps = static_cast<T>(kLayerNormEps);
    const Matrix<T>& emb = model_.embedding();
    for (index_t j = 0; j < cfg.d; ++j) x_[static_cast<std::size_t>(j)] = emb(token, j);
    auto& layers = model_.layers();
    for (std::size_t li = 0; li < layers.size(); ++li) {
      auto& layer = layers[li];
      std::span<const T> xs(x_);
      std::span<T> ys(y_);
      switch (cfg.variant) {
        case Variant::kMha:
        case Variant::kGqa:
        case Variant::kMqa:
          dense_step_into(xs, ys, dense_[li], std::get<DenseAttnParams<T>>(layer.attn), ac);
          break;
        case Variant::kMla:
          mla_step_into(xs, ys, mla_[li], std::get<MlaParams<T>>(layer.attn),
                        absorbed_[li], ac);
          break;
        case Variant::kMtla:
          infer_step_into(xs, ys, mtla_[li], std::get<MtlaParams<T>>(layer.attn),
                          absorbed_[li], ac);
          break;
      }
      for (index_t j = 0; j < cfg.d; ++j) x_[static_cast<std::size_t>(j)] += y_[static_cast<std::size_t>(j)];
      detail::layer_norm_row(x_.data(), layer.ln1_gain.data(), layer.ln1_bias.data(),
                             cfg.d, eps);
      kernels::matvec_t(layer.w_ff1.data(), x_.data(), ff_.data(), cfg.d, cfg.ffn_dim);
      for (index_t j = 0; j < cfg.ffn_dim; ++j)
        ff_[static_cast<std::size_t>(j)] =
            gelu_scalar(ff_[static_cast<std::size_t>(j)] + layer.b_ff1(0, j));
      kernels::matvec_t(layer.w_ff2.data(), ff_.data(), ff2_.data(), cfg.ffn_dim, cfg.d);
      for (index_t j = 0; j < cfg.d; ++j)
        x_[static_cast<std::size_t>(j)] += ff2_[static_cast<std::size_t>(j)] + layer.b_ff2(0, j);
      detail::layer_norm_row(x_.data(), layer.ln2_gain.data(), layer.ln2_bias.data(),
                             cfg.d, eps);
    }
    kernels::matvec_t(model_.w_out().data(), x_.data(), logits_.data(), cfg.d, cfg.vocab);
    for (index_t j = 0; j < cfg.vocab; ++j)
      logits_[static_cast<std::size_t>(j)] += model_.b_out()(0, j);
    ++steps_;
    return std::span<const T>(logits_);
  }

 private:
  Decoder<T>& model_;
  std::vector<DenseKVCache<T>> dense_;
  std::vector<LatentKVCache<T>> mla_;
  std::vector<MtlaCache<T>> mtla_;
  std::vector<AbsorbedWeights<T>> absorbed_;
  std::vector<T> x_, y_, ff_, ff2_, logits_;
  index_t steps_ = 0;
};

/// Greedy continuation through the cached decode path. Ties break
/// toward the lowest token id.
template <typename T>
std::vector<index_t> greedy_decode(Decoder<T>& model, const std::vector<index_t>& prompt,
                                   index_t max_new) {
  if (prompt.empty()) throw ShapeError("greedy_decode: empty prompt");
  if (static_cast<index_t>(prompt.size()) + max_new > model.config().max_len)
    throw ShapeError("greedy_decode: prompt + max_new exceeds max_len");
  DecoderSession<T> session(model, static_cast<index_t>(prompt.size()) + max_new);
  std::span<const T> logits;
  for (index_t tok : prompt) logits = session.step(tok);
  std::vector<index_t> out;
  for (index_t k = 0; k < max_new; ++k) {
    index_t best = 0;
    for (index_t j = 1; j < model.config().vocab; ++j)
      if (logits[static_cast<std::size_t>(j)] > logits[static_cast<std::size_t>(best)])
        best = j;
    out.push_back(best);
    if (k + 1 < max_new) logits = session.step(best);
  }
  return out;
}

/// Oracle twin of greedy_decode: re-runs the parallel forward over the
/// whole sequence at every step.
template <typename T>
std::vector<index_t> greedy_decode_recompute(Decoder<T>& model,
                                             const std::vector<index_t>& prompt,
                                             index_t max_new) {
  std::vector<index_t> seq = prompt;
  std::vector<index_t> out;
  for (index_t k = 0; k < max_new; ++k) {
    Matrix<T> logits = model.forward(seq);
    const index_t last = logits.rows() - 1;
    index_t best = 0;
    for (index_t j = 1; j < logits.cols(); ++j)
      if (logits(last, j) > logits(last, best)) best = j;
    out.push_back(best);
    seq.push_back(best);
  }
  return out;
}

}  // namespace mtla
