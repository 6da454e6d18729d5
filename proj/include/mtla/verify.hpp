// SPDX-License-Identifier: Apache-2.0
#pragma once

// Hermetic property suite behind `mtla verify`. Each property draws its
// own inputs from the run seed, reports its worst error, and is
// independent of the others. The explicit-KV routes used as references
// here materialize keys and values from the latents with plain matrix
// ops, deliberately avoiding the folded projections they check.

#include <functional>
#include <string>
#include <vector>

#include "mtla/checkpoint.hpp"
#include "mtla/decode.hpp"
#include "mtla/trainer.hpp"
#include "mtla/variants.hpp"

namespace mtla {

struct PropertyResult {
  std::string name;
  bool pass;
  double max_err;
};

struct VerifyOptions {
  std::uint64_t seed = 1;
  index_t equivalence_trials = 60;
  index_t absorption_trials = 40;
  bool corrupt_stride_mask = false;  // test hook: sabotages the training mask
};

namespace verify_detail {

template <typename T>
Matrix<T> random_input(index_t rows, index_t cols, Rng& rng) {
  return random_matrix<T>(rows, cols, rng, -1.0, 1.0);
}

/// Reference route for the latent variants: materializes K and V from
/// the (compressed) latent sequence and runs textbook multi-head
/// attention on them.
template <typename T>
Matrix<T> latent_explicit_kv(const Matrix<T>& x, const MlaParams<T>& p,
                             const Matrix<T>& chat, const Matrix<T>& rope_k,
                             const AttentionConfig& cfg, const Matrix<T>& mask) {
  const Matrix<T> q = matmul(x, p.w_q);
  const auto pos = iota_positions(x.rows());
  const Matrix<T> q_rope =
      rope_rotate(matmul(x, p.w_qr), std::span<const index_t>(pos), kRopeBase, cfg.n_h);
  const Matrix<T> k = matmul(chat, p.w_k);
  const Matrix<T> v = matmul(chat, p.w_v);
  const T inv_scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(cfg.d_h)));
  std::vector<Matrix<T>> ctx;
  for (index_t h = 0; h < cfg.n_h; ++h) {
    Matrix<T> qh = slice_cols(q, h * cfg.d_h, (h + 1) * cfg.d_h);
    Matrix<T> kh = slice_cols(k, h * cfg.d_h, (h + 1) * cfg.d_h);
    Matrix<T> vh = slice_cols(v, h * cfg.d_h, (h + 1) * cfg.d_h);
    Matrix<T> qrh = slice_cols(q_rope, h * cfg.d_h_rope, (h + 1) * cfg.d_h_rope);
    Matrix<T> scores =
        scale(add(matmul(qh, transpose(kh)), matmul(qrh, transpose(rope_k))), inv_scale);
    ctx.push_back(matmul(row_softmax(scores, &mask), vh));
  }
  return matmul(concat_cols(ctx), p.w_o);
}

/// MTLA training output with an arbitrary pre-softmax mask (the test
/// hook swaps in a wrong mask here).
template <typename T>
Matrix<T> mtla_train_with_mask(const Matrix<T>& x, const MtlaParams<T>& p,
                               const AttentionConfig& cfg, const Matrix<T>& mask) {
  EagerEngine<T> eng;
  return mtla_attention<T>(eng, p, x, x.rows(), cfg, mask);
}

template <typename T>
double mtla_equivalence_max_err(Rng& rng, index_t trials, bool corrupt_mask) {
  double worst = 0.0;
  for (index_t trial = 0; trial < trials; ++trial) {
    const index_t d_pick[] = {16, 32, 64};
    const index_t nh_pick[] = {2, 4};
    const index_t d = d_pick[rng.next_below(3)];
    const index_t n_h = nh_pick[rng.next_below(2)];
    const index_t s = corrupt_mask ? 2 + static_cast<index_t>(rng.next_below(3))
                                   : 1 + static_cast<index_t>(rng.next_below(4));
    const index_t seq_len = corrupt_mask ? 3 + static_cast<index_t>(rng.next_below(31))
                                         : 1 + static_cast<index_t>(rng.next_below(33));
    AttentionConfig cfg = AttentionConfig::make(d, n_h, s);
    MtlaParams<T> p = make_mtla_params<T>(cfg, rng);
    const Matrix<T> x = random_input<T>(seq_len, d, rng);
    const Matrix<T> mask = corrupt_mask ? causal_mask<T>(seq_len).m
                                        : stride_aware_causal_mask<T>(seq_len, s).m;
    const Matrix<T> train = mtla_train_with_mask(x, p, cfg, mask);
    const AbsorbedWeights<T> a = absorb(p, cfg);
    MtlaCache<T> cache(cfg, seq_len);
    for (index_t i = 0; i < seq_len; ++i) {
      Matrix<T> xi(1, d);
      for (index_t j = 0; j < d; ++j) xi(0, j) = x(i, j);
      Matrix<T> yi = infer_step(xi, cache, p, a, cfg);
      for (index_t j = 0; j < d; ++j) {
        const double err = std::abs(static_cast<double>(yi(0, j)) -
                                    static_cast<double>(train(i, j)));
        if (err > worst) worst = err;
      }
    }
  }
  return worst;
}

template <typename T>
double variant_replay_max_err(Rng& rng, Variant v, index_t trials) {
  double worst = 0.0;
  for (index_t trial = 0; trial < trials; ++trial) {
    const index_t d_pick[] = {16, 32, 64};
    const index_t d = d_pick[rng.next_below(3)];
    const index_t n_h = rng.next_below(2) ? 4 : 2;
    AttentionConfig cfg = AttentionConfig::make(d, n_h, 1);
    if (v == Variant::kGqa) cfg.g = n_h / 2 > 0 ? n_h / 2 : 1;
    const index_t seq_len = 1 + static_cast<index_t>(rng.next_below(33));
    const Matrix<T> x = random_input<T>(seq_len, d, rng);
    const auto mask = causal_mask<T>(seq_len);
    Matrix<T> train;
    DenseAttnParams<T> dp;
    MlaParams<T> lp;
    index_t kv_heads = cfg.n_h;
    switch (v) {
      case Variant::kMha:
        dp = make_dense_params<T>(cfg, cfg.n_h, rng);
        train = mha_forward_train(x, dp, mask, cfg);
        kv_heads = cfg.n_h;
        break;
      case Variant::kMqa:
        dp = make_dense_params<T>(cfg, 1, rng);
        train = mqa_forward_train(x, dp, mask, cfg);
        kv_heads = 1;
        break;
      case Variant::kGqa:
        dp = make_dense_params<T>(cfg, cfg.g, rng);
        train = gqa_forward_train(x, dp, mask, cfg);
        kv_heads = cfg.g;
        break;
      case Variant::kMla:
        lp = make_mla_params<T>(cfg, rng);
        train = mla_forward_train(x, lp, mask, cfg);
        break;
      default:
        throw ConfigError("variant_replay: unsupported variant");
    }
    if (v == Variant::kMla) {
      const AbsorbedWeights<T> a = absorb(lp, cfg);
      LatentKVCache<T> cache(cfg, seq_len);
      for (index_t i = 0; i < seq_len; ++i) {
        Matrix<T> xi(1, d);
        for (index_t j = 0; j < d; ++j) xi(0, j) = x(i, j);
        Matrix<T> yi = mla_step(xi, cache, lp, a, cfg);
        for (index_t j = 0; j < d; ++j)
          worst = std::max(worst, std::abs(static_cast<double>(yi(0, j)) -
                                           static_cast<double>(train(i, j))));
      }
    } else {
      DenseKVCache<T> cache(cfg, kv_heads, seq_len);
      for (index_t i = 0; i < seq_len; ++i) {
        Matrix<T> xi(1, d);
        for (index_t j = 0; j < d; ++j) xi(0, j) = x(i, j);
        Matrix<T> yi = dense_step(xi, cache, dp, cfg);
        for (index_t j = 0; j < d; ++j)
          worst = std::max(worst, std::abs(static_cast<double>(yi(0, j)) -
                                           static_cast<double>(train(i, j))));
      }
    }
  }
  return worst;
}

template <typename T>
double absorption_max_err(Rng& rng, index_t trials) {
  double worst = 0.0;
  for (index_t trial = 0; trial < trials; ++trial) {
    const index_t d = rng.next_below(2) ? 32 : 64;
    const index_t n_h = rng.next_below(2) ? 4 : 2;
    const index_t s = 1 + static_cast<index_t>(rng.next_below(4));
    AttentionConfig cfg = AttentionConfig::make(d, n_h, s);
    const index_t seq_len = 1 + static_cast<index_t>(rng.next_below(24));
    const Matrix<T> x = random_input<T>(seq_len, d, rng);

    {  // MLA: folded route vs explicit K/V route
      MlaParams<T> p = make_mla_params<T>(cfg, rng);
      const auto mask = causal_mask<T>(seq_len);
      const Matrix<T> folded = mla_forward_train(x, p, mask, cfg);
      const Matrix<T> c = latent(x, p);
      const Matrix<T> rk = rope_keys(c, p);
      const Matrix<T> explicit_kv = latent_explicit_kv(x, p, c, rk, cfg, mask.m);
      worst = std::max(worst, static_cast<double>(max_abs_diff(folded, explicit_kv)));
    }
    {  // MTLA: same comparison over the replicated compressed sequence
      MtlaParams<T> p = make_mtla_params<T>(cfg, rng);
      const Matrix<T> mask = stride_aware_causal_mask<T>(seq_len, s).m;
      const Matrix<T> folded = mtla_train_with_mask(x, p, cfg, mask);
      const Matrix<T> c = latent(x, p);
      const Matrix<T> w = hyper_weight_matrix(c, s, p);
      const Matrix<T> chat = compress_train(c, w, s);
      const Matrix<T> rk = rope_keys(c, p);
      const Matrix<T> explicit_kv = latent_explicit_kv(x, p, chat, rk, cfg, mask);
      worst = std::max(worst, static_cast<double>(max_abs_diff(folded, explicit_kv)));
    }
    {  // the absorbed matrices themselves
      MtlaParams<T> p = make_mtla_params<T>(cfg, rng);
      const AbsorbedWeights<T> a = absorb(p, cfg);
      const Matrix<T> chat = random_input<T>(seq_len, cfg.r, rng);
      for (index_t h = 0; h < cfg.n_h; ++h) {
        Matrix<T> wq_h = slice_cols(p.w_q, h * cfg.d_h, (h + 1) * cfg.d_h);
        Matrix<T> wk_h = slice_cols(p.w_k, h * cfg.d_h, (h + 1) * cfg.d_h);
        Matrix<T> lhs = matmul(matmul(x, a.qk[static_cast<std::size_t>(h)]),
                               transpose(chat));
        Matrix<T> rhs = matmul(matmul(x, wq_h), transpose(matmul(chat, wk_h)));
        worst = std::max(worst, static_cast<double>(max_abs_diff(lhs, rhs)));
        Matrix<T> wv_h = slice_cols(p.w_v, h * cfg.d_h, (h + 1) * cfg.d_h);
        Matrix<T> wo_h(cfg.d_h, p.w_o.cols());
        for (index_t i = 0; i < cfg.d_h; ++i)
          for (index_t j = 0; j < p.w_o.cols(); ++j)
            wo_h(i, j) = p.w_o(h * cfg.d_h + i, j);
        Matrix<T> lhs2 = matmul(chat, a.vo[static_cast<std::size_t>(h)]);
        Matrix<T> rhs2 = matmul(matmul(chat, wv_h), wo_h);
        worst = std::max(worst, static_cast<double>(max_abs_diff(lhs2, rhs2)));
      }
    }
  }
  return worst;
}

inline double mask_identities_max_err() {
  double worst = 0.0;
  for (index_t t = 1; t <= 64; ++t) {
    const auto c = causal_mask<double>(t);
    const auto sa = stride_aware_causal_mask<double>(t, 1);
    if (!(c.m == sa.m)) worst = std::max(worst, 1.0);
  }
  for (index_t s = 1; s <= 4; ++s) {
    for (index_t t = 1; t <= 40; ++t) {
      const auto sa = stride_aware_causal_mask<double>(t, s);
      for (index_t m = 1; m <= t; ++m) {
        index_t allowed = 0;
        for (index_t n = 1; n <= t; ++n) {
          if (sa.m(m - 1, n - 1) == 0.0) {
            ++allowed;
            if (n != m && !(n < m && n % s == 0)) worst = std::max(worst, 1.0);
          }
        }
        const index_t expect = (m + s - 1) / s;  // == 1 + (m-1)/s
        if (allowed != expect) worst = std::max(worst, 1.0);
      }
      const auto cc = chunk_causal_mask<double>(t, s);
      for (index_t m = 1; m <= t; ++m)
        for (index_t n = 1; n <= t; ++n) {
          const bool same_chunk = (m + s - 1) / s == (n + s - 1) / s;
          const bool zero = cc.m(m - 1, n - 1) == 0.0;
          if (zero && (!same_chunk || n > m)) worst = std::max(worst, 1.0);
          if (!zero && same_chunk && n <= m) worst = std::max(worst, 1.0);
        }
    }
  }
  return worst;
}

inline double hyper_consistency_max_err(Rng& rng) {
  double worst = 0.0;
  for (index_t trial = 0; trial < 20; ++trial) {
    const index_t d = rng.next_below(2) ? 32 : 64;
    const index_t n_h = 2;
    const index_t s = 1 + static_cast<index_t>(rng.next_below(4));
    AttentionConfig cfg = AttentionConfig::make(d, n_h, s);
    MtlaParams<double> p = make_mtla_params<double>(cfg, rng);
    const index_t seq_len = 1 + static_cast<index_t>(rng.next_below(16));
    const Matrix<double> x = random_input<double>(seq_len, d, rng);
    const Matrix<double> c = latent(x, p);
    const Matrix<double> w = hyper_weight_matrix(c, s, p);
    for (index_t m = 1; m <= seq_len; ++m)
      for (index_t n = 1; n <= seq_len; ++n) {
        const double scalar = hyper_weight<double>(
            std::span<const double>(c.data() + (n - 1) * cfg.r,
                                    static_cast<std::size_t>(cfg.r)),
            (m + s - 1) / s, p);
        worst = std::max(worst, std::abs(scalar - w(m - 1, n - 1)));
        if (!(w(m - 1, n - 1) > 0.0 && w(m - 1, n - 1) < 1.0))
          worst = std::max(worst, 1.0);
      }
  }
  return worst;
}

template <typename T>
double rel_err(const Matrix<T>& a, const Matrix<T>& b, double floor) {
  double worst = 0.0;
  for (index_t i = 0; i < a.size(); ++i) {
    const double x = static_cast<double>(a.data()[i]);
    const double y = static_cast<double>(b.data()[i]);
    const double denom = std::max({floor, std::abs(x), std::abs(y)});
    worst = std::max(worst, std::abs(x - y) / denom);
  }
  return worst;
}

inline double primitive_gradients_max_err(Rng& rng) {
  using T = double;
  double worst = 0.0;
  const T h = 1e-5;

  auto check = [&](Matrix<T>& input, auto&& forward) {
    ad::Tape<T> tape;
    ad::Var x = tape.leaf(input);
    ad::Var out = tape.sum_all(forward(tape, x));
    tape.backward_scalar(out);
    Matrix<T> g_ad = tape.grad(x);
    Matrix<T> g_fd = ad::finite_difference_gradient<T>(
        [&]() {
          ad::Tape<T> t2;
          ad::Var x2 = t2.leaf(input);
          ad::Var o2 = t2.sum_all(forward(t2, x2));
          return t2.value(o2)(0, 0);
        },
        input, h);
    worst = std::max(worst, rel_err(g_ad, g_fd, 1e-6));
  };

  Matrix<T> a = random_matrix<T>(4, 5, rng);
  Matrix<T> b = random_matrix<T>(5, 3, rng);
  check(a, [&](ad::Tape<T>& t, ad::Var x) { return t.matmul(x, t.constant(b)); });
  Matrix<T> c = random_matrix<T>(4, 5, rng);
  check(c, [&](ad::Tape<T>& t, ad::Var x) { return t.hadamard(x, t.constant(a)); });
  Matrix<T> sm = random_matrix<T>(5, 6, rng);
  const Matrix<T> mask = causal_mask<T>(5).m;
  Matrix<T> mask6(5, 6);
  for (index_t i = 0; i < 5; ++i)
    for (index_t j = 0; j < 6; ++j)
      mask6(i, j) = j < 5 ? mask(i, j) : -std::numeric_limits<T>::infinity();
  const Matrix<T> sm_weights = random_matrix<T>(5, 6, rng);
  check(sm, [&](ad::Tape<T>& t, ad::Var x) {
    return t.hadamard(t.row_softmax(x, &mask6), t.constant(sm_weights));
  });
  Matrix<T> ln = random_matrix<T>(3, 8, rng);
  Matrix<T> gain = random_matrix<T>(1, 8, rng, 0.5, 1.5);
  Matrix<T> bias = random_matrix<T>(1, 8, rng, -0.2, 0.2);
  check(ln, [&](ad::Tape<T>& t, ad::Var x) {
    return t.layer_norm(x, t.constant(gain), t.constant(bias), static_cast<T>(1e-5));
  });
  check(gain, [&](ad::Tape<T>& t, ad::Var g) {
    return t.layer_norm(t.constant(ln), g, t.constant(bias), static_cast<T>(1e-5));
  });
  Matrix<T> sg = random_matrix<T>(3, 4, rng);
  check(sg, [&](ad::Tape<T>& t, ad::Var x) { return t.sigmoid(x); });
  check(sg, [&](ad::Tape<T>& t, ad::Var x) { return t.gelu(x); });
  Matrix<T> rp = random_matrix<T>(4, 8, rng);
  check(rp, [&](ad::Tape<T>& t, ad::Var x) {
    return t.rope(x, {1, 2, 3, 4}, kRopeBase, 2);
  });
  Matrix<T> tbl = random_matrix<T>(6, 4, rng);
  check(tbl, [&](ad::Tape<T>& t, ad::Var x) {
    return t.gather_rows(x, {0, 2, 2, 5});
  });
  Matrix<T> ce = random_matrix<T>(5, 7, rng);
  check(ce, [&](ad::Tape<T>& t, ad::Var x) {
    return t.cross_entropy(x, {1, 0, 3, 6, 2}, {1, 0, 1, 1, 0});
  });

  // masked softmax gradient is exactly zero at masked slots
  {
    ad::Tape<T> tape;
    ad::Var x = tape.leaf(random_matrix<T>(4, 4, rng));
    const Matrix<T> m4 = causal_mask<T>(4).m;
    ad::Var out = tape.sum_all(tape.row_softmax(x, &m4));
    tape.backward_scalar(out);
    Matrix<T> g = tape.grad(x);
    for (index_t i = 0; i < 4; ++i)
      for (index_t j = i + 1; j < 4; ++j)
        if (g(i, j) != T{}) worst = std::max(worst, 1.0);
  }
  // fan-out accumulation: d/dx of f(x)+f(x) is exactly twice f'(x)
  {
    Matrix<T> x0 = random_matrix<T>(3, 3, rng);
    ad::Tape<T> t1;
    ad::Var x1 = t1.leaf(x0);
    ad::Var s1 = t1.sum_all(t1.sigmoid(x1));
    t1.backward_scalar(s1);
    ad::Tape<T> t2;
    ad::Var x2 = t2.leaf(x0);
    ad::Var y2 = t2.sigmoid(x2);
    ad::Var s2 = t2.sum_all(t2.add(y2, y2));
    t2.backward_scalar(s2);
    Matrix<T> g1 = t1.grad(x1);
    Matrix<T> g2 = t2.grad(x2);
    for (index_t i = 0; i < g1.size(); ++i)
      if (g2.data()[i] != T{2} * g1.data()[i]) worst = std::max(worst, 1.0);
  }
  return worst;
}

/// Every parameter gradient of a 1-layer MTLA decoder against central
/// finite differences.
inline double model_gradient_max_err(std::uint64_t seed) {
  using T = double;
  DecoderConfig cfg;
  cfg.vocab = 11;
  cfg.d = 16;
  cfg.n_layers = 1;
  cfg.ffn_dim = 24;
  cfg.max_len = 16;
  cfg.seed = seed;
  cfg.variant = Variant::kMtla;
  cfg.attn = AttentionConfig::make(16, 2, 2, 1);
  Decoder<T> model(cfg);
  Rng rng(seed + 13);
  const index_t seq_len = 8;
  std::vector<index_t> tokens, targets;
  std::vector<char> active;
  for (index_t i = 0; i < seq_len; ++i) {
    tokens.push_back(static_cast<index_t>(rng.next_below(cfg.vocab)));
    targets.push_back(static_cast<index_t>(rng.next_below(cfg.vocab)));
    active.push_back(1);
  }
  auto loss_value = [&]() {
    EagerEngine<T> eng;
    Matrix<T> logits = model.forward_eng(eng, tokens);
    return eng.cross_entropy(logits, targets, active)(0, 0);
  };
  ad::Tape<T> tape;
  TapedEngine<T> eng(tape);
  std::vector<ad::Var> vars;
  eng.param_sink = &vars;
  ad::Var logits = model.forward_eng(eng, tokens);
  ad::Var loss = tape.cross_entropy(logits, targets, active);
  tape.backward_scalar(loss);
  auto params = model.named_params();
  double worst = 0.0;
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    Matrix<T> g_ad = tape.grad(vars[pi]);
    Matrix<T> g_fd =
        ad::finite_difference_gradient<T>(loss_value, *params[pi].second, 1e-5);
    worst = std::max(worst, rel_err(g_ad, g_fd, 1e-6));
  }
  return worst;
}

}  // namespace verify_detail

/// Runs the full property suite; every property draws from `seed`.
inline std::vector<PropertyResult> run_verify_suite(const VerifyOptions& opts) {
  using namespace verify_detail;
  std::vector<PropertyResult> results;
  auto push = [&](const std::string& name, double err, double tol) {
    results.push_back(PropertyResult{name, err < tol, err});
  };

  {
    Rng rng(opts.seed);
    push("mtla_train_infer_equivalence_double",
         mtla_equivalence_max_err<double>(rng, opts.equivalence_trials,
                                          opts.corrupt_stride_mask),
         1e-9);
  }
  {
    Rng rng(opts.seed + 1);
    push("mtla_train_infer_equivalence_single",
         mtla_equivalence_max_err<float>(rng, std::max<index_t>(8, opts.equivalence_trials / 4),
                                         opts.corrupt_stride_mask),
         1e-4);
  }
  {
    Rng rng(opts.seed + 2);
    push("mha_train_step_replay", variant_replay_max_err<double>(rng, Variant::kMha, 10),
         1e-10);
    push("mqa_train_step_replay", variant_replay_max_err<double>(rng, Variant::kMqa, 10),
         1e-10);
    push("gqa_train_step_replay", variant_replay_max_err<double>(rng, Variant::kGqa, 10),
         1e-10);
    push("mla_train_step_replay", variant_replay_max_err<double>(rng, Variant::kMla, 10),
         1e-10);
  }
  {
    Rng rng(opts.seed + 3);
    push("absorption_identity", absorption_max_err<double>(rng, opts.absorption_trials),
         1e-9);
  }
  push("mask_identities", mask_identities_max_err(), 0.5);
  {
    Rng rng(opts.seed + 4);
    push("hyper_weight_scalar_matrix_consistency", hyper_consistency_max_err(rng), 1e-12);
  }
  {
    Rng rng(opts.seed + 5);
    push("primitive_gradients_vs_finite_difference", primitive_gradients_max_err(rng),
         1e-6);
  }
  push("mtla_model_gradient_vs_finite_difference",
       model_gradient_max_err(opts.seed + 6), 1e-4);
  return results;
}

}  // namespace mtla
