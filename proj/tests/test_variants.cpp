// SPDX-License-Identifier: Apache-2.0
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "mtla/decode.hpp"
#include "mtla/variants.hpp"
#include "oracles.hpp"

using namespace mtla;

namespace {

MatrixD row_of(const MatrixD& m, index_t i) {
  MatrixD r(1, m.cols());
  for (index_t j = 0; j < m.cols(); ++j) r(0, j) = m(i, j);
  return r;
}

}  // namespace

TEST_CASE("mha single token attends only to itself") {
  AttentionConfig cfg = AttentionConfig::make(16, 2, 1);
  Rng rng(1);
  DenseAttnParams<double> p = make_dense_params<double>(cfg, cfg.n_h, rng);
  MatrixD x = random_matrix<double>(1, 16, rng);
  MatrixD y = mha_forward_train(x, p, causal_mask<double>(1), cfg);
  // weight 1 on self: output = concat_h(x W_V head) * W_O (values not rotated)
  MatrixD v = matmul(x, p.w_v);
  MatrixD want = matmul(v, p.w_o);
  CHECK(max_abs_diff(y, want) < 1e-12);
}

TEST_CASE("zero value projection gives zero output") {
  AttentionConfig cfg = AttentionConfig::make(16, 2, 1);
  Rng rng(2);
  DenseAttnParams<double> p = make_dense_params<double>(cfg, cfg.n_h, rng);
  p.w_v = MatrixD::zeros(16, 16);
  MatrixD x = random_matrix<double>(5, 16, rng);
  MatrixD y = mha_forward_train(x, p, causal_mask<double>(5), cfg);
  for (index_t i = 0; i < y.size(); ++i) CHECK(y.data()[i] == 0.0);
}

TEST_CASE("dense variants: train equals sequential step replay") {
  Rng rng(3);
  for (index_t trial = 0; trial < 6; ++trial) {
    const index_t seq_len = 1 + static_cast<index_t>(rng.next_below(33));
    AttentionConfig cfg = AttentionConfig::make(32, 4, 1);
    cfg.g = 2;
    const auto mask = causal_mask<double>(seq_len);
    MatrixD x = random_matrix<double>(seq_len, cfg.d, rng);
    struct Case {
      const char* name;
      index_t kv_heads;
    } cases[] = {{"mha", 4}, {"gqa", 2}, {"mqa", 1}};
    for (const auto& tc : cases) {
      DenseAttnParams<double> p = make_dense_params<double>(cfg, tc.kv_heads, rng);
      MatrixD train;
      if (tc.kv_heads == 4) train = mha_forward_train(x, p, mask, cfg);
      else if (tc.kv_heads == 2) train = gqa_forward_train(x, p, mask, cfg);
      else train = mqa_forward_train(x, p, mask, cfg);
      DenseKVCache<double> cache(cfg, tc.kv_heads, seq_len);
      for (index_t i = 0; i < seq_len; ++i) {
        MatrixD yi = dense_step(row_of(x, i), cache, p, cfg);
        CHECK(max_abs_diff(yi, row_of(train, i)) < 1e-10);
      }
      CHECK(cache.step == seq_len);
      CHECK(cache.keys().rows() == seq_len);
      CHECK(cache.keys().cols() == tc.kv_heads * cfg.d_h);
    }
  }
}

TEST_CASE("first step attends with weight one to itself") {
  AttentionConfig cfg = AttentionConfig::make(16, 2, 1);
  Rng rng(4);
  DenseAttnParams<double> p = make_dense_params<double>(cfg, cfg.n_h, rng);
  DenseKVCache<double> cache(cfg, cfg.n_h, 4);
  MatrixD x = random_matrix<double>(1, 16, rng);
  MatrixD y = mha_step(x, cache, p, cfg);
  CHECK(cache.step == 1);
  MatrixD want = matmul(matmul(x, p.w_v), p.w_o);
  CHECK(max_abs_diff(y, want) < 1e-12);
}

TEST_CASE("mha cache element count matches closed form") {
  AttentionConfig cfg = AttentionConfig::make(32, 4, 1);
  Rng rng(5);
  DenseAttnParams<double> p = make_dense_params<double>(cfg, cfg.n_h, rng);
  DenseKVCache<double> cache(cfg, cfg.n_h, 8);
  for (index_t i = 0; i < 7; ++i)
    mha_step(random_matrix<double>(1, cfg.d, rng), cache, p, cfg);
  CHECK(cache.element_count() == 2 * cfg.d_h * cfg.n_h * 7);
  CHECK(cache.element_count() == cache_elements_total(cfg, Variant::kMha, 7));
}

TEST_CASE("gqa with one group equals mqa") {
  AttentionConfig cfg = AttentionConfig::make(32, 4, 1);
  cfg.g = 1;
  Rng rng(6);
  DenseAttnParams<double> p = make_dense_params<double>(cfg, 1, rng);
  MatrixD x = random_matrix<double>(9, cfg.d, rng);
  const auto mask = causal_mask<double>(9);
  MatrixD a = gqa_forward_train(x, p, mask, cfg);
  MatrixD b = mqa_forward_train(x, p, mask, cfg);
  CHECK(max_abs_diff(a, b) == 0.0);  // same code path by definition
}

TEST_CASE("gqa with n_h groups reproduces mha") {
  AttentionConfig cfg = AttentionConfig::make(32, 4, 1);
  cfg.g = 4;
  Rng rng(7);
  DenseAttnParams<double> p = make_dense_params<double>(cfg, cfg.n_h, rng);
  MatrixD x = random_matrix<double>(11, cfg.d, rng);
  const auto mask = causal_mask<double>(11);
  MatrixD a = gqa_forward_train(x, p, mask, cfg);
  MatrixD b = mha_forward_train(x, p, mask, cfg);
  CHECK(max_abs_diff(a, b) < 1e-12);
}

TEST_CASE("gqa cache row width is g*d_h") {
  AttentionConfig cfg = AttentionConfig::make(32, 4, 1);
  cfg.g = 2;
  Rng rng(8);
  DenseAttnParams<double> p = make_dense_params<double>(cfg, cfg.g, rng);
  DenseKVCache<double> cache(cfg, cfg.g, 4);
  gqa_step(random_matrix<double>(1, cfg.d, rng), cache, p, cfg);
  CHECK(cache.keys().cols() == cfg.g * cfg.d_h);
  CHECK(cache.values().cols() == cfg.g * cfg.d_h);
}

TEST_CASE("invalid group count rejected") {
  AttentionConfig cfg = AttentionConfig::make(32, 4, 1);
  cfg.g = 3;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
}

TEST_CASE("mla train equals step replay and caches latents") {
  Rng rng(9);
  for (index_t trial = 0; trial < 5; ++trial) {
    const index_t seq_len = 1 + static_cast<index_t>(rng.next_below(33));
    AttentionConfig cfg = AttentionConfig::make(32, 4, 1);
    MlaParams<double> p = make_mla_params<double>(cfg, rng);
    MatrixD x = random_matrix<double>(seq_len, cfg.d, rng);
    MatrixD train = mla_forward_train(x, p, causal_mask<double>(seq_len), cfg);
    const AbsorbedWeights<double> a = absorb(p, cfg);
    LatentKVCache<double> cache(cfg, seq_len);
    for (index_t i = 0; i < seq_len; ++i) {
      MatrixD yi = mla_step(row_of(x, i), cache, p, a, cfg);
      CHECK(max_abs_diff(yi, row_of(train, i)) < 1e-10);
      CHECK(cache.step == i + 1);
      CHECK(cache.latent_rows().cols() == cfg.r);
    }
    CHECK(cache.element_count() == seq_len * (cfg.r + cfg.d_h_rope));
  }
}

TEST_CASE("mla per-token cache elements are (r + d_h_rope) = 4.5 d_h at defaults") {
  AttentionConfig cfg = AttentionConfig::make(512, 8, 1);
  CHECK(cfg.r == 4 * cfg.d_h);
  CHECK(cfg.d_h_rope == cfg.d_h / 2);
  CHECK(cache_elements_per_token(cfg, Variant::kMla) ==
        doctest::Approx(4.5 * cfg.d_h * cfg.layers));
}

TEST_CASE("mla single token attends to itself") {
  AttentionConfig cfg = AttentionConfig::make(16, 2, 1);
  Rng rng(10);
  MlaParams<double> p = make_mla_params<double>(cfg, rng);
  MatrixD x = random_matrix<double>(1, cfg.d, rng);
  MatrixD y = mla_forward_train(x, p, causal_mask<double>(1), cfg);
  // softmax over one position: output = c W_V (per head) concat * W_O
  MatrixD c = latent(x, p);
  MatrixD want = matmul(matmul(c, p.w_v), p.w_o);
  CHECK(max_abs_diff(y, want) < 1e-12);
}
