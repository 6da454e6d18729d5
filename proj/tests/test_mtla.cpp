// SPDX-License-Identifier: Apache-2.0
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "mtla/decode.hpp"
#include "mtla/mtla.hpp"
#include "oracles.hpp"

using namespace mtla;

namespace {

MatrixD row_of(const MatrixD& m, index_t i) {
  MatrixD r(1, m.cols());
  for (index_t j = 0; j < m.cols(); ++j) r(0, j) = m(i, j);
  return r;
}

}  // namespace

TEST_CASE("latent: zero input gives zero rows, matches composition oracle") {
  AttentionConfig cfg = AttentionConfig::make(32, 4, 2);
  Rng rng(1);
  MtlaParams<double> p = make_mtla_params<double>(cfg, rng);

  MatrixD zero(3, cfg.d);
  MatrixD c0 = latent(zero, p);
  for (index_t i = 0; i < c0.size(); ++i) CHECK(std::abs(c0.data()[i]) < 1e-12);

  MatrixD x = random_matrix<double>(5, cfg.d, rng);
  MatrixD c = latent(x, p);
  std::vector<double> gain(p.ln_gain.data(), p.ln_gain.data() + cfg.r);
  std::vector<double> bias(p.ln_bias.data(), p.ln_bias.data() + cfg.r);
  MatrixD want = oracles::layer_norm_naive(matmul(x, p.w_r), gain, bias, 1e-5);
  CHECK(max_abs_diff(c, want) < 1e-12);

  for (index_t i = 0; i < c.rows(); ++i) {
    double mean = 0, var = 0;
    for (index_t j = 0; j < cfg.r; ++j) mean += c(i, j);
    mean /= cfg.r;
    for (index_t j = 0; j < cfg.r; ++j) var += (c(i, j) - mean) * (c(i, j) - mean);
    var /= cfg.r;
    CHECK(std::abs(mean) < 1e-10);
    CHECK(var == doctest::Approx(1.0).epsilon(1e-2));
  }
}

TEST_CASE("hyper_weight: zero latent gives 0.5 and output in (0,1)") {
  AttentionConfig cfg = AttentionConfig::make(32, 4, 2);
  Rng rng(2);
  MtlaParams<double> p = make_mtla_params<double>(cfg, rng);
  std::vector<double> zero(static_cast<std::size_t>(cfg.r), 0.0);
  CHECK(hyper_weight<double>(zero, 3, p) == 0.5);
  for (int trial = 0; trial < 25; ++trial) {
    std::vector<double> c(static_cast<std::size_t>(cfg.r));
    for (auto& v : c) v = rng.uniform(-30.0, 30.0);
    const double w = hyper_weight<double>(c, 1 + static_cast<index_t>(rng.next_below(60)), p);
    CHECK(w > 0.0);
    CHECK(w < 1.0);
  }
}

TEST_CASE("hyper_weight_matrix: replicated PE rows and scalar-path consistency") {
  AttentionConfig cfg = AttentionConfig::make(32, 4, 2);
  Rng rng(3);
  MtlaParams<double> p = make_mtla_params<double>(cfg, rng);
  const index_t seq_len = 9;
  MatrixD x = random_matrix<double>(seq_len, cfg.d, rng);
  MatrixD c = latent(x, p);
  MatrixD w = hyper_weight_matrix(c, cfg.s, p);
  CHECK(w.rows() == seq_len);
  CHECK(w.cols() == seq_len);
  for (index_t m = 1; m <= seq_len; ++m)
    for (index_t n = 1; n <= seq_len; ++n) {
      CHECK(w(m - 1, n - 1) > 0.0);
      CHECK(w(m - 1, n - 1) < 1.0);
      const double scalar = hyper_weight<double>(
          std::span<const double>(c.data() + (n - 1) * cfg.r,
                                  static_cast<std::size_t>(cfg.r)),
          (m + cfg.s - 1) / cfg.s, p);
      CHECK(std::abs(scalar - w(m - 1, n - 1)) < 1e-12);
    }
  // rows within one chunk share the PE input, hence identical rows
  for (index_t m = 1; m < seq_len; ++m)
    if ((m + cfg.s - 1) / cfg.s == (m + cfg.s) / cfg.s)
      for (index_t n = 0; n < seq_len; ++n) CHECK(w(m - 1, n) == w(m, n));
}

TEST_CASE("compress_train matches the per-chunk accumulation rule") {
  AttentionConfig cfg = AttentionConfig::make(32, 4, 2);
  Rng rng(4);
  MtlaParams<double> p = make_mtla_params<double>(cfg, rng);
  const index_t seq_len = 5;
  MatrixD x = random_matrix<double>(seq_len, cfg.d, rng);
  MatrixD c = latent(x, p);
  MatrixD w = hyper_weight_matrix(c, cfg.s, p);
  MatrixD chat = compress_train(c, w, cfg.s);
  CHECK(chat.rows() == seq_len);

  // row 1: w[1,1] * c_1 only
  for (index_t j = 0; j < cfg.r; ++j)
    CHECK(chat(0, j) == doctest::Approx(w(0, 0) * c(0, j)).epsilon(1e-12));
  // row 2 (chunk end, s=2): w[2,1] c_1 + w[2,2] c_2
  for (index_t j = 0; j < cfg.r; ++j)
    CHECK(chat(1, j) ==
          doctest::Approx(w(1, 0) * c(0, j) + w(1, 1) * c(1, j)).epsilon(1e-12));
  // direct loop oracle for every row
  for (index_t m = 1; m <= seq_len; ++m) {
    const index_t chunk = (m + cfg.s - 1) / cfg.s;
    for (index_t j = 0; j < cfg.r; ++j) {
      double acc = 0;
      for (index_t n = (chunk - 1) * cfg.s + 1; n <= m; ++n)
        acc += w(m - 1, n - 1) * c(n - 1, j);
      CHECK(std::abs(chat(m - 1, j) - acc) < 1e-10);
    }
  }
}

TEST_CASE("rope projections match composition oracles") {
  AttentionConfig cfg = AttentionConfig::make(32, 4, 2);
  Rng rng(5);
  MtlaParams<double> p = make_mtla_params<double>(cfg, rng);
  MatrixD x = random_matrix<double>(1, cfg.d, rng);
  MatrixD q = rope_queries(x, p, cfg.n_h);
  CHECK(max_abs_diff(q, matmul(x, p.w_qr)) < 1e-15);  // position 1: identity

  MatrixD x4 = random_matrix<double>(4, cfg.d, rng);
  MatrixD q4 = rope_queries(x4, p, cfg.n_h);
  const auto pos = iota_positions(4);
  MatrixD want =
      rope_rotate(matmul(x4, p.w_qr), std::span<const index_t>(pos), kRopeBase, cfg.n_h);
  CHECK(max_abs_diff(q4, want) < 1e-12);
  // per-head norms preserved
  MatrixD unrot = matmul(x4, p.w_qr);
  for (index_t i = 0; i < 4; ++i)
    for (index_t h = 0; h < cfg.n_h; ++h) {
      double a = 0, b = 0;
      for (index_t j = 0; j < cfg.d_h_rope; ++j) {
        a += unrot(i, h * cfg.d_h_rope + j) * unrot(i, h * cfg.d_h_rope + j);
        b += q4(i, h * cfg.d_h_rope + j) * q4(i, h * cfg.d_h_rope + j);
      }
      CHECK(std::abs(std::sqrt(a) - std::sqrt(b)) < 1e-9);
    }

  MatrixD c = latent(x4, p);
  MatrixD k = rope_keys(c, p);
  CHECK(k.cols() == cfg.d_h_rope);
  MatrixD wantk =
      rope_rotate(matmul(c, p.w_kr), std::span<const index_t>(pos), kRopeBase, 1);
  CHECK(max_abs_diff(k, wantk) < 1e-12);
}

TEST_CASE("default rope width is 32 at the full-scale dimensions") {
  AttentionConfig cfg = AttentionConfig::make(512, 8, 2);
  CHECK(cfg.d_h_rope == 32);
  CHECK(cfg.r == 256);
}

TEST_CASE("absorb: identity W_K slice leaves W_Q unchanged when r == d_h") {
  AttentionConfig cfg;
  cfg.d = 8;
  cfg.n_h = 1;
  cfg.d_h = 8;
  cfg.g = 1;
  cfg.r = 8;
  cfg.d_h_rope = 4;
  cfg.s = 2;
  cfg.validate();
  Rng rng(6);
  MtlaParams<double> p = make_mtla_params<double>(cfg, rng);
  p.w_k = MatrixD::identity(8);
  const AbsorbedWeights<double> a = absorb(p, cfg);
  CHECK(max_abs_diff(a.qk[0], p.w_q) < 1e-15);
}

TEST_CASE("train/infer equivalence over random shapes (double)") {
  Rng rng(7);
  for (index_t trial = 0; trial < 25; ++trial) {
    const index_t d_pick[] = {16, 32, 64};
    const index_t d = d_pick[rng.next_below(3)];
    const index_t n_h = rng.next_below(2) ? 4 : 2;
    const index_t s = 1 + static_cast<index_t>(rng.next_below(4));
    const index_t seq_len = 1 + static_cast<index_t>(rng.next_below(33));
    AttentionConfig cfg = AttentionConfig::make(d, n_h, s);
    MtlaParams<double> p = make_mtla_params<double>(cfg, rng);
    MatrixD x = random_matrix<double>(seq_len, d, rng);
    MatrixD train = train_forward(x, p, cfg);
    const AbsorbedWeights<double> a = absorb(p, cfg);
    MtlaCache<double> cache(cfg, seq_len);
    for (index_t i = 0; i < seq_len; ++i) {
      MatrixD yi = infer_step(row_of(x, i), cache, p, a, cfg);
      CHECK(max_abs_diff(yi, row_of(train, i)) < 1e-9);
      CHECK(cache.step == i + 1);
      CHECK(cache.rows == (i + 1 + s - 1) / s);
      CHECK(cache.in_progress() == ((i + 1) % s != 0));
    }
    if (s == 1) CHECK(cache.rows == seq_len);
  }
}

TEST_CASE("train/infer equivalence in single precision") {
  Rng rng(8);
  for (index_t trial = 0; trial < 10; ++trial) {
    const index_t s = 1 + static_cast<index_t>(rng.next_below(4));
    const index_t seq_len = 1 + static_cast<index_t>(rng.next_below(33));
    AttentionConfig cfg = AttentionConfig::make(32, 4, s);
    MtlaParams<float> p = make_mtla_params<float>(cfg, rng);
    MatrixF x = random_matrix<float>(seq_len, cfg.d, rng);
    MatrixF train = train_forward(x, p, cfg);
    const AbsorbedWeights<float> a = absorb(p, cfg);
    MtlaCache<float> cache(cfg, seq_len);
    for (index_t i = 0; i < seq_len; ++i) {
      MatrixF xi(1, cfg.d);
      for (index_t j = 0; j < cfg.d; ++j) xi(0, j) = x(i, j);
      MatrixF yi = infer_step(xi, cache, p, a, cfg);
      for (index_t j = 0; j < cfg.d; ++j)
        CHECK(std::abs(yi(0, j) - train(i, j)) < 1e-4f);
    }
  }
}

TEST_CASE("t = 1 attends to its own temporary slot for any s") {
  Rng rng(9);
  for (index_t s = 1; s <= 4; ++s) {
    AttentionConfig cfg = AttentionConfig::make(16, 2, s);
    MtlaParams<double> p = make_mtla_params<double>(cfg, rng);
    MatrixD x = random_matrix<double>(1, cfg.d, rng);
    MatrixD y = train_forward(x, p, cfg);
    // weight 1 on the only slot: output = (w_1 c_1) W_V concat * W_O
    MatrixD c = latent(x, p);
    const double w1 = hyper_weight<double>(
        std::span<const double>(c.data(), static_cast<std::size_t>(cfg.r)), 1, p);
    MatrixD chat = scale(c, w1);
    MatrixD want = matmul(matmul(chat, p.w_v), p.w_o);
    CHECK(max_abs_diff(y, want) < 1e-12);
  }
}

TEST_CASE("cache update rule: append at chunk start, accumulate inside") {
  AttentionConfig cfg = AttentionConfig::make(16, 2, 2);
  Rng rng(10);
  MtlaParams<double> p = make_mtla_params<double>(cfg, rng);
  const AbsorbedWeights<double> a = absorb(p, cfg);
  MtlaCache<double> cache(cfg, 8);
  MatrixD x = random_matrix<double>(5, cfg.d, rng);

  MatrixD c = latent(x, p);  // oracle latents (positions 1..5)
  auto weight_of = [&](index_t i) {
    return hyper_weight<double>(
        std::span<const double>(c.data() + (i - 1) * cfg.r,
                                static_cast<std::size_t>(cfg.r)),
        (i + cfg.s - 1) / cfg.s, p);
  };

  infer_step(row_of(x, 0), cache, p, a, cfg);
  CHECK(cache.rows == 1);
  for (index_t j = 0; j < cfg.r; ++j)
    CHECK(cache.c_hat()(0, j) == doctest::Approx(weight_of(1) * c(0, j)).epsilon(1e-12));

  infer_step(row_of(x, 1), cache, p, a, cfg);
  CHECK(cache.rows == 1);  // i=2 still chunk 1
  for (index_t j = 0; j < cfg.r; ++j)
    CHECK(cache.c_hat()(0, j) ==
          doctest::Approx(weight_of(1) * c(0, j) + weight_of(2) * c(1, j)).epsilon(1e-10));

  infer_step(row_of(x, 2), cache, p, a, cfg);
  CHECK(cache.rows == 2);
  infer_step(row_of(x, 3), cache, p, a, cfg);
  CHECK(cache.rows == 2);
  infer_step(row_of(x, 4), cache, p, a, cfg);
  CHECK(cache.rows == 3);  // ceil(5/2)
  CHECK(cache.element_count() == 3 * (cfg.r + cfg.d_h_rope));

  // completed chunk rows match the direct loop oracle
  for (index_t chunk = 1; chunk <= 2; ++chunk)
    for (index_t j = 0; j < cfg.r; ++j) {
      double acc = 0;
      for (index_t i = (chunk - 1) * cfg.s + 1; i <= chunk * cfg.s; ++i)
        acc += weight_of(i) * c(i - 1, j);
      CHECK(std::abs(cache.c_hat()(chunk - 1, j) - acc) < 1e-10);
    }
}

TEST_CASE("rope cache slot always holds the most recent rotation") {
  AttentionConfig cfg = AttentionConfig::make(16, 2, 3);
  Rng rng(11);
  MtlaParams<double> p = make_mtla_params<double>(cfg, rng);
  const AbsorbedWeights<double> a = absorb(p, cfg);
  MtlaCache<double> cache(cfg, 8);
  MatrixD x = random_matrix<double>(7, cfg.d, rng);
  MatrixD c = latent(x, p);
  MatrixD all_keys = rope_keys(c, p);  // row i-1 = k^R_i
  for (index_t i = 0; i < 7; ++i) {
    infer_step(row_of(x, i), cache, p, a, cfg);
    MatrixD rk = cache.rope_key_rows();
    for (index_t j = 0; j < cfg.d_h_rope; ++j)
      CHECK(rk(cache.rows - 1, j) == doctest::Approx(all_keys(i, j)).epsilon(1e-12));
    // completed chunks hold the rotation from their final step
    for (index_t chunk = 1; chunk < cache.rows; ++chunk)
      for (index_t j = 0; j < cfg.d_h_rope; ++j)
        CHECK(rk(chunk - 1, j) ==
              doctest::Approx(all_keys(chunk * cfg.s - 1, j)).epsilon(1e-12));
  }
}

TEST_CASE("merge weights bound the compressed row norm") {
  AttentionConfig cfg = AttentionConfig::make(32, 4, 4);
  Rng rng(12);
  MtlaParams<double> p = make_mtla_params<double>(cfg, rng);
  MatrixD x = random_matrix<double>(12, cfg.d, rng);
  MatrixD c = latent(x, p);
  MatrixD w = hyper_weight_matrix(c, cfg.s, p);
  MatrixD chat = compress_train(c, w, cfg.s);
  for (index_t m = 0; m < chat.rows(); ++m) {
    double norm_chat = 0;
    for (index_t j = 0; j < cfg.r; ++j) norm_chat += chat(m, j) * chat(m, j);
    const index_t chunk = (m + cfg.s) / cfg.s;
    double bound = 0;
    for (index_t n = (chunk - 1) * cfg.s; n <= m; ++n) {
      double norm_c = 0;
      for (index_t j = 0; j < cfg.r; ++j) norm_c += c(n, j) * c(n, j);
      bound += std::sqrt(norm_c);
    }
    CHECK(std::sqrt(norm_chat) <= bound + 1e-9);
  }
}

TEST_CASE("cache accounting closed forms") {
  AttentionConfig cfg = AttentionConfig::make(512, 8, 2, 9);
  CHECK(cache_elements_per_token(cfg, Variant::kMtla) == doctest::Approx(1296.0));
  CHECK(cache_elements_per_token(cfg, Variant::kMha) == doctest::Approx(9216.0));
  CHECK(cache_elements_per_token(cfg, Variant::kMla) ==
        doctest::Approx(2.0 * cache_elements_per_token(cfg, Variant::kMtla)));
  // s=2 default lands near MQA's 2 d_h l
  CHECK(cache_elements_per_token(cfg, Variant::kMtla) ==
        doctest::Approx(2.25 * cfg.d_h * cfg.layers));
  CHECK(cache_elements_per_token(cfg, Variant::kMqa) ==
        doctest::Approx(2.0 * cfg.d_h * cfg.layers));
  AttentionConfig s1 = AttentionConfig::make(512, 8, 1, 9);
  CHECK(cache_elements_per_token(s1, Variant::kMtla) ==
        doctest::Approx(cache_elements_per_token(s1, Variant::kMla)));
}

TEST_CASE("degenerate empty sequence rejected") {
  AttentionConfig cfg = AttentionConfig::make(16, 2, 2);
  Rng rng(13);
  MtlaParams<double> p = make_mtla_params<double>(cfg, rng);
  MatrixD empty(0, cfg.d);
  CHECK_THROWS_AS(train_forward(empty, p, cfg), ShapeError);
}
