// SPDX-License-Identifier: Apache-2.0
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "mtla/trainer.hpp"

using namespace mtla;

namespace {

DecoderConfig small_config(Variant v, index_t s = 2) {
  DecoderConfig cfg;
  cfg.vocab = 16;
  cfg.d = 32;
  cfg.n_layers = 1;
  cfg.ffn_dim = 64;
  cfg.max_len = 32;
  cfg.seed = 5;
  cfg.variant = v;
  cfg.attn = AttentionConfig::make(32, 4, s, 1, v == Variant::kGqa ? 2 : 0);
  if (v == Variant::kMqa) cfg.attn.g = 1;
  return cfg;
}

}  // namespace

TEST_CASE("parameter count is a deterministic function of the config") {
  DecoderConfig cfg = DecoderConfig::make(Variant::kMtla, 2, 1);
  Decoder<double> m(cfg);
  // embedding + per-layer (attention + ffn + norms) + output head
  const index_t d = cfg.d, r = cfg.attn.r, nh = cfg.attn.n_h, dh = cfg.attn.d_h;
  const index_t dhr = cfg.attn.d_h_rope, hyp = cfg.attn.d_hyper, ffn = cfg.ffn_dim;
  const index_t attn = d * (nh * dh) + d * r + 2 * r + 2 * r * (nh * dh) +
                       (nh * dh) * d + d * (nh * dhr) + r * dhr + 2 * r * hyp;
  const index_t layer = attn + 2 * d + d * ffn + ffn + ffn * d + d + 2 * d;
  const index_t want = cfg.vocab * d + cfg.n_layers * layer + d * cfg.vocab + cfg.vocab;
  CHECK(m.param_count() == want);
}

TEST_CASE("same seed gives bit-identical parameters") {
  DecoderConfig cfg = DecoderConfig::make(Variant::kMtla, 2, 42);
  Decoder<double> a(cfg), b(cfg);
  auto pa = a.named_params(), pb = b.named_params();
  REQUIRE(pa.size() == pb.size());
  for (std::size_t i = 0; i < pa.size(); ++i) CHECK(*pa[i].second == *pb[i].second);
}

TEST_CASE("forward produces finite logits for every variant") {
  for (Variant v : {Variant::kMha, Variant::kMqa, Variant::kGqa, Variant::kMla,
                    Variant::kMtla}) {
    Decoder<double> m(small_config(v));
    MatrixD logits = m.forward({1, 2, 3, 4, 5, 6, 7, 2});
    CHECK(logits.rows() == 8);
    CHECK(logits.cols() == 16);
    CHECK(logits.all_finite());
  }
}

TEST_CASE("copy task batch structure") {
  Rng rng(7);
  CopyBatch b = copy_task_batch(rng, 4, 5, 16, 32);
  CHECK(b.inputs.size() == 4);
  for (std::size_t s = 0; s < 4; ++s) {
    const auto& in = b.inputs[s];
    const auto& tgt = b.targets[s];
    const auto& act = b.active[s];
    CHECK(in.size() == 10);  // 2*len
    CHECK(in[5] == kSepToken);
    for (index_t i = 0; i < 5; ++i) {
      CHECK(tgt[static_cast<std::size_t>(5 + i)] == in[static_cast<std::size_t>(i)]);
      CHECK(act[static_cast<std::size_t>(5 + i)] == 1);
    }
    for (index_t i = 0; i < 5; ++i) CHECK(act[static_cast<std::size_t>(i)] == 0);
    for (index_t t : in) {
      CHECK(t >= 0);
      CHECK(t < 16);
    }
  }
  // deterministic for a fixed seed
  Rng rng2(7);
  CopyBatch b2 = copy_task_batch(rng2, 4, 5, 16, 32);
  CHECK(b.inputs == b2.inputs);
  CHECK_THROWS_AS(copy_task_batch(rng, 1, 16, 16, 32), ConfigError);
}

TEST_CASE("cross entropy of near-uniform logits is ln(vocab) within 2 percent") {
  Rng rng(8);
  const index_t vocab = 32, rows = 64;
  MatrixD logits = random_matrix<double>(rows, vocab, rng, -1e-4, 1e-4);
  std::vector<index_t> targets;
  std::vector<char> active;
  for (index_t i = 0; i < rows; ++i) {
    targets.push_back(static_cast<index_t>(rng.next_below(vocab)));
    active.push_back(1);
  }
  EagerEngine<double> eng;
  const double loss = eng.cross_entropy(logits, targets, active)(0, 0);
  CHECK(loss == doctest::Approx(std::log(32.0)).epsilon(0.02));
}

TEST_CASE("initial model loss is near ln(vocab)") {
  DecoderConfig cfg = DecoderConfig::make(Variant::kMtla, 2, 3);
  Decoder<double> m(cfg);
  Rng rng(9);
  CopyBatch b = copy_task_batch(rng, 4, 16, cfg.vocab, cfg.max_len);
  double loss = 0;
  EagerEngine<double> eng;
  for (std::size_t s = 0; s < b.inputs.size(); ++s)
    loss += eng.cross_entropy(m.forward(b.inputs[s]), b.targets[s], b.active[s])(0, 0);
  loss /= 4;
  CHECK(loss == doctest::Approx(std::log(32.0)).epsilon(0.12));
}

TEST_CASE("zero learning rate leaves parameters bit-identical") {
  DecoderConfig cfg = small_config(Variant::kMtla);
  Decoder<double> m(cfg);
  std::vector<MatrixD> before;
  for (auto& [name, p] : m.named_params()) before.push_back(*p);
  TrainOptions topts;
  topts.lr = 0.0;
  topts.batch = 2;
  topts.copy_len = 4;
  TrainRun<double> run(m, topts, 11);
  CopyBatch b = copy_task_batch(run.rng, 2, 4, cfg.vocab, cfg.max_len);
  train_step(m, b, run);
  auto after = m.named_params();
  for (std::size_t i = 0; i < after.size(); ++i) CHECK(*after[i].second == before[i]);
}

TEST_CASE("fifty steps on one repeated batch drive the loss down") {
  DecoderConfig cfg = small_config(Variant::kMtla);
  Decoder<double> m(cfg);
  TrainOptions topts;
  topts.batch = 4;
  topts.copy_len = 6;
  topts.warmup_steps = 10;
  TrainRun<double> run(m, topts, 12);
  CopyBatch b = copy_task_batch(run.rng, 4, 6, cfg.vocab, cfg.max_len);
  double first = 0, last = 0;
  for (int i = 0; i < 50; ++i) {
    const double loss = train_step(m, b, run);
    if (i == 0) first = loss;
    last = loss;
  }
  CHECK(last < first * 0.5);
  CHECK(run.step == 50);
  CHECK(run.loss_history.size() == 50);
}

TEST_CASE("identical seeds give identical loss traces") {
  for (int rep = 0; rep < 2; ++rep) {
    DecoderConfig cfg = small_config(Variant::kMtla);
    static std::vector<double> reference;
    Decoder<double> m(cfg);
    TrainOptions topts;
    topts.batch = 2;
    topts.copy_len = 4;
    TrainRun<double> run(m, topts, 13);
    for (int i = 0; i < 5; ++i) {
      CopyBatch b = copy_task_batch(run.rng, 2, 4, cfg.vocab, cfg.max_len);
      train_step(m, b, run);
    }
    if (rep == 0)
      reference = run.loss_history;
    else
      CHECK(run.loss_history == reference);
  }
}

TEST_CASE("cached greedy decoding equals full-recompute greedy decoding") {
  Rng prompt_rng(21);
  for (Variant v : {Variant::kMha, Variant::kMqa, Variant::kGqa, Variant::kMla,
                    Variant::kMtla}) {
    for (index_t s : v == Variant::kMtla ? std::vector<index_t>{1, 2, 3}
                                         : std::vector<index_t>{1}) {
      Decoder<double> m(small_config(v, s));
      for (int trial = 0; trial < 3; ++trial) {
        std::vector<index_t> prompt;
        const index_t plen = 1 + static_cast<index_t>(prompt_rng.next_below(5));
        for (index_t i = 0; i < plen; ++i)
          prompt.push_back(static_cast<index_t>(prompt_rng.next_below(16)));
        const auto cached = greedy_decode(m, prompt, 9);
        const auto recomputed = greedy_decode_recompute(m, prompt, 9);
        CHECK(cached == recomputed);
      }
    }
  }
}

TEST_CASE("greedy decode determinism and empty continuation") {
  Decoder<double> m(small_config(Variant::kMtla));
  const std::vector<index_t> prompt{3, 1, 4};
  CHECK(greedy_decode(m, prompt, 0).empty());
  CHECK(greedy_decode(m, prompt, 6) == greedy_decode(m, prompt, 6));
  CHECK_THROWS_AS(greedy_decode(m, prompt, 1000), ShapeError);
}

TEST_CASE("divergent training raises a numeric error naming the step") {
  DecoderConfig cfg = small_config(Variant::kMha);
  Decoder<double> m(cfg);
  TrainOptions topts;
  topts.lr = 1e18;  // guaranteed blow-up
  topts.warmup_steps = 0;
  topts.clip_norm = 1e30;
  topts.batch = 2;
  topts.copy_len = 4;
  TrainRun<double> run(m, topts, 14);
  bool threw = false;
  for (int i = 0; i < 10 && !threw; ++i) {
    CopyBatch b = copy_task_batch(run.rng, 2, 4, cfg.vocab, cfg.max_len);
    try {
      train_step(m, b, run);
    } catch (const NumericError& e) {
      threw = true;
      CHECK(std::string(e.what()).find("step") != std::string::npos);
    }
  }
  CHECK(threw);
}

TEST_CASE("unknown variant names are rejected") {
  CHECK_THROWS_AS(variant_from_name("flash"), ConfigError);
  CHECK(variant_from_name("mtla") == Variant::kMtla);
}

TEST_CASE("invalid decoder configs are rejected") {
  DecoderConfig bad_vocab = small_config(Variant::kMtla);
  bad_vocab.vocab = 2;
  CHECK_THROWS_AS((Decoder<double>{bad_vocab}), ConfigError);
  DecoderConfig bad_d = small_config(Variant::kMtla);
  bad_d.d = 16;  // mismatch with attention config
  CHECK_THROWS_AS((Decoder<double>{bad_d}), ConfigError);
}
