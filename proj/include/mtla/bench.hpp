// SPDX-License-Identifier: Apache-2.0
#pragma once

// Decode micro-benchmark: measures median per-step latency near each
// probe length and checks the measured cache size against the closed
// forms. Runs single-threaded; every repetition replays the same
// seeded inputs. In debug builds each timed step is asserted not to
// allocate.

#include <algorithm>
#include <cassert>
#include <chrono>
#include <ctime>
#include <sstream>
#include <string>
#include <vector>

#include "mtla/decode.hpp"

namespace mtla {

inline constexpr const char* kBenchCsvHeader =
    "variant,s,T,median_step_ns,cache_elems_measured,cache_elems_analytic,cache_bytes";

struct BenchOptions {
  Variant variant = Variant::kMtla;
  AttentionConfig cfg = AttentionConfig::make(512, 8, 2, 1);
  std::vector<index_t> probe_lengths{128, 256, 512, 1024, 2048};
  index_t reps = 5;          // >= 3
  index_t tail_window = 32;  // steps near the probe length that get timed
  std::uint64_t seed = 1;
};

struct BenchReport {
  Variant variant;
  index_t s;
  index_t probe_len;
  double median_step_ns;
  index_t cache_elems_measured;
  index_t cache_elems_analytic;
  index_t cache_bytes;
  std::uint64_t seed;
  std::string timestamp;
};

inline std::string to_csv_row(const BenchReport& r) {
  std::ostringstream os;
  os << variant_name(r.variant) << ',' << r.s << ',' << r.probe_len << ','
     << static_cast<long long>(r.median_step_ns) << ',' << r.cache_elems_measured << ','
     << r.cache_elems_analytic << ',' << r.cache_bytes;
  return os.str();
}

namespace bench_detail {

inline std::string now_string() {
  const std::time_t t = std::time(nullptr);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%S", std::localtime(&t));
  return buf;
}

/// Per-layer decode state for one variant, independent of the toy model.
template <typename T>
struct LayerStack {
  LayerStack(const BenchOptions& o, index_t max_steps, Rng& rng) : opts(o) {
    const AttentionConfig& cfg = o.cfg;
    for (index_t l = 0; l < cfg.layers; ++l) {
      switch (o.variant) {
        case Variant::kMha:
          dense_params.push_back(make_dense_params<T>(cfg, cfg.n_h, rng));
          dense.emplace_back(cfg, cfg.n_h, max_steps);
          break;
        case Variant::kGqa:
          dense_params.push_back(make_dense_params<T>(cfg, cfg.g, rng));
          dense.emplace_back(cfg, cfg.g, max_steps);
          break;
        case Variant::kMqa:
          dense_params.push_back(make_dense_params<T>(cfg, 1, rng));
          dense.emplace_back(cfg, 1, max_steps);
          break;
        case Variant::kMla:
          mla_params.push_back(make_mla_params<T>(cfg, rng));
          absorbed.push_back(absorb(mla_params.back(), cfg));
          mla.emplace_back(cfg, max_steps);
          break;
        case Variant::kMtla:
          mtla_params.push_back(make_mtla_params<T>(cfg, rng));
          absorbed.push_back(absorb(mtla_params.back(), cfg));
          mtla.emplace_back(cfg, max_steps);
          break;
      }
    }
  }

  void step(std::span<const T> x, std::span<T> y) {
    for (std::size_t l = 0; l < layer_count(); ++l) {
      switch (opts.variant) {
        case Variant::kMha:
        case Variant::kGqa:
        case Variant::kMqa:
          dense_step_into(x, y, dense[l], dense_params[l], opts.cfg);
          break;
        case Variant::kMla:
          mla_step_into(x, y, mla[l], mla_params[l], absorbed[l], opts.cfg);
          break;
        case Variant::kMtla:
          infer_step_into(x, y, mtla[l], mtla_params[l], absorbed[l], opts.cfg);
          break;
      }
    }
  }

  std::size_t layer_count() const {
    return std::max({dense.size(), mla.size(), mtla.size()});
  }

  index_t cache_elements() const {
    index_t n = 0;
    for (const auto& c : dense) n += c.element_count();
    for (const auto& c : mla) n += c.element_count();
    for (const auto& c : mtla) n += c.element_count();
    return n;
  }

  const BenchOptions& opts;
  std::vector<DenseAttnParams<T>> dense_params;
  std::vector<MlaParams<T>> mla_params;
  std::vector<MtlaParams<T>> mtla_params;
  std::vector<AbsorbedWeights<T>> absorbed;
  std::vector<DenseKVCache<T>> dense;
  std::vector<LatentKVCache<T>> mla;
  std::vector<MtlaCache<T>> mtla;
};

}  // namespace bench_detail

template <typename T>
std::vector<BenchReport> run_bench(const BenchOptions& opts) {
  opts.cfg.validate();
  if (opts.reps < 3) throw ConfigError("bench: reps must be >= 3");
  std::vector<BenchReport> out;
  const std::string stamp = bench_detail::now_string();
  for (index_t probe : opts.probe_lengths) {
    std::vector<double> samples;
    index_t measured = -1;
    for (index_t rep = 0; rep < opts.reps; ++rep) {
      Rng rng(opts.seed + static_cast<std::uint64_t>(rep));
      bench_detail::LayerStack<T> stack(opts, probe, rng);
      Matrix<T> inputs = random_matrix<T>(probe, opts.cfg.d, rng);
      std::vector<T> y(static_cast<std::size_t>(opts.cfg.d));
      const index_t window = std::min<index_t>(opts.tail_window, probe);
      for (index_t i = 0; i < probe; ++i) {
        std::span<const T> x(inputs.data() + i * opts.cfg.d,
                             static_cast<std::size_t>(opts.cfg.d));
        if (i >= probe - window) {
#ifndef NDEBUG
          const auto allocs_before = AllocCounter::count().load();
#endif
          const auto t0 = std::chrono::steady_clock::now();
          stack.step(x, std::span<T>(y));
          const auto t1 = std::chrono::steady_clock::now();
#ifndef NDEBUG
          assert(AllocCounter::count().load() == allocs_before &&
                 "decode step must not allocate");
#endif
          samples.push_back(
              std::chrono::duration<double, std::nano>(t1 - t0).count());
        } else {
          stack.step(x, std::span<T>(y));
        }
      }
      measured = stack.cache_elements();
    }
    std::sort(samples.begin(), samples.end());
    BenchReport r;
    r.variant = opts.variant;
    r.s = opts.variant == Variant::kMtla ? opts.cfg.s : 1;
    r.probe_len = probe;
    r.median_step_ns = samples[samples.size() / 2];
    r.cache_elems_measured = measured;
    r.cache_elems_analytic = cache_elements_total(opts.cfg, opts.variant, probe);
    r.cache_bytes = measured * static_cast<index_t>(sizeof(T));
    r.seed = opts.seed;
    r.timestamp = stamp;
    out.push_back(std::move(r));
  }
  return out;
}

}  // namespace mtla
