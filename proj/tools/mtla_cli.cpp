// SPDX-License-Identifier: Apache-2.0
//
// Command-line front end: property verification, decode
// micro-benchmarks, cache accounting reports, and toy training.
//
// Exit codes: 0 success, 1 property/training failure, 2 usage error,
// 3 I/O error.

#include <CLI11.hpp>

#include <chrono>
#include <cstdio>
#include <ctime>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "mtla/bench.hpp"
#include "mtla/checkpoint.hpp"
#include "mtla/trainer.hpp"
#include "mtla/verify.hpp"

namespace {

int run_verify(const mtla::VerifyOptions& opts) {
  const auto results = mtla::run_verify_suite(opts);
  bool all_pass = true;
  for (const auto& r : results) {
    std::printf("%s %s max_err=%.3g\n", r.pass ? "PASS" : "FAIL", r.name.c_str(),
                r.max_err);
    all_pass = all_pass && r.pass;
  }
  return all_pass ? 0 : 1;
}

template <typename T>
int run_bench(const mtla::BenchOptions& opts, const std::string& out_path) {
  const auto reports = mtla::run_bench<T>(opts);
  if (!reports.empty())
    std::fprintf(stderr, "# bench timestamp=%s seed=%llu precision=%s\n",
                 reports[0].timestamp.c_str(),
                 static_cast<unsigned long long>(reports[0].seed),
                 sizeof(T) == 4 ? "single" : "double");
  std::ostringstream csv;
  csv << mtla::kBenchCsvHeader << "\n";
  for (const auto& r : reports) csv << mtla::to_csv_row(r) << "\n";
  if (out_path.empty()) {
    std::fputs(csv.str().c_str(), stdout);
  } else {
    std::ofstream os(out_path, std::ios::binary | std::ios::trunc);
    if (!os) {
      std::fprintf(stderr, "error: cannot open %s for writing\n", out_path.c_str());
      return 3;
    }
    os << csv.str();
    os.flush();
    if (!os) {
      std::fprintf(stderr, "error: write failed for %s\n", out_path.c_str());
      return 3;
    }
  }
  for (const auto& r : reports) {
    if (r.cache_elems_measured != r.cache_elems_analytic) {
      std::fprintf(stderr, "FAIL cache_accounting variant=%s T=%lld measured=%lld analytic=%lld\n",
                   mtla::variant_name(r.variant), static_cast<long long>(r.probe_len),
                   static_cast<long long>(r.cache_elems_measured),
                   static_cast<long long>(r.cache_elems_analytic));
      return 1;
    }
  }
  return 0;
}

int run_cache_report(mtla::index_t d_h, mtla::index_t n_h, mtla::index_t layers,
                     const std::vector<mtla::index_t>& s_list,
                     const std::vector<mtla::index_t>& g_list) {
  using namespace mtla;
  AttentionConfig base = AttentionConfig::make(d_h * n_h, n_h, 1, layers);
  const double mha = cache_elements_per_token(base, Variant::kMha);
  std::printf("variant,params,elems_per_token,ratio_vs_mha\n");
  auto row = [&](const std::string& name, const std::string& params, double elems) {
    std::printf("%s,%s,%.2f,%.2f\n", name.c_str(), params.c_str(), elems, mha / elems);
  };
  std::ostringstream dims;
  dims << "d_h=" << d_h << " n_h=" << n_h << " l=" << layers;
  row("mha", dims.str(), mha);
  row("mqa", dims.str(), cache_elements_per_token(base, Variant::kMqa));
  for (index_t g : g_list) {
    AttentionConfig cfg = base;
    cfg.g = g;
    cfg.validate();
    row("gqa", dims.str() + " g=" + std::to_string(g),
        cache_elements_per_token(cfg, Variant::kGqa));
  }
  row("mla", dims.str(), cache_elements_per_token(base, Variant::kMla));
  for (index_t s : s_list) {
    AttentionConfig cfg = AttentionConfig::make(d_h * n_h, n_h, s, layers);
    row("mtla", dims.str() + " s=" + std::to_string(s),
        cache_elements_per_token(cfg, Variant::kMtla));
  }
  return 0;
}

mtla::DecoderConfig load_config_file(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw mtla::IoError("cannot open config file " + path);
  std::stringstream ss;
  ss << is.rdbuf();
  return mtla::config_from_text(ss.str());
}

template <typename T>
int run_train_toy(mtla::Variant variant, mtla::index_t s, mtla::index_t steps,
                  std::uint64_t seed, const std::string& checkpoint,
                  const mtla::TrainOptions& topts, const std::string& config_path) {
  using namespace mtla;
  DecoderConfig cfg;
  if (config_path.empty()) {
    cfg = DecoderConfig::make(variant, s, seed);
  } else {
    cfg = load_config_file(config_path);
    cfg.seed = seed;
  }
  Decoder<T> model(cfg);
  TrainRun<T> run(model, topts, seed + 1);
  double acc = 0.0;
  try {
    acc = train_copy_task(model, run, steps, 0.99, [](index_t step, double loss) {
      std::printf("%lld,%.6f\n", static_cast<long long>(step), loss);
    });
  } catch (const NumericError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  std::printf("final_accuracy=%.4f\n", acc);
  std::printf("steps_run=%lld\n", static_cast<long long>(run.step));
  if (!checkpoint.empty()) save_checkpoint(model, checkpoint);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Attention variants with temporal latent KV-cache compression"};
  app.require_subcommand(1);
  app.fallthrough();

  std::uint64_t seed = 1;
  std::string precision = "double";
  app.add_option("--seed", seed, "Run seed");
  app.add_option("--precision", precision, "single or double")
      ->check(CLI::IsMember({"single", "double"}));

  auto* verify = app.add_subcommand("verify", "Run the property suite");
  mtla::index_t trials = 60;
  bool inject_mask_defect = false;
  verify->add_option("--trials", trials, "Equivalence trials");
  verify->add_flag("--inject-mask-defect", inject_mask_defect,
                   "Test hook: corrupt the training-side mask");

  auto* bench = app.add_subcommand("bench", "Per-step decode latency and cache accounting");
  std::string variant_name = "mtla";
  mtla::index_t s = 2, d = 512, heads = 8, layers = 1, g = 0, reps = 5;
  std::vector<mtla::index_t> probe_lengths{128, 256, 512, 1024, 2048};
  std::string out_path;
  bench->add_option("--variant", variant_name, "mha|mqa|gqa|mla|mtla");
  bench->add_option("--s", s, "Temporal compression ratio (mtla)");
  bench->add_option("--d", d, "Model dimension");
  bench->add_option("--heads", heads, "Head count");
  bench->add_option("--layers", layers, "Layer count for accounting");
  bench->add_option("--g", g, "GQA group count");
  bench->add_option("--probe-lengths", probe_lengths, "Decode lengths to probe");
  bench->add_option("--reps", reps, "Repetitions per probe length (>= 3)");
  bench->add_option("--out", out_path, "CSV output path (default: stdout)");

  auto* train = app.add_subcommand("train-toy", "Train the copy-task toy model");
  std::string train_variant = "mtla";
  mtla::index_t train_s = 2, train_steps = 3000;
  std::string checkpoint, config_path;
  mtla::TrainOptions topts;
  train->add_option("--variant", train_variant, "mha|mqa|gqa|mla|mtla");
  train->add_option("--s", train_s, "Temporal compression ratio (mtla)");
  train->add_option("--steps", train_steps, "Max optimizer steps");
  train->add_option("--checkpoint", checkpoint, "Checkpoint output path");
  train->add_option("--config", config_path, "key = value model config file");
  train->add_option("--lr", topts.lr, "Learning rate");
  train->add_option("--batch", topts.batch, "Batch size");

  auto* report = app.add_subcommand("cache-report", "Per-token cache element table");
  mtla::index_t rep_dh = 64, rep_nh = 8, rep_layers = 9;
  std::vector<mtla::index_t> s_list{1, 2, 3, 4};
  std::vector<mtla::index_t> g_list{2, 4};
  report->add_option("--d_h", rep_dh, "Per-head dimension");
  report->add_option("--n_h", rep_nh, "Head count");
  report->add_option("--layers", rep_layers, "Layer count");
  report->add_option("--s-list", s_list, "Temporal ratios to report");
  report->add_option("--g-list", g_list, "GQA group counts to report");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (*verify) {
      mtla::VerifyOptions opts;
      opts.seed = seed;
      opts.equivalence_trials = trials;
      opts.corrupt_stride_mask = inject_mask_defect;
      return run_verify(opts);
    }
    if (*bench) {
      mtla::BenchOptions opts;
      opts.variant = mtla::variant_from_name(variant_name);
      opts.cfg = mtla::AttentionConfig::make(d, heads, s, layers, g);
      opts.probe_lengths = probe_lengths;
      opts.reps = reps < 3 ? 3 : reps;
      opts.seed = seed;
      return precision == "single" ? run_bench<float>(opts, out_path)
                                   : run_bench<double>(opts, out_path);
    }
    if (*train) {
      return precision == "single"
                 ? run_train_toy<float>(mtla::variant_from_name(train_variant), train_s,
                                        train_steps, seed, checkpoint, topts, config_path)
                 : run_train_toy<double>(mtla::variant_from_name(train_variant), train_s,
                                         train_steps, seed, checkpoint, topts, config_path);
    }
    if (*report) return run_cache_report(rep_dh, rep_nh, rep_layers, s_list, g_list);
  } catch (const mtla::IoError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 3;
  } catch (const mtla::ConfigError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 2;
}
