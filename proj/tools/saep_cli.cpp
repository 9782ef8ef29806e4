// saep — projection, layer analysis, layer selection, benchmarking, gradient
// checking, and a synthetic training demo behind one executable.
//
// Exit codes: 0 success, 2 argument error, 3 format/IO error,
// 4 numeric/contract failure. Exactly one JSON document goes to stdout;
// diagnostics go to stderr. SAEP_THREADS caps worker threads.

#include <algorithm>
#include <chrono>
#include <cstdint>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "saep/checkpoint.hpp"
#include "saep/gradcheck.hpp"
#include "saep/grid_ops.hpp"
#include "saep/layer_analysis.hpp"
#include "saep/npy.hpp"
#include "saep/projector.hpp"
#include "saep/train.hpp"

namespace {

namespace fs = std::filesystem;

int exit_code_for(saep::Errc c) {
  switch (c) {
    case saep::Errc::arg:
      return 2;
    case saep::Errc::io:
    case saep::Errc::format:
    case saep::Errc::truncated:
      return 3;
    case saep::Errc::shape:
    case saep::Errc::config:
    case saep::Errc::numeric:
      return 4;
  }
  return 1;
}

nlohmann::json cost_to_json(const saep::CostReport& r) {
  return nlohmann::json{{"tokens_in", r.tokens_in},
                        {"tokens_out", r.tokens_out},
                        {"reduction_pct", r.reduction_pct},
                        {"downstream_attention_ratio", r.downstream_attention_ratio},
                        {"projector_flops", r.projector_flops}};
}

/// --features accepts one NPY (single level) or a directory whose *.npy files,
/// sorted by name, are the levels shallowest-first.
saep::MultiLevelFeatures load_features(const fs::path& path,
                                       const saep::SaepConfig& cfg) {
  std::vector<fs::path> files;
  if (fs::is_directory(path)) {
    try {
      for (const auto& entry : fs::directory_iterator(path))
        if (entry.is_regular_file() && entry.path().extension() == ".npy")
          files.push_back(entry.path());
    } catch (const fs::filesystem_error& e) {
      saep::fail(saep::Errc::io, std::string("cannot scan ") + path.string() +
                                     ": " + e.what());
    }
    std::sort(files.begin(), files.end());
    saep::require(!files.empty(), saep::Errc::io,
                  path.string() + " contains no .npy files");
  } else {
    files.push_back(path);
  }

  std::vector<saep::FeatureGrid> grids;
  std::vector<std::int64_t> ids;
  for (std::size_t i = 0; i < files.size(); ++i) {
    grids.push_back(
        saep::grid_from_sequence(saep::tensor_from_npy(files[i]), cfg.h, cfg.w));
    ids.push_back(static_cast<std::int64_t>(i) + 1);
  }
  return saep::MultiLevelFeatures(std::move(ids), std::move(grids));
}

int cmd_project(const std::string& features, const std::string& params_dir,
                const std::string& config_path, const std::string& out_path) {
  saep::SaepConfig cfg;
  saep::SaepParams params;
  if (!params_dir.empty()) {
    auto loaded = saep::load_checkpoint(params_dir);
    cfg = loaded.first;
    params = std::move(loaded.second);
    if (!config_path.empty()) {
      // An explicit --config must agree with the checkpoint's own.
      saep::SaepConfig given = saep::load_config(config_path);
      saep::require(saep::config_to_json(given) == saep::config_to_json(cfg),
                    saep::Errc::config,
                    "--config disagrees with the checkpoint's config.json");
    }
  } else {
    saep::require(!config_path.empty(), saep::Errc::arg,
                  "either --params or --config is required");
    cfg = saep::load_config(config_path);
    saep::Rng rng(cfg.seed);
    params = saep::saep_init(cfg, rng);
  }

  saep::MultiLevelFeatures feats = load_features(features, cfg);
  saep::Tensor tokens = saep::saep_forward(feats, params, cfg);
  saep::tensor_to_npy(tokens, out_path);
  std::cout << cost_to_json(saep::cost_report(cfg)).dump(2) << "\n";
  return 0;
}

int cmd_analyze_layers(const std::string& dumps, const std::string& out_path) {
  saep::LayerSimilarityReport rep = saep::build_report(dumps);
  nlohmann::json j = saep::report_to_json(rep);
  if (!out_path.empty())
    saep::detail::write_text_atomic(out_path, j.dump(2) + "\n");
  std::cout << j.dump(2) << "\n";
  return 0;
}

int cmd_select_layers(const std::string& report_path, std::int64_t k,
                      std::int64_t last) {
  saep::LayerSimilarityReport rep = saep::load_report(report_path);
  if (last == 0) last = rep.num_layers - 1;  // penultimate layer by default
  saep::LayerSelection sel = saep::select_layers(rep, k, last);
  std::cout << saep::selection_to_json(sel).dump(2) << "\n";
  return 0;
}

int cmd_bench(const saep::SaepConfig& cfg, std::int64_t iters) {
  saep::require(iters >= 1, saep::Errc::arg, "--iters must be >= 1");
  saep::Rng rng(cfg.seed);
  saep::SaepParams params = saep::saep_init(cfg, rng);
  std::vector<saep::FeatureGrid> grids;
  std::vector<std::int64_t> ids;
  for (std::int64_t lv = 0; lv < cfg.k; ++lv) {
    grids.emplace_back(saep::rand_uniform(rng, {cfg.h, cfg.w, cfg.c}, -1.0f, 1.0f));
    ids.push_back(lv + 1);
  }
  saep::MultiLevelFeatures feats(std::move(ids), std::move(grids));

  for (int i = 0; i < 5; ++i) saep::saep_forward(feats, params, cfg);
  std::vector<double> ms;
  ms.reserve(static_cast<std::size_t>(iters));
  for (std::int64_t i = 0; i < iters; ++i) {
    const auto t0 = std::chrono::steady_clock::now();
    saep::saep_forward(feats, params, cfg);
    const auto t1 = std::chrono::steady_clock::now();
    ms.push_back(std::chrono::duration<double, std::milli>(t1 - t0).count());
  }
  std::sort(ms.begin(), ms.end());
  const double median = ms[ms.size() / 2];
  const double p95 = ms[std::min(ms.size() - 1,
                                 static_cast<std::size_t>(0.95 * static_cast<double>(ms.size())))];

  nlohmann::json j = {{"iters", iters},
                      {"warmup", 5},
                      {"forward_ms", {{"median", median}, {"p95", p95}}},
                      {"cost", cost_to_json(saep::cost_report(cfg))}};
  std::cout << j.dump(2) << "\n";
  return 0;
}

int cmd_gradcheck(std::uint64_t seed, double eps) {
  saep::GradCheckReport rep = saep::gradcheck_suite(seed, eps);
  std::cout << saep::gradcheck_report_to_json(rep).dump(2) << "\n";
  return rep.all_pass() ? 0 : 4;
}

int cmd_train_demo(const saep::SaepConfig& cfg, const saep::TrainOptions& opt,
                   const std::string& trace_path) {
  saep::TrainResult res = saep::train_probe(cfg, opt);
  if (!trace_path.empty()) saep::write_trace_csv(trace_path, res.trace);

  double first_loss = 0.0, last_loss = 0.0;
  if (!res.trace.empty()) {
    first_loss = res.trace.front().loss;
    last_loss = res.trace.back().loss;
  }
  nlohmann::json j = {{"task", "quadrant"},
                      {"steps", opt.steps},
                      {"seed", opt.seed},
                      {"shuffle_tokens", opt.shuffle_tokens},
                      {"final_accuracy", res.accuracy},
                      {"first_step_loss", first_loss},
                      {"last_step_loss", last_loss}};
  std::cout << j.dump(2) << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"SAEP spatial-aware efficient projector toolkit"};
  app.require_subcommand(1);

  std::string features, params_dir, config_path, out_path, dumps, report_path;
  std::string trace_path;
  std::int64_t k = 5, last = 0, iters = 20;
  std::uint64_t seed = 0;
  double eps = 1e-3;

  saep::SaepConfig bench_cfg;
  bench_cfg.c = 64;
  bench_cfg.d = 128;

  saep::SaepConfig train_cfg;
  train_cfg.h = 8;
  train_cfg.w = 8;
  train_cfg.c = 8;
  train_cfg.k = 2;
  train_cfg.stride = 2;
  train_cfg.d = 16;

  saep::TrainOptions topt;

  // Config dimensions are spelled --h/--w/..., so help must not claim -h.
  app.set_help_flag("--help", "print help and exit");

  auto* project = app.add_subcommand("project", "Run the projector on feature dumps");
  project->add_option("--features", features, "NPY file or directory of per-level NPYs")
      ->required();
  project->add_option("--params", params_dir, "checkpoint directory");
  project->add_option("--config", config_path, "config JSON");
  project->add_option("--out", out_path, "output NPY path")->required();

  auto* analyze = app.add_subcommand("analyze-layers",
                                     "Intra/inter layer similarity over dumps");
  analyze->add_option("--dumps", dumps, "directory of per-image layer dumps")
      ->required();
  analyze->add_option("--out", out_path, "report JSON path");

  auto* select = app.add_subcommand("select-layers", "Pick K encoder layers");
  select->add_option("--report", report_path, "similarity report JSON")->required();
  select->add_option("--k", k, "number of layers to select");
  select->add_option("--last", last, "last usable layer (default: L-1)");

  auto* bench = app.add_subcommand("bench", "Forward-latency benchmark");
  bench->add_option("--h", bench_cfg.h);
  bench->add_option("--w", bench_cfg.w);
  bench->add_option("--c", bench_cfg.c);
  bench->add_option("--k", bench_cfg.k);
  bench->add_option("--c-hid", bench_cfg.c_hid);
  bench->add_option("--stride", bench_cfg.stride);
  bench->add_option("--d", bench_cfg.d);
  bench->add_option("--iters", iters);

  auto* gradcheck = app.add_subcommand("gradcheck", "Finite-difference gradient suite");
  gradcheck->add_option("--seed", seed);
  gradcheck->add_option("--eps", eps);

  auto* train = app.add_subcommand("train-demo", "Synthetic spatial-task training");
  std::string task = "quadrant";
  bool shuffle = false;
  train->add_option("--task", task)->check(CLI::IsMember({"quadrant"}));
  train->add_option("--steps", topt.steps);
  train->add_option("--seed", topt.seed);
  train->add_option("--batch", topt.batch);
  train->add_option("--lr", topt.lr);
  train->add_option("--eval-samples", topt.eval_samples);
  train->add_flag("--shuffle-tokens", shuffle,
                  "permute token order before the probe (ablation)");
  train->add_option("--trace-out", trace_path, "loss trace CSV path");
  train->add_option("--h", train_cfg.h);
  train->add_option("--w", train_cfg.w);
  train->add_option("--c", train_cfg.c);
  train->add_option("--k", train_cfg.k);
  train->add_option("--c-hid", train_cfg.c_hid);
  train->add_option("--stride", train_cfg.stride);
  train->add_option("--d", train_cfg.d);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);  // --help
    app.exit(e);
    return 2;
  }

  try {
    if (project->parsed())
      return cmd_project(features, params_dir, config_path, out_path);
    if (analyze->parsed()) return cmd_analyze_layers(dumps, out_path);
    if (select->parsed()) return cmd_select_layers(report_path, k, last);
    if (bench->parsed()) return cmd_bench(bench_cfg, iters);
    if (gradcheck->parsed()) return cmd_gradcheck(seed, eps);
    if (train->parsed()) {
      topt.shuffle_tokens = shuffle;
      return cmd_train_demo(train_cfg, topt, trace_path);
    }
  } catch (const saep::Error& e) {
    std::cerr << e.code_name() << ": " << e.what() << "\n";
    return exit_code_for(e.code());
  } catch (const std::exception& e) {
    std::cerr << "E_IO: " << e.what() << "\n";
    return 3;
  }
  return 2;
}
