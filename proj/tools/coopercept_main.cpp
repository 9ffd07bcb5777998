// Command-line front end: dataset generation, training, evaluation,
// experiment sweeps, attention export, and the sparse-vs-dense benchmark.
#include <cstdint>
#include <exception>
#include <filesystem>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "coopercept/bench.hpp"
#include "coopercept/config.hpp"
#include "coopercept/distill.hpp"
#include "coopercept/eval.hpp"
#include "coopercept/lidar_sim.hpp"
#include "coopercept/logging.hpp"
#include "coopercept/pipeline.hpp"
#include "coopercept/rng.hpp"
#include "coopercept/strategies.hpp"

#ifdef _OPENMP
#include <omp.h>
#endif

namespace fs = std::filesystem;
using namespace coopercept;

namespace {

// Shared flag values; empty string / negative value means "not given".
struct Opts {
  std::string config;
  std::string preset;
  std::string strategy;
  std::string out;
  std::string data;
  std::string checkpoint;
  uint64_t seed = 0;
  bool seed_set = false;
  int threads = 0;
  int frames = -1;
};

void add_common(CLI::App* cmd, Opts& o) {
  cmd->add_option("--config", o.config, "key=value config file (applied over the preset)")
      ->check(CLI::ExistingFile);
  cmd->add_option("--preset", o.preset, "base preset: paper or tiny (default tiny)");
  cmd->add_option("--seed", o.seed, "run seed")->each([&o](const std::string&) {
    o.seed_set = true;
  });
  cmd->add_option("--strategy", o.strategy, "fusion strategy: none, late, early, ahd");
  cmd->add_option("--out", o.out, "output directory");
  cmd->add_option("--data", o.data, "dataset directory");
  cmd->add_option("--threads", o.threads, "worker threads for the parallel kernels");
}

RunConfig make_cfg(const Opts& o) {
  RunConfig cfg = RunConfig::for_preset(o.preset.empty() ? "tiny" : o.preset, 1);
  if (!o.config.empty()) cfg.load_file(o.config);
  if (!o.preset.empty() && !o.config.empty() && cfg.preset != o.preset)
    COOP_LOG_INFO("config file switched preset to '%s'", cfg.preset.c_str());
  if (o.seed_set) cfg.seed = o.seed;
  if (!o.strategy.empty()) cfg.strategy = o.strategy;
  if (!o.out.empty()) cfg.out_dir = o.out;
  if (!o.data.empty()) cfg.data_dir = o.data;
  if (o.threads > 0) cfg.threads = o.threads;
  if (o.frames >= 0) cfg.n_frames = o.frames;
  cfg.validate();
#ifdef _OPENMP
  if (cfg.threads > 0) omp_set_num_threads(cfg.threads);
#endif
  return cfg;
}

std::string prepare_out_dir(const RunConfig& cfg, const std::string& dir) {
  fs::create_directories(dir);
  cfg.save_file((fs::path(dir) / "config.txt").string());
  return dir;
}

int cmd_gen(const Opts& o) {
  RunConfig cfg = make_cfg(o);
  // The dataset lands in --out when given, else in the configured data_dir.
  std::string dir = o.out.empty() ? cfg.data_dir : cfg.out_dir;
  std::vector<sim::SceneFrame> frames;
  frames.reserve(static_cast<size_t>(cfg.n_frames));
  for (int i = 0; i < cfg.n_frames; ++i) {
    sim::SceneGenConfig sc = cfg.scene;
    // Vary the sensor-equipped vehicle count per frame, 2..4 where possible.
    Rng agents_rng(mix_seed(mix_seed(cfg.seed, "gen-agents"), static_cast<uint64_t>(i)));
    int hi = std::min(4, sc.n_vehicles);
    int lo = std::min(2, hi);
    sc.n_agents = agents_rng.uniform_int(lo, hi);
    sim::SceneFrame f = sim::generate_scene(sc, mix_seed(cfg.seed, "frame-" + std::to_string(i)));
    f.frame_id = i;
    frames.push_back(std::move(f));
    if ((i + 1) % 50 == 0) COOP_LOG_INFO("gen: %d/%d frames", i + 1, cfg.n_frames);
  }
  sim::save_dataset(frames, dir, cfg.seed, cfg.preset);
  prepare_out_dir(cfg, dir);
  std::printf("wrote %d frames to %s\n", cfg.n_frames, dir.c_str());
  return 0;
}

int cmd_train(const Opts& o) {
  RunConfig cfg = make_cfg(o);
  std::vector<sim::SceneFrame> frames = sim::load_dataset(cfg.data_dir);
  if (frames.empty()) throw std::runtime_error("dataset '" + cfg.data_dir + "' has no frames");
  prepare_out_dir(cfg, cfg.out_dir);
  PerceptionModel model;
  std::vector<EpochMetrics> metrics = train_run(model, frames, cfg);
  save_metrics_csv((fs::path(cfg.out_dir) / "metrics.csv").string(), metrics);
  model.save_checkpoint((fs::path(cfg.out_dir) / "checkpoint.cpkt").string());
  if (!metrics.empty())
    std::printf("trained %zu epochs on %zu frames: l_total %.6f -> %.6f\n", metrics.size(),
                frames.size(), metrics.front().l_total, metrics.back().l_total);
  return 0;
}

int cmd_eval(const Opts& o, bool all_strategies) {
  RunConfig cfg = make_cfg(o);
  std::vector<sim::SceneFrame> frames = sim::load_dataset(cfg.data_dir);
  if (frames.empty()) throw std::runtime_error("dataset '" + cfg.data_dir + "' has no frames");
  prepare_out_dir(cfg, cfg.out_dir);
  PerceptionModel model;
  model.init(cfg);
  if (!o.checkpoint.empty()) model.load_checkpoint(o.checkpoint);

  std::vector<Strategy> todo;
  if (all_strategies)
    todo = {Strategy::None, Strategy::Late, Strategy::Early, Strategy::Intermediate};
  else
    todo = {parse_strategy(cfg.strategy)};

  std::vector<StrategyEvalResult> results;
  for (Strategy s : todo) {
    StrategyEvalResult r = evaluate_strategy(frames, model, s);
    std::printf("%-6s AP@0.5 %.4f  AP@0.7 %.4f  bytes/frame %.1f\n", r.strategy.c_str(),
                r.ap050.ap, r.ap070.ap, r.bytes_per_frame);
    fs::path base = fs::path(cfg.out_dir);
    save_detections_csv((base / ("detections_" + r.strategy + ".csv")).string(), r.detections);
    r.bandwidth.save_csv((base / ("bandwidth_" + r.strategy + ".csv")).string());
    save_pr_csv((base / ("pr_" + r.strategy + "_iou050.csv")).string(), r.ap050);
    save_pr_csv((base / ("pr_" + r.strategy + "_iou070.csv")).string(), r.ap070);
    results.push_back(std::move(r));
  }
  save_results_csv((fs::path(cfg.out_dir) / "results.csv").string(), results);
  save_summary_json((fs::path(cfg.out_dir) / "summary.json").string(), results);
  return 0;
}

int cmd_export_attn(const Opts& o, int frame_id) {
  RunConfig cfg = make_cfg(o);
  std::vector<sim::SceneFrame> frames = sim::load_dataset(cfg.data_dir);
  const sim::SceneFrame* frame = nullptr;
  for (const auto& f : frames)
    if (f.frame_id == frame_id) frame = &f;
  if (!frame)
    throw std::runtime_error("frame_id " + std::to_string(frame_id) + " not in dataset '" +
                             cfg.data_dir + "'");
  prepare_out_dir(cfg, cfg.out_dir);
  PerceptionModel model;
  model.init(cfg);
  if (!o.checkpoint.empty()) model.load_checkpoint(o.checkpoint);
  int ego = eval_ego_index(*frame);
  AttentionMaps attn;
  {
    NoGradGuard ng;
    model.run_ego(*frame, ego, false, "ahd", nullptr, &attn);
  }
  char name[64];
  std::snprintf(name, sizeof(name), "attention_frame%05d.csv", frame_id);
  std::string path = (fs::path(cfg.out_dir) / name).string();
  attn.save_csv(path);
  std::printf("wrote %s (%d agents, %dx%d grid)\n", path.c_str(), attn.n_agents, attn.h, attn.w);
  return 0;
}

int cmd_bench(const Opts& o, std::vector<double> densities, int repeats) {
  RunConfig cfg = make_cfg(o);
  if (densities.empty()) densities = {0.01, 0.02, 0.05, 0.10};
  prepare_out_dir(cfg, cfg.out_dir);
  std::vector<BenchRow> rows = bench_sparse_vs_dense(cfg, densities, repeats, cfg.seed);
  save_bench_csv((fs::path(cfg.out_dir) / "bench.csv").string(), rows);
  for (const auto& r : rows)
    std::printf("density %.4f: sparse %.2f ms, dense %.2f ms (x%.2f)\n", r.density, r.sparse_ms,
                r.dense_ms, r.dense_ms / r.sparse_ms);
  return 0;
}

int cmd_sweep(const Opts& o, std::vector<double> temps) {
  RunConfig cfg = make_cfg(o);
  std::vector<sim::SceneFrame> frames = sim::load_dataset(cfg.data_dir);
  if (frames.empty()) throw std::runtime_error("dataset '" + cfg.data_dir + "' has no frames");
  prepare_out_dir(cfg, cfg.out_dir);
  if (temps.empty()) temps = {1, 2, 5, 10, 15, 20};
  std::vector<TemperatureRow> rows = sweep_temperature(frames, cfg, temps);
  save_temperature_csv((fs::path(cfg.out_dir) / "temperature_sweep.csv").string(), rows);
  for (const auto& r : rows)
    std::printf("T=%-5g AP@0.5 %.4f  AP@0.7 %.4f\n", r.temperature, r.ap050, r.ap070);
  return 0;
}

int cmd_ablation(const Opts& o) {
  RunConfig cfg = make_cfg(o);
  std::vector<sim::SceneFrame> frames = sim::load_dataset(cfg.data_dir);
  if (frames.empty()) throw std::runtime_error("dataset '" + cfg.data_dir + "' has no frames");
  prepare_out_dir(cfg, cfg.out_dir);
  std::vector<AblationRow> rows = run_ablation(frames, cfg, default_ablation_combos());
  save_ablation_csv((fs::path(cfg.out_dir) / "ablation.csv").string(), rows);
  for (const auto& r : rows)
    std::printf("sparse=%d kd=%d msa=%d  AP@0.5 %.4f  AP@0.7 %.4f\n", int(r.use_sparse),
                int(r.use_kd), int(r.use_msa), r.ap050, r.ap070);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"desk-scale cooperative-perception toolkit"};
  app.require_subcommand(1);

  Opts o;
  bool eval_all = false;
  int attn_frame = 0;
  std::vector<double> densities;
  int bench_repeats = 3;
  std::vector<double> temps;

  CLI::App* gen = app.add_subcommand("gen", "generate a synthetic multi-agent dataset");
  add_common(gen, o);
  gen->add_option("--frames", o.frames, "number of frames (default from config)");

  CLI::App* train = app.add_subcommand("train", "train a model on a dataset");
  add_common(train, o);

  CLI::App* eval = app.add_subcommand("eval", "evaluate a checkpoint on a dataset");
  add_common(eval, o);
  eval->add_option("--checkpoint", o.checkpoint, "model checkpoint (.cpkt)")
      ->check(CLI::ExistingFile);
  eval->add_flag("--all", eval_all, "evaluate all four strategies, not just the configured one");

  CLI::App* attn = app.add_subcommand("export-attn", "dump per-agent fusion attention weights");
  add_common(attn, o);
  attn->add_option("--checkpoint", o.checkpoint, "model checkpoint (.cpkt)")
      ->check(CLI::ExistingFile);
  attn->add_option("--frame", attn_frame, "frame_id to export")->required();

  CLI::App* bench = app.add_subcommand("bench", "time sparse vs dense backbone forward");
  add_common(bench, o);
  bench->add_option("--density", densities, "active-site fractions to test");
  bench->add_option("--repeats", bench_repeats, "timed repetitions per configuration");

  CLI::App* sweep = app.add_subcommand("sweep", "train/evaluate across distillation temperatures");
  add_common(sweep, o);
  sweep->add_option("--temps", temps, "temperatures (default 1 2 5 10 15 20)");

  CLI::App* ablation = app.add_subcommand("ablation", "train/evaluate component toggles");
  add_common(ablation, o);

  CLI11_PARSE(app, argc, argv);

  try {
    if (gen->parsed()) return cmd_gen(o);
    if (train->parsed()) return cmd_train(o);
    if (eval->parsed()) return cmd_eval(o, eval_all);
    if (attn->parsed()) return cmd_export_attn(o, attn_frame);
    if (bench->parsed()) return cmd_bench(o, densities, bench_repeats);
    if (sweep->parsed()) return cmd_sweep(o, temps);
    if (ablation->parsed()) return cmd_ablation(o);
  } catch (const std::exception& e) {
    COOP_LOG_ERROR("%s", e.what());
    return 1;
  }
  return 0;
}
