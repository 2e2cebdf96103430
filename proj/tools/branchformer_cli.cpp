// Command-line front end: train / gradcheck / bench / analyze / prune.

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <map>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "bf/analysis.hpp"
#include "bf/checkpoint.hpp"
#include "bf/errors.hpp"
#include "bf/train.hpp"

namespace {

namespace fs = std::filesystem;

std::vector<int> parse_grid(const std::string& csv) {
  std::vector<int> grid;
  std::stringstream ss(csv);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty()) continue;
    grid.push_back(std::stoi(item));
  }
  if (grid.empty()) throw bf::ConfigError("empty --tgrid");
  return grid;
}

// Random feature sequences for analysis/benchmarks, deterministic per (t, n).
std::vector<bf::Tensor> synthetic_dataset(int n, int t, int feature_dim, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> gauss(0.0, 1.0);
  std::vector<bf::Tensor> out;
  for (int i = 0; i < n; ++i) {
    bf::Tensor x = bf::Tensor::zeros({t, feature_dim});
    for (std::size_t j = 0; j < x.numel(); ++j) x.data()[j] = gauss(rng);
    out.push_back(std::move(x));
  }
  return out;
}

int run_train(const std::string& config_path) {
  bf::TrainConfig cfg = bf::load_train_config(config_path);
  bf::TrainResult result = bf::train(cfg);
  std::printf("train ok steps=%d final_train_accuracy=%.6f out_dir=%s\n", cfg.steps,
              result.final_train_accuracy, cfg.out_dir.c_str());
  return 0;
}

int run_gradcheck(const std::string& config_path, double tolerance) {
  bf::TrainConfig cfg = bf::load_train_config(config_path);
  bf::GradCheckReport report = bf::grad_check_from_config(cfg, tolerance);
  for (const auto& e : report.entries)
    std::printf("param %s max_rel_err=%.3e\n", e.name.c_str(), e.max_rel_err);
  std::printf("gradcheck %s max_rel_err=%.3e tolerance=%.3e\n", report.pass ? "pass" : "FAIL",
              report.max_rel_err, tolerance);
  return report.pass ? 0 : 1;
}

int run_bench(const std::string& attention, bool pruned, const std::string& tgrid, int reps,
              int batch, int d, const std::string& out_dir) {
  bf::EncoderConfig cfg;
  cfg.num_blocks = 1;
  cfg.feature_dim = d;
  cfg.d = d;
  cfg.d_hidden = 2 * d;
  cfg.heads = 2;
  cfg.kernel = 3;
  cfg.attention = bf::attention_kind_from_string(attention);
  cfg.merge = bf::MergeKind::WeightedAverage;
  cfg.dropout = 0.0;
  cfg.branch_dropout = 0.0;
  cfg.seed = 7;
  bf::EncoderParams params = bf::init_encoder(cfg);
  if (pruned) params = bf::prune_to_cgmlp(cfg, params);

  std::map<int, std::vector<bf::Tensor>> inputs;
  auto run = [&](int t) {
    auto it = inputs.find(t);
    if (it == inputs.end())
      it = inputs.emplace(t, synthetic_dataset(batch, t, cfg.feature_dim, 1000 + t)).first;
    bf::NoGradGuard ng;
    std::mt19937_64 rng(0);
    for (bf::Tensor& x : it->second)
      bf::encoder_forward(x, cfg, params, /*training=*/false, rng);
  };

  bf::BenchResult result = bf::forward_time_benchmark(run, parse_grid(tgrid), reps);
  fs::create_directories(out_dir);
  bf::write_bench_csv((fs::path(out_dir) / "bench.csv").string(), result);
  bf::write_fit_json((fs::path(out_dir) / "fit.json").string(), result);
  std::printf("bench ok attention=%s pruned=%d slope=%.4f stderr=%.4f\n", attention.c_str(),
              pruned ? 1 : 0, result.slope, result.slope_stderr);
  return 0;
}

int run_analyze(const std::string& checkpoint, const std::string& out_dir, int samples,
                int seq_len) {
  bf::Checkpoint ck = bf::load_checkpoint(checkpoint);
  fs::create_directories(out_dir);
  std::vector<bf::Tensor> dataset =
      synthetic_dataset(samples, seq_len, ck.config.feature_dim, 2024);

  bool wrote = false;
  if (!ck.params.pruned && ck.config.merge == bf::MergeKind::WeightedAverage) {
    bf::BranchWeightLog log = bf::collect_branch_weights(ck.config, ck.params, dataset);
    bf::write_branch_weights_csv((fs::path(out_dir) / "branch_weights.csv").string(), log);
    wrote = true;
  }
  if (!ck.params.pruned && ck.config.attention == bf::AttentionKind::Mhsa) {
    std::vector<double> diag = bf::collect_diagonality(ck.config, ck.params, dataset);
    bf::write_diagonality_csv((fs::path(out_dir) / "diagonality.csv").string(), diag);
    wrote = true;
  }
  if (!wrote)
    throw bf::ConfigError(
        "nothing to analyze: model is pruned or has neither weighted merge nor MHSA attention");
  std::printf("analyze ok checkpoint=%s out=%s samples=%d\n", checkpoint.c_str(), out_dir.c_str(),
              samples);
  return 0;
}

int run_prune(const std::string& in_path, const std::string& out_path) {
  bf::Checkpoint ck = bf::load_checkpoint(in_path);
  bf::EncoderParams pruned = bf::prune_to_cgmlp(ck.config, ck.params);
  bf::save_checkpoint(out_path, ck.config, pruned);
  std::printf("prune ok in=%s out=%s\n", in_path.c_str(), out_path.c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Branchformer encoder toolkit"};
  app.require_subcommand(1);

  std::string config_path, attention = "mhsa", tgrid = "512,1024,2048,4096,8192";
  std::string checkpoint, out = "run", prune_out;
  double tolerance = 1e-4;
  int reps = 5, batch = 1, d = 16, samples = 16, seq_len = 64;
  bool pruned = false;

  auto* train_cmd = app.add_subcommand("train", "train a toy model");
  train_cmd->add_option("--config", config_path, "train config JSON")->required();

  auto* gc_cmd = app.add_subcommand("gradcheck", "finite-difference gradient check");
  gc_cmd->add_option("--config", config_path, "train config JSON")->required();
  gc_cmd->add_option("--tolerance", tolerance, "max relative error allowed");

  auto* bench_cmd = app.add_subcommand("bench", "forward-time scaling benchmark");
  bench_cmd->add_option("--attention", attention, "mhsa or fastformer");
  bench_cmd->add_flag("--pruned", pruned, "benchmark the cgMLP-only model");
  bench_cmd->add_option("--tgrid", tgrid, "comma-separated sequence lengths");
  bench_cmd->add_option("--reps", reps, "timed repetitions per point");
  bench_cmd->add_option("--batch", batch, "sequences per timed call");
  bench_cmd->add_option("--d", d, "model width");
  bench_cmd->add_option("--out", out, "output directory");

  auto* an_cmd = app.add_subcommand("analyze", "branch-weight / diagonality analysis");
  an_cmd->add_option("--checkpoint", checkpoint, "checkpoint file")->required();
  an_cmd->add_option("--out", out, "output directory")->required();
  an_cmd->add_option("--samples", samples, "synthetic samples");
  an_cmd->add_option("--seqlen", seq_len, "synthetic sequence length");

  auto* prune_cmd = app.add_subcommand("prune", "strip attention branches from a checkpoint");
  prune_cmd->add_option("--checkpoint", checkpoint, "input checkpoint")->required();
  prune_cmd->add_option("--out", prune_out, "output checkpoint")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (train_cmd->parsed()) return run_train(config_path);
    if (gc_cmd->parsed()) return run_gradcheck(config_path, tolerance);
    if (bench_cmd->parsed()) return run_bench(attention, pruned, tgrid, reps, batch, d, out);
    if (an_cmd->parsed()) return run_analyze(checkpoint, out, samples, seq_len);
    if (prune_cmd->parsed()) return run_prune(checkpoint, prune_out);
  } catch (const bf::CheckpointError& e) {
    std::cerr << "error: checkpoint: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 1;
}
