#pragma once

#include <functional>
#include <span>
#include <string>
#include <vector>

#include "bf/encoder.hpp"

namespace bf {

// Appendix-style locality score of one attention row (1-based row index i):
// 1 - sum_j a_ij |i - j| / max_j |i - j|. Rows must be normalized.
double centrality(std::span<const double> row, int i);

// Mean centrality over the rows of a T x T attention matrix, in [0, 1].
double diagonality(const std::vector<double>& a, int t);
double diagonality(const Tensor& a);

struct BranchWeightLog {
  struct Layer {
    double mean_att = 0.0;
    double mean_mlp = 0.0;
    double std_att = 0.0;
  };
  std::vector<Layer> layers;
};

// Per-layer branch-weight statistics over a dataset, inference mode.
BranchWeightLog collect_branch_weights(const EncoderConfig& cfg, EncoderParams& params,
                                       const std::vector<Tensor>& dataset);

// Mean diagonality per layer over all samples and heads (MHSA models).
std::vector<double> collect_diagonality(const EncoderConfig& cfg, EncoderParams& params,
                                        const std::vector<Tensor>& dataset);

struct BenchResult {
  struct Point {
    int t = 0;
    double median_s = 0.0;
    double mean_s = 0.0;
    double std_s = 0.0;
    int reps = 0;
  };
  std::vector<Point> points;
  double slope = 0.0;
  double slope_stderr = 0.0;
};

// Ordinary least squares on (ln T, ln seconds). Returns slope and its
// standard error.
std::pair<double, double> loglog_slope_fit(const std::vector<std::pair<double, double>>& points);

// Times `run(T)` for each grid point: 2 warmup runs, then `reps` timed runs;
// fits a log-log slope through the medians. Repetitions are widened when the
// timer cannot resolve the smallest point.
BenchResult forward_time_benchmark(const std::function<void(int)>& run,
                                   const std::vector<int>& t_grid, int reps);

void write_branch_weights_csv(const std::string& path, const BranchWeightLog& log);
void write_diagonality_csv(const std::string& path, const std::vector<double>& per_layer);
void write_bench_csv(const std::string& path, const BenchResult& result);
void write_fit_json(const std::string& path, const BenchResult& result);

}  // namespace bf
