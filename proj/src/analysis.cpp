#include "bf/analysis.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>

#include <nlohmann/json.hpp>

#include "bf/errors.hpp"

namespace bf {

double centrality(std::span<const double> row, int i) {
  const int t = static_cast<int>(row.size());
  if (t < 2) throw ContractError("centrality requires a row of length >= 2");
  if (i < 1 || i > t) throw ContractError("centrality row index out of range: " + std::to_string(i));
  double sum = 0.0;
  for (double v : row) sum += v;
  if (std::abs(sum - 1.0) > 1e-6)
    throw ContractError("centrality requires a normalized row, sum = " + std::to_string(sum));
  const double max_disp = std::max(i - 1, t - i);
  double weighted = 0.0;
  for (int j = 1; j <= t; ++j) weighted += row[static_cast<std::size_t>(j - 1)] * std::abs(i - j);
  return 1.0 - weighted / max_disp;
}

double diagonality(const std::vector<double>& a, int t) {
  if (t < 2 || static_cast<int>(a.size()) != t * t)
    throw ContractError("diagonality requires a T x T matrix with T >= 2");
  double acc = 0.0;
  for (int i = 1; i <= t; ++i)
    acc += centrality(std::span<const double>(a.data() + static_cast<std::size_t>(i - 1) * t,
                                              static_cast<std::size_t>(t)),
                      i);
  return acc / t;
}

double diagonality(const Tensor& a) {
  if (a.ndim() != 2 || a.rows() != a.cols())
    throw ContractError("diagonality requires a square matrix, got " + shape_str(a.shape()));
  return diagonality(a.data_vec(), a.rows());
}

BranchWeightLog collect_branch_weights(const EncoderConfig& cfg, EncoderParams& params,
                                       const std::vector<Tensor>& dataset) {
  if (cfg.merge != MergeKind::WeightedAverage)
    throw ConfigError("branch weights require weighted-average merging");
  const std::size_t layers = params.blocks.size();
  std::vector<std::vector<double>> att_per_layer(layers);

  std::mt19937_64 rng(0);  // unused at inference
  NoGradGuard ng;
  for (const Tensor& x : dataset) {
    std::vector<std::pair<double, double>> weights;
    ForwardSinks sinks;
    sinks.branch_weights = &weights;
    encoder_forward(x, cfg, params, /*training=*/false, rng, &sinks);
    for (std::size_t l = 0; l < layers; ++l) att_per_layer[l].push_back(weights[l].first);
  }

  BranchWeightLog log;
  for (std::size_t l = 0; l < layers; ++l) {
    const auto& xs = att_per_layer[l];
    double mean = 0.0;
    for (double v : xs) mean += v;
    mean /= static_cast<double>(xs.size());
    double var = 0.0;
    for (double v : xs) var += (v - mean) * (v - mean);
    var /= static_cast<double>(xs.size());
    log.layers.push_back({mean, 1.0 - mean, std::sqrt(var)});
  }
  return log;
}

std::vector<double> collect_diagonality(const EncoderConfig& cfg, EncoderParams& params,
                                        const std::vector<Tensor>& dataset) {
  if (cfg.attention != AttentionKind::Mhsa)
    throw ConfigError("diagonality analysis requires MHSA attention");
  if (params.pruned) throw ConfigError("pruned model has no attention maps");
  const std::size_t layers = params.blocks.size();
  std::vector<double> acc(layers, 0.0);
  std::vector<long> counts(layers, 0);

  std::mt19937_64 rng(0);
  NoGradGuard ng;
  for (const Tensor& x : dataset) {
    std::vector<AttentionTrace> traces;
    ForwardSinks sinks;
    sinks.traces = &traces;
    encoder_forward(x, cfg, params, /*training=*/false, rng, &sinks);
    for (std::size_t l = 0; l < layers; ++l)
      for (const auto& head : traces[l].heads) {
        acc[l] += diagonality(head, traces[l].t);
        counts[l]++;
      }
  }
  for (std::size_t l = 0; l < layers; ++l)
    acc[l] = counts[l] ? acc[l] / static_cast<double>(counts[l]) : 0.0;
  return acc;
}

std::pair<double, double> loglog_slope_fit(const std::vector<std::pair<double, double>>& points) {
  const std::size_t n = points.size();
  if (n < 3) throw ContractError("slope fit needs at least 3 points");
  std::vector<double> xs(n), ys(n);
  for (std::size_t i = 0; i < n; ++i) {
    if (points[i].first <= 0.0 || points[i].second <= 0.0)
      throw ContractError("slope fit requires positive coordinates");
    xs[i] = std::log(points[i].first);
    ys[i] = std::log(points[i].second);
  }
  double mx = 0.0, my = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    mx += xs[i];
    my += ys[i];
  }
  mx /= static_cast<double>(n);
  my /= static_cast<double>(n);
  double sxx = 0.0, sxy = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    sxx += (xs[i] - mx) * (xs[i] - mx);
    sxy += (xs[i] - mx) * (ys[i] - my);
  }
  const double slope = sxy / sxx;
  const double intercept = my - slope * mx;
  double sse = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double r = ys[i] - (intercept + slope * xs[i]);
    sse += r * r;
  }
  const double stderr_ = std::sqrt(sse / static_cast<double>(n - 2) / sxx);
  return {slope, stderr_};
}

BenchResult forward_time_benchmark(const std::function<void(int)>& run,
                                   const std::vector<int>& t_grid, int reps) {
  if (t_grid.size() < 4) throw ContractError("benchmark grid needs at least 4 points");
  for (std::size_t i = 1; i < t_grid.size(); ++i)
    if (t_grid[i] <= t_grid[i - 1]) throw ContractError("benchmark grid must be ascending");
  if (t_grid.back() < 8 * t_grid.front())
    throw ContractError("benchmark grid must span at least an 8x range");
  reps = std::max(reps, 5);

  using Clock = std::chrono::steady_clock;
  BenchResult result;
  for (int t : t_grid) {
    // Batch multiple calls per sample when a single call is below what the
    // timer can resolve.
    int calls_per_sample = 1;
    std::vector<double> samples;
    for (;;) {
      samples.clear();
      for (int w = 0; w < 2; ++w) run(t);  // warmup
      for (int r = 0; r < reps; ++r) {
        const auto start = Clock::now();
        for (int c = 0; c < calls_per_sample; ++c) run(t);
        const auto stop = Clock::now();
        samples.push_back(std::chrono::duration<double>(stop - start).count() / calls_per_sample);
      }
      std::sort(samples.begin(), samples.end());
      if (samples[samples.size() / 2] * calls_per_sample >= 1e-6) break;
      if (calls_per_sample >= 64)
        throw ContractError("timer cannot resolve forwards at T=" + std::to_string(t));
      calls_per_sample *= 2;
    }
    BenchResult::Point pt;
    pt.t = t;
    pt.reps = reps;
    pt.median_s = samples[samples.size() / 2];
    double mean = 0.0;
    for (double s : samples) mean += s;
    mean /= static_cast<double>(samples.size());
    double var = 0.0;
    for (double s : samples) var += (s - mean) * (s - mean);
    var /= static_cast<double>(samples.size());
    pt.mean_s = mean;
    pt.std_s = std::sqrt(var);
    result.points.push_back(pt);
  }

  std::vector<std::pair<double, double>> fit_points;
  for (const auto& p : result.points) fit_points.push_back({static_cast<double>(p.t), p.median_s});
  auto [slope, se] = loglog_slope_fit(fit_points);
  result.slope = slope;
  result.slope_stderr = se;
  return result;
}

void write_branch_weights_csv(const std::string& path, const BranchWeightLog& log) {
  std::ofstream os(path);
  os << "layer,mean_w_att,mean_w_mlp,std\n";
  for (std::size_t l = 0; l < log.layers.size(); ++l)
    os << l << ',' << log.layers[l].mean_att << ',' << log.layers[l].mean_mlp << ','
       << log.layers[l].std_att << '\n';
}

void write_diagonality_csv(const std::string& path, const std::vector<double>& per_layer) {
  std::ofstream os(path);
  os << "layer,D\n";
  for (std::size_t l = 0; l < per_layer.size(); ++l) os << l << ',' << per_layer[l] << '\n';
}

void write_bench_csv(const std::string& path, const BenchResult& result) {
  std::ofstream os(path);
  os << "T,median_s,mean_s,std_s\n";
  for (const auto& p : result.points)
    os << p.t << ',' << p.median_s << ',' << p.mean_s << ',' << p.std_s << '\n';
}

void write_fit_json(const std::string& path, const BenchResult& result) {
  nlohmann::json j;
  j["slope"] = result.slope;
  j["stderr"] = result.slope_stderr;
  std::ofstream os(path);
  os << j.dump(2) << '\n';
}

}  // namespace bf
