#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <random>

#include <nlohmann/json.hpp>

#include "bf/analysis.hpp"
#include "bf/checkpoint.hpp"
#include "bf/encoder.hpp"
#include "bf/errors.hpp"
#include "test_util.hpp"

using namespace bf;
using bft::bit_equal;
using bft::random_tensor;
namespace fs = std::filesystem;

namespace {

fs::path temp_file(const char* name) {
  fs::path p = fs::temp_directory_path() / name;
  fs::remove(p);
  return p;
}

void zero_all(EncoderParams& params) {
  params.visit([](const std::string&, Tensor& t) {
    for (std::size_t i = 0; i < t.numel(); ++i) t.data()[i] = 0.0;
  });
}

}  // namespace

TEST_CASE("merge_concat oracle values") {
  std::mt19937_64 rng(1);
  const int d = 3;
  Tensor y_att = random_tensor({4, d}, rng);
  Tensor y_mlp = random_tensor({4, d}, rng);

  // Selector [I; 0] returns the attention branch untouched.
  ConcatMergeParams sel = ConcatMergeParams::init(d, rng);
  for (std::size_t i = 0; i < sel.proj.weight.numel(); ++i) sel.proj.weight.data()[i] = 0.0;
  for (int j = 0; j < d; ++j) sel.proj.weight.at(j, j) = 1.0;
  CHECK(bit_equal(merge_concat(y_att, y_mlp, sel), y_att));

  // Adder [I; I] returns the branch sum.
  ConcatMergeParams addp = sel;
  for (int j = 0; j < d; ++j) addp.proj.weight.at(d + j, j) = 1.0;
  Tensor summed = merge_concat(y_att, y_mlp, addp);
  for (int i = 0; i < 4; ++i)
    for (int j = 0; j < d; ++j)
      CHECK(summed.at(i, j) ==
            doctest::Approx(y_att.at(i, j) + y_mlp.at(i, j)).epsilon(1e-12));

  // Random T=2, d=2 case against an explicit concat-matmul oracle.
  std::mt19937_64 rng2(2);
  ConcatMergeParams p2 = ConcatMergeParams::init(2, rng2);
  Tensor a2 = random_tensor({2, 2}, rng2);
  Tensor m2 = random_tensor({2, 2}, rng2);
  Tensor got = merge_concat(a2, m2, p2);
  for (int i = 0; i < 2; ++i)
    for (int j = 0; j < 2; ++j) {
      double exp = 0.0;
      for (int k = 0; k < 2; ++k) {
        exp += a2.at(i, k) * p2.proj.weight.at(k, j);
        exp += m2.at(i, k) * p2.proj.weight.at(2 + k, j);
      }
      CHECK(got.at(i, j) == doctest::Approx(exp).epsilon(1e-12));
    }

  CHECK_THROWS_AS(merge_concat(random_tensor({2, 3}, rng), random_tensor({3, 3}, rng), sel),
                  ShapeError);
}

TEST_CASE("merge_weighted_average oracle values and invariants") {
  std::mt19937_64 rng(3);
  const int d = 4;
  WeightedMergeParams p = WeightedMergeParams::init(d, rng);
  Tensor y_att = random_tensor({5, d}, rng);
  Tensor y_mlp = random_tensor({5, d}, rng);

  // Convexity in the strict sense: equal branches pass through unchanged.
  Tensor same = merge_weighted_average(y_att, y_att, p);
  for (int i = 0; i < 5; ++i)
    for (int j = 0; j < d; ++j)
      CHECK(same.at(i, j) == doctest::Approx(y_att.at(i, j)).epsilon(1e-12));

  // Zero projections give equal scalars: weights exactly (0.5, 0.5).
  WeightedMergeParams half = p;
  for (std::size_t i = 0; i < half.proj_att.weight.numel(); ++i) {
    half.proj_att.weight.data()[i] = 0.0;
    half.proj_mlp.weight.data()[i] = 0.0;
  }
  std::pair<double, double> w{};
  Tensor mid = merge_weighted_average(y_att, y_mlp, half, &w);
  CHECK(w.first == 0.5);
  CHECK(w.second == 0.5);
  for (int i = 0; i < 5; ++i)
    for (int j = 0; j < d; ++j)
      CHECK(mid.at(i, j) ==
            doctest::Approx(0.5 * y_att.at(i, j) + 0.5 * y_mlp.at(i, j)).epsilon(1e-12));

  // Weights are a probability pair; the output is elementwise convex.
  std::pair<double, double> ws{};
  Tensor out = merge_weighted_average(y_att, y_mlp, p, &ws);
  CHECK(ws.first >= 0.0);
  CHECK(ws.second >= 0.0);
  CHECK(std::abs(ws.first + ws.second - 1.0) < 1e-12);
  for (int i = 0; i < 5; ++i)
    for (int j = 0; j < d; ++j) {
      const double lo = std::min(y_att.at(i, j), y_mlp.at(i, j));
      const double hi = std::max(y_att.at(i, j), y_mlp.at(i, j));
      CHECK(out.at(i, j) >= lo - 1e-12);
      CHECK(out.at(i, j) <= hi + 1e-12);
    }

  // T=1, d=1 full scalar trace.
  std::mt19937_64 rng1(4);
  WeightedMergeParams s = WeightedMergeParams::init(1, rng1);
  const double a = 0.8, b = -1.1;
  const double s_att = a * s.proj_att.weight.at(0, 0);
  const double s_mlp = b * s.proj_mlp.weight.at(0, 0);
  const double w_att = std::exp(s_att) / (std::exp(s_att) + std::exp(s_mlp));
  Tensor tr = merge_weighted_average(Tensor::from({1, 1}, {a}), Tensor::from({1, 1}, {b}), s);
  CHECK(tr.at(0, 0) == doctest::Approx(w_att * a + (1 - w_att) * b).epsilon(1e-12));

  CHECK_THROWS_AS(
      merge_weighted_average(random_tensor({2, d}, rng), random_tensor({3, d}, rng), p),
      ShapeError);
}

TEST_CASE("branch dropout decision semantics") {
  std::mt19937_64 rng(5);
  for (int i = 0; i < 50; ++i) {
    CHECK(branch_dropout(MergeKind::WeightedAverage, 0.0, true, rng) ==
          BranchDropDecision::KeepBoth);
    CHECK(branch_dropout(MergeKind::WeightedAverage, 0.9, false, rng) ==
          BranchDropDecision::KeepBoth);
  }
  CHECK_THROWS_AS(branch_dropout(MergeKind::Concat, 0.5, true, rng), ConfigError);
  CHECK_THROWS_AS(branch_dropout(MergeKind::WeightedAverage, 1.0, true, rng), ConfigError);

  int dropped = 0;
  const int n = 10000;
  for (int i = 0; i < n; ++i)
    if (branch_dropout(MergeKind::WeightedAverage, 0.5, true, rng) ==
        BranchDropDecision::DropAttention)
      ++dropped;
  CHECK(std::abs(static_cast<double>(dropped) / n - 0.5) < 0.02);
}

TEST_CASE("block residual identity with all-zero parameters") {
  EncoderConfig cfg;
  cfg.num_blocks = 1;
  cfg.merge = MergeKind::Concat;
  cfg.dropout = 0.0;
  EncoderParams params = init_encoder(cfg);
  zero_all(params);
  std::mt19937_64 rng(6), fwd(0);
  Tensor x = random_tensor({5, cfg.d}, rng);
  Tensor y = block_forward(x, params.blocks[0], false, fwd);
  CHECK(bit_equal(y, x));
}

TEST_CASE("block shape preservation and branch parallelism") {
  EncoderConfig cfg;
  cfg.num_blocks = 1;
  cfg.merge = MergeKind::WeightedAverage;
  cfg.dropout = 0.0;
  cfg.seed = 7;
  EncoderParams params = init_encoder(cfg);
  BlockParams& blk = params.blocks[0];
  std::mt19937_64 rng(8), fwd(0);

  for (int t : {1, 5, 17}) {
    Tensor x = random_tensor({t, cfg.d}, rng);
    Tensor y = block_forward(x, blk, false, fwd);
    CHECK(y.rows() == t);
    CHECK(y.cols() == cfg.d);
  }

  // Decomposition: out = x + w_att Y_att + w_mlp Y_mlp, both branches fed the
  // same x (parallel topology, not sequential).
  Tensor x = random_tensor({6, cfg.d}, rng);
  std::pair<double, double> w{};
  Tensor y = block_forward(x, blk, false, fwd, nullptr, &w);
  std::mt19937_64 r1(0), r2(0);
  Tensor y_att = attention_branch_forward(x, *blk.attn, false, r1);
  Tensor y_mlp = cgmlp_forward(x, blk.mlp, false, r2);
  for (int i = 0; i < 6; ++i)
    for (int j = 0; j < cfg.d; ++j)
      CHECK(y.at(i, j) == doctest::Approx(x.at(i, j) + w.first * y_att.at(i, j) +
                                          w.second * y_mlp.at(i, j))
                              .epsilon(1e-12));

  // Weights pinned to ~(1, 0): block reduces to an attention-only residual
  // block. Aim the attention projection along the pooled attention summary so
  // its merge scalar dominates by ~40 nats.
  Tensor pooled = attention_pooling(y_att, blk.merge.weighted->pool_att);
  double norm2 = 0.0;
  for (int j = 0; j < cfg.d; ++j) norm2 += pooled.at(0, j) * pooled.at(0, j);
  REQUIRE(norm2 > 0.0);
  for (int j = 0; j < cfg.d; ++j) {
    blk.merge.weighted->proj_att.weight.at(j, 0) = 40.0 * pooled.at(0, j) / norm2;
    blk.merge.weighted->proj_mlp.weight.at(j, 0) = 0.0;
  }
  Tensor pinned = block_forward(x, blk, false, fwd);
  for (int i = 0; i < 6; ++i)
    for (int j = 0; j < cfg.d; ++j)
      CHECK(std::abs(pinned.at(i, j) - (x.at(i, j) + y_att.at(i, j))) < 1e-10);
}

TEST_CASE("forced cgmlp weights and dropped-branch evaluation skipping") {
  EncoderConfig cfg;
  cfg.num_blocks = 1;
  cfg.merge = MergeKind::WeightedAverage;
  cfg.dropout = 0.0;
  cfg.branch_dropout = 0.9;
  cfg.seed = 9;
  EncoderParams params = init_encoder(cfg);
  BlockParams& blk = params.blocks[0];
  std::mt19937_64 rng(10);
  Tensor x = random_tensor({5, cfg.d}, rng);

  // Forced (0, 1) weights: output is exactly the cgMLP residual path, but the
  // attention branch is still evaluated.
  std::mt19937_64 f1(0), f2(0);
  EvalCounters forced{};
  Tensor forced_out = block_forward(x, blk, false, f1, nullptr, nullptr, &forced,
                                    BranchMode::ForcedCgmlpWeights);
  CHECK(bit_equal(forced_out, add(x, cgmlp_forward(x, blk.mlp, false, f2))));
  CHECK(forced.attention_evals == 1);
  CHECK(forced.mlp_evals == 1);

  // Training with branch dropout: a dropped decision produces bit-identically
  // the same output without ever evaluating the attention branch.
  std::mt19937_64 probe(11);
  REQUIRE(std::uniform_real_distribution<double>(0.0, 1.0)(probe) < 0.9);  // seed 11 drops
  std::mt19937_64 d1(11), d2(0);
  EvalCounters dropped{};
  std::pair<double, double> w{};
  Tensor drop_out = block_forward(x, blk, true, d1, nullptr, &w, &dropped);
  CHECK(dropped.attention_evals == 0);
  CHECK(dropped.mlp_evals == 1);
  CHECK(w.first == 0.0);
  CHECK(w.second == 1.0);
  CHECK(bit_equal(drop_out, add(x, cgmlp_forward(x, blk.mlp, true, d2))));
}

TEST_CASE("encoder forward shape, N=0, and training determinism") {
  EncoderConfig cfg;
  cfg.num_blocks = 0;
  cfg.seed = 12;
  EncoderParams p0 = init_encoder(cfg);
  std::mt19937_64 rng(13), fwd(0);
  Tensor feats = random_tensor({24, cfg.feature_dim}, rng);
  Tensor y0 = encoder_forward(feats, cfg, p0, false, fwd);
  Tensor manual = add(conv_subsample(feats, p0.subsampler),
                      sinusoidal_pe(subsampled_length(24), cfg.d));
  CHECK(bit_equal(y0, manual));

  cfg.num_blocks = 2;
  EncoderParams p2 = init_encoder(cfg);
  for (int t : {7, 24, 63}) {
    Tensor y = encoder_forward(random_tensor({t, cfg.feature_dim}, rng), cfg, p2, false, fwd);
    CHECK(y.rows() == subsampled_length(t));
    CHECK(y.cols() == cfg.d);
  }
  CHECK_THROWS_AS(encoder_forward(random_tensor({24, cfg.feature_dim + 1}, rng), cfg, p2,
                                  false, fwd),
                  ShapeError);

  // Same seed in training mode gives bit-identical outputs.
  auto run = [&] {
    std::mt19937_64 r(99);
    return encoder_forward(feats, cfg, p2, true, r);
  };
  CHECK(bit_equal(run(), run()));
}

TEST_CASE("pruning to the cgmlp branch") {
  EncoderConfig cfg;
  cfg.num_blocks = 2;
  cfg.merge = MergeKind::WeightedAverage;
  cfg.seed = 14;
  EncoderParams full = init_encoder(cfg);
  EncoderParams pruned = prune_to_cgmlp(cfg, full);
  CHECK(pruned.pruned);
  CHECK(pruned.parameter_count() < full.parameter_count());

  std::mt19937_64 rng(15), f1(0), f2(0);
  Tensor feats = random_tensor({24, cfg.feature_dim}, rng);
  Tensor forced = encoder_forward(feats, cfg, full, false, f1, nullptr,
                                  BranchMode::ForcedCgmlpWeights);
  Tensor lean = encoder_forward(feats, cfg, pruned, false, f2);
  CHECK(bit_equal(lean, forced));

  EncoderConfig concat_cfg = cfg;
  concat_cfg.merge = MergeKind::Concat;
  EncoderParams cp = init_encoder(concat_cfg);
  CHECK_THROWS_AS(prune_to_cgmlp(concat_cfg, cp), ConfigError);
}

TEST_CASE("pruned encoder runtime scales linearly") {
  EncoderConfig cfg;
  cfg.num_blocks = 1;
  cfg.merge = MergeKind::WeightedAverage;
  cfg.d = 16;
  cfg.d_hidden = 32;
  cfg.seed = 16;
  EncoderParams pruned = prune_to_cgmlp(cfg, init_encoder(cfg));
  const std::vector<int> grid{256, 512, 1024, 2048, 4096};
  std::map<int, Tensor> inputs;
  for (int t : grid) {
    std::mt19937_64 gen(20 + t);
    inputs.emplace(t, random_tensor({t, cfg.feature_dim}, gen));
  }
  NoGradGuard ng;
  // Retried: transient CPU frequency shifts can distort one measurement.
  double slope = 0.0;
  for (int attempt = 0; attempt < 3; ++attempt) {
    BenchResult r = forward_time_benchmark(
        [&](int t) {
          std::mt19937_64 fwd(0);
          encoder_forward(inputs.at(t), cfg, pruned, false, fwd);
        },
        grid, 5);
    slope = r.slope;
    if (std::abs(slope - 1.0) <= 0.25) break;
  }
  CHECK(slope == doctest::Approx(1.0).epsilon(0.25));
}

TEST_CASE("checkpoint round trip and failure modes") {
  EncoderConfig cfg;
  cfg.num_blocks = 2;
  cfg.merge = MergeKind::WeightedAverage;
  cfg.branch_dropout = 0.25;
  cfg.attention = AttentionKind::Fastformer;
  cfg.seed = 17;
  EncoderParams params = init_encoder(cfg);

  fs::path path = temp_file("bf_ckpt_roundtrip.bin");
  save_checkpoint(path.string(), cfg, params);
  Checkpoint ck = load_checkpoint(path.string());
  CHECK(ck.config.num_blocks == cfg.num_blocks);
  CHECK(ck.config.attention == cfg.attention);
  CHECK(ck.config.branch_dropout == cfg.branch_dropout);
  CHECK_FALSE(ck.params.pruned);
  bool identical = true;
  std::vector<Tensor> originals;
  params.visit([&](const std::string&, Tensor& t) { originals.push_back(t); });
  std::size_t idx = 0;
  ck.params.visit([&](const std::string&, Tensor& t) {
    identical = identical && bit_equal(t, originals[idx++]);
  });
  CHECK(idx == originals.size());
  CHECK(identical);

  // Pruned models round trip with the pruned flag intact.
  EncoderParams pruned = prune_to_cgmlp(cfg, params);
  fs::path ppath = temp_file("bf_ckpt_pruned.bin");
  save_checkpoint(ppath.string(), cfg, pruned);
  CHECK(load_checkpoint(ppath.string()).params.pruned);

  // Bad magic.
  fs::path bad = temp_file("bf_ckpt_bad.bin");
  std::ofstream(bad) << "not a checkpoint\n";
  try {
    load_checkpoint(bad.string());
    FAIL("expected CheckpointError");
  } catch (const CheckpointError& e) {
    CHECK(e.kind == CheckpointError::Kind::BadHeader);
  }

  // Version mismatch.
  {
    std::ifstream in(path, std::ios::binary);
    std::string blob((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    auto pos = blob.find("format_version=1");
    REQUIRE(pos != std::string::npos);
    blob.replace(pos, 16, "format_version=9");
    fs::path vpath = temp_file("bf_ckpt_version.bin");
    std::ofstream(vpath, std::ios::binary) << blob;
    try {
      load_checkpoint(vpath.string());
      FAIL("expected CheckpointError");
    } catch (const CheckpointError& e) {
      CHECK(e.kind == CheckpointError::Kind::VersionMismatch);
    }
  }

  // Truncation.
  {
    std::ifstream in(path, std::ios::binary);
    std::string blob((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    fs::path tpath = temp_file("bf_ckpt_trunc.bin");
    std::ofstream(tpath, std::ios::binary) << blob.substr(0, blob.size() - 37);
    try {
      load_checkpoint(tpath.string());
      FAIL("expected CheckpointError");
    } catch (const CheckpointError& e) {
      CHECK(e.kind == CheckpointError::Kind::Truncated);
    }
  }

  // Header config disagreeing with the stored arrays: shape mismatch that
  // names the offending parameter.
  {
    std::ifstream in(path, std::ios::binary);
    std::string blob((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    auto pos = blob.find("\nd=8\n");
    REQUIRE(pos != std::string::npos);
    blob.replace(pos, 5, "\nd=16\n");
    fs::path spath = temp_file("bf_ckpt_shape.bin");
    std::ofstream(spath, std::ios::binary) << blob;
    try {
      load_checkpoint(spath.string());
      FAIL("expected CheckpointError");
    } catch (const CheckpointError& e) {
      CHECK(e.kind == CheckpointError::Kind::ShapeMismatch);
      CHECK(std::string(e.what()).find("subsample") != std::string::npos);
    }
  }
}

TEST_CASE("encoder config json round trip") {
  EncoderConfig cfg;
  cfg.num_blocks = 3;
  cfg.d = 12;
  cfg.heads = 3;
  cfg.d_hidden = 24;
  cfg.attention = AttentionKind::Fastformer;
  cfg.merge = MergeKind::WeightedAverage;
  cfg.branch_dropout = 0.4;
  cfg.seed = 77;
  EncoderConfig back = encoder_config_from_json(encoder_config_to_json(cfg));
  CHECK(back.num_blocks == cfg.num_blocks);
  CHECK(back.d == cfg.d);
  CHECK(back.heads == cfg.heads);
  CHECK(back.attention == cfg.attention);
  CHECK(back.merge == cfg.merge);
  CHECK(back.branch_dropout == cfg.branch_dropout);
  CHECK(back.seed == cfg.seed);

  nlohmann::json j = encoder_config_to_json(cfg);
  j["mystery"] = 1;
  CHECK_THROWS_AS(encoder_config_from_json(j), ConfigError);
  nlohmann::json j2 = encoder_config_to_json(cfg);
  j2["attention"] = "linformer";
  CHECK_THROWS_AS(encoder_config_from_json(j2), ConfigError);
}
