#pragma once

#include <cstdint>
#include <optional>
#include <utility>

#include "bf/attention.hpp"
#include "bf/cgmlp.hpp"

namespace bf {

enum class MergeKind { Concat, WeightedAverage };
enum class BranchDropDecision { KeepBoth, DropAttention };

struct ConcatMergeParams {
  LinearParams proj;  // [2d x d], no bias

  static ConcatMergeParams init(int d, std::mt19937_64& rng);
  void visit(const std::string& prefix, const ParamVisitor& v);
};

struct WeightedMergeParams {
  AttnPoolingParams pool_att, pool_mlp;
  LinearParams proj_att, proj_mlp;  // [d x 1], no bias

  static WeightedMergeParams init(int d, std::mt19937_64& rng);
  void visit(const std::string& prefix, const ParamVisitor& v);
};

struct MergeParams {
  MergeKind kind = MergeKind::Concat;
  double branch_dropout_p = 0.0;
  std::optional<ConcatMergeParams> concat;
  std::optional<WeightedMergeParams> weighted;

  static MergeParams init(MergeKind kind, int d, double branch_dropout_p, std::mt19937_64& rng);
  void visit(const std::string& prefix, const ParamVisitor& v);
};

Tensor merge_concat(const Tensor& y_att, const Tensor& y_mlp, const ConcatMergeParams& p);

// Eqs. 8-10 weighted average. The softmaxed (w_att, w_mlp) pair is written to
// weight_sink when provided.
Tensor merge_weighted_average(const Tensor& y_att, const Tensor& y_mlp,
                              const WeightedMergeParams& p,
                              std::pair<double, double>* weight_sink = nullptr);

// Per-block per-forward decision; inference always keeps both branches.
BranchDropDecision branch_dropout(MergeKind kind, double p, bool training, std::mt19937_64& rng);

struct BlockParams {
  std::optional<AttentionBranchParams> attn;  // absent in a pruned model
  CgmlpParams mlp;
  MergeParams merge;

  void visit(const std::string& prefix, const ParamVisitor& v);
};

struct EncoderConfig {
  int num_blocks = 2;
  int feature_dim = 8;
  int d = 8;
  int d_hidden = 16;
  int heads = 2;
  int kernel = 3;
  AttentionKind attention = AttentionKind::Mhsa;
  MergeKind merge = MergeKind::Concat;
  double dropout = 0.1;
  double branch_dropout = 0.0;
  std::uint64_t seed = 0;

  void validate() const;
};

struct EvalCounters {
  long attention_evals = 0;
  long mlp_evals = 0;
};

struct ForwardSinks {
  std::vector<AttentionTrace>* traces = nullptr;                    // per block
  std::vector<std::pair<double, double>>* branch_weights = nullptr;  // per block
  EvalCounters* counters = nullptr;
};

// How the two branches are combined for this forward pass.
enum class BranchMode {
  Normal,             // merge as configured (branch dropout may apply in training)
  ForcedCgmlpWeights,  // attention branch still evaluated, weights pinned to (0, 1)
  PrunedCgmlpOnly,     // attention branch never evaluated
};

struct EncoderParams {
  SubsamplerParams subsampler;
  std::vector<BlockParams> blocks;
  bool pruned = false;

  void visit(const ParamVisitor& v);
  std::size_t parameter_count();
};

Tensor block_forward(const Tensor& x, BlockParams& p, bool training, std::mt19937_64& rng,
                     AttentionTrace* trace = nullptr,
                     std::pair<double, double>* weight_sink = nullptr,
                     EvalCounters* counters = nullptr, BranchMode mode = BranchMode::Normal);

EncoderParams init_encoder(const EncoderConfig& cfg);
EncoderParams init_encoder(const EncoderConfig& cfg, std::mt19937_64& rng);

Tensor encoder_forward(const Tensor& features, const EncoderConfig& cfg, EncoderParams& params,
                       bool training, std::mt19937_64& rng, ForwardSinks* sinks = nullptr,
                       BranchMode mode = BranchMode::Normal);

// Drops attention-branch and merge parameters; the result's forward equals
// the original run with every block's weights forced to (0, 1).
EncoderParams prune_to_cgmlp(const EncoderConfig& cfg, const EncoderParams& params);

const char* to_string(AttentionKind k);
const char* to_string(MergeKind k);
AttentionKind attention_kind_from_string(const std::string& s);
MergeKind merge_kind_from_string(const std::string& s);

}  // namespace bf
