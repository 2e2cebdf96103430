#include "bf/encoder.hpp"

#include "bf/errors.hpp"

namespace bf {

ConcatMergeParams ConcatMergeParams::init(int d, std::mt19937_64& rng) {
  ConcatMergeParams p;
  p.proj = LinearParams::init(2 * d, d, rng, /*with_bias=*/false);
  return p;
}

void ConcatMergeParams::visit(const std::string& prefix, const ParamVisitor& v) {
  proj.visit(prefix + ".proj", v);
}

WeightedMergeParams WeightedMergeParams::init(int d, std::mt19937_64& rng) {
  WeightedMergeParams p;
  p.pool_att = AttnPoolingParams::init(d, rng);
  p.pool_mlp = AttnPoolingParams::init(d, rng);
  p.proj_att = LinearParams::init(d, 1, rng, /*with_bias=*/false);
  p.proj_mlp = LinearParams::init(d, 1, rng, /*with_bias=*/false);
  return p;
}

void WeightedMergeParams::visit(const std::string& prefix, const ParamVisitor& v) {
  pool_att.visit(prefix + ".pool_att", v);
  pool_mlp.visit(prefix + ".pool_mlp", v);
  proj_att.visit(prefix + ".proj_att", v);
  proj_mlp.visit(prefix + ".proj_mlp", v);
}

MergeParams MergeParams::init(MergeKind kind, int d, double branch_dropout_p,
                              std::mt19937_64& rng) {
  if (branch_dropout_p < 0.0 || branch_dropout_p >= 1.0)
    throw ConfigError("branch dropout rate must be in [0, 1), got " +
                      std::to_string(branch_dropout_p));
  MergeParams p;
  p.kind = kind;
  p.branch_dropout_p = branch_dropout_p;
  if (kind == MergeKind::Concat)
    p.concat = ConcatMergeParams::init(d, rng);
  else
    p.weighted = WeightedMergeParams::init(d, rng);
  return p;
}

void MergeParams::visit(const std::string& prefix, const ParamVisitor& v) {
  if (concat) concat->visit(prefix + ".concat", v);
  if (weighted) weighted->visit(prefix + ".weighted", v);
}

Tensor merge_concat(const Tensor& y_att, const Tensor& y_mlp, const ConcatMergeParams& p) {
  if (y_att.shape() != y_mlp.shape())
    throw ShapeError("merge_concat branch shapes differ: " + shape_str(y_att.shape()) + " vs " +
                     shape_str(y_mlp.shape()));
  return linear(concat_cols(y_att, y_mlp), p.proj);
}

Tensor merge_weighted_average(const Tensor& y_att, const Tensor& y_mlp,
                              const WeightedMergeParams& p,
                              std::pair<double, double>* weight_sink) {
  if (y_att.shape() != y_mlp.shape())
    throw ShapeError("merge_weighted_average branch shapes differ: " + shape_str(y_att.shape()) +
                     " vs " + shape_str(y_mlp.shape()));
  Tensor s_att = linear(attention_pooling(y_att, p.pool_att), p.proj_att);  // [1 x 1]
  Tensor s_mlp = linear(attention_pooling(y_mlp, p.pool_mlp), p.proj_mlp);
  Tensor weights = softmax_rows(concat_cols(s_att, s_mlp));  // [1 x 2]
  Tensor w_att = narrow_cols(weights, 0, 1);
  Tensor w_mlp = narrow_cols(weights, 1, 1);
  if (weight_sink) *weight_sink = {w_att.value(), w_mlp.value()};
  return add(mul(w_att, y_att), mul(w_mlp, y_mlp));
}

BranchDropDecision branch_dropout(MergeKind kind, double p, bool training, std::mt19937_64& rng) {
  if (kind != MergeKind::WeightedAverage)
    throw ConfigError("branch dropout requires weighted-average merging");
  if (p < 0.0 || p >= 1.0)
    throw ConfigError("branch dropout rate must be in [0, 1), got " + std::to_string(p));
  if (!training || p == 0.0) return BranchDropDecision::KeepBoth;
  std::uniform_real_distribution<double> uni(0.0, 1.0);
  return uni(rng) < p ? BranchDropDecision::DropAttention : BranchDropDecision::KeepBoth;
}

void BlockParams::visit(const std::string& prefix, const ParamVisitor& v) {
  if (attn) attn->visit(prefix + ".attn", v);
  mlp.visit(prefix + ".cgmlp", v);
  merge.visit(prefix + ".merge", v);
}

void EncoderConfig::validate() const {
  if (num_blocks < 0) throw ConfigError("num_blocks must be non-negative");
  if (d <= 0 || heads <= 0 || d % heads != 0)
    throw ConfigError("d=" + std::to_string(d) + " must be a positive multiple of heads=" +
                      std::to_string(heads));
  if (d % 2 != 0) throw ConfigError("d must be even for sinusoidal positional encoding");
  if (d_hidden <= 0 || d_hidden % 2 != 0)
    throw ConfigError("d_hidden must be positive and even, got " + std::to_string(d_hidden));
  if (kernel <= 0 || kernel % 2 == 0)
    throw ConfigError("kernel must be positive and odd, got " + std::to_string(kernel));
  if (dropout < 0.0 || dropout >= 1.0) throw ConfigError("dropout must be in [0, 1)");
  if (branch_dropout < 0.0 || branch_dropout >= 1.0)
    throw ConfigError("branch_dropout must be in [0, 1)");
  if (branch_dropout > 0.0 && merge != MergeKind::WeightedAverage)
    throw ConfigError("branch_dropout requires weighted-average merging");
  if (feature_dim < kSubsampleMinLength)
    throw ConfigError("feature_dim must be at least " + std::to_string(kSubsampleMinLength));
}

void EncoderParams::visit(const ParamVisitor& v) {
  subsampler.visit("subsample", v);
  for (std::size_t i = 0; i < blocks.size(); ++i)
    blocks[i].visit("block" + std::to_string(i), v);
}

std::size_t EncoderParams::parameter_count() {
  std::size_t n = 0;
  visit([&n](const std::string&, Tensor& t) { n += t.numel(); });
  return n;
}

Tensor block_forward(const Tensor& x, BlockParams& p, bool training, std::mt19937_64& rng,
                     AttentionTrace* trace, std::pair<double, double>* weight_sink,
                     EvalCounters* counters, BranchMode mode) {
  auto run_mlp = [&] {
    if (counters) counters->mlp_evals++;
    return cgmlp_forward(x, p.mlp, training, rng);
  };
  auto run_attn = [&] {
    if (!p.attn) throw ContractError("block has no attention branch parameters");
    if (counters) counters->attention_evals++;
    return attention_branch_forward(x, *p.attn, training, rng, trace);
  };

  if (mode == BranchMode::PrunedCgmlpOnly) {
    if (weight_sink) *weight_sink = {0.0, 1.0};
    return add(x, run_mlp());
  }
  if (mode == BranchMode::ForcedCgmlpWeights) {
    run_attn();  // evaluated and discarded; the forced weights ignore it
    if (weight_sink) *weight_sink = {0.0, 1.0};
    return add(x, run_mlp());
  }

  if (p.merge.kind == MergeKind::WeightedAverage) {
    const auto decision = branch_dropout(p.merge.kind, p.merge.branch_dropout_p, training, rng);
    if (decision == BranchDropDecision::DropAttention) {
      if (weight_sink) *weight_sink = {0.0, 1.0};
      return add(x, run_mlp());
    }
    Tensor y_att = run_attn();
    Tensor y_mlp = run_mlp();
    return add(x, merge_weighted_average(y_att, y_mlp, *p.merge.weighted, weight_sink));
  }
  Tensor y_att = run_attn();
  Tensor y_mlp = run_mlp();
  return add(x, merge_concat(y_att, y_mlp, *p.merge.concat));
}

EncoderParams init_encoder(const EncoderConfig& cfg) {
  std::mt19937_64 rng(cfg.seed);
  return init_encoder(cfg, rng);
}

EncoderParams init_encoder(const EncoderConfig& cfg, std::mt19937_64& rng) {
  cfg.validate();
  EncoderParams p;
  p.subsampler = SubsamplerParams::init(cfg.feature_dim, cfg.d, rng);
  for (int i = 0; i < cfg.num_blocks; ++i) {
    BlockParams b;
    b.attn = AttentionBranchParams::init(cfg.attention, cfg.d, cfg.heads, cfg.dropout, rng);
    b.mlp = CgmlpParams::init(cfg.d, cfg.d_hidden, cfg.kernel, cfg.dropout, rng);
    b.merge = MergeParams::init(cfg.merge, cfg.d, cfg.branch_dropout, rng);
    p.blocks.push_back(std::move(b));
  }
  return p;
}

Tensor encoder_forward(const Tensor& features, const EncoderConfig& cfg, EncoderParams& params,
                       bool training, std::mt19937_64& rng, ForwardSinks* sinks, BranchMode mode) {
  if (features.ndim() != 2 || features.cols() != cfg.feature_dim)
    throw ShapeError("encoder input must be [T x " + std::to_string(cfg.feature_dim) +
                     "], got " + shape_str(features.shape()));
  if (params.pruned && mode == BranchMode::Normal) mode = BranchMode::PrunedCgmlpOnly;

  Tensor h = conv_subsample(features, params.subsampler);
  h = add(h, sinusoidal_pe(h.rows(), cfg.d));

  if (sinks && sinks->traces) sinks->traces->assign(params.blocks.size(), AttentionTrace{});
  if (sinks && sinks->branch_weights) sinks->branch_weights->assign(params.blocks.size(), {0.0, 0.0});
  for (std::size_t i = 0; i < params.blocks.size(); ++i) {
    AttentionTrace* trace = sinks && sinks->traces ? &(*sinks->traces)[i] : nullptr;
    std::pair<double, double>* wsink =
        sinks && sinks->branch_weights ? &(*sinks->branch_weights)[i] : nullptr;
    EvalCounters* counters = sinks ? sinks->counters : nullptr;
    h = block_forward(h, params.blocks[i], training, rng, trace, wsink, counters, mode);
  }
  return h;
}

EncoderParams prune_to_cgmlp(const EncoderConfig& cfg, const EncoderParams& params) {
  if (cfg.merge != MergeKind::WeightedAverage)
    throw ConfigError("pruning is unsupported for concat merging");
  EncoderParams pruned = params;
  pruned.pruned = true;
  for (auto& b : pruned.blocks) {
    b.attn.reset();
    b.merge.weighted.reset();
  }
  return pruned;
}

const char* to_string(AttentionKind k) {
  return k == AttentionKind::Mhsa ? "mhsa" : "fastformer";
}

const char* to_string(MergeKind k) {
  return k == MergeKind::Concat ? "concat" : "weighted_average";
}

AttentionKind attention_kind_from_string(const std::string& s) {
  if (s == "mhsa") return AttentionKind::Mhsa;
  if (s == "fastformer") return AttentionKind::Fastformer;
  throw ConfigError("unknown attention kind: " + s);
}

MergeKind merge_kind_from_string(const std::string& s) {
  if (s == "concat") return MergeKind::Concat;
  if (s == "weighted_average") return MergeKind::WeightedAverage;
  throw ConfigError("unknown merge kind: " + s);
}

}  // namespace bf
