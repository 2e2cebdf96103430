#pragma once

#include <optional>
#include <vector>

#include "bf/nn.hpp"

namespace bf {

enum class AttentionKind { Mhsa, Fastformer };

// Captured per-head T x T attention weights (MHSA only), detached from the tape.
struct AttentionTrace {
  int t = 0;
  std::vector<std::vector<double>> heads;  // each T*T row-major
};

struct AttnPoolingParams {
  Tensor w;  // [d x 1]

  static AttnPoolingParams init(int d, std::mt19937_64& rng);
  void visit(const std::string& prefix, const ParamVisitor& v);
};

// Softmax-weighted sum of the rows of y against the learnable query vector;
// scores are scaled by 1/sqrt(d). Returns [1 x d].
Tensor attention_pooling(const Tensor& y, const AttnPoolingParams& p);

struct MhsaParams {
  int heads = 1;
  LinearParams q, k, v;  // each d -> d; per-head slices are column blocks
  LinearParams out;      // d -> d

  static MhsaParams init(int d, int h, std::mt19937_64& rng);
  void visit(const std::string& prefix, const ParamVisitor& v);
};

// softmax(Q K^T / sqrt(dk)) V; dk is Q's feature dim.
Tensor scaled_dot_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                            AttentionTrace* trace = nullptr);

Tensor multi_head_attention(const Tensor& x, const MhsaParams& p, AttentionTrace* trace = nullptr);

struct FastformerParams {
  int heads = 1;
  LinearParams q, k, v;  // each d -> d
  LinearParams out;      // d -> d
  std::vector<AttnPoolingParams> pool_q;  // one per head, over d/h
  std::vector<AttnPoolingParams> pool_k;

  static FastformerParams init(int d, int h, std::mt19937_64& rng);
  void visit(const std::string& prefix, const ParamVisitor& v);
};

Tensor fastformer(const Tensor& x, const FastformerParams& p);

struct AttentionBranchParams {
  AttentionKind kind = AttentionKind::Mhsa;
  LayerNormParams ln;
  double dropout_p = 0.1;
  std::optional<MhsaParams> mhsa;
  std::optional<FastformerParams> fast;

  static AttentionBranchParams init(AttentionKind kind, int d, int h, double dropout_p,
                                    std::mt19937_64& rng);
  void visit(const std::string& prefix, const ParamVisitor& v);
};

// Dropout(Attention(LayerNorm(x)))
Tensor attention_branch_forward(const Tensor& x, const AttentionBranchParams& p, bool training,
                                std::mt19937_64& rng, AttentionTrace* trace = nullptr);

}  // namespace bf
