#include "bf/attention.hpp"

#include <cmath>

#include "bf/errors.hpp"

namespace bf {

AttnPoolingParams AttnPoolingParams::init(int d, std::mt19937_64& rng) {
  AttnPoolingParams p;
  p.w = uniform_tensor({d, 1}, uniform_init_bound(d), rng);
  return p;
}

void AttnPoolingParams::visit(const std::string& prefix, const ParamVisitor& v) {
  v(prefix + ".w", w);
}

Tensor attention_pooling(const Tensor& y, const AttnPoolingParams& p) {
  if (y.ndim() != 2 || y.cols() != p.w.rows())
    throw ShapeError("attention_pooling dim mismatch: input " + shape_str(y.shape()) +
                     ", query vector length " + std::to_string(p.w.rows()));
  const int d = y.cols();
  Tensor scores = scale(matmul(y, p.w), 1.0 / std::sqrt(static_cast<double>(d)));  // [T x 1]
  Tensor alpha = softmax_rows(transpose(scores));                                  // [1 x T]
  return matmul(alpha, y);                                                         // [1 x d]
}

Tensor scaled_dot_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                            AttentionTrace* trace) {
  if (q.ndim() != 2 || k.ndim() != 2 || v.ndim() != 2)
    throw ShapeError("scaled_dot_attention expects 2-d Q/K/V");
  if (q.cols() != k.cols())
    throw ShapeError("scaled_dot_attention Q/K feature dims differ: " + shape_str(q.shape()) +
                     " vs " + shape_str(k.shape()));
  if (k.rows() != v.rows())
    throw ShapeError("scaled_dot_attention K/V lengths differ: " + shape_str(k.shape()) + " vs " +
                     shape_str(v.shape()));
  const int dk = q.cols();
  Tensor scores = scale(matmul(q, transpose(k)), 1.0 / std::sqrt(static_cast<double>(dk)));
  Tensor weights = softmax_rows(scores);
  if (trace) {
    trace->t = weights.rows();
    trace->heads.push_back(weights.data_vec());
  }
  return matmul(weights, v);
}

MhsaParams MhsaParams::init(int d, int h, std::mt19937_64& rng) {
  if (h < 1 || d % h != 0)
    throw ConfigError("attention dim " + std::to_string(d) + " not divisible by heads " +
                      std::to_string(h));
  MhsaParams p;
  p.heads = h;
  p.q = LinearParams::init(d, d, rng);
  p.k = LinearParams::init(d, d, rng);
  p.v = LinearParams::init(d, d, rng);
  p.out = LinearParams::init(d, d, rng);
  return p;
}

void MhsaParams::visit(const std::string& prefix, const ParamVisitor& v) {
  q.visit(prefix + ".q", v);
  k.visit(prefix + ".k", v);
  this->v.visit(prefix + ".v", v);
  out.visit(prefix + ".out", v);
}

Tensor multi_head_attention(const Tensor& x, const MhsaParams& p, AttentionTrace* trace) {
  const int d = x.cols();
  if (d % p.heads != 0)
    throw ConfigError("multi_head_attention: d=" + std::to_string(d) + " not divisible by h=" +
                      std::to_string(p.heads));
  const int dh = d / p.heads;
  Tensor q = linear(x, p.q);
  Tensor k = linear(x, p.k);
  Tensor v = linear(x, p.v);
  Tensor cat;
  for (int h = 0; h < p.heads; ++h) {
    Tensor head = scaled_dot_attention(narrow_cols(q, h * dh, dh), narrow_cols(k, h * dh, dh),
                                       narrow_cols(v, h * dh, dh), trace);
    cat = h == 0 ? head : concat_cols(cat, head);
  }
  return linear(cat, p.out);
}

FastformerParams FastformerParams::init(int d, int h, std::mt19937_64& rng) {
  if (h < 1 || d % h != 0)
    throw ConfigError("attention dim " + std::to_string(d) + " not divisible by heads " +
                      std::to_string(h));
  FastformerParams p;
  p.heads = h;
  p.q = LinearParams::init(d, d, rng);
  p.k = LinearParams::init(d, d, rng);
  p.v = LinearParams::init(d, d, rng);
  p.out = LinearParams::init(d, d, rng);
  const int dh = d / h;
  for (int i = 0; i < h; ++i) {
    p.pool_q.push_back(AttnPoolingParams::init(dh, rng));
    p.pool_k.push_back(AttnPoolingParams::init(dh, rng));
  }
  return p;
}

void FastformerParams::visit(const std::string& prefix, const ParamVisitor& v) {
  q.visit(prefix + ".q", v);
  k.visit(prefix + ".k", v);
  this->v.visit(prefix + ".v", v);
  out.visit(prefix + ".out", v);
  for (std::size_t i = 0; i < pool_q.size(); ++i) {
    pool_q[i].visit(prefix + ".pool_q" + std::to_string(i), v);
    pool_k[i].visit(prefix + ".pool_k" + std::to_string(i), v);
  }
}

Tensor fastformer(const Tensor& x, const FastformerParams& p) {
  const int t = x.rows(), d = x.cols();
  if (d % p.heads != 0)
    throw ConfigError("fastformer: d=" + std::to_string(d) + " not divisible by h=" +
                      std::to_string(p.heads));
  const int dh = d / p.heads;
  Tensor q = linear(x, p.q);
  Tensor k = linear(x, p.k);
  Tensor v = linear(x, p.v);
  Tensor cat;
  for (int h = 0; h < p.heads; ++h) {
    Tensor qh = narrow_cols(q, h * dh, dh);
    Tensor kh = narrow_cols(k, h * dh, dh);
    Tensor vh = narrow_cols(v, h * dh, dh);
    Tensor q_glob = attention_pooling(qh, p.pool_q[static_cast<std::size_t>(h)]);
    Tensor k_mod = mul(tile_rows(q_glob, t), kh);
    Tensor k_glob = attention_pooling(k_mod, p.pool_k[static_cast<std::size_t>(h)]);
    Tensor v_mod = mul(tile_rows(k_glob, t), vh);
    // Query residual per head, ahead of the final projection.
    Tensor head = add(v_mod, qh);
    cat = h == 0 ? head : concat_cols(cat, head);
  }
  return linear(cat, p.out);
}

AttentionBranchParams AttentionBranchParams::init(AttentionKind kind, int d, int h,
                                                  double dropout_p, std::mt19937_64& rng) {
  AttentionBranchParams p;
  p.kind = kind;
  p.ln = LayerNormParams::init(d);
  p.dropout_p = dropout_p;
  if (kind == AttentionKind::Mhsa)
    p.mhsa = MhsaParams::init(d, h, rng);
  else
    p.fast = FastformerParams::init(d, h, rng);
  return p;
}

void AttentionBranchParams::visit(const std::string& prefix, const ParamVisitor& v) {
  ln.visit(prefix + ".ln", v);
  if (mhsa) mhsa->visit(prefix + ".mhsa", v);
  if (fast) fast->visit(prefix + ".fastformer", v);
}

Tensor attention_branch_forward(const Tensor& x, const AttentionBranchParams& p, bool training,
                                std::mt19937_64& rng, AttentionTrace* trace) {
  Tensor h = layer_norm(x, p.ln);
  Tensor y = p.kind == AttentionKind::Mhsa ? multi_head_attention(h, *p.mhsa, trace)
                                           : fastformer(h, *p.fast);
  return dropout(y, p.dropout_p, training, rng);
}

}  // namespace bf
