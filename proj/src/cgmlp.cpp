#include "bf/cgmlp.hpp"

#include "bf/errors.hpp"

namespace bf {

CsguParams CsguParams::init(int d_hidden, int k, std::mt19937_64& rng) {
  if (d_hidden % 2 != 0)
    throw ConfigError("csgu requires an even hidden dim, got " + std::to_string(d_hidden));
  CsguParams p;
  p.ln = LayerNormParams::init(d_hidden / 2);
  p.conv = DepthwiseConvParams::init(d_hidden / 2, k, rng);
  return p;
}

void CsguParams::visit(const std::string& prefix, const ParamVisitor& v) {
  ln.visit(prefix + ".ln", v);
  conv.visit(prefix + ".conv", v);
}

Tensor csgu(const Tensor& z, const CsguParams& p) {
  if (z.ndim() != 2 || z.cols() % 2 != 0)
    throw ConfigError("csgu input feature dim must be even, got " + shape_str(z.shape()));
  auto [z1, z2] = split_cols_half(z);
  Tensor gate = depthwise_conv1d(layer_norm(z2, p.ln), p.conv);
  return mul(z1, gate);
}

CgmlpParams CgmlpParams::init(int d, int d_hidden, int k, double dropout_p, std::mt19937_64& rng) {
  CgmlpParams p;
  p.entry_ln = LayerNormParams::init(d);
  p.up = LinearParams::init(d, d_hidden, rng);
  p.gate = CsguParams::init(d_hidden, k, rng);
  p.down = LinearParams::init(d_hidden / 2, d, rng);
  p.dropout_p = dropout_p;
  return p;
}

void CgmlpParams::visit(const std::string& prefix, const ParamVisitor& v) {
  entry_ln.visit(prefix + ".ln", v);
  up.visit(prefix + ".up", v);
  gate.visit(prefix + ".csgu", v);
  down.visit(prefix + ".down", v);
}

Tensor cgmlp_forward(const Tensor& x, const CgmlpParams& p, bool training, std::mt19937_64& rng) {
  Tensor z = gelu(linear(layer_norm(x, p.entry_ln), p.up));
  Tensor y = linear(csgu(z, p.gate), p.down);
  return dropout(y, p.dropout_p, training, rng);
}

long long cgmlp_flop_estimate(long long t, long long d, long long d_hidden, long long k) {
  return t * d * d_hidden + t * d * d_hidden / 2 + t * k * d_hidden / 2;
}

}  // namespace bf
