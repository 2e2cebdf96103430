#pragma once

#include "bf/nn.hpp"

namespace bf {

struct CsguParams {
  LayerNormParams ln;        // over d_hidden/2
  DepthwiseConvParams conv;  // d_hidden/2 channels, kernel K

  static CsguParams init(int d_hidden, int k, std::mt19937_64& rng);
  void visit(const std::string& prefix, const ParamVisitor& v);
};

// Split z into halves (z1, z2); gate: z1 (x) DWConv(LayerNorm(z2)).
// Linear gating, no activation before the product.
Tensor csgu(const Tensor& z, const CsguParams& p);

struct CgmlpParams {
  LayerNormParams entry_ln;  // over d
  LinearParams up;           // d -> d_hidden
  CsguParams gate;
  LinearParams down;         // d_hidden/2 -> d
  double dropout_p = 0.1;

  static CgmlpParams init(int d, int d_hidden, int k, double dropout_p, std::mt19937_64& rng);
  void visit(const std::string& prefix, const ParamVisitor& v);
};

// Dropout(CSGU(GeLU(LayerNorm(x) U)) V)
Tensor cgmlp_forward(const Tensor& x, const CgmlpParams& p, bool training, std::mt19937_64& rng);

// Multiply-accumulate count of the two channel projections and the
// depth-wise convolution: T*d*d_hidden + T*d*d_hidden/2 + T*K*d_hidden/2.
long long cgmlp_flop_estimate(long long t, long long d, long long d_hidden, long long k);

}  // namespace bf
