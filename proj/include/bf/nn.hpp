#pragma once

#include <functional>
#include <random>
#include <string>

#include "bf/ops.hpp"
#include "bf/tensor.hpp"

namespace bf {

using ParamVisitor = std::function<void(const std::string&, Tensor&)>;

double uniform_init_bound(int fan_in);
Tensor uniform_tensor(std::vector<int> shape, double bound, std::mt19937_64& rng);

struct LinearParams {
  Tensor weight;  // [in x out]
  Tensor bias;    // [out], undefined when bias-free

  static LinearParams init(int in, int out, std::mt19937_64& rng, bool with_bias = true);
  void visit(const std::string& prefix, const ParamVisitor& v);
  int in_dim() const { return weight.rows(); }
  int out_dim() const { return weight.cols(); }
};

Tensor linear(const Tensor& x, const LinearParams& p);

struct LayerNormParams {
  Tensor gamma;  // [d]
  Tensor beta;   // [d]
  double eps = 1e-5;

  static LayerNormParams init(int d);
  void visit(const std::string& prefix, const ParamVisitor& v);
};

Tensor layer_norm(const Tensor& x, const LayerNormParams& p);

struct DepthwiseConvParams {
  Tensor kernel;  // [channels x K], K odd
  Tensor bias;    // [channels]

  // Near-unit gate at init: kernel ~ U(-1/sqrt(K), 1/sqrt(K)), bias = 1.
  static DepthwiseConvParams init(int channels, int k, std::mt19937_64& rng);
  void visit(const std::string& prefix, const ParamVisitor& v);
  int kernel_size() const { return kernel.cols(); }
};

Tensor depthwise_conv1d(const Tensor& x, const DepthwiseConvParams& p);

// Two 3x3 stride-2 valid convolution stages with GeLU, then a linear
// projection of the flattened channels to d.
struct SubsamplerParams {
  Tensor conv1_w;  // [c x 1 x 3 x 3]
  Tensor conv1_b;  // [c]
  Tensor conv2_w;  // [c x c x 3 x 3]
  Tensor conv2_b;  // [c]
  LinearParams out_proj;

  static SubsamplerParams init(int feature_dim, int d, std::mt19937_64& rng);
  void visit(const std::string& prefix, const ParamVisitor& v);
};

// Length map of one valid 3x3 stride-2 stage: L -> floor((L-3)/2) + 1.
int subsample_stage_length(int len);
// Both stages; input below the minimum usable length (7) is an error.
int subsampled_length(int t);
constexpr int kSubsampleMinLength = 7;

Tensor conv_subsample(const Tensor& x, const SubsamplerParams& p);

Tensor sinusoidal_pe(int t, int d);

inline Tensor dropout(const Tensor& x, double p, bool training, std::mt19937_64& rng) {
  return dropout_op(x, p, training, rng);
}

}  // namespace bf
