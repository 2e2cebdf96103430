#include "bf/nn.hpp"

#include <cmath>

#include "bf/errors.hpp"

namespace bf {

double uniform_init_bound(int fan_in) { return 1.0 / std::sqrt(static_cast<double>(fan_in)); }

Tensor uniform_tensor(std::vector<int> shape, double bound, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> uni(-bound, bound);
  Tensor t = Tensor::zeros(std::move(shape), true);
  for (std::size_t i = 0; i < t.numel(); ++i) t.data()[i] = uni(rng);
  return t;
}

LinearParams LinearParams::init(int in, int out, std::mt19937_64& rng, bool with_bias) {
  LinearParams p;
  p.weight = uniform_tensor({in, out}, uniform_init_bound(in), rng);
  if (with_bias) p.bias = Tensor::zeros({out}, true);
  return p;
}

void LinearParams::visit(const std::string& prefix, const ParamVisitor& v) {
  v(prefix + ".weight", weight);
  if (bias.defined()) v(prefix + ".bias", bias);
}

Tensor linear(const Tensor& x, const LinearParams& p) {
  if (x.ndim() != 2 || x.cols() != p.in_dim())
    throw ShapeError("linear expects [T x " + std::to_string(p.in_dim()) + "] input, got " +
                     shape_str(x.shape()));
  Tensor y = matmul(x, p.weight);
  if (p.bias.defined()) y = add_rowvec(y, p.bias);
  return y;
}

LayerNormParams LayerNormParams::init(int d) {
  LayerNormParams p;
  p.gamma = Tensor::full({d}, 1.0, true);
  p.beta = Tensor::zeros({d}, true);
  return p;
}

void LayerNormParams::visit(const std::string& prefix, const ParamVisitor& v) {
  v(prefix + ".gamma", gamma);
  v(prefix + ".beta", beta);
}

Tensor layer_norm(const Tensor& x, const LayerNormParams& p) {
  return layer_norm_op(x, p.gamma, p.beta, p.eps);
}

DepthwiseConvParams DepthwiseConvParams::init(int channels, int k, std::mt19937_64& rng) {
  if (k % 2 == 0) throw ConfigError("depthwise conv kernel size must be odd, got " + std::to_string(k));
  DepthwiseConvParams p;
  p.kernel = uniform_tensor({channels, k}, uniform_init_bound(k), rng);
  p.bias = Tensor::full({channels}, 1.0, true);
  return p;
}

void DepthwiseConvParams::visit(const std::string& prefix, const ParamVisitor& v) {
  v(prefix + ".kernel", kernel);
  v(prefix + ".bias", bias);
}

Tensor depthwise_conv1d(const Tensor& x, const DepthwiseConvParams& p) {
  return depthwise_conv1d_op(x, p.kernel, p.bias);
}

int subsample_stage_length(int len) { return (len - 3) / 2 + 1; }

int subsampled_length(int t) {
  if (t < kSubsampleMinLength)
    throw ShapeError("conv_subsample requires at least " + std::to_string(kSubsampleMinLength) +
                     " frames, got " + std::to_string(t));
  return subsample_stage_length(subsample_stage_length(t));
}

SubsamplerParams SubsamplerParams::init(int feature_dim, int d, std::mt19937_64& rng) {
  if (feature_dim < kSubsampleMinLength)
    throw ConfigError("subsampler feature dim must be at least " +
                      std::to_string(kSubsampleMinLength) + ", got " + std::to_string(feature_dim));
  SubsamplerParams p;
  p.conv1_w = uniform_tensor({d, 1, 3, 3}, uniform_init_bound(9), rng);
  p.conv1_b = Tensor::zeros({d}, true);
  p.conv2_w = uniform_tensor({d, d, 3, 3}, uniform_init_bound(9 * d), rng);
  p.conv2_b = Tensor::zeros({d}, true);
  const int f_out = subsample_stage_length(subsample_stage_length(feature_dim));
  p.out_proj = LinearParams::init(d * f_out, d, rng);
  return p;
}

void SubsamplerParams::visit(const std::string& prefix, const ParamVisitor& v) {
  v(prefix + ".conv1.weight", conv1_w);
  v(prefix + ".conv1.bias", conv1_b);
  v(prefix + ".conv2.weight", conv2_w);
  v(prefix + ".conv2.bias", conv2_b);
  out_proj.visit(prefix + ".proj", v);
}

Tensor conv_subsample(const Tensor& x, const SubsamplerParams& p) {
  if (x.ndim() != 2) throw ShapeError("conv_subsample expects [T x F] input, got " + shape_str(x.shape()));
  subsampled_length(x.rows());  // validates the minimum length
  Tensor img = reshape(x, {1, x.rows(), x.cols()});
  Tensor h1 = gelu(conv2d_s2_valid(img, p.conv1_w, p.conv1_b));
  Tensor h2 = gelu(conv2d_s2_valid(h1, p.conv2_w, p.conv2_b));
  return linear(channels_to_rows(h2), p.out_proj);
}

Tensor sinusoidal_pe(int t, int d) {
  if (d % 2 != 0) throw ConfigError("sinusoidal positional encoding requires even dim, got " + std::to_string(d));
  Tensor pe = Tensor::zeros({t, d});
  for (int pos = 0; pos < t; ++pos)
    for (int i = 0; i < d / 2; ++i) {
      const double freq = std::pow(10000.0, -2.0 * i / d);
      pe.at(pos, 2 * i) = std::sin(pos * freq);
      pe.at(pos, 2 * i + 1) = std::cos(pos * freq);
    }
  return pe;
}

}  // namespace bf
