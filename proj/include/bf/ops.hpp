#pragma once

#include <random>
#include <utility>

#include "bf/tensor.hpp"

namespace bf {

// Primitive tape ops. Each records a backward rule when gradients are
// enabled and any input requires them.

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);

// Elementwise; shapes must match exactly except that either operand may be a
// scalar (numel == 1), which broadcasts.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double c);

Tensor concat_cols(const Tensor& a, const Tensor& b);
Tensor narrow_cols(const Tensor& a, int start, int len);
// Equal split along the feature dimension; errors on odd width.
std::pair<Tensor, Tensor> split_cols_half(const Tensor& a);

// Repeat a [1 x d] row vector T times.
Tensor tile_rows(const Tensor& v, int t);
// Add a length-d vector to every row of a [T x d] matrix.
Tensor add_rowvec(const Tensor& m, const Tensor& v);

Tensor softmax_rows(const Tensor& x);
Tensor log_softmax_rows(const Tensor& x);
Tensor layer_norm_op(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps);
Tensor gelu(const Tensor& x);  // exact x * Phi(x)
Tensor dropout_op(const Tensor& x, double p, bool training, std::mt19937_64& rng);

// x: [T x C], kernel: [C x K] (K odd), bias: [C]; zero padding (K-1)/2.
Tensor depthwise_conv1d_op(const Tensor& x, const Tensor& kernel, const Tensor& bias);

// x: [C x H x W], w: [O x C x 3 x 3], b: [O]; stride 2, no padding.
Tensor conv2d_s2_valid(const Tensor& x, const Tensor& w, const Tensor& b);
// [C x H x W] -> [H x C*W]: one row per time step with channels flattened.
Tensor channels_to_rows(const Tensor& x);

Tensor reshape(const Tensor& x, std::vector<int> shape);
Tensor sum_all(const Tensor& x);
Tensor mean_rows(const Tensor& m);  // [T x d] -> [1 x d]

}  // namespace bf
