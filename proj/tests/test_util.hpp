#pragma once

#include <algorithm>
#include <cmath>
#include <cstring>
#include <functional>
#include <random>
#include <vector>

#include "bf/tensor.hpp"

namespace bft {

inline bf::Tensor random_tensor(std::vector<int> shape, std::mt19937_64& rng, double lo = -2.0,
                                double hi = 2.0, bool requires_grad = false) {
  std::uniform_real_distribution<double> dist(lo, hi);
  std::size_t n = 1;
  for (int s : shape) n *= static_cast<std::size_t>(s);
  std::vector<double> data(n);
  for (double& v : data) v = dist(rng);
  return bf::Tensor::from(std::move(shape), std::move(data), requires_grad);
}

// Worst relative error between tape gradients and central finite differences
// over the given leaves; the loss closure must be re-evaluable.
inline double fd_check(std::vector<bf::Tensor> leaves,
                       const std::function<bf::Tensor()>& lossf, double h = 1e-5) {
  for (auto& t : leaves) t.zero_grad();
  bf::Tensor loss = lossf();
  bf::backward(loss);
  double worst = 0.0;
  bf::NoGradGuard ng;
  for (auto& t : leaves) {
    for (std::size_t i = 0; i < t.numel(); ++i) {
      const double orig = t.data()[i];
      t.data()[i] = orig + h;
      const double up = lossf().value();
      t.data()[i] = orig - h;
      const double down = lossf().value();
      t.data()[i] = orig;
      const double numeric = (up - down) / (2.0 * h);
      const double analytic = t.has_grad() ? t.grad()[i] : 0.0;
      const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-6});
      worst = std::max(worst, std::abs(analytic - numeric) / denom);
    }
  }
  return worst;
}

inline bool bit_equal(const bf::Tensor& a, const bf::Tensor& b) {
  if (a.shape() != b.shape()) return false;
  for (std::size_t i = 0; i < a.numel(); ++i)
    if (std::memcmp(&a.data()[i], &b.data()[i], sizeof(double)) != 0) return false;
  return true;
}

}  // namespace bft
