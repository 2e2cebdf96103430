#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <vector>

namespace bf {

namespace detail {

// One node of the reverse-mode tape. A node is a leaf (parameter/input) or
// the output of a primitive op; in the latter case `backward` scatters the
// node's gradient into its parents.
struct TensorNode {
  std::vector<int> shape;
  std::vector<double> data;
  std::vector<double> grad;  // allocated lazily, same length as data
  bool requires_grad = false;
  std::vector<std::shared_ptr<TensorNode>> parents;
  std::function<void(TensorNode&)> backward;
  const char* op_name = "leaf";

  std::size_t numel() const { return data.size(); }
  std::vector<double>& ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
    return grad;
  }
};

}  // namespace detail

// Whether ops record tape nodes. Disabled inside a NoGradGuard scope
// (inference and benchmarking paths).
bool grad_enabled();

class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

// Dense row-major tensor of 64-bit floats. Value-semantic handle to a shared
// tape node; copying a Tensor aliases the same storage.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(std::vector<int> shape, bool requires_grad = false);
  static Tensor full(std::vector<int> shape, double value, bool requires_grad = false);
  static Tensor from(std::vector<int> shape, std::vector<double> data,
                     bool requires_grad = false);
  static Tensor scalar(double v, bool requires_grad = false);
  static Tensor wrap(std::shared_ptr<detail::TensorNode> n);

  bool defined() const { return node_ != nullptr; }
  const std::vector<int>& shape() const { return node_->shape; }
  int ndim() const { return static_cast<int>(node_->shape.size()); }
  int dim(int i) const { return node_->shape[static_cast<std::size_t>(i)]; }
  std::size_t numel() const { return node_->numel(); }
  // 2-d conveniences.
  int rows() const { return node_->shape[0]; }
  int cols() const { return node_->shape[1]; }

  double* data() { return node_->data.data(); }
  const double* data() const { return node_->data.data(); }
  std::vector<double>& data_vec() { return node_->data; }
  const std::vector<double>& data_vec() const { return node_->data; }

  double value() const;                // scalar tensors only
  double at(int r, int c) const { return node_->data[static_cast<std::size_t>(r) * cols() + c]; }
  double& at(int r, int c) { return node_->data[static_cast<std::size_t>(r) * cols() + c]; }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool rg) { node_->requires_grad = rg; }
  bool has_grad() const { return !node_->grad.empty(); }
  const std::vector<double>& grad() const { return node_->grad; }
  std::vector<double>& grad_vec() { return node_->ensure_grad(); }
  void zero_grad() {
    if (!node_->grad.empty()) node_->grad.assign(node_->data.size(), 0.0);
  }

  std::shared_ptr<detail::TensorNode> node() const { return node_; }

 private:
  std::shared_ptr<detail::TensorNode> node_;
};

// Reverse-mode sweep from a scalar loss: topologically replays the tape once
// and accumulates gradients on every reachable requires_grad tensor.
void backward(const Tensor& loss);

std::string shape_str(const std::vector<int>& shape);

}  // namespace bf
