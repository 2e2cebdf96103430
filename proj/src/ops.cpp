#include "bf/ops.hpp"

#include <cmath>
#include <string>

#include "bf/errors.hpp"

namespace bf {

namespace {

using Node = detail::TensorNode;
using NodePtr = std::shared_ptr<Node>;

Tensor make_op(const char* name, std::vector<int> shape, std::vector<double> data,
               std::vector<NodePtr> parents, std::function<void(Node&)> bwd) {
  auto n = std::make_shared<Node>();
  n->shape = std::move(shape);
  n->data = std::move(data);
  n->op_name = name;
  bool rg = false;
  if (grad_enabled()) {
    for (const auto& p : parents) rg = rg || p->requires_grad;
  }
  if (rg) {
    n->requires_grad = true;
    n->parents = std::move(parents);
    n->backward = std::move(bwd);
  }
  return Tensor::wrap(std::move(n));
}

void require_2d(const Tensor& t, const char* who) {
  if (t.ndim() != 2)
    throw ShapeError(std::string(who) + " requires a 2-d tensor, got " + shape_str(t.shape()));
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_2d(a, "matmul");
  require_2d(b, "matmul");
  if (a.cols() != b.rows())
    throw ShapeError("matmul inner dimensions differ: " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  const int m = a.rows(), k = a.cols(), n = b.cols();
  std::vector<double> out(static_cast<std::size_t>(m) * n, 0.0);
  const double* pa = a.data();
  const double* pb = b.data();
  for (int i = 0; i < m; ++i)
    for (int kk = 0; kk < k; ++kk) {
      const double av = pa[static_cast<std::size_t>(i) * k + kk];
      const double* brow = pb + static_cast<std::size_t>(kk) * n;
      double* orow = out.data() + static_cast<std::size_t>(i) * n;
      for (int j = 0; j < n; ++j) orow[j] += av * brow[j];
    }

  NodePtr na = a.node(), nb = b.node();
  return make_op("matmul", {m, n}, std::move(out), {na, nb}, [na, nb, m, k, n](Node& self) {
    const double* g = self.grad.data();
    if (na->requires_grad) {
      double* da = na->ensure_grad().data();
      const double* pbv = nb->data.data();
      for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) {
          const double gv = g[static_cast<std::size_t>(i) * n + j];
          const double* brow = pbv;  // dA[i,:] += gv * B[:,j]
          for (int kk = 0; kk < k; ++kk)
            da[static_cast<std::size_t>(i) * k + kk] += gv * brow[static_cast<std::size_t>(kk) * n + j];
        }
    }
    if (nb->requires_grad) {
      double* db = nb->ensure_grad().data();
      const double* pav = na->data.data();
      for (int i = 0; i < m; ++i)
        for (int kk = 0; kk < k; ++kk) {
          const double av = pav[static_cast<std::size_t>(i) * k + kk];
          const double* grow = g + static_cast<std::size_t>(i) * n;
          double* drow = db + static_cast<std::size_t>(kk) * n;
          for (int j = 0; j < n; ++j) drow[j] += av * grow[j];
        }
    }
  });
}

Tensor transpose(const Tensor& a) {
  require_2d(a, "transpose");
  const int m = a.rows(), n = a.cols();
  std::vector<double> out(a.numel());
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j)
      out[static_cast<std::size_t>(j) * m + i] = a.data()[static_cast<std::size_t>(i) * n + j];
  NodePtr na = a.node();
  return make_op("transpose", {n, m}, std::move(out), {na}, [na, m, n](Node& self) {
    if (!na->requires_grad) return;
    double* da = na->ensure_grad().data();
    const double* g = self.grad.data();
    for (int j = 0; j < n; ++j)
      for (int i = 0; i < m; ++i)
        da[static_cast<std::size_t>(i) * n + j] += g[static_cast<std::size_t>(j) * m + i];
  });
}

namespace {

enum class EwKind { Add, Sub, Mul };

Tensor elementwise(EwKind kind, const Tensor& a, const Tensor& b, const char* name) {
  const bool a_scalar = a.numel() == 1;
  const bool b_scalar = b.numel() == 1;
  if (!a_scalar && !b_scalar && a.shape() != b.shape())
    throw ShapeError(std::string(name) + " shape mismatch: " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  const Tensor& big = a_scalar ? b : a;
  const std::size_t n = big.numel();
  std::vector<double> out(n);
  const double* pa = a.data();
  const double* pb = b.data();
  for (std::size_t i = 0; i < n; ++i) {
    const double av = a_scalar ? pa[0] : pa[i];
    const double bv = b_scalar ? pb[0] : pb[i];
    switch (kind) {
      case EwKind::Add: out[i] = av + bv; break;
      case EwKind::Sub: out[i] = av - bv; break;
      case EwKind::Mul: out[i] = av * bv; break;
    }
  }
  NodePtr na = a.node(), nb = b.node();
  return make_op(name, big.shape(), std::move(out), {na, nb},
                 [kind, na, nb, a_scalar, b_scalar, n](Node& self) {
                   const double* g = self.grad.data();
                   if (na->requires_grad) {
                     double* da = na->ensure_grad().data();
                     for (std::size_t i = 0; i < n; ++i) {
                       double gv = g[i];
                       if (kind == EwKind::Mul) gv *= b_scalar ? nb->data[0] : nb->data[i];
                       da[a_scalar ? 0 : i] += gv;
                     }
                   }
                   if (nb->requires_grad) {
                     double* db = nb->ensure_grad().data();
                     for (std::size_t i = 0; i < n; ++i) {
                       double gv = g[i];
                       if (kind == EwKind::Sub) gv = -gv;
                       if (kind == EwKind::Mul) gv = g[i] * (a_scalar ? na->data[0] : na->data[i]);
                       db[b_scalar ? 0 : i] += gv;
                     }
                   }
                 });
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) { return elementwise(EwKind::Add, a, b, "add"); }
Tensor sub(const Tensor& a, const Tensor& b) { return elementwise(EwKind::Sub, a, b, "sub"); }
Tensor mul(const Tensor& a, const Tensor& b) { return elementwise(EwKind::Mul, a, b, "mul"); }

Tensor scale(const Tensor& a, double c) {
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * c;
  NodePtr na = a.node();
  return make_op("scale", a.shape(), std::move(out), {na}, [na, c](Node& self) {
    if (!na->requires_grad) return;
    double* da = na->ensure_grad().data();
    for (std::size_t i = 0; i < self.grad.size(); ++i) da[i] += self.grad[i] * c;
  });
}

Tensor concat_cols(const Tensor& a, const Tensor& b) {
  require_2d(a, "concat_cols");
  require_2d(b, "concat_cols");
  if (a.rows() != b.rows())
    throw ShapeError("concat_cols row mismatch: " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  const int t = a.rows(), ca = a.cols(), cb = b.cols();
  std::vector<double> out(static_cast<std::size_t>(t) * (ca + cb));
  for (int i = 0; i < t; ++i) {
    for (int j = 0; j < ca; ++j) out[static_cast<std::size_t>(i) * (ca + cb) + j] = a.at(i, j);
    for (int j = 0; j < cb; ++j) out[static_cast<std::size_t>(i) * (ca + cb) + ca + j] = b.at(i, j);
  }
  NodePtr na = a.node(), nb = b.node();
  return make_op("concat_cols", {t, ca + cb}, std::move(out), {na, nb},
                 [na, nb, t, ca, cb](Node& self) {
                   const double* g = self.grad.data();
                   if (na->requires_grad) {
                     double* da = na->ensure_grad().data();
                     for (int i = 0; i < t; ++i)
                       for (int j = 0; j < ca; ++j)
                         da[static_cast<std::size_t>(i) * ca + j] +=
                             g[static_cast<std::size_t>(i) * (ca + cb) + j];
                   }
                   if (nb->requires_grad) {
                     double* db = nb->ensure_grad().data();
                     for (int i = 0; i < t; ++i)
                       for (int j = 0; j < cb; ++j)
                         db[static_cast<std::size_t>(i) * cb + j] +=
                             g[static_cast<std::size_t>(i) * (ca + cb) + ca + j];
                   }
                 });
}

Tensor narrow_cols(const Tensor& a, int start, int len) {
  require_2d(a, "narrow_cols");
  if (start < 0 || len <= 0 || start + len > a.cols())
    throw ShapeError("narrow_cols range [" + std::to_string(start) + ", " +
                     std::to_string(start + len) + ") out of bounds for " + shape_str(a.shape()));
  const int t = a.rows(), c = a.cols();
  std::vector<double> out(static_cast<std::size_t>(t) * len);
  for (int i = 0; i < t; ++i)
    for (int j = 0; j < len; ++j)
      out[static_cast<std::size_t>(i) * len + j] = a.at(i, start + j);
  NodePtr na = a.node();
  return make_op("narrow_cols", {t, len}, std::move(out), {na}, [na, t, c, start, len](Node& self) {
    if (!na->requires_grad) return;
    double* da = na->ensure_grad().data();
    const double* g = self.grad.data();
    for (int i = 0; i < t; ++i)
      for (int j = 0; j < len; ++j)
        da[static_cast<std::size_t>(i) * c + start + j] += g[static_cast<std::size_t>(i) * len + j];
  });
}

std::pair<Tensor, Tensor> split_cols_half(const Tensor& a) {
  require_2d(a, "split_cols_half");
  if (a.cols() % 2 != 0)
    throw ShapeError("split_cols_half requires an even feature dimension, got " +
                     std::to_string(a.cols()));
  const int half = a.cols() / 2;
  return {narrow_cols(a, 0, half), narrow_cols(a, half, half)};
}

Tensor tile_rows(const Tensor& v, int t) {
  require_2d(v, "tile_rows");
  if (v.rows() != 1) throw ShapeError("tile_rows expects a [1 x d] vector, got " + shape_str(v.shape()));
  const int d = v.cols();
  std::vector<double> out(static_cast<std::size_t>(t) * d);
  for (int i = 0; i < t; ++i)
    for (int j = 0; j < d; ++j) out[static_cast<std::size_t>(i) * d + j] = v.data()[j];
  NodePtr nv = v.node();
  return make_op("tile_rows", {t, d}, std::move(out), {nv}, [nv, t, d](Node& self) {
    if (!nv->requires_grad) return;
    double* dv = nv->ensure_grad().data();
    const double* g = self.grad.data();
    for (int i = 0; i < t; ++i)
      for (int j = 0; j < d; ++j) dv[j] += g[static_cast<std::size_t>(i) * d + j];
  });
}

Tensor add_rowvec(const Tensor& m, const Tensor& v) {
  require_2d(m, "add_rowvec");
  const int t = m.rows(), d = m.cols();
  if (static_cast<int>(v.numel()) != d)
    throw ShapeError("add_rowvec vector length " + std::to_string(v.numel()) +
                     " does not match feature dim " + std::to_string(d));
  std::vector<double> out(m.numel());
  for (int i = 0; i < t; ++i)
    for (int j = 0; j < d; ++j)
      out[static_cast<std::size_t>(i) * d + j] = m.at(i, j) + v.data()[j];
  NodePtr nm = m.node(), nv = v.node();
  return make_op("add_rowvec", {t, d}, std::move(out), {nm, nv}, [nm, nv, t, d](Node& self) {
    const double* g = self.grad.data();
    if (nm->requires_grad) {
      double* dm = nm->ensure_grad().data();
      for (std::size_t i = 0; i < self.grad.size(); ++i) dm[i] += g[i];
    }
    if (nv->requires_grad) {
      double* dv = nv->ensure_grad().data();
      for (int i = 0; i < t; ++i)
        for (int j = 0; j < d; ++j) dv[j] += g[static_cast<std::size_t>(i) * d + j];
    }
  });
}

Tensor softmax_rows(const Tensor& x) {
  require_2d(x, "softmax_rows");
  const int t = x.rows(), n = x.cols();
  std::vector<double> out(x.numel());
  for (int i = 0; i < t; ++i) {
    const double* row = x.data() + static_cast<std::size_t>(i) * n;
    double* orow = out.data() + static_cast<std::size_t>(i) * n;
    double mx = row[0];
    for (int j = 1; j < n; ++j) mx = std::max(mx, row[j]);
    double sum = 0.0;
    for (int j = 0; j < n; ++j) {
      orow[j] = std::exp(row[j] - mx);
      sum += orow[j];
    }
    for (int j = 0; j < n; ++j) orow[j] /= sum;
  }
  NodePtr nx = x.node();
  std::vector<double> saved = out;
  return make_op("softmax_rows", {t, n}, std::move(out), {nx},
                 [nx, t, n, y = std::move(saved)](Node& self) {
                   if (!nx->requires_grad) return;
                   double* dx = nx->ensure_grad().data();
                   const double* g = self.grad.data();
                   for (int i = 0; i < t; ++i) {
                     const double* yr = y.data() + static_cast<std::size_t>(i) * n;
                     const double* gr = g + static_cast<std::size_t>(i) * n;
                     double dot = 0.0;
                     for (int j = 0; j < n; ++j) dot += gr[j] * yr[j];
                     for (int j = 0; j < n; ++j)
                       dx[static_cast<std::size_t>(i) * n + j] += yr[j] * (gr[j] - dot);
                   }
                 });
}

Tensor log_softmax_rows(const Tensor& x) {
  require_2d(x, "log_softmax_rows");
  const int t = x.rows(), n = x.cols();
  std::vector<double> out(x.numel());
  std::vector<double> prob(x.numel());
  for (int i = 0; i < t; ++i) {
    const double* row = x.data() + static_cast<std::size_t>(i) * n;
    double mx = row[0];
    for (int j = 1; j < n; ++j) mx = std::max(mx, row[j]);
    double sum = 0.0;
    for (int j = 0; j < n; ++j) sum += std::exp(row[j] - mx);
    const double lse = mx + std::log(sum);
    for (int j = 0; j < n; ++j) {
      out[static_cast<std::size_t>(i) * n + j] = row[j] - lse;
      prob[static_cast<std::size_t>(i) * n + j] = std::exp(row[j] - lse);
    }
  }
  NodePtr nx = x.node();
  return make_op("log_softmax_rows", {t, n}, std::move(out), {nx},
                 [nx, t, n, p = std::move(prob)](Node& self) {
                   if (!nx->requires_grad) return;
                   double* dx = nx->ensure_grad().data();
                   const double* g = self.grad.data();
                   for (int i = 0; i < t; ++i) {
                     double gsum = 0.0;
                     for (int j = 0; j < n; ++j) gsum += g[static_cast<std::size_t>(i) * n + j];
                     for (int j = 0; j < n; ++j) {
                       const std::size_t idx = static_cast<std::size_t>(i) * n + j;
                       dx[idx] += g[idx] - p[idx] * gsum;
                     }
                   }
                 });
}

Tensor layer_norm_op(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  require_2d(x, "layer_norm");
  const int t = x.rows(), d = x.cols();
  if (static_cast<int>(gamma.numel()) != d || static_cast<int>(beta.numel()) != d)
    throw ShapeError("layer_norm gamma/beta length must equal feature dim " + std::to_string(d));
  if (eps <= 0.0) throw ConfigError("layer_norm eps must be positive");

  std::vector<double> out(x.numel());
  std::vector<double> xhat(x.numel());
  std::vector<double> inv_std(static_cast<std::size_t>(t));
  for (int i = 0; i < t; ++i) {
    const double* row = x.data() + static_cast<std::size_t>(i) * d;
    double mean = 0.0;
    for (int j = 0; j < d; ++j) mean += row[j];
    mean /= d;
    double var = 0.0;
    for (int j = 0; j < d; ++j) var += (row[j] - mean) * (row[j] - mean);
    var /= d;
    const double is = 1.0 / std::sqrt(var + eps);
    inv_std[static_cast<std::size_t>(i)] = is;
    for (int j = 0; j < d; ++j) {
      const std::size_t idx = static_cast<std::size_t>(i) * d + j;
      xhat[idx] = (row[j] - mean) * is;
      out[idx] = gamma.data()[j] * xhat[idx] + beta.data()[j];
    }
  }
  NodePtr nx = x.node(), ng = gamma.node(), nb = beta.node();
  return make_op("layer_norm", {t, d}, std::move(out), {nx, ng, nb},
                 [nx, ng, nb, t, d, xh = std::move(xhat), is = std::move(inv_std)](Node& self) {
                   const double* g = self.grad.data();
                   if (ng->requires_grad) {
                     double* dg = ng->ensure_grad().data();
                     for (int i = 0; i < t; ++i)
                       for (int j = 0; j < d; ++j)
                         dg[j] += g[static_cast<std::size_t>(i) * d + j] *
                                  xh[static_cast<std::size_t>(i) * d + j];
                   }
                   if (nb->requires_grad) {
                     double* db = nb->ensure_grad().data();
                     for (int i = 0; i < t; ++i)
                       for (int j = 0; j < d; ++j) db[j] += g[static_cast<std::size_t>(i) * d + j];
                   }
                   if (nx->requires_grad) {
                     double* dx = nx->ensure_grad().data();
                     for (int i = 0; i < t; ++i) {
                       double m1 = 0.0, m2 = 0.0;  // mean(dxhat), mean(dxhat*xhat)
                       for (int j = 0; j < d; ++j) {
                         const std::size_t idx = static_cast<std::size_t>(i) * d + j;
                         const double dxh = g[idx] * ng->data[j];
                         m1 += dxh;
                         m2 += dxh * xh[idx];
                       }
                       m1 /= d;
                       m2 /= d;
                       for (int j = 0; j < d; ++j) {
                         const std::size_t idx = static_cast<std::size_t>(i) * d + j;
                         const double dxh = g[idx] * ng->data[j];
                         dx[idx] += is[static_cast<std::size_t>(i)] * (dxh - m1 - xh[idx] * m2);
                       }
                     }
                   }
                 });
}

Tensor gelu(const Tensor& x) {
  static constexpr double kInvSqrt2 = 0.7071067811865475244;
  static constexpr double kInvSqrt2Pi = 0.3989422804014326779;
  std::vector<double> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double v = x.data()[i];
    out[i] = v * 0.5 * (1.0 + std::erf(v * kInvSqrt2));
  }
  NodePtr nx = x.node();
  return make_op("gelu", x.shape(), std::move(out), {nx}, [nx](Node& self) {
    if (!nx->requires_grad) return;
    double* dx = nx->ensure_grad().data();
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      const double v = nx->data[i];
      const double phi = 0.5 * (1.0 + std::erf(v * kInvSqrt2));
      const double pdf = kInvSqrt2Pi * std::exp(-0.5 * v * v);
      dx[i] += self.grad[i] * (phi + v * pdf);
    }
  });
}

Tensor dropout_op(const Tensor& x, double p, bool training, std::mt19937_64& rng) {
  if (p < 0.0 || p >= 1.0)
    throw ConfigError("dropout rate must be in [0, 1), got " + std::to_string(p));
  if (!training || p == 0.0) return x;
  const double keep_scale = 1.0 / (1.0 - p);
  std::uniform_real_distribution<double> uni(0.0, 1.0);
  std::vector<double> mask(x.numel());
  std::vector<double> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) {
    mask[i] = uni(rng) < p ? 0.0 : keep_scale;
    out[i] = x.data()[i] * mask[i];
  }
  NodePtr nx = x.node();
  return make_op("dropout", x.shape(), std::move(out), {nx},
                 [nx, m = std::move(mask)](Node& self) {
                   if (!nx->requires_grad) return;
                   double* dx = nx->ensure_grad().data();
                   for (std::size_t i = 0; i < self.grad.size(); ++i) dx[i] += self.grad[i] * m[i];
                 });
}

Tensor depthwise_conv1d_op(const Tensor& x, const Tensor& kernel, const Tensor& bias) {
  require_2d(x, "depthwise_conv1d");
  require_2d(kernel, "depthwise_conv1d");
  const int t = x.rows(), c = x.cols();
  const int kc = kernel.rows(), k = kernel.cols();
  if (kc != c)
    throw ShapeError("depthwise_conv1d channel mismatch: input has " + std::to_string(c) +
                     ", kernel has " + std::to_string(kc));
  if (k % 2 == 0) throw ConfigError("depthwise_conv1d kernel width must be odd, got " + std::to_string(k));
  if (static_cast<int>(bias.numel()) != c)
    throw ShapeError("depthwise_conv1d bias length must equal channel count " + std::to_string(c));
  const int off = (k - 1) / 2;

  std::vector<double> out(x.numel());
  for (int ti = 0; ti < t; ++ti)
    for (int ci = 0; ci < c; ++ci) {
      double acc = bias.data()[ci];
      for (int kk = 0; kk < k; ++kk) {
        const int src = ti + kk - off;
        if (src >= 0 && src < t)
          acc += x.at(src, ci) * kernel.at(ci, kk);
      }
      out[static_cast<std::size_t>(ti) * c + ci] = acc;
    }
  NodePtr nx = x.node(), nk = kernel.node(), nb = bias.node();
  return make_op("depthwise_conv1d", {t, c}, std::move(out), {nx, nk, nb},
                 [nx, nk, nb, t, c, k, off](Node& self) {
                   const double* g = self.grad.data();
                   double* dx = nx->requires_grad ? nx->ensure_grad().data() : nullptr;
                   double* dk = nk->requires_grad ? nk->ensure_grad().data() : nullptr;
                   double* db = nb->requires_grad ? nb->ensure_grad().data() : nullptr;
                   for (int ti = 0; ti < t; ++ti)
                     for (int ci = 0; ci < c; ++ci) {
                       const double gv = g[static_cast<std::size_t>(ti) * c + ci];
                       if (db) db[ci] += gv;
                       for (int kk = 0; kk < k; ++kk) {
                         const int src = ti + kk - off;
                         if (src < 0 || src >= t) continue;
                         if (dx)
                           dx[static_cast<std::size_t>(src) * c + ci] +=
                               gv * nk->data[static_cast<std::size_t>(ci) * k + kk];
                         if (dk)
                           dk[static_cast<std::size_t>(ci) * k + kk] +=
                               gv * nx->data[static_cast<std::size_t>(src) * c + ci];
                       }
                     }
                 });
}

Tensor conv2d_s2_valid(const Tensor& x, const Tensor& w, const Tensor& b) {
  if (x.ndim() != 3) throw ShapeError("conv2d expects [C x H x W] input, got " + shape_str(x.shape()));
  if (w.ndim() != 4 || w.dim(2) != 3 || w.dim(3) != 3)
    throw ShapeError("conv2d expects [O x C x 3 x 3] weights, got " + shape_str(w.shape()));
  const int cin = x.dim(0), h = x.dim(1), wd = x.dim(2);
  const int cout = w.dim(0);
  if (w.dim(1) != cin)
    throw ShapeError("conv2d channel mismatch: input has " + std::to_string(cin) +
                     ", weights expect " + std::to_string(w.dim(1)));
  if (static_cast<int>(b.numel()) != cout)
    throw ShapeError("conv2d bias length must equal output channels " + std::to_string(cout));
  if (h < 3 || wd < 3)
    throw ShapeError("conv2d input too small for a 3x3 valid convolution: " + shape_str(x.shape()));
  const int ho = (h - 3) / 2 + 1;
  const int wo = (wd - 3) / 2 + 1;

  auto xi = [h, wd](int c, int i, int j) {
    return (static_cast<std::size_t>(c) * h + i) * wd + j;
  };
  auto wi = [cin](int o, int c, int p, int q) {
    return ((static_cast<std::size_t>(o) * cin + c) * 3 + p) * 3 + q;
  };
  std::vector<double> out(static_cast<std::size_t>(cout) * ho * wo);
  for (int o = 0; o < cout; ++o)
    for (int i = 0; i < ho; ++i)
      for (int j = 0; j < wo; ++j) {
        double acc = b.data()[o];
        for (int c = 0; c < cin; ++c)
          for (int p = 0; p < 3; ++p)
            for (int q = 0; q < 3; ++q)
              acc += x.data()[xi(c, 2 * i + p, 2 * j + q)] * w.data()[wi(o, c, p, q)];
        out[(static_cast<std::size_t>(o) * ho + i) * wo + j] = acc;
      }
  NodePtr nx = x.node(), nw = w.node(), nb = b.node();
  return make_op("conv2d_s2", {cout, ho, wo}, std::move(out), {nx, nw, nb},
                 [nx, nw, nb, cin, h, wd, cout, ho, wo, xi, wi](Node& self) {
                   const double* g = self.grad.data();
                   double* dx = nx->requires_grad ? nx->ensure_grad().data() : nullptr;
                   double* dw = nw->requires_grad ? nw->ensure_grad().data() : nullptr;
                   double* db = nb->requires_grad ? nb->ensure_grad().data() : nullptr;
                   for (int o = 0; o < cout; ++o)
                     for (int i = 0; i < ho; ++i)
                       for (int j = 0; j < wo; ++j) {
                         const double gv = g[(static_cast<std::size_t>(o) * ho + i) * wo + j];
                         if (db) db[o] += gv;
                         for (int c = 0; c < cin; ++c)
                           for (int p = 0; p < 3; ++p)
                             for (int q = 0; q < 3; ++q) {
                               if (dx)
                                 dx[xi(c, 2 * i + p, 2 * j + q)] += gv * nw->data[wi(o, c, p, q)];
                               if (dw)
                                 dw[wi(o, c, p, q)] += gv * nx->data[xi(c, 2 * i + p, 2 * j + q)];
                             }
                       }
                 });
}

Tensor channels_to_rows(const Tensor& x) {
  if (x.ndim() != 3)
    throw ShapeError("channels_to_rows expects [C x H x W], got " + shape_str(x.shape()));
  const int c = x.dim(0), h = x.dim(1), w = x.dim(2);
  std::vector<double> out(x.numel());
  for (int ci = 0; ci < c; ++ci)
    for (int i = 0; i < h; ++i)
      for (int j = 0; j < w; ++j)
        out[static_cast<std::size_t>(i) * (c * w) + ci * w + j] =
            x.data()[(static_cast<std::size_t>(ci) * h + i) * w + j];
  NodePtr nx = x.node();
  return make_op("channels_to_rows", {h, c * w}, std::move(out), {nx}, [nx, c, h, w](Node& self) {
    if (!nx->requires_grad) return;
    double* dx = nx->ensure_grad().data();
    const double* g = self.grad.data();
    for (int ci = 0; ci < c; ++ci)
      for (int i = 0; i < h; ++i)
        for (int j = 0; j < w; ++j)
          dx[(static_cast<std::size_t>(ci) * h + i) * w + j] +=
              g[static_cast<std::size_t>(i) * (c * w) + ci * w + j];
  });
}

Tensor reshape(const Tensor& x, std::vector<int> shape) {
  std::size_t n = 1;
  for (int s : shape) n *= static_cast<std::size_t>(s);
  if (n != x.numel())
    throw ShapeError("reshape target " + shape_str(shape) + " incompatible with " +
                     shape_str(x.shape()));
  NodePtr nx = x.node();
  return make_op("reshape", std::move(shape), x.data_vec(), {nx}, [nx](Node& self) {
    if (!nx->requires_grad) return;
    double* dx = nx->ensure_grad().data();
    for (std::size_t i = 0; i < self.grad.size(); ++i) dx[i] += self.grad[i];
  });
}

Tensor sum_all(const Tensor& x) {
  double acc = 0.0;
  for (std::size_t i = 0; i < x.numel(); ++i) acc += x.data()[i];
  NodePtr nx = x.node();
  return make_op("sum_all", {1}, {acc}, {nx}, [nx](Node& self) {
    if (!nx->requires_grad) return;
    double* dx = nx->ensure_grad().data();
    const double g = self.grad[0];
    for (std::size_t i = 0; i < nx->data.size(); ++i) dx[i] += g;
  });
}

Tensor mean_rows(const Tensor& m) {
  require_2d(m, "mean_rows");
  const int t = m.rows(), d = m.cols();
  std::vector<double> out(static_cast<std::size_t>(d), 0.0);
  for (int i = 0; i < t; ++i)
    for (int j = 0; j < d; ++j) out[static_cast<std::size_t>(j)] += m.at(i, j);
  for (int j = 0; j < d; ++j) out[static_cast<std::size_t>(j)] /= t;
  NodePtr nm = m.node();
  return make_op("mean_rows", {1, d}, std::move(out), {nm}, [nm, t, d](Node& self) {
    if (!nm->requires_grad) return;
    double* dm = nm->ensure_grad().data();
    const double* g = self.grad.data();
    for (int i = 0; i < t; ++i)
      for (int j = 0; j < d; ++j) dm[static_cast<std::size_t>(i) * d + j] += g[j] / t;
  });
}

}  // namespace bf
