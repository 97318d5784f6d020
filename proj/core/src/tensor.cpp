#include "medseg/tensor.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <sstream>
#include <unordered_set>

#include "medseg/error.hpp"

namespace medseg::nn {

namespace {

using MatR = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapR = Eigen::Map<MatR>;
using CMapR = Eigen::Map<const MatR>;

thread_local bool g_grad_enabled = true;

void require(bool ok, const std::string& what) {
  if (!ok) throw ShapeError(what);
}

int conv_out_size(int in, int k, const Conv2dGeometry& g) {
  return (in + 2 * g.padding - g.dilation * (k - 1) - 1) / g.stride + 1;
}

// Range of output columns ox such that ox * stride + offset lies in [0, in).
std::pair<int, int> valid_range(int out, int in, int stride, int offset) {
  int lo = 0;
  if (offset < 0) lo = (-offset + stride - 1) / stride;
  int hi = out;  // exclusive
  if (in - 1 - offset < 0) return {0, 0};
  hi = std::min(out, (in - 1 - offset) / stride + 1);
  return {lo, std::max(lo, hi)};
}

void im2col(const double* x, int channels, int h, int w, int k,
            const Conv2dGeometry& g, int ho, int wo, double* col) {
  const std::size_t plane = static_cast<std::size_t>(ho) * wo;
  for (int c = 0; c < channels; ++c) {
    const double* xc = x + static_cast<std::size_t>(c) * h * w;
    for (int ki = 0; ki < k; ++ki) {
      for (int kj = 0; kj < k; ++kj) {
        double* row = col + ((static_cast<std::size_t>(c) * k + ki) * k + kj) * plane;
        const int xoff = kj * g.dilation - g.padding;
        const auto [lo, hi] = valid_range(wo, w, g.stride, xoff);
        for (int oy = 0; oy < ho; ++oy) {
          double* r = row + static_cast<std::size_t>(oy) * wo;
          const int iy = oy * g.stride - g.padding + ki * g.dilation;
          if (iy < 0 || iy >= h) {
            std::fill(r, r + wo, 0.0);
            continue;
          }
          const double* xr = xc + static_cast<std::size_t>(iy) * w;
          std::fill(r, r + lo, 0.0);
          for (int ox = lo; ox < hi; ++ox) r[ox] = xr[ox * g.stride + xoff];
          std::fill(r + hi, r + wo, 0.0);
        }
      }
    }
  }
}

void col2im(const double* col, int channels, int h, int w, int k,
            const Conv2dGeometry& g, int ho, int wo, double* x) {
  const std::size_t plane = static_cast<std::size_t>(ho) * wo;
  for (int c = 0; c < channels; ++c) {
    double* xc = x + static_cast<std::size_t>(c) * h * w;
    for (int ki = 0; ki < k; ++ki) {
      for (int kj = 0; kj < k; ++kj) {
        const double* row =
            col + ((static_cast<std::size_t>(c) * k + ki) * k + kj) * plane;
        const int xoff = kj * g.dilation - g.padding;
        const auto [lo, hi] = valid_range(wo, w, g.stride, xoff);
        for (int oy = 0; oy < ho; ++oy) {
          const int iy = oy * g.stride - g.padding + ki * g.dilation;
          if (iy < 0 || iy >= h) continue;
          const double* r = row + static_cast<std::size_t>(oy) * wo;
          double* xr = xc + static_cast<std::size_t>(iy) * w;
          for (int ox = lo; ox < hi; ++ox) xr[ox * g.stride + xoff] += r[ox];
        }
      }
    }
  }
}

}  // namespace

std::string Shape::str() const {
  std::ostringstream os;
  os << "(" << n << ", " << c << ", " << h << ", " << w << ")";
  return os.str();
}

// ---------------------------------------------------------------------------
// Tensor

Tensor wrap(std::shared_ptr<Node> node) { return Tensor(std::move(node)); }

Tensor make_result(Shape shape, std::vector<Tensor> inputs,
                   std::function<void(Node&)> backward) {
  auto node = std::make_shared<Node>();
  node->shape = shape;
  node->value.assign(shape.numel(), 0.0);
  if (g_grad_enabled) {
    bool any = false;
    for (const auto& in : inputs) any = any || (in.defined() && in.requires_grad());
    if (any) {
      node->requires_grad = true;
      for (auto& in : inputs)
        if (in.defined()) node->parents.push_back(in.shared());
      node->backward_fn = std::move(backward);
    }
  }
  return Tensor(std::move(node));
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  return full(shape, 0.0, requires_grad);
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  auto node = std::make_shared<Node>();
  node->shape = shape;
  node->value.assign(shape.numel(), value);
  node->requires_grad = requires_grad;
  return Tensor(std::move(node));
}

Tensor Tensor::from(Shape shape, std::vector<double> values, bool requires_grad) {
  require(values.size() == shape.numel(),
          "Tensor::from: value count does not match shape " + shape.str());
  auto node = std::make_shared<Node>();
  node->shape = shape;
  node->value = std::move(values);
  node->requires_grad = requires_grad;
  return Tensor(std::move(node));
}

const Shape& Tensor::shape() const { return node_->shape; }
std::span<double> Tensor::data() { return node_->value; }
std::span<const double> Tensor::data() const { return node_->value; }

double Tensor::item() const {
  require(numel() == 1, "item() on non-scalar tensor " + shape().str());
  return node_->value[0];
}

bool Tensor::requires_grad() const { return node_->requires_grad; }
void Tensor::set_requires_grad(bool on) { node_->requires_grad = on; }
std::span<double> Tensor::grad() { return node_->grad; }
std::span<const double> Tensor::grad() const { return node_->grad; }
bool Tensor::has_grad() const { return !node_->grad.empty(); }

void Tensor::zero_grad() {
  std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
}

Tensor Tensor::detach() const {
  return Tensor::from(shape(), node_->value, false);
}

void Tensor::backward() {
  require(numel() == 1, "backward() requires a scalar tensor");
  if (!node_->requires_grad) return;

  // Iterative post-order DFS gives a topological order.
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  // Releasing edges below may drop the last owner of an interior node.
  std::vector<std::shared_ptr<Node>> alive;
  std::vector<std::pair<Node*, std::size_t>> stack{{node_.get(), 0}};
  seen.insert(node_.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      const auto& parent = node->parents[next++];
      if (parent->requires_grad && seen.insert(parent.get()).second) {
        alive.push_back(parent);
        stack.emplace_back(parent.get(), 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  node_->ensure_grad()[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* node = *it;
    if (!node->backward_fn) continue;
    if (!node->grad.empty()) {
      for (auto& p : node->parents)
        if (p->requires_grad) p->ensure_grad();
      node->backward_fn(*node);
    }
    node->backward_fn = nullptr;
    node->parents.clear();
    if (node != node_.get()) {
      node->grad.clear();
      node->grad.shrink_to_fit();
    }
  }
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

// ---------------------------------------------------------------------------
// Convolutions

Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias,
              Conv2dGeometry g) {
  const Shape xs = x.shape();
  const Shape ws = weight.shape();
  require(ws.h == ws.w, "conv2d: kernel must be square");
  require(xs.c == ws.c, "conv2d: input has " + std::to_string(xs.c) +
                            " channels, weight expects " + std::to_string(ws.c));
  require(!bias.defined() || bias.numel() == static_cast<std::size_t>(ws.n),
          "conv2d: bias length mismatch");
  require(g.stride >= 1 && g.dilation >= 1 && g.padding >= 0,
          "conv2d: invalid geometry");
  const int k = ws.h;
  const int ho = conv_out_size(xs.h, k, g);
  const int wo = conv_out_size(xs.w, k, g);
  require(ho >= 1 && wo >= 1, "conv2d: input " + xs.str() + " too small for kernel");

  const int cout = ws.n;
  const int kdim = xs.c * k * k;
  const std::size_t oplane = static_cast<std::size_t>(ho) * wo;
  const bool pointwise = (k == 1 && g.stride == 1 && g.padding == 0);

  Tensor out = make_result(
      {xs.n, cout, ho, wo}, {x, weight, bias},
      [x, weight, bias, g, k, ho, wo, kdim, oplane, pointwise](Node& self) {
        const Shape xs = x.shape();
        const int cout = weight.shape().n;
        CMapR wmat(weight.node()->value.data(), cout, kdim);
        std::vector<double> col(pointwise ? 0 : static_cast<std::size_t>(kdim) * oplane);
        std::vector<double> dcol(static_cast<std::size_t>(kdim) * oplane);
        for (int n = 0; n < xs.n; ++n) {
          const double* xn = x.node()->value.data() + n * static_cast<std::size_t>(xs.c) * xs.h * xs.w;
          CMapR dy(self.grad.data() + n * cout * oplane, cout, oplane);
          const double* colp = xn;
          if (!pointwise) {
            im2col(xn, xs.c, xs.h, xs.w, k, g, ho, wo, col.data());
            colp = col.data();
          }
          if (weight.requires_grad()) {
            MapR dw(weight.node()->grad.data(), cout, kdim);
            CMapR cm(colp, kdim, oplane);
            dw.noalias() += dy * cm.transpose();
          }
          if (x.requires_grad()) {
            double* dxn = x.node()->grad.data() + n * static_cast<std::size_t>(xs.c) * xs.h * xs.w;
            if (pointwise) {
              MapR dx(dxn, kdim, oplane);
              dx.noalias() += wmat.transpose() * dy;
            } else {
              MapR dc(dcol.data(), kdim, oplane);
              dc.noalias() = wmat.transpose() * dy;
              col2im(dcol.data(), xs.c, xs.h, xs.w, k, g, ho, wo, dxn);
            }
          }
          if (bias.defined() && bias.requires_grad()) {
            auto& db = bias.node()->grad;
            for (int o = 0; o < cout; ++o) db[o] += dy.row(o).sum();
          }
        }
      });

  CMapR wmat(weight.data().data(), cout, kdim);
  std::vector<double> col(pointwise ? 0 : static_cast<std::size_t>(kdim) * oplane);
  for (int n = 0; n < xs.n; ++n) {
    const double* xn = x.data().data() + n * static_cast<std::size_t>(xs.c) * xs.h * xs.w;
    const double* colp = xn;
    if (!pointwise) {
      im2col(xn, xs.c, xs.h, xs.w, k, g, ho, wo, col.data());
      colp = col.data();
    }
    MapR y(out.data().data() + n * cout * oplane, cout, oplane);
    y.noalias() = wmat * CMapR(colp, kdim, oplane);
    if (bias.defined())
      for (int o = 0; o < cout; ++o) y.row(o).array() += bias.data()[o];
  }
  return out;
}

Tensor depthwise_conv2d(const Tensor& x, const Tensor& weight, Conv2dGeometry g) {
  const Shape xs = x.shape();
  const Shape ws = weight.shape();
  require(ws.n == xs.c && ws.c == 1 && ws.h == ws.w,
          "depthwise_conv2d: weight " + ws.str() + " incompatible with input " + xs.str());
  const int k = ws.h;
  const int ho = conv_out_size(xs.h, k, g);
  const int wo = conv_out_size(xs.w, k, g);
  require(ho >= 1 && wo >= 1, "depthwise_conv2d: input too small");

  // Visits every (input, output, weight) triple of one channel plane.
  auto for_each_tap = [g, k, ho, wo](int h, int w, auto&& body) {
    for (int ki = 0; ki < k; ++ki) {
      for (int kj = 0; kj < k; ++kj) {
        const int xoff = kj * g.dilation - g.padding;
        const auto [lo, hi] = valid_range(wo, w, g.stride, xoff);
        if (lo >= hi) continue;
        for (int oy = 0; oy < ho; ++oy) {
          const int iy = oy * g.stride - g.padding + ki * g.dilation;
          if (iy < 0 || iy >= h) continue;
          body(ki * k + kj, iy * w + xoff, oy * wo, lo, hi);
        }
      }
    }
  };

  Tensor out = make_result(
      {xs.n, xs.c, ho, wo}, {x, weight},
      [x, weight, g, ho, wo, for_each_tap](Node& self) {
        const Shape xs = x.shape();
        const int kk = weight.shape().h * weight.shape().w;
        const std::size_t iplane = xs.plane();
        const std::size_t oplane = static_cast<std::size_t>(ho) * wo;
        const int s = g.stride;
        for (int n = 0; n < xs.n; ++n) {
          for (int c = 0; c < xs.c; ++c) {
            const std::size_t nc = static_cast<std::size_t>(n) * xs.c + c;
            const double* xv = x.node()->value.data() + nc * iplane;
            const double* dy = self.grad.data() + nc * oplane;
            const double* wv = weight.node()->value.data() + static_cast<std::size_t>(c) * kk;
            double* dx = x.requires_grad() ? x.node()->grad.data() + nc * iplane : nullptr;
            double* dw = weight.requires_grad()
                             ? weight.node()->grad.data() + static_cast<std::size_t>(c) * kk
                             : nullptr;
            for_each_tap(xs.h, xs.w, [&](int tap, int xbase, int ybase, int lo, int hi) {
              const double wt = wv[tap];
              double acc = 0.0;
              for (int ox = lo; ox < hi; ++ox) {
                const double gy = dy[ybase + ox];
                if (dx) dx[xbase + ox * s] += wt * gy;
                acc += gy * xv[xbase + ox * s];
              }
              if (dw) dw[tap] += acc;
            });
          }
        }
      });

  const int kk = k * k;
  const std::size_t iplane = xs.plane();
  const std::size_t oplane = static_cast<std::size_t>(ho) * wo;
  const int s = g.stride;
  for (int n = 0; n < xs.n; ++n) {
    for (int c = 0; c < xs.c; ++c) {
      const std::size_t nc = static_cast<std::size_t>(n) * xs.c + c;
      const double* xv = x.data().data() + nc * iplane;
      const double* wv = weight.data().data() + static_cast<std::size_t>(c) * kk;
      double* y = out.data().data() + nc * oplane;
      for_each_tap(xs.h, xs.w, [&](int tap, int xbase, int ybase, int lo, int hi) {
        const double wt = wv[tap];
        for (int ox = lo; ox < hi; ++ox) y[ybase + ox] += wt * xv[xbase + ox * s];
      });
    }
  }
  return out;
}

Tensor conv_transpose2x2(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  const Shape xs = x.shape();
  const Shape ws = weight.shape();
  require(ws.n == xs.c && ws.h == 2 && ws.w == 2,
          "conv_transpose2x2: weight " + ws.str() + " incompatible with input " + xs.str());
  const int cin = xs.c;
  const int cout = ws.c;
  require(!bias.defined() || bias.numel() == static_cast<std::size_t>(cout),
          "conv_transpose2x2: bias length mismatch");
  const int h = xs.h;
  const int w = xs.w;
  const std::size_t iplane = xs.plane();
  const std::size_t oplane = 4 * iplane;

  // Weight tap (a, b) as a (Cin x Cout) matrix.
  auto tap_matrix = [](const double* wdata, int cin, int cout, int tap) {
    MatR m(cin, cout);
    for (int i = 0; i < cin; ++i)
      for (int o = 0; o < cout; ++o) m(i, o) = wdata[(static_cast<std::size_t>(i) * cout + o) * 4 + tap];
    return m;
  };

  Tensor out = make_result(
      {xs.n, cout, 2 * h, 2 * w}, {x, weight, bias},
      [x, weight, bias, cin, cout, h, w, iplane, oplane, tap_matrix](Node& self) {
        MatR dyab(cout, iplane);
        for (int tap = 0; tap < 4; ++tap) {
          const int a = tap / 2;
          const int b = tap % 2;
          MatR wab = tap_matrix(weight.node()->value.data(), cin, cout, tap);
          MatR dwab = MatR::Zero(cin, cout);
          for (int n = 0; n < x.shape().n; ++n) {
            const double* dy = self.grad.data() + static_cast<std::size_t>(n) * cout * oplane;
            for (int o = 0; o < cout; ++o)
              for (int i = 0; i < h; ++i)
                for (int j = 0; j < w; ++j)
                  dyab(o, i * w + j) = dy[o * oplane + (2 * i + a) * (2 * w) + 2 * j + b];
            CMapR xn(x.node()->value.data() + static_cast<std::size_t>(n) * cin * iplane, cin, iplane);
            if (weight.requires_grad()) dwab.noalias() += xn * dyab.transpose();
            if (x.requires_grad()) {
              MapR dx(x.node()->grad.data() + static_cast<std::size_t>(n) * cin * iplane, cin, iplane);
              dx.noalias() += wab * dyab;
            }
            if (tap == 0 && bias.defined() && bias.requires_grad()) {
              for (int o = 0; o < cout; ++o) {
                double acc = 0.0;
                for (std::size_t p = 0; p < oplane; ++p) acc += dy[o * oplane + p];
                bias.node()->grad[o] += acc;
              }
            }
          }
          if (weight.requires_grad()) {
            auto& dw = weight.node()->grad;
            for (int i = 0; i < cin; ++i)
              for (int o = 0; o < cout; ++o)
                dw[(static_cast<std::size_t>(i) * cout + o) * 4 + tap] += dwab(i, o);
          }
        }
      });

  MatR yab(cout, iplane);
  for (int tap = 0; tap < 4; ++tap) {
    const int a = tap / 2;
    const int b = tap % 2;
    MatR wab = tap_matrix(weight.data().data(), cin, cout, tap);
    for (int n = 0; n < xs.n; ++n) {
      CMapR xn(x.data().data() + static_cast<std::size_t>(n) * cin * iplane, cin, iplane);
      yab.noalias() = wab.transpose() * xn;
      double* y = out.data().data() + static_cast<std::size_t>(n) * cout * oplane;
      for (int o = 0; o < cout; ++o) {
        const double bo = bias.defined() ? bias.data()[o] : 0.0;
        for (int i = 0; i < h; ++i)
          for (int j = 0; j < w; ++j)
            y[o * oplane + (2 * i + a) * (2 * w) + 2 * j + b] = yab(o, i * w + j) + bo;
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Normalization and activations

Tensor batch_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                  const BatchNormState& st) {
  const Shape xs = x.shape();
  const auto channels = static_cast<std::size_t>(xs.c);
  require(gamma.numel() == channels && beta.numel() == channels,
          "batch_norm: affine parameter length mismatch");
  require(st.running_mean && st.running_var &&
              st.running_mean->numel() == channels && st.running_var->numel() == channels,
          "batch_norm: running statistics missing or mismatched");
  const std::size_t plane = xs.plane();
  const double count = static_cast<double>(xs.n) * plane;

  std::vector<double> mean(channels), invstd(channels);
  if (st.training) {
    for (std::size_t c = 0; c < channels; ++c) {
      double s = 0.0;
      for (int n = 0; n < xs.n; ++n) {
        const double* p = x.data().data() + (n * channels + c) * plane;
        for (std::size_t i = 0; i < plane; ++i) s += p[i];
      }
      const double m = s / count;
      double v = 0.0;
      for (int n = 0; n < xs.n; ++n) {
        const double* p = x.data().data() + (n * channels + c) * plane;
        for (std::size_t i = 0; i < plane; ++i) v += (p[i] - m) * (p[i] - m);
      }
      const double var = v / count;
      mean[c] = m;
      invstd[c] = 1.0 / std::sqrt(var + st.eps);
      const double unbiased = count > 1 ? v / (count - 1) : var;
      auto rm = st.running_mean->data();
      auto rv = st.running_var->data();
      rm[c] = (1.0 - st.momentum) * rm[c] + st.momentum * m;
      rv[c] = (1.0 - st.momentum) * rv[c] + st.momentum * unbiased;
    }
  } else {
    for (std::size_t c = 0; c < channels; ++c) {
      mean[c] = st.running_mean->data()[c];
      invstd[c] = 1.0 / std::sqrt(st.running_var->data()[c] + st.eps);
    }
  }

  const bool training = st.training;
  Tensor out = make_result(xs, {x, gamma, beta}, [x, gamma, beta, mean, invstd, training](Node& self) {
    const Shape xs = x.shape();
    const auto channels = static_cast<std::size_t>(xs.c);
    const std::size_t plane = xs.plane();
    const double count = static_cast<double>(xs.n) * plane;
    for (std::size_t c = 0; c < channels; ++c) {
      const double g = gamma.node()->value[c];
      double sum_dy = 0.0, sum_dy_xhat = 0.0;
      for (int n = 0; n < xs.n; ++n) {
        const std::size_t off = (n * channels + c) * plane;
        for (std::size_t i = 0; i < plane; ++i) {
          const double xhat = (x.node()->value[off + i] - mean[c]) * invstd[c];
          sum_dy += self.grad[off + i];
          sum_dy_xhat += self.grad[off + i] * xhat;
        }
      }
      if (gamma.requires_grad()) gamma.node()->grad[c] += sum_dy_xhat;
      if (beta.requires_grad()) beta.node()->grad[c] += sum_dy;
      if (!x.requires_grad()) continue;
      for (int n = 0; n < xs.n; ++n) {
        const std::size_t off = (n * channels + c) * plane;
        for (std::size_t i = 0; i < plane; ++i) {
          const double dy = self.grad[off + i];
          if (training) {
            const double xhat = (x.node()->value[off + i] - mean[c]) * invstd[c];
            x.node()->grad[off + i] +=
                g * invstd[c] * (dy - sum_dy / count - xhat * sum_dy_xhat / count);
          } else {
            x.node()->grad[off + i] += g * invstd[c] * dy;
          }
        }
      }
    }
  });

  for (int n = 0; n < xs.n; ++n) {
    for (std::size_t c = 0; c < channels; ++c) {
      const std::size_t off = (n * channels + c) * plane;
      const double g = gamma.data()[c] * invstd[c];
      const double b = beta.data()[c] - mean[c] * g;
      for (std::size_t i = 0; i < plane; ++i) out.data()[off + i] = x.data()[off + i] * g + b;
    }
  }
  return out;
}

namespace {

double sigmoid_scalar(double v) {
  if (v >= 0) return 1.0 / (1.0 + std::exp(-v));
  const double e = std::exp(v);
  return e / (1.0 + e);
}

template <typename Fwd, typename Deriv>
Tensor pointwise(const Tensor& x, Fwd fwd, Deriv deriv) {
  Tensor out = make_result(x.shape(), {x}, [x, deriv](Node& self) {
    auto& dx = x.node()->grad;
    const auto& xv = x.node()->value;
    for (std::size_t i = 0; i < xv.size(); ++i) dx[i] += self.grad[i] * deriv(xv[i]);
  });
  auto xv = x.data();
  auto y = out.data();
  for (std::size_t i = 0; i < xv.size(); ++i) y[i] = fwd(xv[i]);
  return out;
}

constexpr double kGeluC = 0.7978845608028654;  // sqrt(2 / pi)

}  // namespace

Tensor sigmoid(const Tensor& x) {
  return pointwise(x, sigmoid_scalar, [](double v) {
    const double s = sigmoid_scalar(v);
    return s * (1.0 - s);
  });
}

Tensor swish(const Tensor& x) {
  return pointwise(
      x, [](double v) { return v * sigmoid_scalar(v); },
      [](double v) {
        const double s = sigmoid_scalar(v);
        return s * (1.0 + v * (1.0 - s));
      });
}

Tensor gelu(const Tensor& x) {
  return pointwise(
      x,
      [](double v) { return 0.5 * v * (1.0 + std::tanh(kGeluC * (v + 0.044715 * v * v * v))); },
      [](double v) {
        const double t = std::tanh(kGeluC * (v + 0.044715 * v * v * v));
        return 0.5 * (1.0 + t) +
               0.5 * v * (1.0 - t * t) * kGeluC * (1.0 + 3.0 * 0.044715 * v * v);
      });
}

// ---------------------------------------------------------------------------
// Elementwise arithmetic

Tensor add(const Tensor& a, const Tensor& b) {
  require(a.shape() == b.shape(),
          "add: shape mismatch " + a.shape().str() + " vs " + b.shape().str());
  Tensor out = make_result(a.shape(), {a, b}, [a, b](Node& self) {
    if (a.requires_grad())
      for (std::size_t i = 0; i < self.grad.size(); ++i) a.node()->grad[i] += self.grad[i];
    if (b.requires_grad())
      for (std::size_t i = 0; i < self.grad.size(); ++i) b.node()->grad[i] += self.grad[i];
  });
  for (std::size_t i = 0; i < out.numel(); ++i) out.data()[i] = a.data()[i] + b.data()[i];
  return out;
}

Tensor scale(const Tensor& x, double factor) {
  Tensor out = make_result(x.shape(), {x}, [x, factor](Node& self) {
    for (std::size_t i = 0; i < self.grad.size(); ++i) x.node()->grad[i] += factor * self.grad[i];
  });
  for (std::size_t i = 0; i < out.numel(); ++i) out.data()[i] = factor * x.data()[i];
  return out;
}

Tensor mul_channel(const Tensor& x, const Tensor& gate) {
  const Shape xs = x.shape();
  require(gate.shape() == Shape{xs.n, xs.c, 1, 1},
          "mul_channel: gate " + gate.shape().str() + " does not match input " + xs.str());
  const std::size_t plane = xs.plane();
  Tensor out = make_result(xs, {x, gate}, [x, gate, plane](Node& self) {
    const std::size_t groups = gate.numel();
    for (std::size_t g = 0; g < groups; ++g) {
      const double gv = gate.node()->value[g];
      double acc = 0.0;
      for (std::size_t i = 0; i < plane; ++i) {
        const std::size_t idx = g * plane + i;
        if (x.requires_grad()) x.node()->grad[idx] += gv * self.grad[idx];
        acc += self.grad[idx] * x.node()->value[idx];
      }
      if (gate.requires_grad()) gate.node()->grad[g] += acc;
    }
  });
  for (std::size_t g = 0; g < gate.numel(); ++g)
    for (std::size_t i = 0; i < plane; ++i)
      out.data()[g * plane + i] = x.data()[g * plane + i] * gate.data()[g];
  return out;
}

// ---------------------------------------------------------------------------
// Resampling and pooling

Tensor upsample_nearest2x(const Tensor& x) {
  const Shape xs = x.shape();
  const int h = xs.h, w = xs.w;
  Tensor out = make_result({xs.n, xs.c, 2 * h, 2 * w}, {x}, [x, h, w](Node& self) {
    const std::size_t planes = static_cast<std::size_t>(x.shape().n) * x.shape().c;
    for (std::size_t p = 0; p < planes; ++p) {
      const double* dy = self.grad.data() + p * 4 * h * w;
      double* dx = x.node()->grad.data() + p * h * w;
      for (int i = 0; i < 2 * h; ++i)
        for (int j = 0; j < 2 * w; ++j) dx[(i / 2) * w + j / 2] += dy[i * 2 * w + j];
    }
  });
  const std::size_t planes = static_cast<std::size_t>(xs.n) * xs.c;
  for (std::size_t p = 0; p < planes; ++p) {
    const double* xv = x.data().data() + p * h * w;
    double* y = out.data().data() + p * 4 * h * w;
    for (int i = 0; i < 2 * h; ++i)
      for (int j = 0; j < 2 * w; ++j) y[i * 2 * w + j] = xv[(i / 2) * w + j / 2];
  }
  return out;
}

namespace {

struct LerpTap {
  int lo, hi;
  double wlo, whi;
};

std::vector<LerpTap> bilinear_taps(int in) {
  std::vector<LerpTap> taps(2 * in);
  for (int o = 0; o < 2 * in; ++o) {
    double src = (o + 0.5) / 2.0 - 0.5;
    if (src < 0) src = 0;
    const int lo = std::min(static_cast<int>(src), in - 1);
    const int hi = std::min(lo + 1, in - 1);
    const double frac = src - lo;
    taps[o] = {lo, hi, 1.0 - frac, frac};
  }
  return taps;
}

}  // namespace

Tensor upsample_bilinear2x(const Tensor& x) {
  const Shape xs = x.shape();
  const int h = xs.h, w = xs.w;
  auto ty = bilinear_taps(h);
  auto tx = bilinear_taps(w);
  Tensor out = make_result({xs.n, xs.c, 2 * h, 2 * w}, {x}, [x, h, w, ty, tx](Node& self) {
    const std::size_t planes = static_cast<std::size_t>(x.shape().n) * x.shape().c;
    for (std::size_t p = 0; p < planes; ++p) {
      const double* dy = self.grad.data() + p * 4 * h * w;
      double* dx = x.node()->grad.data() + p * h * w;
      for (int i = 0; i < 2 * h; ++i) {
        const auto& a = ty[i];
        for (int j = 0; j < 2 * w; ++j) {
          const auto& b = tx[j];
          const double g = dy[i * 2 * w + j];
          dx[a.lo * w + b.lo] += a.wlo * b.wlo * g;
          dx[a.lo * w + b.hi] += a.wlo * b.whi * g;
          dx[a.hi * w + b.lo] += a.whi * b.wlo * g;
          dx[a.hi * w + b.hi] += a.whi * b.whi * g;
        }
      }
    }
  });
  const std::size_t planes = static_cast<std::size_t>(xs.n) * xs.c;
  for (std::size_t p = 0; p < planes; ++p) {
    const double* xv = x.data().data() + p * h * w;
    double* y = out.data().data() + p * 4 * h * w;
    for (int i = 0; i < 2 * h; ++i) {
      const auto& a = ty[i];
      for (int j = 0; j < 2 * w; ++j) {
        const auto& b = tx[j];
        y[i * 2 * w + j] = a.wlo * (b.wlo * xv[a.lo * w + b.lo] + b.whi * xv[a.lo * w + b.hi]) +
                           a.whi * (b.wlo * xv[a.hi * w + b.lo] + b.whi * xv[a.hi * w + b.hi]);
      }
    }
  }
  return out;
}

Tensor max_pool3x3s2(const Tensor& x) {
  const Shape xs = x.shape();
  const int ho = (xs.h - 1) / 2 + 1;
  const int wo = (xs.w - 1) / 2 + 1;
  const std::size_t planes = static_cast<std::size_t>(xs.n) * xs.c;
  auto argmax = std::make_shared<std::vector<std::size_t>>(planes * ho * wo);
  Tensor out = make_result({xs.n, xs.c, ho, wo}, {x}, [x, argmax](Node& self) {
    for (std::size_t i = 0; i < argmax->size(); ++i)
      x.node()->grad[(*argmax)[i]] += self.grad[i];
  });
  for (std::size_t p = 0; p < planes; ++p) {
    const double* xv = x.data().data() + p * xs.plane();
    for (int oy = 0; oy < ho; ++oy) {
      for (int ox = 0; ox < wo; ++ox) {
        double best = -std::numeric_limits<double>::infinity();
        std::size_t best_idx = 0;
        for (int dy = -1; dy <= 1; ++dy) {
          const int iy = 2 * oy + dy;
          if (iy < 0 || iy >= xs.h) continue;
          for (int dx = -1; dx <= 1; ++dx) {
            const int ix = 2 * ox + dx;
            if (ix < 0 || ix >= xs.w) continue;
            const double v = xv[iy * xs.w + ix];
            if (v > best) {
              best = v;
              best_idx = static_cast<std::size_t>(iy) * xs.w + ix;
            }
          }
        }
        const std::size_t o = (p * ho + oy) * wo + ox;
        out.data()[o] = best;
        (*argmax)[o] = p * xs.plane() + best_idx;
      }
    }
  }
  return out;
}

Tensor global_avg_pool(const Tensor& x) {
  const Shape xs = x.shape();
  const std::size_t plane = xs.plane();
  Tensor out = make_result({xs.n, xs.c, 1, 1}, {x}, [x, plane](Node& self) {
    for (std::size_t p = 0; p < self.grad.size(); ++p) {
      const double g = self.grad[p] / static_cast<double>(plane);
      for (std::size_t i = 0; i < plane; ++i) x.node()->grad[p * plane + i] += g;
    }
  });
  for (std::size_t p = 0; p < out.numel(); ++p) {
    double s = 0.0;
    for (std::size_t i = 0; i < plane; ++i) s += x.data()[p * plane + i];
    out.data()[p] = s / static_cast<double>(plane);
  }
  return out;
}

Tensor weighted_fusion(const std::vector<Tensor>& inputs, const Tensor& weights, double eps) {
  require(!inputs.empty(), "weighted_fusion: no inputs");
  require(weights.numel() == inputs.size(), "weighted_fusion: weight count mismatch");
  const Shape s = inputs.front().shape();
  for (const auto& in : inputs)
    require(in.shape() == s, "weighted_fusion: input shapes differ " + in.shape().str() +
                                 " vs " + s.str());
  const std::size_t k = inputs.size();
  std::vector<double> relu(k);
  double total = eps;
  for (std::size_t i = 0; i < k; ++i) {
    relu[i] = std::max(0.0, weights.data()[i]);
    total += relu[i];
  }

  std::vector<Tensor> deps = inputs;
  deps.push_back(weights);
  Tensor out = make_result(s, deps, [inputs, weights, relu, total](Node& self) {
    const std::size_t k = inputs.size();
    std::vector<double> g(k, 0.0);
    for (std::size_t i = 0; i < k; ++i) {
      const auto& xv = inputs[i].node()->value;
      double acc = 0.0;
      for (std::size_t e = 0; e < xv.size(); ++e) acc += self.grad[e] * xv[e];
      g[i] = acc;
      if (inputs[i].requires_grad()) {
        auto& dx = inputs[i].node()->grad;
        const double a = relu[i] / total;
        for (std::size_t e = 0; e < dx.size(); ++e) dx[e] += a * self.grad[e];
      }
    }
    if (!weights.requires_grad()) return;
    double mixed = 0.0;
    for (std::size_t j = 0; j < k; ++j) mixed += g[j] * relu[j];
    for (std::size_t i = 0; i < k; ++i) {
      if (weights.node()->value[i] <= 0.0) continue;
      weights.node()->grad[i] += g[i] / total - mixed / (total * total);
    }
  });
  auto y = out.data();
  for (std::size_t i = 0; i < k; ++i) {
    const double a = relu[i] / total;
    auto xv = inputs[i].data();
    for (std::size_t e = 0; e < y.size(); ++e) y[e] += a * xv[e];
  }
  return out;
}

Tensor dot_constant(const Tensor& x, std::span<const double> coefficients) {
  require(coefficients.size() == x.numel(), "dot_constant: coefficient count mismatch");
  std::vector<double> coeff(coefficients.begin(), coefficients.end());
  Tensor out = make_result({1, 1, 1, 1}, {x}, [x, coeff](Node& self) {
    for (std::size_t i = 0; i < coeff.size(); ++i) x.node()->grad[i] += coeff[i] * self.grad[0];
  });
  double acc = 0.0;
  for (std::size_t i = 0; i < coeff.size(); ++i) acc += coeff[i] * x.data()[i];
  out.data()[0] = acc;
  return out;
}

Tensor sum(const Tensor& x) {
  std::vector<double> ones(x.numel(), 1.0);
  return dot_constant(x, ones);
}

}  // namespace medseg::nn
