#pragma once

// Minimal reverse-mode autograd over dense NCHW double tensors.
//
// Every tensor is four dimensional. Vectors are stored as (N, C, 1, 1) and
// scalars as (1, 1, 1, 1). Gradients are recorded only while grad mode is
// enabled and at least one input requires a gradient.

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace medseg::nn {

struct Shape {
  int n = 1;
  int c = 1;
  int h = 1;
  int w = 1;

  std::size_t numel() const {
    return static_cast<std::size_t>(n) * c * h * w;
  }
  std::size_t plane() const { return static_cast<std::size_t>(h) * w; }
  bool operator==(const Shape&) const = default;
  std::string str() const;
};

struct Node;

class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<double> values,
                     bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  std::size_t numel() const { return shape().numel(); }

  std::span<double> data();
  std::span<const double> data() const;
  double item() const;

  bool requires_grad() const;
  void set_requires_grad(bool on);

  /// Gradient buffer; empty until a backward pass reaches this tensor.
  std::span<double> grad();
  std::span<const double> grad() const;
  bool has_grad() const;
  void zero_grad();

  /// Back-propagates from a scalar tensor. The recorded graph is released.
  void backward();

  /// Copy of the values with no autograd history.
  Tensor detach() const;

  Node* node() const { return node_.get(); }
  const std::shared_ptr<Node>& shared() const { return node_; }

 private:
  explicit Tensor(std::shared_ptr<Node> node) : node_(std::move(node)) {}
  std::shared_ptr<Node> node_;

  friend Tensor make_result(Shape, std::vector<Tensor>,
                            std::function<void(Node&)>);
  friend Tensor wrap(std::shared_ptr<Node>);
};

struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;

  std::vector<double>& ensure_grad() {
    if (grad.empty()) grad.assign(value.size(), 0.0);
    return grad;
  }
};

/// Allocates the output of a custom op. The graph edge and `backward` are
/// kept only when grad mode is on and some input requires a gradient.
Tensor make_result(Shape shape, std::vector<Tensor> inputs, std::function<void(Node&)> backward);

bool grad_enabled();

/// Disables graph recording for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

// ---------------------------------------------------------------------------
// Operations. All of them validate shapes and throw ShapeError on mismatch.

struct Conv2dGeometry {
  int stride = 1;
  int padding = 0;
  int dilation = 1;
};

/// Dense convolution. weight has shape (Cout, Cin, k, k); bias may be empty.
Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias,
              Conv2dGeometry geometry = {});

/// Per-channel convolution. weight has shape (C, 1, k, k).
Tensor depthwise_conv2d(const Tensor& x, const Tensor& weight,
                        Conv2dGeometry geometry = {});

/// Transposed convolution with kernel 2 and stride 2. weight: (Cin, Cout, 2, 2).
Tensor conv_transpose2x2(const Tensor& x, const Tensor& weight,
                         const Tensor& bias);

struct BatchNormState {
  Tensor* running_mean = nullptr;
  Tensor* running_var = nullptr;
  double momentum = 0.1;
  double eps = 1e-5;
  bool training = true;
};

Tensor batch_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                  const BatchNormState& state);

Tensor sigmoid(const Tensor& x);
Tensor swish(const Tensor& x);
Tensor gelu(const Tensor& x);

Tensor add(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, double factor);

/// x * gate where gate has shape (N, C, 1, 1).
Tensor mul_channel(const Tensor& x, const Tensor& gate);

Tensor upsample_nearest2x(const Tensor& x);
/// Bilinear 2x resize with half-pixel centres (align_corners = false).
Tensor upsample_bilinear2x(const Tensor& x);
/// 3x3 max pooling, stride 2, padding 1.
Tensor max_pool3x3s2(const Tensor& x);
Tensor global_avg_pool(const Tensor& x);

/// Fast normalized fusion: sum_i relu(w_i) x_i / (sum_j relu(w_j) + eps).
/// weights has shape (1, K, 1, 1) for K inputs.
Tensor weighted_fusion(const std::vector<Tensor>& inputs, const Tensor& weights,
                       double eps);

/// Sum of all elements times fixed coefficients; mainly for gradient checks.
Tensor dot_constant(const Tensor& x, std::span<const double> coefficients);
Tensor sum(const Tensor& x);

}  // namespace medseg::nn
