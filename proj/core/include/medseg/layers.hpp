#pragma once

// Parameterized building blocks on top of the tensor engine. Modules own
// their parameters and expose them under dotted names
// ("<module-path>.<param>"), which is also the checkpoint naming scheme.

#include <cstdint>
#include <map>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "medseg/tensor.hpp"

namespace medseg::nn {

struct NamedTensor {
  std::string name;
  Tensor* tensor;
};

/// Stable 64-bit stream seed for a named parameter.
std::uint64_t derive_seed(std::uint64_t seed, const std::string& name);

class Module {
 public:
  virtual ~Module() = default;
  Module() = default;
  Module(const Module&) = delete;
  Module& operator=(const Module&) = delete;

  /// Trainable tensors in registration order, depth first.
  std::vector<NamedTensor> parameters(const std::string& prefix = "");
  /// Parameters followed by non-trainable state (batch-norm statistics).
  std::vector<NamedTensor> state(const std::string& prefix = "");

  void set_training(bool on);
  bool training() const { return training_; }

  /// Re-draws every parameter from its name-derived stream.
  void initialize(std::uint64_t seed, const std::string& prefix = "");

 protected:
  Tensor& register_parameter(std::string name, Tensor t);
  Tensor& register_buffer(std::string name, Tensor t);

  template <typename M>
  M& register_module(std::string name, std::unique_ptr<M> m) {
    M& ref = *m;
    children_.emplace_back(std::move(name), std::move(m));
    return ref;
  }

  /// Initialization hook; the default draws He-normal weights and zero biases.
  virtual void init_parameter(const std::string& local_name, Tensor& t,
                              std::uint64_t stream_seed);

 private:
  void collect(const std::string& prefix, bool with_buffers,
               std::vector<NamedTensor>& out);

  // Heap-allocated so references handed out stay valid.
  std::vector<std::pair<std::string, std::unique_ptr<Tensor>>> params_;
  std::vector<std::pair<std::string, std::unique_ptr<Tensor>>> buffers_;
  std::vector<std::pair<std::string, std::unique_ptr<Module>>> children_;
  bool training_ = true;
};

class Conv2d : public Module {
 public:
  Conv2d(int in_channels, int out_channels, int kernel, Conv2dGeometry geometry = {},
         bool bias = true);
  Tensor forward(const Tensor& x) const;
  const Conv2dGeometry& geometry() const { return geometry_; }

 private:
  Conv2dGeometry geometry_;
  Tensor* weight_;
  Tensor* bias_ = nullptr;
};

class DepthwiseConv2d : public Module {
 public:
  DepthwiseConv2d(int channels, int kernel, Conv2dGeometry geometry);
  Tensor forward(const Tensor& x) const;
  const Conv2dGeometry& geometry() const { return geometry_; }
  int kernel() const { return kernel_; }

 private:
  int kernel_;
  Conv2dGeometry geometry_;
  Tensor* weight_;
};

/// Depthwise k x k convolution followed by a 1 x 1 pointwise mixer.
class SeparableConv2d : public Module {
 public:
  SeparableConv2d(int in_channels, int out_channels, int kernel, int stride = 1,
                  int dilation = 1, bool bias = false);
  Tensor forward(const Tensor& x) const;
  const DepthwiseConv2d& depthwise() const { return *depthwise_; }

 private:
  DepthwiseConv2d* depthwise_;
  Conv2d* pointwise_;
};

class BatchNorm2d : public Module {
 public:
  explicit BatchNorm2d(int channels, double momentum = 0.1, double eps = 1e-5);
  Tensor forward(const Tensor& x);

 protected:
  void init_parameter(const std::string& local_name, Tensor& t,
                      std::uint64_t stream_seed) override;

 private:
  double momentum_;
  double eps_;
  Tensor* gamma_;
  Tensor* beta_;
  Tensor* running_mean_;
  Tensor* running_var_;
};

/// Fully connected layer applied to (N, C, 1, 1) tensors.
class Linear : public Module {
 public:
  Linear(int in_features, int out_features);
  Tensor forward(const Tensor& x) const;

 private:
  Tensor* weight_;
  Tensor* bias_;
};

class ConvTranspose2x2 : public Module {
 public:
  ConvTranspose2x2(int in_channels, int out_channels);
  Tensor forward(const Tensor& x) const;

 private:
  Tensor* weight_;
  Tensor* bias_;
};

/// Squeeze-and-excitation channel gate used inside inverted-residual blocks.
class SqueezeExcite : public Module {
 public:
  SqueezeExcite(int channels, int reduced);
  Tensor forward(const Tensor& x) const;

 private:
  Conv2d* reduce_;
  Conv2d* expand_;
};

}  // namespace medseg::nn
