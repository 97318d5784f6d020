#include "medseg/layers.hpp"

#include <cmath>
#include <random>

#include "medseg/error.hpp"

namespace medseg::nn {

std::uint64_t derive_seed(std::uint64_t seed, const std::string& name) {
  // FNV-1a over the name, then a splitmix64 finalizer mixed with the seed.
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char ch : name) {
    h ^= ch;
    h *= 1099511628211ULL;
  }
  std::uint64_t z = h ^ (seed + 0x9E3779B97F4A7C15ULL);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

// ---------------------------------------------------------------------------
// Module

Tensor& Module::register_parameter(std::string name, Tensor t) {
  t.set_requires_grad(true);
  params_.emplace_back(std::move(name), std::make_unique<Tensor>(std::move(t)));
  return *params_.back().second;
}

Tensor& Module::register_buffer(std::string name, Tensor t) {
  buffers_.emplace_back(std::move(name), std::make_unique<Tensor>(std::move(t)));
  return *buffers_.back().second;
}

void Module::collect(const std::string& prefix, bool with_buffers,
                     std::vector<NamedTensor>& out) {
  for (auto& [name, t] : params_) out.push_back({prefix + name, t.get()});
  if (with_buffers)
    for (auto& [name, t] : buffers_) out.push_back({prefix + name, t.get()});
  for (auto& [name, child] : children_) child->collect(prefix + name + ".", with_buffers, out);
}

std::vector<NamedTensor> Module::parameters(const std::string& prefix) {
  std::vector<NamedTensor> out;
  collect(prefix, false, out);
  return out;
}

std::vector<NamedTensor> Module::state(const std::string& prefix) {
  std::vector<NamedTensor> out;
  collect(prefix, true, out);
  return out;
}

void Module::set_training(bool on) {
  training_ = on;
  for (auto& [name, child] : children_) child->set_training(on);
}

void Module::initialize(std::uint64_t seed, const std::string& prefix) {
  for (auto& [name, t] : params_) init_parameter(name, *t, derive_seed(seed, prefix + name));
  for (auto& [name, child] : children_) child->initialize(seed, prefix + name + ".");
}

void Module::init_parameter(const std::string& local_name, Tensor& t,
                            std::uint64_t stream_seed) {
  auto values = t.data();
  if (local_name != "weight") {
    std::fill(values.begin(), values.end(), 0.0);
    return;
  }
  const Shape s = t.shape();
  const double fan_in = static_cast<double>(s.c) * s.h * s.w;
  std::mt19937_64 rng(stream_seed);
  std::normal_distribution<double> normal(0.0, std::sqrt(2.0 / fan_in));
  for (auto& v : values) v = normal(rng);
}

// ---------------------------------------------------------------------------
// Layers

Conv2d::Conv2d(int in_channels, int out_channels, int kernel, Conv2dGeometry geometry,
               bool bias)
    : geometry_(geometry) {
  if (in_channels < 1 || out_channels < 1 || kernel < 1)
    throw ConfigError("Conv2d: channel counts and kernel must be positive");
  weight_ = &register_parameter("weight", Tensor::zeros({out_channels, in_channels, kernel, kernel}));
  if (bias) bias_ = &register_parameter("bias", Tensor::zeros({1, out_channels, 1, 1}));
}

Tensor Conv2d::forward(const Tensor& x) const {
  return conv2d(x, *weight_, bias_ ? *bias_ : Tensor{}, geometry_);
}

DepthwiseConv2d::DepthwiseConv2d(int channels, int kernel, Conv2dGeometry geometry)
    : kernel_(kernel), geometry_(geometry) {
  weight_ = &register_parameter("weight", Tensor::zeros({channels, 1, kernel, kernel}));
}

Tensor DepthwiseConv2d::forward(const Tensor& x) const {
  return depthwise_conv2d(x, *weight_, geometry_);
}

SeparableConv2d::SeparableConv2d(int in_channels, int out_channels, int kernel, int stride,
                                 int dilation, bool bias) {
  const int pad = dilation * (kernel - 1) / 2;
  depthwise_ = &register_module(
      "depthwise", std::make_unique<DepthwiseConv2d>(in_channels, kernel,
                                                     Conv2dGeometry{stride, pad, dilation}));
  pointwise_ = &register_module(
      "pointwise", std::make_unique<Conv2d>(in_channels, out_channels, 1, Conv2dGeometry{}, bias));
}

Tensor SeparableConv2d::forward(const Tensor& x) const {
  return pointwise_->forward(depthwise_->forward(x));
}

BatchNorm2d::BatchNorm2d(int channels, double momentum, double eps)
    : momentum_(momentum), eps_(eps) {
  gamma_ = &register_parameter("gamma", Tensor::full({1, channels, 1, 1}, 1.0));
  beta_ = &register_parameter("beta", Tensor::zeros({1, channels, 1, 1}));
  running_mean_ = &register_buffer("running_mean", Tensor::zeros({1, channels, 1, 1}));
  running_var_ = &register_buffer("running_var", Tensor::full({1, channels, 1, 1}, 1.0));
}

void BatchNorm2d::init_parameter(const std::string& local_name, Tensor& t, std::uint64_t) {
  auto v = t.data();
  std::fill(v.begin(), v.end(), local_name == "gamma" ? 1.0 : 0.0);
}

Tensor BatchNorm2d::forward(const Tensor& x) {
  BatchNormState st{running_mean_, running_var_, momentum_, eps_, training()};
  return batch_norm(x, *gamma_, *beta_, st);
}

Linear::Linear(int in_features, int out_features) {
  weight_ = &register_parameter("weight", Tensor::zeros({out_features, in_features, 1, 1}));
  bias_ = &register_parameter("bias", Tensor::zeros({1, out_features, 1, 1}));
}

Tensor Linear::forward(const Tensor& x) const {
  if (x.shape().h != 1 || x.shape().w != 1)
    throw ShapeError("Linear: expects (N, C, 1, 1), got " + x.shape().str());
  return conv2d(x, *weight_, *bias_);
}

ConvTranspose2x2::ConvTranspose2x2(int in_channels, int out_channels) {
  weight_ = &register_parameter("weight", Tensor::zeros({in_channels, out_channels, 2, 2}));
  bias_ = &register_parameter("bias", Tensor::zeros({1, out_channels, 1, 1}));
}

Tensor ConvTranspose2x2::forward(const Tensor& x) const {
  return conv_transpose2x2(x, *weight_, *bias_);
}

SqueezeExcite::SqueezeExcite(int channels, int reduced) {
  reduce_ = &register_module("reduce", std::make_unique<Conv2d>(channels, reduced, 1));
  expand_ = &register_module("expand", std::make_unique<Conv2d>(reduced, channels, 1));
}

Tensor SqueezeExcite::forward(const Tensor& x) const {
  Tensor s = global_avg_pool(x);
  s = sigmoid(expand_->forward(swish(reduce_->forward(s))));
  return mul_channel(x, s);
}

}  // namespace medseg::nn
