#pragma once

#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include <unistd.h>

#include "medseg/model.hpp"
#include "medseg/tensor.hpp"

namespace medseg::testing {

inline nn::Tensor random_tensor(nn::Shape s, std::mt19937_64& rng, bool requires_grad = true, double scale = 1.0) {
  std::normal_distribution<double> d(0.0, scale);
  std::vector<double> v(s.numel());
  for (double& x : v) x = d(rng);
  return nn::Tensor::from(s, std::move(v), requires_grad);
}

/// Compares backprop gradients of sum(c * f(inputs)) against central
/// differences for every element of every input that requires a gradient.
inline void expect_gradients_match(const std::function<nn::Tensor(const std::vector<nn::Tensor>&)>& f,
                                   std::vector<nn::Tensor> inputs, std::uint64_t seed = 1, double h = 1e-5,
                                   double tol = 1e-6) {
  std::mt19937_64 rng(seed);
  nn::Tensor probe = f(inputs);
  std::normal_distribution<double> d;
  std::vector<double> coeff(probe.numel());
  for (double& c : coeff) c = d(rng);
  auto scalar = [&]() { return nn::dot_constant(f(inputs), coeff); };

  for (auto& in : inputs)
    if (in.requires_grad()) in.zero_grad();
  scalar().backward();
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    auto& in = inputs[k];
    if (!in.requires_grad()) continue;
    ASSERT_TRUE(in.has_grad()) << "input " << k << " received no gradient";
    const std::vector<double> analytic(in.grad().begin(), in.grad().end());
    nn::NoGradGuard guard;
    for (std::size_t i = 0; i < in.numel(); ++i) {
      const double orig = in.data()[i];
      in.data()[i] = orig + h;
      const double up = scalar().item();
      in.data()[i] = orig - h;
      const double down = scalar().item();
      in.data()[i] = orig;
      const double numeric = (up - down) / (2 * h);
      EXPECT_NEAR(analytic[i], numeric, tol + 1e-5 * std::abs(numeric)) << "input " << k << " element " << i;
    }
  }
}

/// Small network that keeps unit tests fast.
inline ModelConfig micro_config(int levels = 2, int channels = 8, int patch = 32) {
  ModelConfig c;
  c.bifpn_levels = levels;
  c.bifpn_channels = channels;
  c.bifpn_repeats = 1;
  c.backbone_widths = {8, 16, 16, 24, 24};
  c.stem_width = 8;
  c.backbone_depth = 1;
  c.expand_ratio = 2;
  c.patch_size = patch;
  return c;
}

/// Fresh empty directory under the system temp dir, unique per process so
/// ctest can run tests in parallel.
inline std::filesystem::path temp_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() /
           ("medseg_test_" + std::to_string(::getpid()) + "_" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

}  // namespace medseg::testing
