#include <benchmark/benchmark.h>

#include <random>

#include "medseg/data.hpp"
#include "medseg/metrics.hpp"
#include "medseg/model.hpp"
#include "medseg/trainer.hpp"

using namespace medseg;
using nn::Tensor;

namespace {

Tensor random_tensor(nn::Shape s, std::uint64_t seed, bool requires_grad = false) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> d;
  std::vector<double> v(s.numel());
  for (double& x : v) x = d(rng);
  return Tensor::from(s, std::move(v), requires_grad);
}

ModelConfig micro(int patch) {
  ModelConfig c;
  c.bifpn_levels = 2;
  c.bifpn_channels = 16;
  c.bifpn_repeats = 1;
  c.backbone_widths = {16, 32};
  c.stem_width = 8;
  c.backbone_depth = 1;
  c.expand_ratio = 2;
  c.patch_size = patch;
  return c;
}

}  // namespace

static void BM_Conv2d3x3(benchmark::State& state) {
  const int c = static_cast<int>(state.range(0)), hw = static_cast<int>(state.range(1));
  const Tensor x = random_tensor({4, c, hw, hw}, 1);
  const Tensor w = random_tensor({c, c, 3, 3}, 2);
  const Tensor b = random_tensor({1, c, 1, 1}, 3);
  nn::NoGradGuard g;
  for (auto _ : state) benchmark::DoNotOptimize(nn::conv2d(x, w, b, {1, 1, 1}));
  state.SetItemsProcessed(state.iterations() * 4LL * c * c * 9 * hw * hw);
}
BENCHMARK(BM_Conv2d3x3)->Args({16, 64})->Args({64, 32})->Unit(benchmark::kMillisecond);

static void BM_Conv2dForwardBackward(benchmark::State& state) {
  const Tensor x = random_tensor({4, 16, 64, 64}, 1, true);
  const Tensor w = random_tensor({16, 16, 3, 3}, 2, true);
  const Tensor b = random_tensor({1, 16, 1, 1}, 3, true);
  for (auto _ : state) nn::sum(nn::conv2d(x, w, b, {1, 1, 1})).backward();
}
BENCHMARK(BM_Conv2dForwardBackward)->Unit(benchmark::kMillisecond);

static void BM_DepthwiseDilated7(benchmark::State& state) {
  const Tensor x = random_tensor({2, 64, 32, 32}, 4);
  const Tensor w = random_tensor({64, 1, 7, 7}, 5);
  nn::NoGradGuard g;
  for (auto _ : state) benchmark::DoNotOptimize(nn::depthwise_conv2d(x, w, {2, 6, 2}));
}
BENCHMARK(BM_DepthwiseDilated7)->Unit(benchmark::kMillisecond);

static void BM_MicroTrainStep(benchmark::State& state) {
  auto model = build_model(micro(64));
  const Tensor x = random_tensor({8, 3, 64, 64}, 6);
  std::vector<double> target(8 * 2 * 64 * 64);
  for (std::size_t i = 0; i < target.size(); ++i) target[i] = (i / 64) % 3 == 0;
  std::vector<Tensor*> params;
  for (auto& p : model->parameters()) params.push_back(p.tensor);
  Optimizer opt(params, OptimizerKind::adam, 0.0);
  for (auto _ : state) {
    opt.zero_grad();
    segmentation_loss(model->forward(x), target).backward();
    opt.step(1e-3);
  }
}
BENCHMARK(BM_MicroTrainStep)->Unit(benchmark::kMillisecond);

static void BM_FullModelInference(benchmark::State& state) {
  ModelConfig cfg;
  cfg.patch_size = static_cast<int>(state.range(0));
  auto model = build_model(cfg);
  model->set_training(false);
  const Tensor x = random_tensor({1, 3, cfg.patch_size, cfg.patch_size}, 7);
  nn::NoGradGuard g;
  for (auto _ : state) benchmark::DoNotOptimize(model->forward(x));
}
BENCHMARK(BM_FullModelInference)->Arg(128)->Arg(256)->Unit(benchmark::kMillisecond);

static void BM_VolumePredict(benchmark::State& state) {
  auto model = build_model(micro(64));
  std::mt19937_64 rng(8);
  const auto vol = make_phantom_dataset(1, {8, 64, 64}, rng).front();
  for (auto _ : state) benchmark::DoNotOptimize(volume_predict(*model, vol.ct));
}
BENCHMARK(BM_VolumePredict)->Unit(benchmark::kMillisecond);

static void BM_RankSumExact(benchmark::State& state) {
  const std::vector<double> x = {0.91, 0.88, 0.93, 0.87, 0.95, 0.9}, y = {0.85, 0.86, 0.84, 0.89, 0.83, 0.82};
  for (auto _ : state) benchmark::DoNotOptimize(wilcoxon_rank_sum(x, y));
}
BENCHMARK(BM_RankSumExact);
BENCHMARK_MAIN();
