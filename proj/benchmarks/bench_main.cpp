#include <benchmark/benchmark.h>

#include <vector>

#include "uql/bayes.hpp"
#include "uql/maps.hpp"
#include "uql/metrics.hpp"
#include "uql/nn.hpp"
#include "uql/ops.hpp"
#include "uql/rng.hpp"
#include "uql/synth.hpp"

namespace {

using namespace uql;

Tensor images(std::size_t n) {
  Rng rng(1);
  Tensor x({n, 3, 32, 32});
  for (double& v : x.mutable_values()) v = rng.uniform();
  return x;
}

void BM_Matmul(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  Rng rng(2);
  const Tensor a = ops::sample_gaussian(rng, {n, n});
  const Tensor b = ops::sample_gaussian(rng, {n, n});
  NoGradGuard guard;
  for (auto _ : state) benchmark::DoNotOptimize(ops::matmul(a, b));
  state.SetItemsProcessed(state.iterations() * static_cast<int64_t>(2 * n * n * n));
}
BENCHMARK(BM_Matmul)->Arg(64)->Arg(256);

void BM_Conv3x3(benchmark::State& state) {
  const auto c = static_cast<std::size_t>(state.range(0));
  Rng rng(3);
  const Tensor x = ops::sample_gaussian(rng, {16, c, 32, 32});
  const Tensor w = ops::sample_gaussian(rng, {c, c, 3, 3});
  NoGradGuard guard;
  for (auto _ : state) benchmark::DoNotOptimize(ops::conv2d(x, w, std::nullopt, {1, 1}));
}
BENCHMARK(BM_Conv3x3)->Arg(3)->Arg(16);

void BM_TrainStep(benchmark::State& state) {
  Rng rng(4);
  const DeterministicModel m = build_model(default_detector_spec(), rng);
  const Tensor x = images(32);
  std::vector<int> labels(32);
  for (std::size_t i = 0; i < labels.size(); ++i) labels[i] = static_cast<int>(i % 2);
  auto params = m.parameters();
  for (Tensor& p : params) p.set_requires_grad(true);
  for (auto _ : state) {
    for (Tensor& p : params) p.zero_grad();
    backward(ops::cross_entropy(forward(m, x), labels));
  }
}
BENCHMARK(BM_TrainStep)->Unit(benchmark::kMillisecond);

void BM_PredictMc(benchmark::State& state) {
  Rng rng(5);
  const BayesianModel bnn = convert_to_bayesian(build_model(default_detector_spec(), rng), PriorConfig{}, MopedConfig{});
  const Tensor x = images(64);
  const auto n = static_cast<std::size_t>(state.range(0));
  for (auto _ : state) benchmark::DoNotOptimize(predict_mc(bnn, x, n, Rng(6)));
}
BENCHMARK(BM_PredictMc)->Arg(10)->Arg(40)->Unit(benchmark::kMillisecond);

void BM_UncertaintyMap(benchmark::State& state) {
  Rng rng(7);
  const BayesianModel bnn = convert_to_bayesian(build_model(default_detector_spec(), rng), PriorConfig{}, MopedConfig{});
  const Tensor x = images(1);
  for (auto _ : state) benchmark::DoNotOptimize(uncertainty_map(bnn, x, 40, Rng(8)));
}
BENCHMARK(BM_UncertaintyMap)->Unit(benchmark::kMillisecond);

void BM_GenerateDataset(benchmark::State& state) {
  const auto specs = synth::default_generators();
  for (auto _ : state) benchmark::DoNotOptimize(synth::generate_dataset(100, specs, 9));
}
BENCHMARK(BM_GenerateDataset)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
