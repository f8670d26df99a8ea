#include <benchmark/benchmark.h>

#include "featft/attack.hpp"
#include "featft/finetune.hpp"
#include "featft/zoo.hpp"

using namespace featft;

namespace {

const std::vector<std::string>& names() {
  static const auto n = zoo_names();
  return n;
}

Model model_at(std::int64_t i) {
  Rng rng(static_cast<std::uint64_t>(i) + 1);
  return init_model(zoo_spec(names()[static_cast<std::size_t>(i)]), rng);
}

Image test_image(const Shape& shape) {
  Rng rng(99);
  Image img(shape);
  for (auto& v : img.storage()) v = static_cast<float>(rng.uniform());
  return img;
}

void BM_Forward(benchmark::State& state) {
  const Model m = model_at(state.range(0));
  const Image x = test_image(m.spec->input_shape);
  for (auto _ : state) benchmark::DoNotOptimize(forward(m, x).logits);
  state.SetLabel(names()[static_cast<std::size_t>(state.range(0))]);
}
BENCHMARK(BM_Forward)->DenseRange(0, 2);

void BM_InputGradientCE(benchmark::State& state) {
  const Model m = model_at(state.range(0));
  const Image x = test_image(m.spec->input_shape);
  for (auto _ : state) benchmark::DoNotOptimize(grad_input_of_scalar<float>(m, x, CrossEntropyAt{3}).gradient);
  state.SetLabel(names()[static_cast<std::size_t>(state.range(0))]);
}
BENCHMARK(BM_InputGradientCE)->DenseRange(0, 2);

void BM_AggregateGradient(benchmark::State& state) {
  const Model m = model_at(state.range(0));
  const Image x = test_image(m.spec->input_shape);
  const FinetuneConfig cfg;
  for (auto _ : state) benchmark::DoNotOptimize(aggregate_gradient(m, x, 3, m.spec->default_tap, cfg, 7).values);
  state.SetLabel(names()[static_cast<std::size_t>(state.range(0))]);
}
BENCHMARK(BM_AggregateGradient)->DenseRange(0, 2)->Unit(benchmark::kMillisecond);

void BM_BaselineAttack20(benchmark::State& state) {
  const Model m = model_at(1);
  const Image x = test_image(m.spec->input_shape);
  AttackConfig cfg;
  cfg.iters = 20;
  cfg.loss = static_cast<LossKind>(state.range(0));
  for (auto _ : state) benchmark::DoNotOptimize(run_baseline_attack({x, 0, 3, Source(m), 0}, cfg));
  state.SetLabel(std::string(loss_name(cfg.loss)));
}
BENCHMARK(BM_BaselineAttack20)->DenseRange(0, 2)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
