#include <benchmark/benchmark.h>

#include "viewdelta/model.hpp"
#include "viewdelta/rng.hpp"
#include "viewdelta/scenegen.hpp"
#include "viewdelta/train.hpp"

namespace vd = viewdelta;

namespace {

vd::RgbImage random_image(std::size_t side, std::uint64_t seed) {
  vd::Rng rng(seed);
  vd::RgbImage img(side, side);
  for (auto& p : img.pixels) p = static_cast<std::uint8_t>(rng.uniform_int(0, 255));
  return img;
}

void BM_DeskForward(benchmark::State& state) {
  const vd::ViewDeltaModel<float> model(vd::ModelConfig{}, 1);
  const auto in = model.prepare(random_image(64, 1), random_image(64, 2), "red disk and blue ring");
  for (auto _ : state) benchmark::DoNotOptimize(model.forward(in));
}
BENCHMARK(BM_DeskForward)->Unit(benchmark::kMillisecond);

void BM_DeskTrainStep(benchmark::State& state) {
  vd::ViewDeltaModel<float> model(vd::ModelConfig{}, 1);
  const auto in = model.prepare(random_image(64, 1), random_image(64, 2), "red disk and blue ring");
  vd::Mask label(64, 64);
  for (std::size_t i = 0; i < label.values.size(); i += 7) label.values[i] = 1;
  vd::OptimizerState<float> st;
  for (auto _ : state) {
    model.params().zero_grad();
    auto loss = vd::bce_loss(model.forward(in), label);
    loss.backward();
    vd::adam_step(model.params(), st, 1e-4, 0.01);
  }
}
BENCHMARK(BM_DeskTrainStep)->Unit(benchmark::kMillisecond);

void BM_GenerateSample(benchmark::State& state) {
  const vd::GeneratorConfig cfg;
  const auto banks = vd::PromptBanks::from_config(cfg);
  const vd::ProceduralSceneBackend backend(cfg);
  vd::ClassBalanceLedger ledger;
  std::uint64_t seed = 0;
  for (auto _ : state) benchmark::DoNotOptimize(vd::generate_sample(seed++, false, ledger, cfg, banks, backend));
}
BENCHMARK(BM_GenerateSample)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
