#include <benchmark/benchmark.h>

#include "viewdelta/ops.hpp"
#include "viewdelta/rng.hpp"

namespace vd = viewdelta;
namespace ops = viewdelta::ops;
using T = vd::Tensor<float>;

namespace {

T random(vd::Shape shape, std::uint64_t seed, bool grad = false) {
  vd::Rng rng(seed);
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  std::vector<float> v(n);
  for (auto& x : v) x = static_cast<float>(rng.normal());
  return T::from(shape, v, grad);
}

void BM_Matmul(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const auto a = random({n, n}, 1), b = random({n, n}, 2);
  for (auto _ : state) benchmark::DoNotOptimize(ops::matmul(a, b));
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(2 * n * n * n));
}
BENCHMARK(BM_Matmul)->Arg(64)->Arg(128)->Arg(256);

void BM_Attention(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const auto q = random({n, 128}, 3), k = random({n, 128}, 4), v = random({n, 128}, 5);
  for (auto _ : state) benchmark::DoNotOptimize(ops::attention(q, k, v, 4));
}
BENCHMARK(BM_Attention)->Arg(64)->Arg(208);

void BM_Conv2d(benchmark::State& state) {
  const auto c = static_cast<std::size_t>(state.range(0));
  const auto x = random({c, 16, 16}, 6), k = random({c, c, 3, 3}, 7);
  for (auto _ : state) benchmark::DoNotOptimize(ops::conv2d(x, k, std::optional<T>{}, 1, 1));
}
BENCHMARK(BM_Conv2d)->Arg(32)->Arg(128);

void BM_ConvTranspose2d(benchmark::State& state) {
  const auto x = random({64, 8, 8}, 8), k = random({64, 64, 2, 2}, 9);
  for (auto _ : state) benchmark::DoNotOptimize(ops::conv_transpose2d(x, k, std::optional<T>{}, 2, 0));
}
BENCHMARK(BM_ConvTranspose2d);

void BM_Bilinear(benchmark::State& state) {
  const auto x = random({1, 16, 16}, 10);
  for (auto _ : state) benchmark::DoNotOptimize(ops::bilinear_upsample(x, 4));
}
BENCHMARK(BM_Bilinear);

void BM_MatmulBackward(benchmark::State& state) {
  for (auto _ : state) {
    auto a = random({128, 128}, 11, true), b = random({128, 128}, 12, true);
    auto loss = ops::sum(ops::matmul(a, b));
    loss.backward();
    benchmark::DoNotOptimize(a.grad().data());
  }
}
BENCHMARK(BM_MatmulBackward);

}  // namespace
