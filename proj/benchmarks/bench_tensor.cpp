#include <benchmark/benchmark.h>

#include "tsfda/rng.hpp"
#include "tsfda/tensor.hpp"

using namespace tsfda;

namespace {

DenseTensor random_tensor(const Shape& s, std::uint64_t seed) {
  Rng rng(seed);
  DenseTensor t(s);
  for (Index i = 0; i < t.size(); ++i) t[i] = rng.uniform(-1, 1);
  return t;
}

}  // namespace

static void BM_Unfold(benchmark::State& state) {
  const Index n = state.range(0);
  const DenseTensor t = random_tensor({n, n, 8}, 1);
  for (auto _ : state) benchmark::DoNotOptimize(unfold(t, 1));
}
BENCHMARK(BM_Unfold)->Arg(32)->Arg(64)->Arg(128);

static void BM_TruncatedSvd(benchmark::State& state) {
  const Index n = state.range(0);
  const DenseTensor m = random_tensor({n, n * 8}, 2);
  for (auto _ : state) benchmark::DoNotOptimize(truncated_svd(m, n / 4));
}
BENCHMARK(BM_TruncatedSvd)->Arg(32)->Arg(64)->Arg(128);

static void BM_HooiConvKernel(benchmark::State& state) {
  // 2-mode decomposition of a conv kernel at rank factor 8
  const Index c = state.range(0);
  const DenseTensor w = random_tensor({c, c / 2, 8}, 3);
  for (auto _ : state)
    benchmark::DoNotOptimize(hooi(w, {c / 8, c / 16}, {0, 1}));
}
BENCHMARK(BM_HooiConvKernel)->Arg(64)->Arg(128);
