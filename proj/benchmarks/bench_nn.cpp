#include <benchmark/benchmark.h>

#include "tsfda/data.hpp"
#include "tsfda/factorize.hpp"
#include "tsfda/nn.hpp"
#include "tsfda/rng.hpp"
#include "tsfda/sfda.hpp"

using namespace tsfda;

namespace {

BackboneConfig ssc_like() {
  BackboneConfig cfg;
  cfg.input_channels = 1;
  cfg.input_len = 3000;
  cfg.num_classes = 5;
  cfg.mid_channels = 32;
  cfg.final_channels = 128;
  cfg.kernel1 = 25;
  cfg.kernel2 = 8;
  cfg.kernel3 = 8;
  cfg.stride1 = 6;
  return cfg;
}

DenseTensor random_batch(Index b, Index m, Index l, std::uint64_t seed) {
  Rng rng(seed);
  DenseTensor t({b, m, l});
  for (Index i = 0; i < t.size(); ++i) t[i] = rng.uniform(-1, 1);
  return t;
}

}  // namespace

// The factorized forward should run visibly faster than the full conv stack;
// the MAC accounting predicts ~94% fewer multiplies at rank factor 8.
static void BM_ForwardFull(benchmark::State& state) {
  const ModelGraph m = build_cnn(ssc_like(), 1, false);
  const DenseTensor x = random_batch(4, 1, 3000, 2);
  for (auto _ : state) benchmark::DoNotOptimize(forward_eval(m, x));
}
BENCHMARK(BM_ForwardFull);

static void BM_ForwardFactorizedRf8(benchmark::State& state) {
  ModelGraph m = build_cnn(ssc_like(), 1, false);
  RankPolicy policy;
  policy.rank_factor = 8;
  const ModelGraph fact = decompose_model(m, policy);
  const DenseTensor x = random_batch(4, 1, 3000, 2);
  for (auto _ : state) benchmark::DoNotOptimize(forward_eval(fact, x));
}
BENCHMARK(BM_ForwardFactorizedRf8);

static void BM_AdaptEpochCoreOnly(benchmark::State& state) {
  BackboneConfig cfg;
  cfg.input_channels = 1;
  cfg.input_len = 64;
  cfg.num_classes = 5;
  cfg.mid_channels = 12;
  cfg.final_channels = 24;
  cfg.kernel1 = 9;
  cfg.kernel2 = 5;
  cfg.kernel3 = 5;
  cfg.stride1 = 1;
  cfg.features_len = 8;
  ModelGraph m = build_cnn(cfg, 1, false);
  RankPolicy policy;
  policy.explicit_r_in = 1;
  policy.explicit_r_out = 1;
  const ModelGraph fact = decompose_model(m, policy);
  SynthSpec spec;
  spec.classes = 5;
  spec.channels = 1;
  spec.length = 64;
  spec.train_per_class = 40;
  spec.eval_per_class = 5;
  spec.style = TemplateStyle::RandomCurves;
  const DomainPair pair = make_synthetic(spec, 7);
  AdaptationConfig ac;
  ac.method = Method::SHOT;
  ac.epochs = 1;
  ac.batch = 32;
  for (auto _ : state) {
    benchmark::DoNotOptimize(
        adapt(fact, UnlabeledView(pair.target_adapt), nullptr, ac,
              SubspaceMask::of({ParamTag::Core})));
  }
}
BENCHMARK(BM_AdaptEpochCoreOnly);
