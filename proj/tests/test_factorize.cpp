#include <doctest.h>

#include <cmath>

#include "gradcheck.hpp"
#include "oracles.hpp"
#include "tsfda/data.hpp"
#include "tsfda/factorize.hpp"
#include "tsfda/nn.hpp"

using namespace tsfda;

namespace {

// Paper-matching SSC backbone: 1 channel x 3000 steps, channels (32, 64, 128),
// kernels (25, 8, 8), first-layer stride 6.
BackboneConfig ssc_config() {
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
  cfg.conv_bias = false;
  return cfg;
}

BackboneConfig tiny_config() {
  BackboneConfig cfg;
  cfg.input_channels = 2;
  cfg.input_len = 32;
  cfg.num_classes = 3;
  cfg.mid_channels = 4;
  cfg.final_channels = 8;
  cfg.kernel1 = 5;
  cfg.kernel2 = 3;
  cfg.kernel3 = 3;
  cfg.stride1 = 1;
  return cfg;
}

Index enumerate_params(const ModelGraph& m, const LayerSpec& l) {
  Index n = 0;
  for (const char* suffix : {".weight", ".core", ".v1", ".v2", ".u1", ".u2", ".bias"}) {
    auto it = m.params.find(l.name + suffix);
    if (it != m.params.end()) n += it->second.size();
  }
  return n;
}

}  // namespace

TEST_CASE("count_params: unit-rank factorized conv matches Eq-style formula") {
  LayerSpec l{};
  l.kind = LayerKind::FactorizedConv1d;
  l.c_in = 4;
  l.c_out = 4;
  l.kernel = 3;
  l.r_in = 1;
  l.r_out = 1;
  CHECK(count_layer_params_fact(l) == 3 + 4 + 4);  // core + two factors
  CHECK(count_layer_params_full(l) == 4 * 4 * 3);
}

TEST_CASE("count_params: RF=8 layer matches enumerated tensors") {
  LayerSpec l{};
  l.kind = LayerKind::FactorizedConv1d;
  l.name = "f";
  l.c_in = 64;
  l.c_out = 128;
  l.kernel = 5;
  l.r_in = 8;
  l.r_out = 16;
  CHECK(count_layer_params_fact(l) == 16 * 8 * 5 + 128 * 16 + 64 * 8);
  CHECK(count_layer_params_fact(l) == 3200);
  CHECK(count_layer_params_full(l) == 40960);

  // enumerate actually-constructed tensors and count entries
  ModelGraph m = gradcheck::single_layer_model(l, 64, 20);
  Rng rng(1);
  m.params["f.core"] = gradcheck::random_tensor({16, 8, 5}, rng);
  m.params["f.v1"] = gradcheck::random_tensor({128, 16}, rng);
  m.params["f.v2"] = gradcheck::random_tensor({64, 8}, rng);
  m.tags["f.core"] = ParamTag::Core;
  m.tags["f.v1"] = ParamTag::Factor;
  m.tags["f.v2"] = ParamTag::Factor;
  CHECK(enumerate_params(m, l) == count_layer_params_fact(l));
}

TEST_CASE("count_macs: RF=8 layer three-term sum at L = L' = 100") {
  LayerSpec l{};
  l.kind = LayerKind::FactorizedConv1d;
  l.c_in = 64;
  l.c_out = 128;
  l.kernel = 5;
  l.stride = 1;
  l.padding = 2;  // same padding keeps L' = L = 100 for odd K
  l.r_in = 8;
  l.r_out = 16;
  // K = 5, pad 2: L' = 100 + 4 - 5 + 1 = 100
  CHECK(layer_out_len(l, 100) == 100);
  CHECK(count_layer_macs_fact(l, 100) == 51200 + 64000 + 204800);
  CHECK(count_layer_macs_full(l, 100) == 4096000);
}

TEST_CASE("count_macs: K=1 full-rank factorization costs more than the plain conv") {
  LayerSpec l{};
  l.kind = LayerKind::FactorizedConv1d;
  l.c_in = 16;
  l.c_out = 16;
  l.kernel = 1;
  l.stride = 1;
  l.padding = 0;
  l.r_in = 16;
  l.r_out = 16;
  CHECK(count_layer_macs_fact(l, 50) > count_layer_macs_full(l, 50));
}

TEST_CASE("paper-matching SSC config: undecomposed totals 83.17K params, 12.92M MACs") {
  const ModelGraph m = build_cnn(ssc_config(), 0, false);
  const EfficiencyReport rep = efficiency_report(m, SubspaceMask::of({ParamTag::Core}));
  CHECK(rep.backbone_total.params_full == 83168);
  CHECK(rep.backbone_total.macs_full == 12917376);
  CHECK(display_units(rep.backbone_total.params_full, 1e3) == doctest::Approx(83.17));
  CHECK(display_units(rep.backbone_total.macs_full, 1e6) == doctest::Approx(12.92));
}

TEST_CASE("paper-matching SSC config reproduces the published efficiency columns") {
  const ModelGraph base = build_cnn(ssc_config(), 0, false);
  struct Want {
    Index rf;
    double params_k, macs_m, params_red, macs_red;
  };
  for (const Want w : {Want{2, 20.88, 5.54, 74.89, 57.12}, Want{4, 5.32, 1.99, 93.60, 84.60},
                       Want{8, 1.38, 0.80, 98.34, 93.81}}) {
    RankPolicy policy;
    policy.rank_factor = w.rf;
    const ModelGraph fact = decompose_model(base, policy);
    const EfficiencyReport rep = efficiency_report(fact, SubspaceMask::of({ParamTag::Core}));
    CHECK(display_units(rep.backbone_total.params_finetunable, 1e3) == doctest::Approx(w.params_k));
    CHECK(display_units(rep.backbone_total.macs_fact, 1e6) == doctest::Approx(w.macs_m));
    CHECK(reduction_pct_displayed(rep.backbone_total.params_full,
                                  rep.backbone_total.params_finetunable, 1e3) ==
          doctest::Approx(w.params_red));
    CHECK(reduction_pct_displayed(rep.backbone_total.macs_full, rep.backbone_total.macs_fact,
                                  1e6) == doctest::Approx(w.macs_red));
    // factorized params stay below full whenever RF >= 2 on this config
    CHECK(rep.backbone_total.params_fact < rep.backbone_total.params_full);
  }
}

TEST_CASE("decompose at RF=1 is lossless and the report shows the projection overhead") {
  const BackboneConfig cfg = tiny_config();
  ModelGraph m = build_cnn(cfg, 3, false);
  RankPolicy policy;
  policy.rank_factor = 1;
  const ModelGraph fact = decompose_model(m, policy);

  // kernels reconstruct exactly
  for (const std::string name : {"conv2", "conv3"}) {
    const LayerSpec* l = fact.find_layer(name);
    REQUIRE(l != nullptr);
    REQUIRE(l->kind == LayerKind::FactorizedConv1d);
    TuckerFactors f;
    f.core = fact.params.at(name + std::string(".core"));
    f.factors = {fact.params.at(name + std::string(".v1")),
                 fact.params.at(name + std::string(".v2"))};
    f.decomposed_modes = {0, 1};
    const DenseTensor rec = reconstruct(f);
    CHECK(frobenius_dist(rec, m.params.at(name + std::string(".weight"))) <= 1e-9);
  }

  // logits preserved
  Rng rng(4);
  const DenseTensor x = gradcheck::random_tensor({3, cfg.input_channels, cfg.input_len}, rng);
  const DenseTensor a = forward_eval(m, x).logits;
  const DenseTensor b = forward_eval(fact, x).logits;
  for (Index i = 0; i < a.size(); ++i) CHECK(std::abs(a[i] - b[i]) <= 1e-7);

  // params increase at full rank (projections added)
  const EfficiencyReport rep = efficiency_report(fact, SubspaceMask::of({ParamTag::Core}));
  CHECK(rep.backbone_total.params_fact > rep.backbone_total.params_full);
}

TEST_CASE("decompose recovers an exactly low-rank kernel with zero error") {
  const BackboneConfig cfg = tiny_config();
  ModelGraph m = build_cnn(cfg, 5, false);
  // build conv2's kernel as an exact rank-(2,2) Tucker product
  Rng rng(6);
  TuckerFactors f;
  f.core = gradcheck::random_tensor({2, 2, 3}, rng);
  f.factors = {gradcheck::random_tensor({8, 2}, rng), gradcheck::random_tensor({4, 2}, rng)};
  f.decomposed_modes = {0, 1};
  m.params["conv2.weight"] = reconstruct(f);

  RankPolicy policy;
  policy.rank_factor = 4;  // conv2: 4 -> r_in 1... override to reach (2,2)
  policy.layer_overrides["conv2"] = {2, 2};
  const ModelGraph fact = decompose_model(m, policy);
  TuckerFactors g;
  g.core = fact.params.at("conv2.core");
  g.factors = {fact.params.at("conv2.v1"), fact.params.at("conv2.v2")};
  g.decomposed_modes = {0, 1};
  CHECK(frobenius_dist(reconstruct(g), m.params.at("conv2.weight")) <= 1e-9);
}

TEST_CASE("decompose equals a direct HOOI run on each raw kernel") {
  const BackboneConfig cfg = tiny_config();
  ModelGraph m = build_cnn(cfg, 7, false);
  RankPolicy policy;
  policy.rank_factor = 4;
  const ModelGraph fact = decompose_model(m, policy);
  // conv3: c_in 8 -> r_in 2, c_out 8 -> r_out 2 (2-mode, not the first layer)
  const HooiResult h = hooi(m.params.at("conv3.weight"), {2, 2}, {0, 1});
  TuckerFactors g;
  g.core = fact.params.at("conv3.core");
  g.factors = {fact.params.at("conv3.v1"), fact.params.at("conv3.v2")};
  g.decomposed_modes = {0, 1};
  const double err_pipeline = frobenius_dist(reconstruct(g), m.params.at("conv3.weight"));
  const double err_direct = frobenius_dist(reconstruct(h.factors), m.params.at("conv3.weight"));
  CHECK(err_pipeline == doctest::Approx(err_direct).epsilon(1e-9));
}

TEST_CASE("first conv is decomposed on the output mode only") {
  const BackboneConfig cfg = tiny_config();  // first conv has c_in = 2
  ModelGraph m = build_cnn(cfg, 8, false);
  RankPolicy policy;
  policy.rank_factor = 2;
  const ModelGraph fact = decompose_model(m, policy);
  const LayerSpec* l1 = fact.find_layer("conv1");
  CHECK(l1->r_in == 0);
  CHECK(l1->r_out == 2);
  CHECK(fact.params.count("conv1.v2") == 0);
  const LayerSpec* l2 = fact.find_layer("conv2");
  CHECK(l2->r_in == 2);
  CHECK(l2->r_out == 4);
}

TEST_CASE("decomposition preserves interface shapes and tags") {
  const BackboneConfig cfg = tiny_config();
  ModelGraph m = build_cnn(cfg, 9, false);
  RankPolicy policy;
  policy.rank_factor = 2;
  const ModelGraph fact = decompose_model(m, policy);
  Rng rng(10);
  const DenseTensor x = gradcheck::random_tensor({2, cfg.input_channels, cfg.input_len}, rng);
  const DenseTensor logits = forward_eval(fact, x).logits;
  CHECK(logits.extent(1) == cfg.num_classes);
  // tags: cores tagged core, factors factor, bn untouched, classifier untouched
  CHECK(fact.tags.at("conv2.core") == ParamTag::Core);
  CHECK(fact.tags.at("conv2.v1") == ParamTag::Factor);
  CHECK(fact.tags.at("bn1.gamma") == ParamTag::Bn);
  CHECK(fact.tags.at("classifier.weight") == ParamTag::Classifier);
  for (Index i = 0; i < fact.params.at("classifier.weight").size(); ++i)
    CHECK(fact.params.at("classifier.weight")[i] == m.params.at("classifier.weight")[i]);
}

TEST_CASE("decompose rejects non-finite weights") {
  ModelGraph m = build_cnn(tiny_config(), 11, false);
  m.params["conv1.weight"][0] = std::nan("");
  RankPolicy policy;
  CHECK_THROWS_AS(decompose_model(m, policy), std::invalid_argument);
}

TEST_CASE("recovery_finetune with zero epochs returns the model unchanged") {
  const BackboneConfig cfg = tiny_config();
  ModelGraph m = build_cnn(cfg, 12, false);
  RankPolicy policy;
  policy.rank_factor = 2;
  const ModelGraph fact = decompose_model(m, policy);

  SynthSpec spec;
  spec.classes = cfg.num_classes;
  spec.channels = cfg.input_channels;
  spec.length = cfg.input_len;
  spec.train_per_class = 4;
  spec.eval_per_class = 2;
  const DomainPair pair = make_synthetic(spec, 1);

  RecoveryOptions opts;
  opts.epochs = 0;
  const ModelGraph back = recovery_finetune(fact, pair.source_train, opts);
  for (const auto& [name, w] : fact.params)
    for (Index i = 0; i < w.size(); ++i) CHECK(back.params.at(name)[i] == w[i]);
}

TEST_CASE("efficiency report CSV carries the documented columns") {
  const ModelGraph m = build_cnn(tiny_config(), 13, false);
  const EfficiencyReport rep = efficiency_report(m, SubspaceMask::of({ParamTag::Core}));
  const std::string csv = rep.to_csv();
  CHECK(csv.find("layer,kind,params_full,params_fact,params_finetunable,macs_full,macs_fact") == 0);
  CHECK(csv.find("backbone_total") != std::string::npos);
  CHECK(csv.find("model_total") != std::string::npos);
  // totals equal the sum of per-layer entries
  Index params_sum = 0;
  for (const auto& row : rep.rows) params_sum += row.params_full;
  CHECK(params_sum == rep.model_total.params_full);
}

TEST_CASE("reduction percentages use display-unit rounding") {
  // 1 - 0.80/12.92 rounds to 93.81 even though the raw ratio gives 93.82
  CHECK(reduction_pct_displayed(12917376, 797904, 1e6) == doctest::Approx(93.81));
  CHECK(display_units(797904, 1e6) == doctest::Approx(0.80));
}
