#include <doctest.h>

#include <cmath>
#include <functional>

#include "gradcheck.hpp"
#include "oracles.hpp"
#include "tsfda/nn.hpp"
#include "tsfda/rng.hpp"

using namespace tsfda;

namespace {

ModelGraph conv_model(Index c_in, Index c_out, Index k, Index stride, Index in_len, bool bias,
                      Rng& rng) {
  LayerSpec conv{};
  conv.kind = LayerKind::Conv1d;
  conv.name = "conv";
  conv.c_in = c_in;
  conv.c_out = c_out;
  conv.kernel = k;
  conv.stride = stride;
  conv.padding = k / 2;
  conv.has_bias = bias;
  ModelGraph m = gradcheck::single_layer_model(conv, c_in, in_len);
  m.params["conv.weight"] = gradcheck::random_tensor({c_out, c_in, k}, rng);
  m.tags["conv.weight"] = ParamTag::Backbone;
  if (bias) {
    m.params["conv.bias"] = gradcheck::random_tensor({c_out}, rng);
    m.tags["conv.bias"] = ParamTag::Backbone;
  }
  return m;
}

DenseTensor run_eval(const ModelGraph& m, const DenseTensor& x) {
  return forward_eval(m, x).logits;
}

}  // namespace

TEST_CASE("conv1d: hand-evaluated same-padding example") {
  Rng rng(1);
  ModelGraph m = conv_model(1, 1, 3, 1, 3, false, rng);
  m.params["conv.weight"] = DenseTensor({1, 1, 3}, {1, 0, -1});
  const DenseTensor x({1, 1, 3}, {1, 2, 3});
  const DenseTensor y = run_eval(m, x);
  REQUIRE(y.size() == 3);
  CHECK(y[0] == doctest::Approx(-2));
  CHECK(y[1] == doctest::Approx(-2));
  CHECK(y[2] == doctest::Approx(2));
}

TEST_CASE("conv1d: unit impulse kernel is the identity") {
  Rng rng(2);
  ModelGraph m = conv_model(1, 1, 3, 1, 8, false, rng);
  m.params["conv.weight"] = DenseTensor({1, 1, 3}, {0, 1, 0});
  const DenseTensor x = gradcheck::random_tensor({2, 1, 8}, rng);
  const DenseTensor y = run_eval(m, x);
  for (Index i = 0; i < x.size(); ++i) CHECK(y[i] == doctest::Approx(x[i]).epsilon(1e-14));
}

TEST_CASE("conv1d matches the brute-force loop oracle on random shapes") {
  Rng rng(3);
  for (Index stride : {Index{1}, Index{2}}) {
    ModelGraph m = conv_model(3, 4, 5, stride, 16, true, rng);
    const DenseTensor x = gradcheck::random_tensor({2, 3, 16}, rng);
    const DenseTensor got = run_eval(m, x);
    const DenseTensor want =
        oracle::brute_force_conv1d(x, m.params["conv.weight"], m.params["conv.bias"].data(),
                                   stride, 5 / 2);
    REQUIRE(got.size() == want.size());
    for (Index i = 0; i < got.size(); ++i)
      CHECK(got[i] == doctest::Approx(want[i]).epsilon(1e-12));
  }
}

TEST_CASE("factorized conv: identity factors reproduce the full conv") {
  Rng rng(4);
  const Index c = 3, k = 3, len = 10;
  ModelGraph full = conv_model(c, c, k, 1, len, false, rng);

  LayerSpec fact{};
  fact.kind = LayerKind::FactorizedConv1d;
  fact.name = "fact";
  fact.c_in = c;
  fact.c_out = c;
  fact.kernel = k;
  fact.stride = 1;
  fact.padding = k / 2;
  fact.r_in = c;
  fact.r_out = c;
  ModelGraph mf = gradcheck::single_layer_model(fact, c, len);
  mf.params["fact.core"] = full.params["conv.weight"];
  mf.params["fact.v1"] = identity_matrix(c);
  mf.params["fact.v2"] = identity_matrix(c);
  mf.tags["fact.core"] = ParamTag::Core;
  mf.tags["fact.v1"] = ParamTag::Factor;
  mf.tags["fact.v2"] = ParamTag::Factor;

  const DenseTensor x = gradcheck::random_tensor({2, c, len}, rng);
  const DenseTensor a = run_eval(full, x), b = run_eval(mf, x);
  for (Index i = 0; i < a.size(); ++i) CHECK(a[i] == doctest::Approx(b[i]).epsilon(1e-12));
}

TEST_CASE("factorized conv equals full conv with the reconstructed kernel") {
  Rng rng(5);
  struct Cfg {
    Index c_in, c_out, k, r_in, r_out, stride;
  };
  for (const Cfg cfg : {Cfg{4, 6, 5, 2, 3, 1}, Cfg{3, 3, 3, 1, 1, 2}, Cfg{5, 2, 7, 2, 2, 1},
                        Cfg{2, 8, 3, 0, 4, 2}}) {  // r_in == 0: output-mode only
    LayerSpec fact{};
    fact.kind = LayerKind::FactorizedConv1d;
    fact.name = "fact";
    fact.c_in = cfg.c_in;
    fact.c_out = cfg.c_out;
    fact.kernel = cfg.k;
    fact.stride = cfg.stride;
    fact.padding = cfg.k / 2;
    fact.r_in = cfg.r_in;
    fact.r_out = cfg.r_out;
    fact.has_bias = true;
    const Index len = 12;
    ModelGraph mf = gradcheck::single_layer_model(fact, cfg.c_in, len);
    const Index core_cin = cfg.r_in > 0 ? cfg.r_in : cfg.c_in;
    mf.params["fact.core"] = gradcheck::random_tensor({cfg.r_out, core_cin, cfg.k}, rng);
    mf.params["fact.v1"] = gradcheck::random_tensor({cfg.c_out, cfg.r_out}, rng);
    mf.tags["fact.core"] = ParamTag::Core;
    mf.tags["fact.v1"] = ParamTag::Factor;
    if (cfg.r_in > 0) {
      mf.params["fact.v2"] = gradcheck::random_tensor({cfg.c_in, cfg.r_in}, rng);
      mf.tags["fact.v2"] = ParamTag::Factor;
    }
    mf.params["fact.bias"] = gradcheck::random_tensor({cfg.c_out}, rng);
    mf.tags["fact.bias"] = ParamTag::Factor;

    TuckerFactors tf;
    tf.core = mf.params["fact.core"];
    if (cfg.r_in > 0) {
      tf.factors = {mf.params["fact.v1"], mf.params["fact.v2"]};
      tf.decomposed_modes = {0, 1};
    } else {
      tf.factors = {mf.params["fact.v1"]};
      tf.decomposed_modes = {0};
    }
    const DenseTensor kernel = reconstruct(tf);

    const DenseTensor x = gradcheck::random_tensor({2, cfg.c_in, len}, rng);
    const DenseTensor got = run_eval(mf, x);
    const DenseTensor want = oracle::brute_force_conv1d(x, kernel, mf.params["fact.bias"].data(),
                                                        cfg.stride, cfg.k / 2);
    REQUIRE(got.size() == want.size());
    for (Index i = 0; i < got.size(); ++i) CHECK(std::abs(got[i] - want[i]) <= 1e-9);
  }
}

TEST_CASE("rank-1 single-channel factorized conv is a scaled 1-D filter") {
  Rng rng(6);
  LayerSpec fact{};
  fact.kind = LayerKind::FactorizedConv1d;
  fact.name = "fact";
  fact.c_in = 1;
  fact.c_out = 1;
  fact.kernel = 3;
  fact.stride = 1;
  fact.padding = 1;
  fact.r_in = 1;
  fact.r_out = 1;
  ModelGraph mf = gradcheck::single_layer_model(fact, 1, 9);
  mf.params["fact.core"] = gradcheck::random_tensor({1, 1, 3}, rng);
  mf.params["fact.v1"] = DenseTensor({1, 1}, {0.7});
  mf.params["fact.v2"] = DenseTensor({1, 1}, {-1.3});
  mf.tags["fact.core"] = ParamTag::Core;
  mf.tags["fact.v1"] = ParamTag::Factor;
  mf.tags["fact.v2"] = ParamTag::Factor;

  const DenseTensor x = gradcheck::random_tensor({1, 1, 9}, rng);
  const DenseTensor got = run_eval(mf, x);
  const DenseTensor scaled_kernel = scale(mf.params["fact.core"], 0.7 * -1.3);
  const DenseTensor want = oracle::brute_force_conv1d(x, scaled_kernel, nullptr, 1, 1);
  for (Index i = 0; i < got.size(); ++i)
    CHECK(got[i] == doctest::Approx(want[i]).epsilon(1e-12));
}

TEST_CASE("batchnorm train mode: batch statistics and running-stat update") {
  Rng rng(7);
  LayerSpec bn{};
  bn.kind = LayerKind::BatchNorm1d;
  bn.name = "bn";
  bn.c_in = bn.c_out = 2;
  ModelGraph m = gradcheck::single_layer_model(bn, 2, 4);
  m.params["bn.gamma"] = DenseTensor({2}, {1.5, 0.5});
  m.params["bn.beta"] = DenseTensor({2}, {0.1, -0.2});
  m.tags["bn.gamma"] = ParamTag::Bn;
  m.tags["bn.beta"] = ParamTag::Bn;
  m.state["bn.running_mean"] = DenseTensor({2});
  DenseTensor rv({2});
  rv.fill(1.0);
  m.state["bn.running_var"] = rv;

  const DenseTensor x = gradcheck::random_tensor({3, 2, 4}, rng);
  Rng drng(0);
  ModelGraph mm = m;
  const ForwardResult fr = forward_train(mm, x, drng);

  const Index N = 3 * 4;
  for (Index c = 0; c < 2; ++c) {
    double mean = 0;
    for (Index b = 0; b < 3; ++b)
      for (Index t = 0; t < 4; ++t) mean += x.at3(b, c, t);
    mean /= N;
    double var = 0;
    for (Index b = 0; b < 3; ++b)
      for (Index t = 0; t < 4; ++t) var += (x.at3(b, c, t) - mean) * (x.at3(b, c, t) - mean);
    var /= N;
    const double g = m.params["bn.gamma"][c], be = m.params["bn.beta"][c];
    const double want00 = g * (x.at3(0, c, 0) - mean) / std::sqrt(var + 1e-5) + be;
    const DenseTensor& out = fr.backbone_cache.out;
    CHECK(out.at3(0, c, 0) == doctest::Approx(want00).epsilon(1e-10));
    const double exp_mean = 0.9 * 0.0 + 0.1 * mean;
    const double exp_var = 0.9 * 1.0 + 0.1 * var * N / (N - 1.0);
    CHECK(mm.state["bn.running_mean"][c] == doctest::Approx(exp_mean).epsilon(1e-10));
    CHECK(mm.state["bn.running_var"][c] == doctest::Approx(exp_var).epsilon(1e-10));
  }
}

TEST_CASE("batchnorm eval mode is an affine map of the input") {
  Rng rng(8);
  LayerSpec bn{};
  bn.kind = LayerKind::BatchNorm1d;
  bn.name = "bn";
  bn.c_in = bn.c_out = 2;
  ModelGraph m = gradcheck::single_layer_model(bn, 2, 3);
  m.params["bn.gamma"] = DenseTensor({2}, {1.5, 0.5});
  m.params["bn.beta"] = DenseTensor({2}, {0.1, -0.2});
  m.tags["bn.gamma"] = ParamTag::Bn;
  m.tags["bn.beta"] = ParamTag::Bn;
  m.state["bn.running_mean"] = DenseTensor({2}, {0.3, -0.4});
  m.state["bn.running_var"] = DenseTensor({2}, {2.0, 0.5});

  const DenseTensor x = gradcheck::random_tensor({2, 2, 3}, rng);
  const DenseTensor y = run_eval(m, x);
  for (Index b = 0; b < 2; ++b)
    for (Index c = 0; c < 2; ++c)
      for (Index t = 0; t < 3; ++t) {
        const double a = m.params["bn.gamma"][c] / std::sqrt(m.state["bn.running_var"][c] + 1e-5);
        const double off = m.params["bn.beta"][c] - a * m.state["bn.running_mean"][c];
        const double want = a * x.at3(b, c, t) + off;
        CHECK(y[(b * 2 + c) * 3 + t] == doctest::Approx(want).epsilon(1e-12));
      }
}

TEST_CASE("finite-difference gradients: every layer kind") {
  Rng rng(100);

  SUBCASE("conv1d") {
    ModelGraph m = conv_model(3, 4, 5, 2, 12, true, rng);
    const DenseTensor x = gradcheck::random_tensor({2, 3, 12}, rng);
    const auto res = gradcheck::check_model(m, x, 100);
    CHECK(res.max_rel_err < 1e-4);
  }
  SUBCASE("factorized conv, 2-mode") {
    LayerSpec fact{};
    fact.kind = LayerKind::FactorizedConv1d;
    fact.name = "f";
    fact.c_in = 4;
    fact.c_out = 5;
    fact.kernel = 3;
    fact.stride = 1;
    fact.padding = 1;
    fact.r_in = 2;
    fact.r_out = 3;
    fact.has_bias = true;
    ModelGraph m = gradcheck::single_layer_model(fact, 4, 9);
    m.params["f.core"] = gradcheck::random_tensor({3, 2, 3}, rng);
    m.params["f.v1"] = gradcheck::random_tensor({5, 3}, rng);
    m.params["f.v2"] = gradcheck::random_tensor({4, 2}, rng);
    m.params["f.bias"] = gradcheck::random_tensor({5}, rng);
    m.tags["f.core"] = ParamTag::Core;
    m.tags["f.v1"] = ParamTag::Factor;
    m.tags["f.v2"] = ParamTag::Factor;
    m.tags["f.bias"] = ParamTag::Factor;
    const DenseTensor x = gradcheck::random_tensor({2, 4, 9}, rng);
    const auto res = gradcheck::check_model(m, x, 101);
    CHECK(res.max_rel_err < 1e-4);
  }
  SUBCASE("factorized conv, output mode only") {
    LayerSpec fact{};
    fact.kind = LayerKind::FactorizedConv1d;
    fact.name = "f";
    fact.c_in = 3;
    fact.c_out = 6;
    fact.kernel = 5;
    fact.stride = 2;
    fact.padding = 2;
    fact.r_in = 0;
    fact.r_out = 2;
    ModelGraph m = gradcheck::single_layer_model(fact, 3, 11);
    m.params["f.core"] = gradcheck::random_tensor({2, 3, 5}, rng);
    m.params["f.v1"] = gradcheck::random_tensor({6, 2}, rng);
    m.tags["f.core"] = ParamTag::Core;
    m.tags["f.v1"] = ParamTag::Factor;
    const DenseTensor x = gradcheck::random_tensor({2, 3, 11}, rng);
    const auto res = gradcheck::check_model(m, x, 102);
    CHECK(res.max_rel_err < 1e-4);
  }
  SUBCASE("linear and factorized linear") {
    LayerSpec lin{};
    lin.kind = LayerKind::Linear;
    lin.name = "lin";
    lin.c_in = 6;
    lin.c_out = 4;
    lin.has_bias = true;
    ModelGraph m = gradcheck::single_layer_model(lin, 2, 3);  // input flattened 2*3 = 6
    m.params["lin.weight"] = gradcheck::random_tensor({4, 6}, rng);
    m.params["lin.bias"] = gradcheck::random_tensor({4}, rng);
    m.tags["lin.weight"] = ParamTag::Classifier;
    m.tags["lin.bias"] = ParamTag::Classifier;
    const DenseTensor x = gradcheck::random_tensor({3, 2, 3}, rng);
    CHECK(gradcheck::check_model(m, x, 103).max_rel_err < 1e-4);

    LayerSpec fl{};
    fl.kind = LayerKind::FactorizedLinear;
    fl.name = "fl";
    fl.c_in = 6;
    fl.c_out = 4;
    fl.r_in = 3;
    fl.r_out = 2;
    fl.has_bias = true;
    ModelGraph m2 = gradcheck::single_layer_model(fl, 2, 3);
    m2.params["fl.core"] = gradcheck::random_tensor({2, 3}, rng);
    m2.params["fl.u1"] = gradcheck::random_tensor({4, 2}, rng);
    m2.params["fl.u2"] = gradcheck::random_tensor({6, 3}, rng);
    m2.params["fl.bias"] = gradcheck::random_tensor({4}, rng);
    m2.tags["fl.core"] = ParamTag::Core;
    m2.tags["fl.u1"] = ParamTag::Factor;
    m2.tags["fl.u2"] = ParamTag::Factor;
    m2.tags["fl.bias"] = ParamTag::Factor;
    CHECK(gradcheck::check_model(m2, x, 104).max_rel_err < 1e-4);
  }
  SUBCASE("full stacked block: conv-bn-relu-pool-dropout-linear") {
    BackboneConfig cfg;
    cfg.input_channels = 2;
    cfg.input_len = 16;
    cfg.num_classes = 3;
    cfg.mid_channels = 3;
    cfg.final_channels = 4;
    cfg.kernel1 = 5;
    cfg.kernel2 = 3;
    cfg.kernel3 = 3;
    cfg.stride1 = 1;
    cfg.dropout = 0.25;
    cfg.conv_bias = true;
    ModelGraph m = build_cnn(cfg, 42, false);
    const DenseTensor x = gradcheck::random_tensor({3, 2, 16}, rng);
    const auto res = gradcheck::check_model(m, x, 105);
    CHECK(res.max_rel_err < 1e-4);
  }
  SUBCASE("imputer head") {
    BackboneConfig cfg;
    cfg.input_channels = 1;
    cfg.input_len = 12;
    cfg.num_classes = 2;
    cfg.mid_channels = 2;
    cfg.final_channels = 3;
    cfg.kernel1 = 3;
    cfg.kernel2 = 3;
    cfg.kernel3 = 3;
    cfg.stride1 = 1;
    ModelGraph m = build_cnn(cfg, 43, true);
    const DenseTensor feats = gradcheck::random_tensor({4, m.feature_dim()}, rng);
    StackCache cache;
    const DenseTensor out = imputer_forward(m, feats, Mode::Train, &cache);
    DenseTensor dout(out.shape());
    Rng wrng(9);
    for (Index i = 0; i < dout.size(); ++i) dout[i] = wrng.uniform(-1, 1);
    GradMap grads;
    imputer_backward(m, cache, dout, grads);
    auto eval = [&](ModelGraph& mm) {
      StackCache c2;
      const DenseTensor o = imputer_forward(mm, feats, Mode::Train, &c2);
      double s = 0;
      for (Index i = 0; i < o.size(); ++i) s += o[i] * dout[i];
      return s;
    };
    const auto res = gradcheck::check_loss(m, feats, 0, grads, eval);
    CHECK(res.max_rel_err < 1e-4);
  }
}

TEST_CASE("gradient of an unused parameter is exactly zero") {
  Rng rng(200);
  ModelGraph m = conv_model(1, 2, 3, 1, 5, true, rng);
  const DenseTensor x = gradcheck::random_tensor({1, 1, 5}, rng);
  Rng drng(0);
  const ForwardResult fr = forward_train(m, x, drng);
  DenseTensor dlogits(fr.logits.shape());
  // only channel-0 outputs contribute; channel 1 occupies the second half
  for (Index i = 0; i < dlogits.size() / 2; ++i) dlogits[i] = 1.0;
  const GradMap grads = backward(m, fr, dlogits);
  const DenseTensor& dbias = grads.at("conv.bias");
  CHECK(dbias[0] != 0.0);
  CHECK(dbias[1] == 0.0);
  const DenseTensor& dw = grads.at("conv.weight");
  for (Index k = 0; k < 3; ++k) CHECK(dw.at3(1, 0, k) == 0.0);
}

TEST_CASE("doubling the loss doubles every gradient") {
  Rng rng(201);
  ModelGraph m = conv_model(2, 3, 3, 1, 6, true, rng);
  const DenseTensor x = gradcheck::random_tensor({2, 2, 6}, rng);
  Rng drng(0);
  const ForwardResult fr = forward_train(m, x, drng);
  DenseTensor d1(fr.logits.shape());
  for (Index i = 0; i < d1.size(); ++i) d1[i] = rng.uniform(-1, 1);
  const GradMap g1 = backward(m, fr, d1);
  const GradMap g2 = backward(m, fr, scale(d1, 2.0));
  for (const auto& [name, g] : g1)
    for (Index i = 0; i < g.size(); ++i)
      CHECK(g2.at(name)[i] == doctest::Approx(2.0 * g[i]).epsilon(1e-12));
}

TEST_CASE("forward determinism: identical seeds give identical train-mode outputs") {
  BackboneConfig cfg;
  cfg.input_channels = 2;
  cfg.input_len = 20;
  cfg.num_classes = 3;
  cfg.mid_channels = 4;
  cfg.final_channels = 6;
  cfg.kernel1 = 5;
  cfg.kernel2 = 3;
  cfg.kernel3 = 3;
  cfg.stride1 = 2;
  cfg.dropout = 0.3;
  ModelGraph m1 = build_cnn(cfg, 7, false);
  ModelGraph m2 = build_cnn(cfg, 7, false);
  Rng rng(77);
  const DenseTensor x = gradcheck::random_tensor({4, 2, 20}, rng);
  Rng d1(123), d2(123);
  const ForwardResult f1 = forward_train(m1, x, d1);
  const ForwardResult f2 = forward_train(m2, x, d2);
  REQUIRE(f1.logits.size() == f2.logits.size());
  for (Index i = 0; i < f1.logits.size(); ++i) CHECK(f1.logits[i] == f2.logits[i]);
}

TEST_CASE("zero-weight classifier yields equal logits and a uniform softmax") {
  BackboneConfig cfg;
  cfg.input_channels = 1;
  cfg.input_len = 16;
  cfg.num_classes = 4;
  cfg.mid_channels = 2;
  cfg.final_channels = 3;
  cfg.kernel1 = 3;
  cfg.kernel2 = 3;
  cfg.kernel3 = 3;
  cfg.stride1 = 1;
  ModelGraph m = build_cnn(cfg, 5, false);
  m.params["classifier.weight"].fill(0.0);
  m.params["classifier.bias"].fill(0.0);
  Rng rng(6);
  const DenseTensor x = gradcheck::random_tensor({2, 1, 16}, rng);
  const ForwardResult fr = forward_eval(m, x);
  const DenseTensor p = softmax_rows(fr.logits);
  for (Index b = 0; b < 2; ++b)
    for (Index k = 0; k < 4; ++k) {
      CHECK(fr.logits.at2(b, k) == 0.0);
      CHECK(p.at2(b, k) == doctest::Approx(0.25).epsilon(1e-12));
    }
}

TEST_CASE("single linear model computes Wx + b") {
  LayerSpec lin{};
  lin.kind = LayerKind::Linear;
  lin.name = "lin";
  lin.c_in = 2;
  lin.c_out = 2;
  lin.has_bias = true;
  ModelGraph m = gradcheck::single_layer_model(lin, 2, 1);
  m.params["lin.weight"] = DenseTensor({2, 2}, {1, 2, 3, 4});
  m.params["lin.bias"] = DenseTensor({2}, {0.5, -0.5});
  m.tags["lin.weight"] = ParamTag::Classifier;
  m.tags["lin.bias"] = ParamTag::Classifier;
  const DenseTensor x({1, 2, 1}, {10, 20});
  const DenseTensor y = run_eval(m, x);
  CHECK(y[0] == doctest::Approx(1 * 10 + 2 * 20 + 0.5));
  CHECK(y[1] == doctest::Approx(3 * 10 + 4 * 20 - 0.5));
}

TEST_CASE("adam: empty mask leaves parameters bitwise unchanged") {
  Rng rng(300);
  ModelGraph m = conv_model(2, 2, 3, 1, 6, true, rng);
  const ModelGraph before = m;
  GradMap grads;
  grads["conv.weight"] = gradcheck::random_tensor({2, 2, 3}, rng);
  grads["conv.bias"] = gradcheck::random_tensor({2}, rng);
  AdamState st;
  adam_step(m, grads, SubspaceMask::none(), AdamConfig{}, st);
  for (const auto& [name, w] : before.params)
    for (Index i = 0; i < w.size(); ++i) CHECK(m.params.at(name)[i] == w[i]);
}

TEST_CASE("adam: scalar one-step update matches the hand formula") {
  LayerSpec lin{};
  lin.kind = LayerKind::Linear;
  lin.name = "w";
  lin.c_in = 1;
  lin.c_out = 1;
  ModelGraph m = gradcheck::single_layer_model(lin, 1, 1);
  m.params["w.weight"] = DenseTensor({1, 1}, {0.5});
  m.tags["w.weight"] = ParamTag::Backbone;
  GradMap grads;
  grads["w.weight"] = DenseTensor({1, 1}, {0.3});
  AdamConfig cfg;
  cfg.lr = 0.01;
  AdamState st;
  adam_step(m, grads, SubspaceMask::everything(), cfg, st);
  const double g = 0.3;
  const double want = 0.5 - cfg.lr * g / (std::sqrt(g * g) + cfg.eps);
  CHECK(m.params["w.weight"][0] == doctest::Approx(want).epsilon(1e-14));
}

TEST_CASE("adam: core-only mask leaves factor/bn/classifier tensors untouched") {
  BackboneConfig cfg;
  cfg.input_channels = 1;
  cfg.input_len = 16;
  cfg.num_classes = 3;
  cfg.mid_channels = 2;
  cfg.final_channels = 4;
  cfg.kernel1 = 3;
  cfg.kernel2 = 3;
  cfg.kernel3 = 3;
  cfg.stride1 = 1;
  ModelGraph m = build_cnn(cfg, 11, false);
  // retag two conv weights so the mask has core/factor members to act on
  m.tags["conv1.weight"] = ParamTag::Core;
  m.tags["conv2.weight"] = ParamTag::Factor;
  const ModelGraph before = m;
  GradMap grads;
  for (const auto& [name, w] : m.params) {
    DenseTensor g(w.shape());
    g.fill(0.5);
    grads[name] = g;
  }
  AdamState st;
  adam_step(m, grads, SubspaceMask::of({ParamTag::Core}), AdamConfig{}, st);
  for (const auto& [name, w] : before.params) {
    const bool is_core = m.tags.at(name) == ParamTag::Core;
    bool changed = false;
    for (Index i = 0; i < w.size(); ++i)
      if (m.params.at(name)[i] != w[i]) changed = true;
    CHECK(changed == is_core);
  }
}

TEST_CASE("adam rejects unknown parameter names") {
  Rng rng(301);
  ModelGraph m = conv_model(1, 1, 3, 1, 4, false, rng);
  GradMap grads;
  grads["nope"] = DenseTensor({1});
  AdamState st;
  CHECK_THROWS_AS(adam_step(m, grads, SubspaceMask::everything(), AdamConfig{}, st),
                  std::invalid_argument);
}

TEST_CASE("forward rejects mismatched batch shapes") {
  Rng rng(302);
  ModelGraph m = conv_model(2, 2, 3, 1, 6, false, rng);
  const DenseTensor x = gradcheck::random_tensor({1, 3, 6}, rng);
  CHECK_THROWS_AS(forward_eval(m, x), std::invalid_argument);
}

TEST_CASE("non-finite activations are reported") {
  Rng rng(303);
  ModelGraph m = conv_model(1, 1, 3, 1, 4, false, rng);
  m.params["conv.weight"][0] = std::numeric_limits<double>::infinity();
  const DenseTensor x = gradcheck::random_tensor({1, 1, 4}, rng);
  CHECK_THROWS_AS(forward_eval(m, x), std::runtime_error);
}

TEST_CASE("maxpool and adaptive pool shapes and values") {
  Rng rng(304);
  LayerSpec pool{};
  pool.kind = LayerKind::MaxPool1d;
  pool.name = "pool";
  pool.pool = 2;
  pool.pool_stride = 2;
  pool.pool_padding = 1;
  ModelGraph mp = gradcheck::single_layer_model(pool, 2, 7);
  const DenseTensor x = gradcheck::random_tensor({2, 2, 7}, rng);
  Rng drng(0);
  const ForwardResult fr = forward_train(mp, x, drng);
  CHECK(fr.backbone_cache.out.extent(2) == 4);  // floor((7+2-2)/2)+1

  LayerSpec gap{};
  gap.kind = LayerKind::AdaptiveAvgPool1d;
  gap.name = "gap";
  gap.out_len = 3;
  ModelGraph mg = gradcheck::single_layer_model(gap, 2, 7);
  Rng drng2(0);
  const ForwardResult fg = forward_train(mg, x, drng2);
  CHECK(fg.backbone_cache.out.extent(2) == 3);
  // first output bin averages inputs [0, ceil(7/3)) = [0, 3)
  const double want = (x.at3(0, 0, 0) + x.at3(0, 0, 1) + x.at3(0, 0, 2)) / 3.0;
  CHECK(fg.backbone_cache.out.at3(0, 0, 0) == doctest::Approx(want).epsilon(1e-12));
}
