#pragma once

// Finite-difference gradient checking shared by the unit tests and the
// acceptance suite. The scalar loss is a fixed random linear functional of
// the logits, which keeps every gradient path alive.

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "tsfda/nn.hpp"
#include "tsfda/rng.hpp"

namespace gradcheck {

using namespace tsfda;

struct Result {
  double max_rel_err = 0;
  std::string worst_param;
  Index checked = 0;
};

inline double loss_of(const DenseTensor& logits, const DenseTensor& weights) {
  double s = 0;
  for (Index i = 0; i < logits.size(); ++i) s += logits[i] * weights[i];
  return s;
}

/// Central finite differences (eps 1e-5) on every entry of every trainable
/// parameter against the analytic backward pass. Dropout is re-seeded
/// identically per evaluation so the sampled masks match.
inline Result check_model(ModelGraph& model, const DenseTensor& x, std::uint64_t seed,
                          double eps = 1e-5) {
  Rng wrng(mix_seed(seed, "loss_weights"));
  ForwardResult probe = [&] {
    Rng r(mix_seed(seed, "dropout"));
    return forward_train(model, x, r);
  }();
  DenseTensor cvec(probe.logits.shape());
  for (Index i = 0; i < cvec.size(); ++i) cvec[i] = wrng.uniform(-1.0, 1.0);

  const GradMap grads = backward(model, probe, cvec);

  auto eval = [&]() {
    Rng r(mix_seed(seed, "dropout"));
    const ForwardResult fr = forward_train(model, x, r);
    return loss_of(fr.logits, cvec);
  };

  Result res;
  for (auto& [name, g] : grads) {
    DenseTensor& w = model.params.at(name);
    for (Index i = 0; i < w.size(); ++i) {
      const double saved = w[i];
      w[i] = saved + eps;
      const double up = eval();
      w[i] = saved - eps;
      const double down = eval();
      w[i] = saved;
      const double fd = (up - down) / (2.0 * eps);
      const double an = g[i];
      const double denom = std::max({1.0, std::abs(fd), std::abs(an)});
      const double rel = std::abs(fd - an) / denom;
      if (rel > res.max_rel_err) {
        res.max_rel_err = rel;
        res.worst_param = name;
      }
      ++res.checked;
    }
  }
  return res;
}

/// Same harness for an arbitrary loss with its own analytic gradient map.
inline Result check_loss(ModelGraph& model, const DenseTensor& x, std::uint64_t seed,
                         const GradMap& analytic,
                         const std::function<double(ModelGraph&)>& eval, double eps = 1e-5) {
  Result res;
  for (const auto& [name, g] : analytic) {
    DenseTensor& w = model.params.at(name);
    for (Index i = 0; i < w.size(); ++i) {
      const double saved = w[i];
      w[i] = saved + eps;
      const double up = eval(model);
      w[i] = saved - eps;
      const double down = eval(model);
      w[i] = saved;
      const double fd = (up - down) / (2.0 * eps);
      const double an = g[i];
      const double denom = std::max({1.0, std::abs(fd), std::abs(an)});
      const double rel = std::abs(fd - an) / denom;
      if (rel > res.max_rel_err) {
        res.max_rel_err = rel;
        res.worst_param = name;
      }
      ++res.checked;
    }
  }
  return res;
}

/// One-layer model wrapper (empty classifier: the flattened layer output is
/// the logits vector).
inline ModelGraph single_layer_model(LayerSpec layer, Index in_channels, Index in_len) {
  ModelGraph m;
  m.input_channels = in_channels;
  m.input_len = in_len;
  m.num_classes = 1;
  m.layers.push_back(std::move(layer));
  m.backbone_end = 1;
  return m;
}

inline DenseTensor random_tensor(const Shape& s, Rng& rng, double lo = -1.0, double hi = 1.0) {
  DenseTensor t(s);
  for (Index i = 0; i < t.size(); ++i) t[i] = rng.uniform(lo, hi);
  return t;
}

}  // namespace gradcheck
