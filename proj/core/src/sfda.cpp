#include "tsfda/sfda.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include <nlohmann/json.hpp>

#include "tsfda/diagnostics.hpp"

using nlohmann::json;

namespace tsfda {

const std::vector<double> kLrGrid = {5e-4, 1e-4, 5e-5, 1e-5, 5e-6, 1e-6, 5e-7, 1e-7};

std::string to_string(Method m) {
  switch (m) {
    case Method::SHOT: return "shot";
    case Method::NRC: return "nrc";
    case Method::AAD: return "aad";
    case Method::MAPU: return "mapu";
  }
  return "?";
}

Method method_from_string(const std::string& s) {
  for (Method m : {Method::SHOT, Method::NRC, Method::AAD, Method::MAPU})
    if (to_string(m) == s) return m;
  throw std::invalid_argument("unknown method: " + s + " (expected shot|nrc|aad|mapu)");
}

double source_pretrain_loss(const DenseTensor& logits, const std::vector<int>& labels,
                            double alpha, DenseTensor* dlogits) {
  if (alpha < 0.0 || alpha >= 1.0)
    throw std::invalid_argument("label smoothing alpha must be in [0, 1)");
  const Index B = logits.extent(0), K = logits.extent(1);
  if (static_cast<Index>(labels.size()) != B)
    throw std::invalid_argument("source loss: label count mismatch");
  const DenseTensor p = softmax_rows(logits);
  double loss = 0;
  if (dlogits) *dlogits = DenseTensor(logits.shape());
  for (Index b = 0; b < B; ++b) {
    const int y = labels[static_cast<size_t>(b)];
    if (y < 0 || y >= K) throw std::invalid_argument("source loss: label out of range");
    for (Index k = 0; k < K; ++k) {
      const double q = (1.0 - alpha) * (k == y ? 1.0 : 0.0) + alpha / static_cast<double>(K);
      const double pk = std::max(p.at2(b, k), 1e-300);
      loss -= q * std::log(pk);
      if (dlogits) dlogits->at2(b, k) = (p.at2(b, k) - q) / static_cast<double>(B);
    }
  }
  return loss / static_cast<double>(B);
}

double shot_loss(const DenseTensor& logits, DenseTensor* dlogits) {
  const Index B = logits.extent(0), K = logits.extent(1);
  if (B < 2) throw std::invalid_argument("shot_loss: batch must have at least 2 samples");
  const DenseTensor p = softmax_rows(logits);

  DenseTensor pbar({K});
  for (Index b = 0; b < B; ++b)
    for (Index k = 0; k < K; ++k) pbar[k] += p.at2(b, k) / static_cast<double>(B);

  double mean_ent = 0;
  for (Index b = 0; b < B; ++b)
    for (Index k = 0; k < K; ++k) {
      const double v = p.at2(b, k);
      if (v > 0) mean_ent -= v * std::log(v);
    }
  mean_ent /= static_cast<double>(B);

  double marg_ent = 0;
  for (Index k = 0; k < K; ++k)
    if (pbar[k] > 0) marg_ent -= pbar[k] * std::log(pbar[k]);

  if (dlogits) {
    DenseTensor dp(p.shape());
    for (Index b = 0; b < B; ++b)
      for (Index k = 0; k < K; ++k) {
        const double pk = std::max(p.at2(b, k), 1e-300);
        // d(mean entropy)/dp - d(marginal entropy)/dp
        const double d_cond = -(std::log(pk) + 1.0) / static_cast<double>(B);
        const double d_marg = -(std::log(std::max(pbar[k], 1e-300)) + 1.0) / static_cast<double>(B);
        dp.at2(b, k) = d_cond - d_marg;
      }
    *dlogits = softmax_backward_rows(p, dp);
  }
  return mean_ent - marg_ent;
}

// ---------------------------------------------------------------------------
// Memory bank
// ---------------------------------------------------------------------------

MemoryBank::MemoryBank(Index n, Index feat_dim, Index num_classes)
    : features_({n, feat_dim}), probs_({n, num_classes}) {}

void MemoryBank::update(Index slot, const double* feat, const double* prob) {
  const Index f = features_.extent(1), k = probs_.extent(1);
  std::copy(feat, feat + f, features_.data() + slot * f);
  std::copy(prob, prob + k, probs_.data() + slot * k);
}

namespace {

double cosine(const double* a, const double* b, Index n) {
  double dot = 0, na = 0, nb = 0;
  for (Index i = 0; i < n; ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  const double denom = std::sqrt(na) * std::sqrt(nb);
  return denom > 0 ? dot / denom : 0.0;
}

}  // namespace

std::vector<Index> MemoryBank::knn(const double* feat, Index k, Index exclude) const {
  const Index n = size(), f = features_.extent(1);
  std::vector<std::pair<double, Index>> scored;
  scored.reserve(static_cast<size_t>(n));
  for (Index i = 0; i < n; ++i) {
    if (i == exclude) continue;
    scored.emplace_back(cosine(feat, features_.data() + i * f, f), i);
  }
  const Index take = std::min<Index>(k, static_cast<Index>(scored.size()));
  std::partial_sort(scored.begin(), scored.begin() + take, scored.end(),
                    [](const auto& x, const auto& y) {
                      if (x.first != y.first) return x.first > y.first;
                      return x.second < y.second;
                    });
  std::vector<Index> out;
  out.reserve(static_cast<size_t>(take));
  for (Index i = 0; i < take; ++i) out.push_back(scored[static_cast<size_t>(i)].second);
  return out;
}

std::vector<Index> MemoryBank::knn_of_slot(Index slot, Index k) const {
  return knn(features_.data() + slot * features_.extent(1), k, slot);
}

// ---------------------------------------------------------------------------
// NRC / AAD
// ---------------------------------------------------------------------------

double nrc_loss(const DenseTensor& features, const DenseTensor& logits, const MemoryBank& bank,
                const std::vector<Index>& bank_slots, const NrcConfig& cfg, DenseTensor* dlogits) {
  if (bank.empty()) throw std::invalid_argument("nrc_loss: empty memory bank");
  const Index B = logits.extent(0), K = logits.extent(1);
  if (static_cast<Index>(bank_slots.size()) != B)
    throw std::invalid_argument("nrc_loss: bank slots must pair with the batch");
  const DenseTensor p = softmax_rows(logits);
  DenseTensor dp(p.shape());

  double consistency = 0;
  for (Index b = 0; b < B; ++b) {
    const Index slot = bank_slots[static_cast<size_t>(b)];
    const auto neighbors = bank.knn(features.data() + b * features.extent(1), cfg.k_nn, slot);
    for (Index nb : neighbors) {
      const bool reciprocal = [&] {
        for (Index r : bank.knn_of_slot(nb, cfg.k_nn))
          if (r == slot) return true;
        return false;
      }();
      const double aff = reciprocal ? 1.0 : cfg.non_reciprocal_affinity;
      const double* q = bank.probs().data() + nb * K;
      for (Index k = 0; k < K; ++k) {
        const double d = p.at2(b, k) - q[k];
        consistency += aff * d * d;
        dp.at2(b, k) += 2.0 * aff * d / static_cast<double>(B);
      }
      if (cfg.expanded) {
        for (Index m : bank.knn_of_slot(nb, cfg.k_nn)) {
          if (m == slot) continue;
          const double* qm = bank.probs().data() + m * K;
          for (Index k = 0; k < K; ++k) {
            const double d = p.at2(b, k) - qm[k];
            consistency += cfg.expanded_weight * d * d;
            dp.at2(b, k) += 2.0 * cfg.expanded_weight * d / static_cast<double>(B);
          }
        }
      }
    }
  }
  consistency /= static_cast<double>(B);

  DenseTensor pbar({K});
  for (Index b = 0; b < B; ++b)
    for (Index k = 0; k < K; ++k) pbar[k] += p.at2(b, k) / static_cast<double>(B);
  double diversity = 0;
  for (Index k = 0; k < K; ++k)
    if (pbar[k] > 0) diversity += pbar[k] * std::log(pbar[k]);

  if (dlogits) {
    for (Index b = 0; b < B; ++b)
      for (Index k = 0; k < K; ++k)
        dp.at2(b, k) += (std::log(std::max(pbar[k], 1e-300)) + 1.0) / static_cast<double>(B);
    *dlogits = softmax_backward_rows(p, dp);
  }
  return consistency + diversity;
}

double aad_loss(const DenseTensor& features, const DenseTensor& logits, const MemoryBank& bank,
                const std::vector<Index>& bank_slots, int k_nn, double lambda,
                DenseTensor* dlogits) {
  if (bank.empty()) throw std::invalid_argument("aad_loss: empty memory bank");
  if (k_nn < 1) throw std::invalid_argument("aad_loss: k_nn must be >= 1");
  const Index B = logits.extent(0), K = logits.extent(1);
  const DenseTensor p = softmax_rows(logits);
  DenseTensor dp(p.shape());

  double loss = 0;
  for (Index b = 0; b < B; ++b) {
    const Index slot = bank_slots[static_cast<size_t>(b)];
    const auto neighbors = bank.knn(features.data() + b * features.extent(1), k_nn, slot);
    for (Index nb : neighbors) {
      const double* q = bank.probs().data() + nb * K;
      for (Index k = 0; k < K; ++k) {
        loss -= p.at2(b, k) * q[k];
        dp.at2(b, k) -= q[k] / static_cast<double>(B);
      }
    }
    for (Index j = 0; j < B; ++j) {  // dispersion against the rest of the batch
      if (j == b) continue;
      for (Index k = 0; k < K; ++k) {
        loss += lambda * p.at2(b, k) * p.at2(j, k);
        // both sides of the pair are live predictions
        dp.at2(b, k) += lambda * p.at2(j, k) / static_cast<double>(B);
        dp.at2(j, k) += lambda * p.at2(b, k) / static_cast<double>(B);
      }
    }
  }
  loss /= static_cast<double>(B);
  if (dlogits) *dlogits = softmax_backward_rows(p, dp);
  return loss;
}

// ---------------------------------------------------------------------------
// MAPU
// ---------------------------------------------------------------------------

DenseTensor mask_inputs(const DenseTensor& x, double ratio, Rng& rng) {
  if (ratio < 0.0 || ratio >= 1.0)
    throw std::invalid_argument("mask ratio must be in [0, 1)");
  DenseTensor out = x;
  if (ratio == 0.0) return out;
  const Index B = x.extent(0), M = x.extent(1), L = x.extent(2);
  const Index block = std::min<Index>(
      L - 1,
      std::max<Index>(1, static_cast<Index>(std::llround(ratio * static_cast<double>(L)))));
  for (Index b = 0; b < B; ++b) {
    const Index start = rng.below(L - block + 1);
    for (Index c = 0; c < M; ++c) {
      double* row = out.data() + (b * M + c) * L;
      std::fill(row + start, row + start + block, 0.0);
    }
  }
  return out;
}

MapuResult mapu_losses(ModelGraph& m, const DenseTensor& x, const MapuConfig& cfg, Rng& mask_rng,
                       Rng& dropout_rng, bool want_grads, const std::vector<int>* labels,
                       double label_smoothing) {
  if (m.imputer.empty()) throw std::invalid_argument("mapu: model has no imputer head attached");
  MapuResult res;
  const Index B = x.extent(0);

  ForwardResult clean = forward_train(m, x, dropout_rng);
  DenseTensor masked = mask_inputs(x, cfg.mask_ratio, mask_rng);
  ForwardResult branch = forward_train(m, masked, dropout_rng);
  StackCache imputer_cache;
  DenseTensor imputed = imputer_forward(m, branch.features, Mode::Train, &imputer_cache);

  const Index F = clean.features.extent(1);
  DenseTensor residual({B, F});
  double imp = 0;
  for (Index i = 0; i < residual.size(); ++i) {
    residual[i] = clean.features[i] - imputed[i];
    imp += residual[i] * residual[i];
  }
  imp /= static_cast<double>(B);
  res.imputation_loss = imp;

  DenseTensor dlogits(clean.logits.shape());
  double clean_loss = 0;
  if (labels)
    clean_loss = source_pretrain_loss(clean.logits, *labels, label_smoothing,
                                      want_grads ? &dlogits : nullptr);
  else if (cfg.include_shot)
    clean_loss = shot_loss(clean.logits, want_grads ? &dlogits : nullptr);
  res.adaptation_loss = clean_loss + cfg.imputation_weight * imp;

  if (want_grads) {
    // clean branch: d(imp)/d h(x) = 2/B * residual, on top of the clean-loss path
    DenseTensor dclean = scale(residual, 2.0 * cfg.imputation_weight / static_cast<double>(B));
    res.grads = backward(m, clean, dlogits, &dclean);
    // masked branch: d(imp)/d imputed = -2/B * residual
    DenseTensor dimputed = scale(residual, -2.0 * cfg.imputation_weight / static_cast<double>(B));
    DenseTensor dfeat_masked = imputer_backward(m, imputer_cache, dimputed, res.grads);
    backbone_backward(m, branch.backbone_cache, dfeat_masked, res.grads);
  }
  return res;
}

// ---------------------------------------------------------------------------
// Adaptation loop
// ---------------------------------------------------------------------------

namespace {

struct BankState {
  MemoryBank bank;

  void init(const ModelGraph& m, const UnlabeledView& target) {
    const Index n = target.n();
    bank = MemoryBank(n, m.feature_dim(), m.num_classes);
    const Index chunk = 64;
    std::vector<Index> idx;
    for (Index start = 0; start < n; start += chunk) {
      idx.clear();
      for (Index i = start; i < std::min(n, start + chunk); ++i) idx.push_back(i);
      const DenseTensor x = target.gather(idx);
      const ForwardResult fr = forward_eval(m, x);
      const DenseTensor probs = softmax_rows(fr.logits);
      for (size_t b = 0; b < idx.size(); ++b)
        bank.update(idx[b], fr.features.data() + static_cast<Index>(b) * fr.features.extent(1),
                    probs.data() + static_cast<Index>(b) * probs.extent(1));
    }
  }

  void refresh(const std::vector<Index>& slots, const ForwardResult& fr) {
    const DenseTensor probs = softmax_rows(fr.logits);
    for (size_t b = 0; b < slots.size(); ++b)
      bank.update(slots[b], fr.features.data() + static_cast<Index>(b) * fr.features.extent(1),
                  probs.data() + static_cast<Index>(b) * probs.extent(1));
  }
};

// SHOT-style centroid pseudo-labels (two rounds), optional.
std::vector<int> shot_pseudo_labels(const ModelGraph& m, const UnlabeledView& target) {
  const Index n = target.n(), K = m.num_classes, F = m.feature_dim();
  DenseTensor feats({n, F}), probs({n, K});
  const Index chunk = 64;
  std::vector<Index> idx;
  for (Index start = 0; start < n; start += chunk) {
    idx.clear();
    for (Index i = start; i < std::min(n, start + chunk); ++i) idx.push_back(i);
    const ForwardResult fr = forward_eval(m, target.gather(idx));
    const DenseTensor p = softmax_rows(fr.logits);
    for (size_t b = 0; b < idx.size(); ++b) {
      std::copy(fr.features.data() + static_cast<Index>(b) * F,
                fr.features.data() + (static_cast<Index>(b) + 1) * F, feats.data() + idx[b] * F);
      std::copy(p.data() + static_cast<Index>(b) * K, p.data() + (static_cast<Index>(b) + 1) * K,
                probs.data() + idx[b] * K);
    }
  }
  std::vector<int> labels(static_cast<size_t>(n), 0);
  DenseTensor weights = probs;
  for (int round = 0; round < 2; ++round) {
    DenseTensor centroids({K, F});
    std::vector<double> mass(static_cast<size_t>(K), 1e-12);
    for (Index i = 0; i < n; ++i)
      for (Index k = 0; k < K; ++k) {
        const double w = weights.at2(i, k);
        mass[static_cast<size_t>(k)] += w;
        for (Index f = 0; f < F; ++f) centroids.at2(k, f) += w * feats.at2(i, f);
      }
    for (Index k = 0; k < K; ++k)
      for (Index f = 0; f < F; ++f) centroids.at2(k, f) /= mass[static_cast<size_t>(k)];
    for (Index i = 0; i < n; ++i) {
      Index best = 0;
      double best_sim = -2;
      for (Index k = 0; k < K; ++k) {
        const double sim = cosine(feats.data() + i * F, centroids.data() + k * F, F);
        if (sim > best_sim) {
          best_sim = sim;
          best = k;
        }
      }
      labels[static_cast<size_t>(i)] = static_cast<int>(best);
    }
    // second round: hard assignments as weights
    weights = DenseTensor({n, K});
    for (Index i = 0; i < n; ++i) weights.at2(i, labels[static_cast<size_t>(i)]) = 1.0;
  }
  return labels;
}

std::vector<std::string> weight_layer_names(const ModelGraph& m) {
  std::vector<std::string> out;
  for (const auto& l : m.layers)
    if (l.kind == LayerKind::Conv1d || l.kind == LayerKind::FactorizedConv1d ||
        l.kind == LayerKind::Linear || l.kind == LayerKind::FactorizedLinear ||
        l.kind == LayerKind::BatchNorm1d)
      out.push_back(l.name);
  return out;
}

}  // namespace

AdaptResult adapt(const ModelGraph& src, const UnlabeledView& target,
                  const TimeSeriesDataset* eval_set, const AdaptationConfig& cfg,
                  const SubspaceMask& mask) {
  if (target.n() < 1) throw std::invalid_argument("adapt: empty target set");
  if (cfg.method == Method::MAPU && (cfg.mask_ratio <= 0.0 || cfg.mask_ratio >= 1.0))
    throw std::invalid_argument("adapt: mapu mask ratio must be in (0, 1)");
  if (cfg.method == Method::MAPU && src.imputer.empty())
    throw std::invalid_argument("adapt: mapu needs a model with an imputer head");

  AdaptResult res;
  res.model = src;
  ModelGraph& model = res.model;

  RunLog& log = res.log;
  log.method = to_string(cfg.method);
  log.subspace = mask.to_string();
  log.seed = cfg.seed;
  log.lr = cfg.lr;

  AdamConfig adam{cfg.lr, 0.9, 0.999, 1e-8};
  AdamState opt;

  const int k_nn = cfg.batch < 32 ? std::min(cfg.k_nn, 3) : cfg.k_nn;
  BankState banks;
  if (cfg.method == Method::NRC || cfg.method == Method::AAD) banks.init(model, target);

  Rng dropout_rng(mix_seed(cfg.seed, "adapt_dropout"));
  Rng mask_rng(mix_seed(cfg.seed, "adapt_mask"));

  const Index n = target.n();
  const Index total_steps =
      std::max<Index>(1, static_cast<Index>(cfg.epochs) * ((n + cfg.batch - 1) / cfg.batch));

  std::vector<int> pseudo;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    if (cfg.method == Method::SHOT && cfg.shot_pseudo_label)
      pseudo = shot_pseudo_labels(model, target);

    std::vector<Index> order(static_cast<size_t>(n));
    std::iota(order.begin(), order.end(), Index{0});
    Rng shuffle_rng(mix_seed(cfg.seed, "adapt_epoch" + std::to_string(epoch)));
    shuffle_rng.shuffle(order);

    double epoch_loss = 0;
    Index batches = 0;
    for (Index start = 0; start < n; start += cfg.batch) {
      const Index stop = std::min(n, start + cfg.batch);
      if (stop - start < 2) continue;  // entropy diversity needs at least two samples
      std::vector<Index> slots(order.begin() + start, order.begin() + stop);
      const DenseTensor x = target.gather(slots);

      double loss = 0;
      GradMap grads;
      StepStats stats;
      if (cfg.method == Method::MAPU) {
        MapuConfig mc{cfg.mask_ratio, cfg.imputation_weight, true};
        MapuResult mr = mapu_losses(model, x, mc, mask_rng, dropout_rng, true);
        loss = mr.adaptation_loss;
        grads = std::move(mr.grads);
      } else {
        ForwardResult fr = forward_train(model, x, dropout_rng);
        DenseTensor dlogits;
        switch (cfg.method) {
          case Method::SHOT: {
            loss = shot_loss(fr.logits, &dlogits);
            if (cfg.shot_pseudo_label) {
              DenseTensor dce;
              std::vector<int> batch_labels;
              batch_labels.reserve(slots.size());
              for (Index s : slots) batch_labels.push_back(pseudo[static_cast<size_t>(s)]);
              loss += cfg.pseudo_label_weight *
                      source_pretrain_loss(fr.logits, batch_labels, 0.0, &dce);
              for (Index i = 0; i < dlogits.size(); ++i)
                dlogits[i] += cfg.pseudo_label_weight * dce[i];
            }
            break;
          }
          case Method::NRC: {
            NrcConfig nc;
            nc.k_nn = k_nn;
            nc.non_reciprocal_affinity = cfg.nrc_non_reciprocal;
            loss = nrc_loss(fr.features, fr.logits, banks.bank, slots, nc, &dlogits);
            break;
          }
          case Method::AAD: {
            const double progress =
                static_cast<double>(log.steps) / static_cast<double>(total_steps);
            const double lambda = cfg.aad_lambda0 * std::pow(1.0 + 10.0 * progress, -5.0);
            loss = aad_loss(fr.features, fr.logits, banks.bank, slots, k_nn, lambda, &dlogits);
            break;
          }
          default:
            throw std::logic_error("unreachable");
        }
        grads = backward(model, fr, dlogits);
        if (cfg.method == Method::NRC || cfg.method == Method::AAD) banks.refresh(slots, fr);
      }

      adam_step(model, grads, mask, adam, opt, &stats);
      for (const auto& [name, v] : stats.update_inf_over_lr)
        log.g_eff[name] = std::max(log.g_eff[name], v);
      for (const auto& [name, v] : stats.grad_inf) log.g_raw[name] = std::max(log.g_raw[name], v);
      log.steps += 1;
      epoch_loss += loss;
      ++batches;
    }

    EpochLog el;
    el.epoch = epoch + 1;
    el.loss = batches > 0 ? epoch_loss / static_cast<double>(batches) : 0.0;
    el.f1 = eval_set ? evaluate_macro_f1(model, *eval_set) : 0.0;
    const DistanceReport dist = layer_distances(src, model);
    for (const std::string& name : weight_layer_names(model)) {
      el.dist_raw[name] = dist.raw.at(name);
      el.dist_recon[name] = dist.recon.at(name);
    }
    log.epochs.push_back(std::move(el));
  }
  return res;
}

std::vector<TrainEpochRow> train_source(ModelGraph& m, const TimeSeriesDataset& train,
                                        const TimeSeriesDataset* eval_set,
                                        const SourceTrainConfig& cfg) {
  train.validate();
  std::vector<TrainEpochRow> rows;
  AdamConfig adam{cfg.lr, 0.9, 0.999, 1e-8};
  AdamState opt;
  Rng dropout_rng(mix_seed(cfg.seed, "src_dropout"));
  Rng mask_rng(mix_seed(cfg.seed, "src_mask"));
  const Index n = train.n();
  const bool mapu = cfg.with_mapu_imputer && !m.imputer.empty();

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::vector<Index> order(static_cast<size_t>(n));
    std::iota(order.begin(), order.end(), Index{0});
    Rng shuffle_rng(mix_seed(cfg.seed, "src_epoch" + std::to_string(epoch)));
    shuffle_rng.shuffle(order);

    double epoch_loss = 0;
    Index batches = 0;
    for (Index start = 0; start < n; start += cfg.batch) {
      const Index stop = std::min(n, start + cfg.batch);
      std::vector<Index> idx(order.begin() + start, order.begin() + stop);
      const DenseTensor x = train.gather(idx);
      const std::vector<int> y = train.gather_labels(idx);

      double loss;
      GradMap grads;
      if (mapu) {
        MapuConfig mc{cfg.mask_ratio, cfg.imputation_weight, false};
        MapuResult mr = mapu_losses(m, x, mc, mask_rng, dropout_rng, true, &y, cfg.label_smoothing);
        grads = std::move(mr.grads);
        loss = mr.adaptation_loss;
      } else {
        ForwardResult fr = forward_train(m, x, dropout_rng);
        DenseTensor dlogits;
        loss = source_pretrain_loss(fr.logits, y, cfg.label_smoothing, &dlogits);
        grads = backward(m, fr, dlogits);
      }
      adam_step(m, grads, cfg.mask, adam, opt);
      epoch_loss += loss;
      ++batches;
    }
    TrainEpochRow row;
    row.epoch = epoch + 1;
    row.loss = batches > 0 ? epoch_loss / static_cast<double>(batches) : 0.0;
    row.f1 = eval_set ? evaluate_macro_f1(m, *eval_set) : evaluate_macro_f1(m, train);
    rows.push_back(row);
  }
  return rows;
}

// ---------------------------------------------------------------------------
// RunLog serialization
// ---------------------------------------------------------------------------

std::string RunLog::to_csv() const {
  std::ostringstream out;
  out << "epoch,loss,f1";
  if (!epochs.empty()) {
    for (const auto& [name, _] : epochs.front().dist_raw) out << ",dist_raw_" << name;
    for (const auto& [name, _] : epochs.front().dist_recon) out << ",dist_recon_" << name;
  }
  out << "\n";
  out.precision(12);
  for (const auto& e : epochs) {
    out << e.epoch << "," << e.loss << "," << e.f1;
    for (const auto& [_, v] : e.dist_raw) out << "," << v;
    for (const auto& [_, v] : e.dist_recon) out << "," << v;
    out << "\n";
  }
  return out.str();
}

std::string RunLog::to_json() const {
  json j;
  j["method"] = method;
  j["subspace"] = subspace;
  j["seed"] = seed;
  j["lr"] = lr;
  j["steps"] = steps;
  j["g_eff"] = g_eff;
  j["g_raw"] = g_raw;
  json eps = json::array();
  for (const auto& e : epochs)
    eps.push_back(json{{"epoch", e.epoch},
                       {"loss", e.loss},
                       {"f1", e.f1},
                       {"dist_raw", e.dist_raw},
                       {"dist_recon", e.dist_recon}});
  j["epochs"] = std::move(eps);
  return j.dump(2) + "\n";
}

RunLog RunLog::from_json(const std::string& text) {
  const json j = json::parse(text);
  RunLog log;
  log.method = j.at("method").get<std::string>();
  log.subspace = j.at("subspace").get<std::string>();
  log.seed = j.at("seed").get<std::uint64_t>();
  log.lr = j.at("lr").get<double>();
  log.steps = j.at("steps").get<Index>();
  log.g_eff = j.at("g_eff").get<std::map<std::string, double>>();
  log.g_raw = j.at("g_raw").get<std::map<std::string, double>>();
  for (const json& ej : j.at("epochs")) {
    EpochLog e;
    e.epoch = ej.at("epoch").get<int>();
    e.loss = ej.at("loss").get<double>();
    e.f1 = ej.at("f1").get<double>();
    e.dist_raw = ej.at("dist_raw").get<std::map<std::string, double>>();
    e.dist_recon = ej.at("dist_recon").get<std::map<std::string, double>>();
    log.epochs.push_back(std::move(e));
  }
  return log;
}

}  // namespace tsfda
