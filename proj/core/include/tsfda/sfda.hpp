#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "tsfda/data.hpp"
#include "tsfda/nn.hpp"

namespace tsfda {

enum class Method { SHOT, NRC, AAD, MAPU };
std::string to_string(Method m);
Method method_from_string(const std::string& s);

/// Cross-entropy against label-smoothed one-hot targets, mean over the batch.
/// Writes d(loss)/d(logits) when `dlogits` is non-null.
double source_pretrain_loss(const DenseTensor& logits, const std::vector<int>& labels,
                            double alpha, DenseTensor* dlogits = nullptr);

/// Information maximization: mean per-sample softmax entropy minus the
/// entropy of the batch-mean softmax. Bounded by [-ln K, ln K].
double shot_loss(const DenseTensor& logits, DenseTensor* dlogits = nullptr);

/// Snapshot of target-split features and predictions, refreshed per batch.
class MemoryBank {
 public:
  MemoryBank() = default;
  MemoryBank(Index n, Index feat_dim, Index num_classes);

  Index size() const { return features_.size() > 0 ? features_.extent(0) : 0; }
  bool empty() const { return size() == 0; }
  const DenseTensor& probs() const { return probs_; }
  const DenseTensor& features() const { return features_; }

  void update(Index slot, const double* feat, const double* prob);

  /// k nearest bank entries by cosine similarity, excluding `exclude` (pass
  /// -1 to keep everything); ties break on the lower slot.
  std::vector<Index> knn(const double* feat, Index k, Index exclude) const;
  std::vector<Index> knn_of_slot(Index slot, Index k) const;

 private:
  DenseTensor features_;  // (N, F)
  DenseTensor probs_;     // (N, K)
};

struct NrcConfig {
  int k_nn = 5;
  double non_reciprocal_affinity = 0.1;  // affinity of non-reciprocal neighbors
  double expanded_weight = 0.1;          // weight of neighbors-of-neighbors
  bool expanded = true;
};

/// Neighborhood consistency: affinity-weighted squared discrepancy between
/// each sample's prediction and its bank neighbors' stored predictions
/// (reciprocal neighbors carry affinity 1), plus the marginal-entropy
/// diversity term sum_c p̄_c ln p̄_c.
double nrc_loss(const DenseTensor& features, const DenseTensor& logits, const MemoryBank& bank,
                const std::vector<Index>& bank_slots, const NrcConfig& cfg,
                DenseTensor* dlogits = nullptr);

/// Attract-and-disperse: negative dot-product attraction to the k nearest
/// bank neighbors' predictions plus dispersion against the other batch
/// predictions (treated as constants), weighted by `lambda`.
double aad_loss(const DenseTensor& features, const DenseTensor& logits, const MemoryBank& bank,
                const std::vector<Index>& bank_slots, int k_nn, double lambda,
                DenseTensor* dlogits = nullptr);

struct MapuConfig {
  double mask_ratio = 0.125;      // fraction of L masked as one contiguous block
  double imputation_weight = 0.5;
  bool include_shot = true;  // adaptation = IM + weight * imputation
};

struct MapuResult {
  double adaptation_loss = 0;
  double imputation_loss = 0;
  GradMap grads;
};

/// Zeroes one contiguous temporal block of round(ratio*L) steps per sample
/// (all channels); block positions are drawn from `rng`.
DenseTensor mask_inputs(const DenseTensor& x, double ratio, Rng& rng);

/// Runs the clean and masked branches plus the imputer head, returning the
/// combined adaptation loss and the imputation term; accumulates gradients
/// for backbone and imputer parameters when `want_grads`. When `labels` is
/// given (source pretraining) the clean-branch loss is label-smoothed
/// cross-entropy instead of the IM objective.
MapuResult mapu_losses(ModelGraph& m, const DenseTensor& x, const MapuConfig& cfg, Rng& mask_rng,
                       Rng& dropout_rng, bool want_grads,
                       const std::vector<int>* labels = nullptr, double label_smoothing = 0.1);

struct AdaptationConfig {
  Method method = Method::SHOT;
  double lr = 1e-4;
  int epochs = 10;
  Index batch = 32;
  std::uint64_t seed = 0;
  double ratio = 1.0;  // recorded; subsampling happens before adapt()
  int k_nn = 5;
  double mask_ratio = 0.125;
  double imputation_weight = 0.5;
  double nrc_non_reciprocal = 0.1;
  double aad_lambda0 = 1.0;  // dispersion weight, decayed as (1+10p)^-5
  bool shot_pseudo_label = false;
  double pseudo_label_weight = 0.3;
};

/// Learning-rate grid from which shipped configs draw.
extern const std::vector<double> kLrGrid;

struct EpochLog {
  int epoch = 0;
  double loss = 0;
  double f1 = 0;
  std::map<std::string, double> dist_raw;    // per-layer Frobenius distance from start
  std::map<std::string, double> dist_recon;  // reconstructed-kernel space
};

struct RunLog {
  std::string method, subspace;
  std::uint64_t seed = 0;
  double lr = 0;
  Index steps = 0;
  std::vector<EpochLog> epochs;
  std::map<std::string, double> g_eff;  // per-param max inf-norm of update/lr
  std::map<std::string, double> g_raw;  // per-param max inf-norm of raw gradient

  std::string to_csv() const;
  std::string to_json() const;
  static RunLog from_json(const std::string& text);
};

struct AdaptResult {
  ModelGraph model;
  RunLog log;
};

/// Runs the chosen objective with Adam over the enabled subspace only. The
/// target set is unlabeled by type; `eval_set` (when given) is used solely to
/// log macro-F1 per epoch. Deterministic under (seed, config).
AdaptResult adapt(const ModelGraph& src, const UnlabeledView& target,
                  const TimeSeriesDataset* eval_set, const AdaptationConfig& cfg,
                  const SubspaceMask& mask);

struct SourceTrainConfig {
  int epochs = 20;
  double lr = 1e-3;
  Index batch = 32;
  double label_smoothing = 0.1;
  std::uint64_t seed = 0;
  bool with_mapu_imputer = false;
  double mask_ratio = 0.125;
  double imputation_weight = 0.5;
  SubspaceMask mask = SubspaceMask::everything();
};

struct TrainEpochRow {
  int epoch = 0;
  double loss = 0;
  double f1 = 0;  // on eval set when provided, else on the training split
};

/// Supervised source training with label smoothing (and the imputation
/// auxiliary when the model carries an imputer head and the config asks).
std::vector<TrainEpochRow> train_source(ModelGraph& m, const TimeSeriesDataset& train,
                                        const TimeSeriesDataset* eval_set,
                                        const SourceTrainConfig& cfg);

}  // namespace tsfda
