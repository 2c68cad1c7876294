#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "tsfda/nn.hpp"
#include "tsfda/tensor.hpp"

namespace tsfda {

struct TimeSeriesDataset {
  DenseTensor samples;  // (N, M, L)
  std::vector<int> labels;
  int num_classes = 0;
  std::string domain;

  Index n() const { return samples.order() == 3 ? samples.extent(0) : 0; }
  Index channels() const { return samples.extent(1); }
  Index length() const { return samples.extent(2); }

  DenseTensor gather(const std::vector<Index>& idx) const;
  std::vector<int> gather_labels(const std::vector<Index>& idx) const;
  void validate() const;
};

/// Label-free window over a dataset; adaptation code consumes this type so
/// labels cannot leak into any adaptation objective.
class UnlabeledView {
 public:
  explicit UnlabeledView(const TimeSeriesDataset& ds) : ds_(&ds) { ds.validate(); }
  Index n() const { return ds_->n(); }
  Index channels() const { return ds_->channels(); }
  Index length() const { return ds_->length(); }
  DenseTensor gather(const std::vector<Index>& idx) const { return ds_->gather(idx); }

 private:
  const TimeSeriesDataset* ds_;
};

enum class ShiftKind { Negate, Scale, TimeWarp, ChannelPermute, AdditiveDrift };
std::string to_string(ShiftKind k);
ShiftKind shift_kind_from_string(const std::string& s);

struct ShiftSpec {
  ShiftKind kind = ShiftKind::Negate;
  double magnitude = 1.0;
  std::uint64_t seed = 0;
};

/// Applies the domain shift to every sample; deterministic under the spec.
DenseTensor apply_shift(const DenseTensor& samples, const ShiftSpec& spec);

enum class TemplateStyle {
  Bumps,         // class-specific sinusoid plus a localized positive bump
  RandomCurves,  // smooth random per-class curves (MNIST-1D-like irregularity)
};

struct SynthSpec {
  int classes = 5;
  Index channels = 1;
  Index length = 128;
  int train_per_class = 80;
  int eval_per_class = 40;
  double noise = 0.25;
  double amp_jitter = 0.2;
  TemplateStyle style = TemplateStyle::Bumps;
  std::uint64_t template_seed = 0;  // RandomCurves: curve shapes derive from this
  double bump_amp = 1.2;  // Bumps: weight of the negation-sensitive localized bump
  double sine_amp = 1.0;  // Bumps: weight of the sinusoid component
  Index freq_groups = 0;  // Bumps, >0: classes share frequencies in groups of this many
  Index time_jitter = 6;  // max circular shift of the class template
  ShiftSpec shift;        // source -> target transformation
};

struct DomainPair {
  TimeSeriesDataset source_train, source_eval;
  TimeSeriesDataset target_adapt, target_eval;
};

/// Class-conditional 1-D templates (class-specific sinusoid plus localized
/// bump) with amplitude/time jitter and additive noise; the target sets are
/// independent draws passed through the shift.
DomainPair make_synthetic(const SynthSpec& spec, std::uint64_t seed);

/// Per-class count = round-half-up(ratio * class_count) clamped to >= 1;
/// selection is a seeded per-class prefix, so lower ratios are subsets of
/// higher ones and ratio 1.0 returns the identical dataset.
TimeSeriesDataset stratified_subsample(const TimeSeriesDataset& ds, double ratio,
                                       std::uint64_t seed);

/// Unweighted mean of per-class F1. Classes with zero support in both truth
/// and prediction are skipped.
double macro_f1(const std::vector<int>& truth, const std::vector<int>& pred, int num_classes);

// CSV persistence: header `label,ch0_t0,...,chM-1_tL-1`, one row per sample,
// with a JSON sidecar carrying {channels, length, num_classes, domain}.
void save_dataset_csv(const TimeSeriesDataset& ds, const std::string& csv_path,
                      const std::string& sidecar_path);
TimeSeriesDataset load_dataset_csv(const std::string& csv_path, const std::string& sidecar_path);

/// Directory layout: {source_train,source_eval,target_adapt,target_eval}.csv + meta.json.
void save_dataset_dir(const DomainPair& pair, const std::string& dir);
DomainPair load_dataset_dir(const std::string& dir);

// Model archive: manifest.json + params/<name>.bin blobs (little-endian
// float64) + checksums.sha256. Loading verifies every checksum before any
// model state is constructed.
void save_model(const ModelGraph& m, const std::string& dir);
ModelGraph load_model(const std::string& dir);

std::vector<int> predict_labels(const ModelGraph& m, const DenseTensor& samples,
                                Index batch = 64);
double evaluate_macro_f1(const ModelGraph& m, const TimeSeriesDataset& ds);

}  // namespace tsfda
