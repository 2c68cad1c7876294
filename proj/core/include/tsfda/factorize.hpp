#pragma once

#include <map>
#include <string>
#include <utility>
#include <vector>

#include "tsfda/data.hpp"
#include "tsfda/nn.hpp"
#include "tsfda/tensor.hpp"

namespace tsfda {

/// Mode ranks are (R_in, R_out) = (floor(C_in/RF), floor(C_out/RF)) clamped
/// to >= 1. The first conv layer is decomposed on its output mode only (its
/// input mode is the raw sensor space), as is any layer with a single input
/// channel.
struct RankPolicy {
  Index rank_factor = 4;
  Index rank_factor_in = 0, rank_factor_out = 0;  // per-mode override when > 0
  Index min_rank = 1;
  Index explicit_r_in = 0, explicit_r_out = 0;  // fixed ranks override RF when > 0
  Index skip_min_channels = 0;  // leave convs with c_out below this alone
  std::map<std::string, std::pair<Index, Index>> layer_overrides;  // name -> (r_in, r_out)

  Index rank_in(Index c_in) const;
  Index rank_out(Index c_out) const;
};

/// Tucker-factorizes every eligible backbone weight via HOOI and rebuilds the
/// graph with factorized layers. Conv kernels use a 2-mode decomposition on
/// the channel modes (1-mode on the first conv), linear weights the 2-D form
/// W = U1 G U2^T. BN, biases and the classifier are untouched; parameters are
/// re-tagged core/factor.
ModelGraph decompose_model(const ModelGraph& m, const RankPolicy& policy,
                           const HooiOptions& hooi_opts = {});

struct RecoveryOptions {
  int epochs = 2;
  double lr = 1e-3;
  Index batch = 32;
  double label_smoothing = 0.1;
  std::uint64_t seed = 0;
};

/// Source-side fine-tuning of core+factors+BN (classifier frozen) on the
/// label-smoothed source loss; restores accuracy lost to the decomposition.
ModelGraph recovery_finetune(const ModelGraph& m, const TimeSeriesDataset& source,
                             const RecoveryOptions& opts);

struct EfficiencyRow {
  std::string layer;
  std::string kind;
  Index params_full = 0;
  Index params_fact = 0;
  Index params_finetunable = 0;
  Index macs_full = 0;
  Index macs_fact = 0;
};

struct EfficiencyReport {
  std::vector<EfficiencyRow> rows;  // parameterized layers, in graph order
  EfficiencyRow backbone_total;     // the headline numbers: backbone only
  EfficiencyRow model_total;
  Index input_len = 0;

  std::string to_csv() const;
  std::string to_json() const;
};

// Per-layer counting primitives. `in_len` is the sequence length entering the
// layer; MACs are multiply-accumulates for one sample, with pooling,
// activations and normalization counted as zero.
Index count_layer_params_full(const LayerSpec& l);
Index count_layer_params_fact(const LayerSpec& l);
Index count_layer_params_finetunable(const LayerSpec& l, const SubspaceMask& mask);
Index count_layer_macs_full(const LayerSpec& l, Index in_len);
Index count_layer_macs_fact(const LayerSpec& l, Index in_len);

EfficiencyReport efficiency_report(const ModelGraph& m, const SubspaceMask& finetunable_mask);

/// Count in K/M display units, rounded half-up to 2 decimals.
double display_units(Index count, double divisor);

/// Reduction percentage computed from the 2-decimal display values, matching
/// the presentation convention of the efficiency tables.
double reduction_pct_displayed(Index baseline, Index reduced, double divisor);

}  // namespace tsfda
