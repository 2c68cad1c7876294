#pragma once

#include <string>
#include <vector>

#include "tsfda/adapters.hpp"
#include "tsfda/config.hpp"
#include "tsfda/data.hpp"
#include "tsfda/factorize.hpp"
#include "tsfda/sfda.hpp"

namespace tsfda::pipeline {

/// $TSFDA_OUT_ROOT, or "." when unset; run directories are created below it
/// when a relative --out is given.
std::string output_root();

BackboneConfig backbone_from_config(const Config& cfg, Index channels, Index length,
                                    Index classes);
SynthSpec synth_from_config(const Config& cfg);
DomainPair load_data(const Config& cfg);
RankPolicy rank_policy_from_config(const Config& cfg);
AdaptationConfig adaptation_from_config(const Config& cfg);
AdapterSpec adapter_from_config(const Config& cfg);
SourceTrainConfig pretrain_from_config(const Config& cfg);
RecoveryOptions recovery_from_config(const Config& cfg);

/// Trains the full backbone+classifier on the source split (plus the
/// imputation auxiliary when pretrain.method = mapu) and archives the model.
int cmd_pretrain(const Config& cfg, const std::string& out_dir);

/// Loads input.archive, Tucker-factorizes it under the configured rank
/// policy, optionally recovery-fine-tunes on source data, archives the result
/// and writes the efficiency report.
int cmd_decompose(const Config& cfg, const std::string& out_dir);

/// Loads input.archive and adapts it to the unlabeled target split with the
/// configured method/subspace/ratio; optionally sweeps the learning-rate grid
/// keeping the best final F1.
int cmd_adapt(const Config& cfg, const std::string& out_dir);

/// Evaluates an archive's macro-F1 on a chosen split.
int cmd_evaluate(const Config& cfg, const std::string& out_dir);

/// Aggregates run directories into consolidated tables (means and sample
/// standard deviations over seeds); never recomputes metrics.
int cmd_report(const std::vector<std::string>& run_dirs, const std::string& out_dir);

}  // namespace tsfda::pipeline
