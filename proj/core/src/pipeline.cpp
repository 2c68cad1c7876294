#include "tsfda/pipeline.hpp"

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include <nlohmann/json.hpp>

#include "tsfda/diagnostics.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace tsfda::pipeline {

namespace {

void write_text(const fs::path& p, const std::string& text) {
  fs::create_directories(p.parent_path());
  std::ofstream f(p);
  if (!f) throw std::runtime_error("cannot write " + p.string());
  f << text;
}

std::string read_text(const fs::path& p) {
  std::ifstream f(p);
  if (!f) throw std::runtime_error("cannot open " + p.string());
  std::ostringstream buf;
  buf << f.rdbuf();
  return buf.str();
}

fs::path resolve_out(const std::string& out_dir) {
  fs::path p(out_dir);
  if (p.is_relative()) p = fs::path(output_root()) / p;
  fs::create_directories(p);
  return p;
}

void snapshot_config(const Config& cfg, const fs::path& dir) {
  write_text(dir / "resolved.cfg", cfg.dump());
}

std::uint64_t seed_of(const Config& cfg) {
  return static_cast<std::uint64_t>(cfg.get_int("seed", 0));
}

json lemma_rows_json(const std::vector<LemmaAuditRow>& rows) {
  json out = json::array();
  for (const auto& r : rows)
    out.push_back(json{{"name", r.name},
                       {"measured", r.measured},
                       {"bound", r.bound},
                       {"slack", r.slack},
                       {"pass", r.pass}});
  return out;
}

}  // namespace

std::string output_root() {
  const char* env = std::getenv("TSFDA_OUT_ROOT");
  return env && *env ? env : ".";
}

BackboneConfig backbone_from_config(const Config& cfg, Index channels, Index length,
                                    Index classes) {
  BackboneConfig bc;
  bc.input_channels = channels;
  bc.input_len = length;
  bc.num_classes = classes;
  bc.mid_channels = cfg.get_int("model.mid_channels", 32);
  bc.final_channels = cfg.get_int("model.final_channels", 128);
  bc.kernel1 = cfg.get_int("model.kernel1", 25);
  bc.kernel2 = cfg.get_int("model.kernel2", 8);
  bc.kernel3 = cfg.get_int("model.kernel3", 8);
  bc.stride1 = cfg.get_int("model.stride1", 6);
  bc.dropout = cfg.get_double("model.dropout", 0.0);
  bc.conv_bias = cfg.get_bool("model.conv_bias", false);
  bc.features_len = cfg.get_int("model.features_len", 1);
  return bc;
}

SynthSpec synth_from_config(const Config& cfg) {
  SynthSpec spec;
  spec.classes = static_cast<int>(cfg.get_int("synth.classes", 5));
  spec.channels = cfg.get_int("synth.channels", 1);
  spec.length = cfg.get_int("synth.length", 128);
  spec.train_per_class = static_cast<int>(cfg.get_int("synth.train_per_class", 80));
  spec.eval_per_class = static_cast<int>(cfg.get_int("synth.eval_per_class", 40));
  spec.noise = cfg.get_double("synth.noise", 0.25);
  spec.amp_jitter = cfg.get_double("synth.amp_jitter", 0.2);
  spec.bump_amp = cfg.get_double("synth.bump_amp", 1.2);
  spec.sine_amp = cfg.get_double("synth.sine_amp", 1.0);
  spec.freq_groups = cfg.get_int("synth.freq_groups", 0);
  spec.time_jitter = cfg.get_int("synth.time_jitter", 6);
  spec.template_seed = static_cast<std::uint64_t>(cfg.get_int("synth.template_seed", 0));
  const std::string style = cfg.get_str("synth.style", "bumps");
  if (style == "bumps")
    spec.style = TemplateStyle::Bumps;
  else if (style == "random-curves")
    spec.style = TemplateStyle::RandomCurves;
  else
    throw std::invalid_argument("synth.style must be bumps or random-curves, got " + style);
  spec.shift.kind = shift_kind_from_string(cfg.get_str("shift.kind", "negate"));
  spec.shift.magnitude = cfg.get_double("shift.magnitude", 1.0);
  spec.shift.seed = static_cast<std::uint64_t>(cfg.get_int("shift.seed", 0));
  return spec;
}

DomainPair load_data(const Config& cfg) {
  const std::string kind = cfg.get_str("dataset.kind", "synthetic");
  if (kind == "synthetic") {
    // the run seed offsets the dataset draw so different seeds are
    // independent experiments end to end
    const std::uint64_t data_seed =
        static_cast<std::uint64_t>(cfg.get_int("synth.data_seed", 100)) + seed_of(cfg);
    return make_synthetic(synth_from_config(cfg), data_seed);
  }
  if (kind == "csv") return load_dataset_dir(cfg.require_str("dataset.dir"));
  throw std::invalid_argument("dataset.kind must be synthetic or csv, got " + kind);
}

RankPolicy rank_policy_from_config(const Config& cfg) {
  RankPolicy policy;
  policy.rank_factor = cfg.get_int("decompose.rank_factor", 4);
  policy.rank_factor_in = cfg.get_int("decompose.rank_factor_in", 0);
  policy.rank_factor_out = cfg.get_int("decompose.rank_factor_out", 0);
  policy.explicit_r_in = cfg.get_int("decompose.r_in", 0);
  policy.explicit_r_out = cfg.get_int("decompose.r_out", 0);
  policy.skip_min_channels = cfg.get_int("decompose.skip_min_channels", 0);
  return policy;
}

AdaptationConfig adaptation_from_config(const Config& cfg) {
  AdaptationConfig ac;
  ac.method = method_from_string(cfg.get_str("adapt.method", "shot"));
  ac.lr = cfg.get_double("adapt.lr", 1e-4);
  ac.epochs = static_cast<int>(cfg.get_int("adapt.epochs", 10));
  ac.batch = cfg.get_int("adapt.batch", 32);
  ac.seed = seed_of(cfg);
  ac.ratio = cfg.get_double("adapt.ratio", 1.0);
  ac.k_nn = static_cast<int>(cfg.get_int("adapt.k_nn", 5));
  ac.mask_ratio = cfg.get_double("adapt.mask_ratio", 0.125);
  ac.imputation_weight = cfg.get_double("adapt.imputation_weight", 0.5);
  ac.nrc_non_reciprocal = cfg.get_double("adapt.nrc_non_reciprocal", 0.1);
  ac.aad_lambda0 = cfg.get_double("adapt.aad_lambda0", 1.0);
  ac.shot_pseudo_label = cfg.get_bool("adapt.shot_pseudo_label", false);
  ac.pseudo_label_weight = cfg.get_double("adapt.pseudo_label_weight", 0.3);
  return ac;
}

AdapterSpec adapter_from_config(const Config& cfg) {
  AdapterSpec spec;
  const std::string kind = cfg.get_str("adapter.kind", "lora");
  spec.kind = kind == "lokra" ? AdapterKind::LoKrA : AdapterKind::LoRA;
  spec.rank = cfg.get_int("adapter.rank", 4);
  spec.alpha = cfg.get_double("adapter.alpha", 0.0);
  spec.conv_style = cfg.get_str("adapter.conv_style", "mode_rank") == "flatten"
                        ? ConvLoraStyle::Flatten
                        : ConvLoraStyle::ModeRank;
  // per-layer Kronecker shapes: adapter.kron.<layer> = a1,a2,b1,b2
  for (const auto& [key, value] : cfg.entries()) {
    if (key.rfind("adapter.kron.", 0) != 0) continue;
    const std::string layer = key.substr(std::string("adapter.kron.").size());
    std::array<Index, 4> shape{0, 0, 0, 0};
    std::istringstream in(value);
    std::string tok;
    size_t i = 0;
    while (std::getline(in, tok, ',') && i < 4) shape[i++] = std::stoll(tok);
    spec.kron_shapes[layer] = shape;
  }
  return spec;
}

SourceTrainConfig pretrain_from_config(const Config& cfg) {
  SourceTrainConfig tc;
  tc.epochs = static_cast<int>(cfg.get_int("pretrain.epochs", 20));
  tc.lr = cfg.get_double("pretrain.lr", 1e-3);
  tc.batch = cfg.get_int("pretrain.batch", 32);
  tc.label_smoothing = cfg.get_double("pretrain.label_smoothing", 0.1);
  tc.seed = seed_of(cfg);
  tc.with_mapu_imputer = cfg.get_str("pretrain.method", "standard") == "mapu";
  tc.mask_ratio = cfg.get_double("adapt.mask_ratio", 0.125);
  tc.imputation_weight = cfg.get_double("adapt.imputation_weight", 0.5);
  return tc;
}

RecoveryOptions recovery_from_config(const Config& cfg) {
  RecoveryOptions ro;
  ro.epochs = static_cast<int>(cfg.get_int("recovery.epochs", 3));
  ro.lr = cfg.get_double("recovery.lr", 1e-3);
  ro.batch = cfg.get_int("recovery.batch", 32);
  ro.label_smoothing = cfg.get_double("pretrain.label_smoothing", 0.1);
  ro.seed = seed_of(cfg);
  return ro;
}

int cmd_pretrain(const Config& cfg, const std::string& out_dir) {
  const fs::path out = resolve_out(out_dir);
  snapshot_config(cfg, out);
  const DomainPair data = load_data(cfg);
  data.source_train.validate();

  const SourceTrainConfig tc = pretrain_from_config(cfg);
  ModelGraph model =
      build_cnn(backbone_from_config(cfg, data.source_train.channels(),
                                     data.source_train.length(), data.source_train.num_classes),
                tc.seed, tc.with_mapu_imputer);
  const auto rows = train_source(model, data.source_train, &data.source_eval, tc);

  model.meta["seed"] = std::to_string(tc.seed);
  model.meta["phase"] = "pretrained";
  if (tc.with_mapu_imputer) model.meta["pretrain_method"] = "mapu";
  save_model(model, (out / "model").string());

  std::ostringstream log;
  log << "epoch,loss,f1\n";
  log.precision(12);
  for (const auto& r : rows) log << r.epoch << "," << r.loss << "," << r.f1 << "\n";
  write_text(out / "log.csv", log.str());

  json metrics{{"command", "pretrain"},
               {"seed", tc.seed},
               {"epochs", tc.epochs},
               {"source_f1", rows.empty() ? 0.0 : rows.back().f1}};
  write_text(out / "metrics.json", metrics.dump(2) + "\n");
  std::cout << "pretrain: source eval macro-F1 "
            << (rows.empty() ? 0.0 : rows.back().f1) << "\n";
  return 0;
}

int cmd_decompose(const Config& cfg, const std::string& out_dir) {
  const fs::path out = resolve_out(out_dir);
  snapshot_config(cfg, out);
  const ModelGraph src = load_model(cfg.require_str("input.archive"));
  const DomainPair data = load_data(cfg);

  const RankPolicy policy = rank_policy_from_config(cfg);
  ModelGraph fact = decompose_model(src, policy);
  const double f1_after_decompose = evaluate_macro_f1(fact, data.source_eval);

  const bool skip_recovery = cfg.get_bool("decompose.skip_recovery", false);
  if (!skip_recovery) fact = recovery_finetune(fact, data.source_train, recovery_from_config(cfg));
  const double f1_after_recovery = evaluate_macro_f1(fact, data.source_eval);

  fact.meta["phase"] = skip_recovery ? "decomposed" : "decomposed+recovered";
  save_model(fact, (out / "model").string());

  const EfficiencyReport rep = efficiency_report(fact, SubspaceMask::of({ParamTag::Core}));
  write_text(out / "efficiency.csv", rep.to_csv());
  write_text(out / "efficiency.json", rep.to_json());

  json metrics{{"command", "decompose"},
               {"rank_factor", policy.rank_factor},
               {"source_f1_before", evaluate_macro_f1(src, data.source_eval)},
               {"source_f1_decomposed", f1_after_decompose},
               {"source_f1_recovered", f1_after_recovery},
               {"skip_recovery", skip_recovery},
               {"finetunable_core_k",
                display_units(rep.backbone_total.params_finetunable, 1e3)},
               {"macs_fact_m", display_units(rep.backbone_total.macs_fact, 1e6)}};
  write_text(out / "metrics.json", metrics.dump(2) + "\n");
  std::cout << "decompose: core params "
            << display_units(rep.backbone_total.params_finetunable, 1e3) << "K, MACs "
            << display_units(rep.backbone_total.macs_fact, 1e6) << "M, source F1 "
            << f1_after_recovery << "\n";
  return 0;
}

int cmd_adapt(const Config& cfg, const std::string& out_dir) {
  const fs::path out = resolve_out(out_dir);
  snapshot_config(cfg, out);
  ModelGraph src = load_model(cfg.require_str("input.archive"));
  const DomainPair data = load_data(cfg);

  const std::string subspace = cfg.get_str("adapt.subspace", "core");
  if ((subspace == "core" || subspace == "factors" || subspace == "both") &&
      !src.is_factorized())
    throw std::invalid_argument(
        "adapt: --subspace " + subspace +
        " needs a decomposed archive; run the decompose command first or use --subspace full");
  const SubspaceMask mask = SubspaceMask::parse(subspace);

  AdaptationConfig ac = adaptation_from_config(cfg);
  if (subspace == "adapter") {
    AdapterSpec aspec = adapter_from_config(cfg);
    attach_adapters(src, aspec, ac.seed);
  }

  TimeSeriesDataset target = data.target_adapt;
  if (ac.ratio < 1.0) target = stratified_subsample(target, ac.ratio, ac.seed);
  const UnlabeledView view(target);

  const double f1_before = evaluate_macro_f1(src, data.target_eval);

  std::vector<double> lrs = cfg.get_doubles("adapt.lr_sweep");
  if (cfg.get_str("adapt.lr_sweep", "") == "grid") lrs = kLrGrid;
  if (lrs.empty()) lrs = {ac.lr};

  AdaptResult best;
  double best_f1 = -1;
  std::ostringstream sweep;
  sweep << "lr,final_f1,final_loss\n";
  sweep.precision(12);
  for (double lr : lrs) {
    AdaptationConfig trial = ac;
    trial.lr = lr;
    AdaptResult res = adapt(src, view, &data.target_eval, trial, mask);
    const double f1 = res.log.epochs.empty() ? 0.0 : res.log.epochs.back().f1;
    sweep << lr << "," << f1 << ","
          << (res.log.epochs.empty() ? 0.0 : res.log.epochs.back().loss) << "\n";
    if (f1 > best_f1) {
      best_f1 = f1;
      best = std::move(res);
    }
  }
  if (lrs.size() > 1) write_text(out / "sweep.csv", sweep.str());

  best.model.meta["phase"] = "adapted";
  best.model.meta["method"] = to_string(ac.method);
  best.model.meta["subspace"] = subspace;
  save_model(best.model, (out / "model").string());
  write_text(out / "log.csv", best.log.to_csv());
  write_text(out / "log.json", best.log.to_json());

  const EfficiencyReport rep = efficiency_report(best.model, mask);
  write_text(out / "efficiency.csv", rep.to_csv());
  write_text(out / "efficiency.json", rep.to_json());

  // distance diagnostics + lemma audit + PAC-term with disclosed defaults
  const DistanceReport dist = layer_distances(src, best.model);
  write_text(out / "distances.csv", distance_report_csv(dist));
  const AuditMode audit_mode = subspace == "core" ? AuditMode::CoreOnly : AuditMode::Full;
  const auto audit = lemma_audit(src, best.model, best.log, audit_mode);
  bool audit_pass = true;
  for (const auto& row : audit) audit_pass = audit_pass && row.pass;

  BoundInputs bi;
  bi.sigma = cfg.get_double("diagnostics.sigma", 1.0);
  bi.n = static_cast<double>(target.n());
  bi.loss_bound = cfg.get_double("diagnostics.loss_bound",
                                 std::log(static_cast<double>(src.num_classes)));
  bi.delta = cfg.get_double("diagnostics.delta", 0.1);
  bi.k = cfg.get_double("diagnostics.k", 1.0);
  bi.l = cfg.get_double("diagnostics.l", 1.0);

  json metrics{{"command", "adapt"},
               {"method", to_string(ac.method)},
               {"subspace", subspace},
               {"ratio", ac.ratio},
               {"seed", ac.seed},
               {"lr", best.log.lr},
               {"epochs", ac.epochs},
               {"rank_factor", src.meta.count("rank_factor") ? src.meta.at("rank_factor") : "-"},
               {"target_n", target.n()},
               {"f1_before", f1_before},
               {"f1_after", best_f1},
               {"lemma_audit_pass", audit_pass},
               {"lemma_audit", lemma_rows_json(audit)},
               {"pac_term", pac_bound_term(dist.total_recon_sq, bi)},
               {"pac_inputs", json{{"sigma", bi.sigma},
                                   {"n", bi.n},
                                   {"C", bi.loss_bound},
                                   {"delta", bi.delta},
                                   {"k", bi.k},
                                   {"l", bi.l}}},
               {"efficiency", json{{"params_finetunable_k",
                                    display_units(rep.backbone_total.params_finetunable, 1e3)},
                                   {"params_full_k",
                                    display_units(rep.backbone_total.params_full, 1e3)},
                                   {"macs_fact_m", display_units(rep.backbone_total.macs_fact, 1e6)},
                                   {"macs_full_m", display_units(rep.backbone_total.macs_full, 1e6)},
                                   {"params_reduction_pct",
                                    reduction_pct_displayed(rep.backbone_total.params_full,
                                                            rep.backbone_total.params_finetunable,
                                                            1e3)},
                                   {"macs_reduction_pct",
                                    reduction_pct_displayed(rep.backbone_total.macs_full,
                                                            rep.backbone_total.macs_fact, 1e6)}}}};
  write_text(out / "metrics.json", metrics.dump(2) + "\n");
  std::cout << "adapt: " << to_string(ac.method) << "/" << subspace << " target macro-F1 "
            << f1_before << " -> " << best_f1 << "\n";
  return 0;
}

int cmd_evaluate(const Config& cfg, const std::string& out_dir) {
  const fs::path out = resolve_out(out_dir);
  snapshot_config(cfg, out);
  const ModelGraph model = load_model(cfg.require_str("input.archive"));
  const DomainPair data = load_data(cfg);
  const std::string split = cfg.get_str("eval.split", "target_eval");
  const TimeSeriesDataset* ds = nullptr;
  if (split == "source_train") ds = &data.source_train;
  else if (split == "source_eval") ds = &data.source_eval;
  else if (split == "target_adapt") ds = &data.target_adapt;
  else if (split == "target_eval") ds = &data.target_eval;
  else throw std::invalid_argument("eval.split: unknown split " + split);
  const double f1 = evaluate_macro_f1(model, *ds);
  json metrics{{"command", "evaluate"}, {"split", split}, {"macro_f1", f1}};
  write_text(out / "metrics.json", metrics.dump(2) + "\n");
  std::cout << "evaluate: " << split << " macro-F1 " << f1 << "\n";
  return 0;
}

int cmd_report(const std::vector<std::string>& run_dirs, const std::string& out_dir) {
  const fs::path out = resolve_out(out_dir);
  struct Key {
    std::string method, subspace, rf;
    double ratio;
    bool operator<(const Key& o) const {
      return std::tie(method, subspace, rf, ratio) < std::tie(o.method, o.subspace, o.rf, o.ratio);
    }
  };
  struct Row {
    std::vector<double> f1s;
    double macs_m = 0, params_k = 0, macs_red = 0, params_red = 0;
  };
  std::map<Key, Row> groups;
  for (const std::string& dir : run_dirs) {
    const json metrics = json::parse(read_text(fs::path(dir) / "metrics.json"));
    if (metrics.at("command").get<std::string>() != "adapt")
      throw std::invalid_argument("report: " + dir + " is not an adapt run");
    Key key{metrics.at("method").get<std::string>(),
            metrics.at("subspace").get<std::string>(),
            metrics.at("rank_factor").is_string() ? metrics.at("rank_factor").get<std::string>()
                                                  : "-",
            metrics.at("ratio").get<double>()};
    Row& row = groups[key];
    row.f1s.push_back(metrics.at("f1_after").get<double>());
    const json& eff = metrics.at("efficiency");
    row.macs_m = eff.at("macs_fact_m").get<double>();
    row.params_k = eff.at("params_finetunable_k").get<double>();
    row.macs_red = eff.at("macs_reduction_pct").get<double>();
    row.params_red = eff.at("params_reduction_pct").get<double>();
  }

  std::ostringstream table;
  table << "method,rf,subspace,ratio,seeds,f1_mean,f1_std,macs_m,macs_reduction_pct,"
           "params_finetuned_k,params_reduction_pct\n";
  table.precision(10);
  std::ostringstream ablation;
  ablation << "method,rf,parameters_finetuned,ratio,f1_mean,f1_std,macs_m,params_finetuned_k\n";
  ablation.precision(10);
  for (const auto& [key, row] : groups) {
    double mean = 0;
    for (double v : row.f1s) mean += v;
    mean /= static_cast<double>(row.f1s.size());
    double var = 0;
    for (double v : row.f1s) var += (v - mean) * (v - mean);
    const double std_dev =
        row.f1s.size() > 1 ? std::sqrt(var / static_cast<double>(row.f1s.size() - 1)) : 0.0;
    table << key.method << "," << key.rf << "," << key.subspace << "," << key.ratio << ","
          << row.f1s.size() << "," << mean << "," << std_dev << "," << row.macs_m << ","
          << row.macs_red << "," << row.params_k << "," << row.params_red << "\n";
    ablation << key.method << "," << key.rf << "," << key.subspace << "," << key.ratio << ","
             << mean << "," << std_dev << "," << row.macs_m << "," << row.params_k << "\n";
  }
  write_text(out / "report.csv", table.str());
  write_text(out / "ablation.csv", ablation.str());
  std::cout << "report: " << groups.size() << " row(s) over " << run_dirs.size() << " run(s)\n";
  return 0;
}

}  // namespace tsfda::pipeline
