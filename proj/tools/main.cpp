// tsfda: pretrain -> decompose -> adapt -> evaluate -> report pipeline driver.

#include <CLI11.hpp>
#include <iostream>
#include <string>
#include <vector>

#include "tsfda/config.hpp"
#include "tsfda/pipeline.hpp"

namespace {

tsfda::Config assemble_config(const std::string& config_path,
                              const std::vector<std::string>& sets) {
  tsfda::Config cfg;
  if (!config_path.empty()) cfg = tsfda::Config::load_file(config_path);
  for (const std::string& kv : sets) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos)
      throw std::invalid_argument("--set expects key=value, got " + kv);
    cfg.set(kv.substr(0, eq), kv.substr(eq + 1));
  }
  return cfg;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Tucker-factorized selective fine-tuning for time-series source-free "
               "domain adaptation"};
  app.require_subcommand(1);

  std::string config_path, out_dir = "run";
  std::vector<std::string> sets;
  std::vector<std::string> run_dirs;

  // common knobs surfaced as flags; everything else goes through --set
  std::string method, subspace, lr_sweep;
  double ratio = -1, lr = -1;
  long long seed = -1, rf = -1, epochs = -1;
  bool skip_recovery = false;

  auto add_common = [&](CLI::App* cmd) {
    cmd->add_option("-c,--config", config_path, "key=value config file");
    cmd->add_option("-o,--out", out_dir, "output run directory")->capture_default_str();
    cmd->add_option("--set", sets, "override a config key, e.g. --set adapt.lr=1e-4");
    cmd->add_option("--seed", seed, "random seed");
  };

  CLI::App* pretrain = app.add_subcommand("pretrain", "train the source model");
  add_common(pretrain);

  CLI::App* decompose = app.add_subcommand("decompose", "Tucker-factorize a source archive");
  add_common(decompose);
  decompose->add_option("--rf", rf, "rank factor (ranks = channels / RF)");
  decompose->add_flag("--skip-recovery", skip_recovery, "skip the recovery fine-tune");

  CLI::App* adapt = app.add_subcommand("adapt", "adapt an archive to the target split");
  add_common(adapt);
  adapt->add_option("--method", method, "shot | nrc | aad | mapu");
  adapt->add_option("--subspace", subspace, "core | factors | both | bn | full | adapter");
  adapt->add_option("--ratio", ratio, "stratified target sample ratio in (0, 1]");
  adapt->add_option("--lr", lr, "adaptation learning rate");
  adapt->add_option("--epochs", epochs, "adaptation epochs");
  adapt->add_option("--lr-sweep", lr_sweep,
                    "comma list of learning rates, or 'grid' for the built-in grid");

  CLI::App* evaluate = app.add_subcommand("evaluate", "macro-F1 of an archive on a split");
  add_common(evaluate);

  CLI::App* report = app.add_subcommand("report", "aggregate adapt runs into tables");
  report->add_option("-o,--out", out_dir, "output directory")->capture_default_str();
  report->add_option("runs", run_dirs, "adapt run directories")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    tsfda::Config cfg = assemble_config(config_path, sets);
    if (seed >= 0) cfg.set("seed", std::to_string(seed));
    if (rf >= 0) cfg.set("decompose.rank_factor", std::to_string(rf));
    if (skip_recovery) cfg.set("decompose.skip_recovery", "true");
    if (!method.empty()) cfg.set("adapt.method", method);
    if (!subspace.empty()) cfg.set("adapt.subspace", subspace);
    if (ratio > 0) cfg.set("adapt.ratio", std::to_string(ratio));
    if (lr > 0) cfg.set("adapt.lr", std::to_string(lr));
    if (epochs >= 0) cfg.set("adapt.epochs", std::to_string(epochs));
    if (!lr_sweep.empty()) cfg.set("adapt.lr_sweep", lr_sweep);

    if (pretrain->parsed()) return tsfda::pipeline::cmd_pretrain(cfg, out_dir);
    if (decompose->parsed()) return tsfda::pipeline::cmd_decompose(cfg, out_dir);
    if (adapt->parsed()) return tsfda::pipeline::cmd_adapt(cfg, out_dir);
    if (evaluate->parsed()) return tsfda::pipeline::cmd_evaluate(cfg, out_dir);
    if (report->parsed()) return tsfda::pipeline::cmd_report(run_dirs, out_dir);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
