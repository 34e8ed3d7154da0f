#include <CLI11.hpp>
#include <filesystem>
#include <iostream>

#include "mmnar/config.hpp"
#include "mmnar/datagen.hpp"
#include "mmnar/trainer.hpp"

namespace {

using namespace mmnar;

harness::RunConfig load(const std::string& path) { return harness::load_config(path); }

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"multimodal outcome prediction under informative modality missingness"};
  app.require_subcommand(1);

  std::string config_path, out_dir = "out", checkpoint_path, rectifier_path, dataset_path;
  int64_t seed_override = -1;
  bool with_oracle = false, force = false;

  auto add_common = [&](CLI::App* cmd, bool needs_out = true) {
    cmd->add_option("-c,--config", config_path, "config file")->required()->check(CLI::ExistingFile);
    if (needs_out) cmd->add_option("-o,--out", out_dir, "output directory");
    cmd->add_option("-s,--seed", seed_override, "override the config seed list with one seed");
  };

  auto* gen = app.add_subcommand("gen-data", "generate a synthetic dataset (jsonl)");
  std::string gen_out = "dataset.jsonl";
  gen->add_option("-c,--config", config_path, "config file")->required()->check(CLI::ExistingFile);
  gen->add_option("-o,--out", gen_out, "output dataset path");
  gen->add_option("-s,--seed", seed_override, "override the generator seed");
  gen->add_flag("--with-oracle", with_oracle, "include the hidden ground-truth block");

  auto* train = app.add_subcommand("train", "train the full pipeline");
  add_common(train);

  auto* evaluate = app.add_subcommand("evaluate", "evaluate a checkpoint on the config's test split");
  add_common(evaluate);
  evaluate->add_option("--checkpoint", checkpoint_path, "checkpoint file")->required()->check(CLI::ExistingFile);
  evaluate->add_option("--rectifier", rectifier_path, "rectifier table to apply")->check(CLI::ExistingFile);
  evaluate->add_option("--dataset", dataset_path, "dataset override (jsonl)")->check(CLI::ExistingFile);
  evaluate->add_flag("--force", force, "evaluate despite a config hash mismatch");

  auto* ablate = app.add_subcommand("ablate", "run the component ablation grid");
  add_common(ablate);

  auto* baseline = app.add_subcommand("baseline", "train an imputation baseline");
  std::string baseline_kind = "zero_fill";
  add_common(baseline);
  baseline->add_option("-k,--kind", baseline_kind, "zero_fill or mean_impute")
      ->check(CLI::IsMember({"zero_fill", "mean_impute"}));

  auto* rectify = app.add_subcommand("rectify", "fit a rectifier table from a checkpoint");
  add_common(rectify);
  rectify->add_option("--checkpoint", checkpoint_path, "checkpoint file")->required()->check(CLI::ExistingFile);
  rectify->add_flag("--force", force, "continue despite a config hash mismatch");

  auto* probe = app.add_subcommand("probe", "missingness-embedding probes from a checkpoint");
  add_common(probe);
  probe->add_option("--checkpoint", checkpoint_path, "checkpoint file")->required()->check(CLI::ExistingFile);
  probe->add_flag("--force", force, "continue despite a config hash mismatch");

  auto* sweep = app.add_subcommand("sweep", "sensitivity sweep over one hyperparameter");
  std::string sweep_param;
  std::vector<std::string> sweep_values;
  add_common(sweep);
  sweep->add_option("--param", sweep_param, "dotted config key, e.g. model.dropout")->required();
  sweep->add_option("--values", sweep_values, "comma separated values")->required()->delimiter(',');

  CLI11_PARSE(app, argc, argv);

  try {
    harness::RunConfig cfg = load(config_path);
    if (seed_override >= 0) {
      cfg = harness::override_config(cfg, "training.seeds", std::to_string(seed_override));
      if (gen->parsed())
        cfg = harness::override_config(cfg, "generator.seed", std::to_string(seed_override));
    }
    if (!dataset_path.empty()) cfg = harness::override_config(cfg, "data.dataset", dataset_path);

    if (gen->parsed()) {
      datagen::Dataset ds = datagen::generate(cfg.generator);
      datagen::write_jsonl(ds, gen_out, with_oracle);
      std::cout << "wrote " << ds.patients.size() << " patients to " << gen_out << "\n";
      return 0;
    }
    if (train->parsed()) {
      harness::Runner runner(cfg, out_dir);
      runner.train_all(harness::RunKind::fusion);
      return 0;
    }
    if (evaluate->parsed())
      return harness::evaluate_checkpoint(cfg, checkpoint_path, rectifier_path, force, out_dir);
    if (ablate->parsed()) {
      harness::Runner runner(cfg, out_dir);
      runner.ablate();
      return 0;
    }
    if (baseline->parsed()) {
      harness::Runner runner(cfg, out_dir);
      runner.train_all(baseline_kind == "zero_fill" ? harness::RunKind::baseline_zero
                                                    : harness::RunKind::baseline_mean);
      return 0;
    }
    if (rectify->parsed()) return harness::rectify_checkpoint(cfg, checkpoint_path, force, out_dir);
    if (probe->parsed()) return harness::probe_checkpoint(cfg, checkpoint_path, force, out_dir);
    if (sweep->parsed()) {
      harness::Runner runner(cfg, out_dir);
      runner.sweep(sweep_param, sweep_values);
      return 0;
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
