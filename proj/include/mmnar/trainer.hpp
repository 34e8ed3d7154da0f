#pragma once

#include <optional>
#include <string>
#include <vector>

#include "mmnar/config.hpp"
#include "mmnar/datagen.hpp"
#include "mmnar/metrics.hpp"
#include "mmnar/model.hpp"
#include "mmnar/rectifier.hpp"

namespace mmnar::harness {

enum class RunKind { fusion, baseline_zero, baseline_mean };

std::string run_kind_name(RunKind kind);

struct CurvePoint {
  int epoch = 0;
  double total = 0.0, miss = 0.0, rec = 0.0, cont = 0.0, pred = 0.0;
  double val_pred = 0.0;
};

struct SeedResult {
  uint64_t seed = 0;
  RunKind kind = RunKind::fusion;
  metrics::Report unrectified;
  metrics::Report rectified;  // meaningful only when used_rectifier
  bool used_rectifier = false;
  double kappa_star = 0.0;
  rectifier::Table table;
  int epochs_ran = 0;
  int best_epoch = -1;
  std::vector<CurvePoint> curve;

  const metrics::Report& final_report() const { return used_rectifier ? rectified : unrectified; }
};

// Trains one seed end to end: minibatch loop with early stopping on the
// validation prediction loss, then the cross-fitted rectifier on validation,
// then test evaluation (rectified and unrectified). Writes artifacts under
// out_dir when non-empty (checkpoint, rectifier table, metrics, curve, log).
SeedResult run_training(const RunConfig& cfg, RunKind kind, uint64_t seed, const datagen::Dataset& ds,
                        const datagen::SplitIndices& split, const std::string& out_dir);

// Orchestrates a dataset + split shared across seeds and config variants.
class Runner {
 public:
  Runner(RunConfig cfg, std::string out_dir);

  const RunConfig& config() const { return cfg_; }
  const datagen::Dataset& dataset();
  const datagen::SplitIndices& splits();

  std::vector<SeedResult> train_all(RunKind kind = RunKind::fusion);

  struct AblationRow {
    std::string variant;
    std::vector<double> auc_mean, auc_sd, auprc_mean, auprc_sd;  // per task
    std::vector<double> dauc;                                    // per task; NaN for the first row
  };
  std::vector<AblationRow> ablate();

  // Sweeps one dotted config key over the given values (first seed only) and
  // writes one CSV row per value.
  void sweep(const std::string& dotted_key, const std::vector<std::string>& values);

 private:
  RunConfig cfg_;
  std::string out_dir_;
  std::optional<datagen::Dataset> ds_;
  std::optional<datagen::SplitIndices> split_;
};

void write_aggregate(const std::vector<SeedResult>& results, const std::vector<std::string>& tasks,
                     const std::string& path_prefix);

// Shared by the evaluate/probe/rectify subcommands: rebuilds the model
// recorded in a checkpoint and reruns the requested stage.
struct LoadedModel {
  RunKind kind = RunKind::fusion;
  std::string config_hash;
  std::vector<std::string> tasks;
  std::optional<model::FusionModel> fusion;
  std::optional<model::BaselineMlp> baseline;
};

LoadedModel load_model_checkpoint(const std::string& path);
std::string checkpoint_meta(const RunConfig& cfg, RunKind kind);

int evaluate_checkpoint(const RunConfig& cfg, const std::string& checkpoint_path,
                        const std::string& rectifier_path, bool force, const std::string& out_dir);
int probe_checkpoint(const RunConfig& cfg, const std::string& checkpoint_path, bool force,
                     const std::string& out_dir);
int rectify_checkpoint(const RunConfig& cfg, const std::string& checkpoint_path, bool force,
                       const std::string& out_dir);

datagen::Dataset load_or_generate(const RunConfig& cfg);

}  // namespace mmnar::harness
