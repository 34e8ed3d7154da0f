#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

// Cross-fitted pattern rectifier. For each (missingness pattern, task) the
// mean probability-scale residual is estimated on two disjoint validation
// folds; an estimate from one fold is only ever applied to the other, so no
// patient's own label corrects its own prediction.

namespace mmnar::rectifier {

struct Cell {
  double tau[2] = {0.0, 0.0};  // per-fold mean residual y - yhat
  int support[2] = {0, 0};
  bool applied[2] = {false, false};  // |tau| > kappa and support >= min_support
};

struct Table {
  double kappa = 0.05;
  int min_support = 20;
  std::vector<std::string> tasks;
  std::map<std::string, std::vector<Cell>> cells;  // pattern -> one cell per task

  // fraction of (pattern, task, fold) applied flags that are set
  double applied_fraction() const;
};

struct ValSample {
  int64_t id = 0;
  std::string pattern;
  std::vector<double> yhat;   // per task, probability scale
  std::vector<uint8_t> label; // per task
};

// Deterministic half split of each pattern's samples given the seed.
std::map<int64_t, int> assign_folds(const std::vector<ValSample>& samples, uint64_t seed);

Table fit(const std::vector<ValSample>& samples, const std::map<int64_t, int>& folds,
          const std::vector<std::string>& tasks, double kappa, int min_support);

struct ApplyCounters {
  int64_t corrected = 0;
  int64_t unseen_pattern = 0;
};

// fold = 0 or 1 for validation samples (uses the complementary fold's
// estimate); fold = -1 for test samples (mean of the applied estimates).
// Output is clamped to [0, 1]; unseen patterns pass through unchanged.
double rectify(double yhat, const std::string& pattern, int task, int fold, const Table& table,
               ApplyCounters* counters = nullptr);

// Picks the kappa minimizing mean cross-fit Brier across tasks on the
// validation samples; ties break toward the larger (more conservative) kappa.
// An empty grid falls back to 0.05.
double select_kappa(const std::vector<ValSample>& samples, const std::map<int64_t, int>& folds,
                    const std::vector<std::string>& tasks, std::vector<double> grid, int min_support);

void write_table(const Table& table, const std::string& path);
Table read_table(const std::string& path);

}  // namespace mmnar::rectifier
