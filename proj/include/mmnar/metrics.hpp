#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace mmnar::metrics {

// A metric that can be undefined (e.g. AUC on single-class labels).
struct MetricValue {
  double value = 0.0;
  bool defined = false;
  std::string reason;  // set when undefined

  static MetricValue ok(double v) { return {v, true, {}}; }
  static MetricValue absent(std::string why) { return {0.0, false, std::move(why)}; }
};

// Mann-Whitney AUC: (concordant pairs + 0.5 * ties) / (P * N).
MetricValue auc(std::span<const double> scores, std::span<const uint8_t> labels);

// Average precision: mean over positives of the precision at that positive's
// rank, scores sorted descending with ties broken by stable original order.
MetricValue auprc(std::span<const double> scores, std::span<const uint8_t> labels);

// Mean squared difference between probabilities and outcomes.
double brier(std::span<const double> probs, std::span<const uint8_t> labels);

struct TaskMetrics {
  MetricValue auc, auprc;
  double brier = 0.0;
  int support = 0;
};

struct PatternBlock {
  std::string pattern;  // "1011" or "other"
  int support = 0;
  std::vector<TaskMetrics> per_task;
};

struct Report {
  std::vector<std::string> tasks;
  std::vector<TaskMetrics> overall;
  std::vector<PatternBlock> patterns;
  uint64_t seed = 0;
  std::string config_hash;
  bool rectified = false;
};

// One pass produces the overall block and the per-pattern blocks; patterns
// under the support floor are pooled into "other", so supports always sum to
// the evaluation-set size.
Report evaluate(const std::vector<std::vector<double>>& probs,
                const std::vector<std::vector<uint8_t>>& labels,
                const std::vector<std::string>& patterns, const std::vector<std::string>& tasks,
                int pattern_support_floor = 30);

void write_report_text(const Report& report, const std::string& path);
// CSV columns: seed, task, pattern, auc, auprc, brier, rectified. Undefined
// metrics serialize as empty fields. "ALL" marks the overall rows.
void write_report_csv(const std::vector<Report>& reports, const std::string& path);

struct ProbeReport {
  int n_patterns = 0;
  double majority_freq = 0.0;
  double pattern_accuracy = 0.0;  // held-out accuracy of a linear probe on z
  bool degenerate = false;        // single pattern present
  MetricValue norm_outcome_corr;  // corr(per-pattern mean ||z||, label rate)
};

// Linear (multinomial logistic) probe trained on the even-index half and
// scored on the odd-index half; the correlation uses the first task's labels.
ProbeReport embedding_probes(const std::vector<std::vector<double>>& z,
                             const std::vector<std::string>& patterns,
                             const std::vector<uint8_t>& labels_task0);

void write_probe_report(const ProbeReport& report, const std::string& path);

}  // namespace mmnar::metrics
