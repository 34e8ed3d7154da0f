#include "mmnar/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <sstream>
#include <stdexcept>

namespace mmnar::metrics {

namespace {

void check_sizes(std::span<const double> scores, std::span<const uint8_t> labels, const char* op) {
  if (scores.size() != labels.size())
    throw std::invalid_argument(std::string(op) + ": scores and labels differ in length");
}

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.6f", v);
  return buf;
}

void atomic_write(const std::string& path, const std::string& content) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::trunc);
    if (!out) throw std::runtime_error("cannot open " + tmp + " for writing");
    out << content;
  }
  std::filesystem::rename(tmp, path);
}

}  // namespace

MetricValue auc(std::span<const double> scores, std::span<const uint8_t> labels) {
  check_sizes(scores, labels, "auc");
  const size_t n = scores.size();
  long pos = 0;
  for (uint8_t y : labels) pos += y ? 1 : 0;
  const long neg = static_cast<long>(n) - pos;
  if (pos == 0) return MetricValue::absent("no positive labels");
  if (neg == 0) return MetricValue::absent("no negative labels");

  // rank-sum with midranks for ties
  std::vector<size_t> order(n);
  std::iota(order.begin(), order.end(), size_t{0});
  std::sort(order.begin(), order.end(), [&](size_t a, size_t b) { return scores[a] < scores[b]; });
  double rank_sum_pos = 0.0;
  size_t i = 0;
  while (i < n) {
    size_t j = i;
    while (j + 1 < n && scores[order[j + 1]] == scores[order[i]]) ++j;
    const double midrank = 0.5 * (static_cast<double>(i + 1) + static_cast<double>(j + 1));
    for (size_t k = i; k <= j; ++k)
      if (labels[order[k]]) rank_sum_pos += midrank;
    i = j + 1;
  }
  const double u = rank_sum_pos - static_cast<double>(pos) * (pos + 1) / 2.0;
  return MetricValue::ok(u / (static_cast<double>(pos) * static_cast<double>(neg)));
}

MetricValue auprc(std::span<const double> scores, std::span<const uint8_t> labels) {
  check_sizes(scores, labels, "auprc");
  const size_t n = scores.size();
  long pos = 0;
  for (uint8_t y : labels) pos += y ? 1 : 0;
  if (pos == 0) return MetricValue::absent("no positive labels");

  std::vector<size_t> order(n);
  std::iota(order.begin(), order.end(), size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](size_t a, size_t b) { return scores[a] > scores[b]; });
  double ap = 0.0;
  long hits = 0;
  for (size_t r = 0; r < n; ++r) {
    if (!labels[order[r]]) continue;
    ++hits;
    ap += static_cast<double>(hits) / static_cast<double>(r + 1);
  }
  return MetricValue::ok(ap / static_cast<double>(pos));
}

double brier(std::span<const double> probs, std::span<const uint8_t> labels) {
  if (probs.size() != labels.size()) throw std::invalid_argument("brier: probs and labels differ in length");
  if (probs.empty()) return 0.0;
  double se = 0.0;
  for (size_t i = 0; i < probs.size(); ++i) {
    const double d = probs[i] - static_cast<double>(labels[i]);
    se += d * d;
  }
  return se / static_cast<double>(probs.size());
}

namespace {

std::vector<TaskMetrics> task_block(const std::vector<std::vector<double>>& probs,
                                    const std::vector<std::vector<uint8_t>>& labels,
                                    const std::vector<size_t>& members, size_t n_tasks) {
  std::vector<TaskMetrics> out(n_tasks);
  for (size_t t = 0; t < n_tasks; ++t) {
    std::vector<double> s;
    std::vector<uint8_t> y;
    s.reserve(members.size());
    y.reserve(members.size());
    for (size_t i : members) {
      s.push_back(probs[i][t]);
      y.push_back(labels[i][t]);
    }
    out[t].auc = auc(s, y);
    out[t].auprc = auprc(s, y);
    out[t].brier = brier(s, y);
    out[t].support = static_cast<int>(members.size());
  }
  return out;
}

}  // namespace

Report evaluate(const std::vector<std::vector<double>>& probs,
                const std::vector<std::vector<uint8_t>>& labels,
                const std::vector<std::string>& patterns, const std::vector<std::string>& tasks,
                int pattern_support_floor) {
  const size_t n = probs.size();
  if (labels.size() != n || patterns.size() != n)
    throw std::invalid_argument("evaluate: probs, labels and patterns must have equal length");
  Report report;
  report.tasks = tasks;

  std::vector<size_t> everyone(n);
  std::iota(everyone.begin(), everyone.end(), size_t{0});
  report.overall = task_block(probs, labels, everyone, tasks.size());

  std::map<std::string, std::vector<size_t>> groups;
  for (size_t i = 0; i < n; ++i) groups[patterns[i]].push_back(i);
  std::vector<size_t> pooled;
  for (auto& [pattern, members] : groups) {
    if (static_cast<int>(members.size()) < pattern_support_floor) {
      pooled.insert(pooled.end(), members.begin(), members.end());
      continue;
    }
    PatternBlock block;
    block.pattern = pattern;
    block.support = static_cast<int>(members.size());
    block.per_task = task_block(probs, labels, members, tasks.size());
    report.patterns.push_back(std::move(block));
  }
  if (!pooled.empty()) {
    std::sort(pooled.begin(), pooled.end());
    PatternBlock block;
    block.pattern = "other";
    block.support = static_cast<int>(pooled.size());
    block.per_task = task_block(probs, labels, pooled, tasks.size());
    report.patterns.push_back(std::move(block));
  }
  return report;
}

void write_report_text(const Report& report, const std::string& path) {
  std::ostringstream out;
  out << "metrics report\n";
  out << "seed " << report.seed << "\n";
  out << "config_hash " << report.config_hash << "\n";
  out << "rectified " << (report.rectified ? "yes" : "no") << "\n\n";
  auto block = [&](const std::string& name, int support, const std::vector<TaskMetrics>& tm) {
    out << name << " (n=" << support << ")\n";
    for (size_t t = 0; t < report.tasks.size(); ++t) {
      out << "  " << report.tasks[t] << ": ";
      out << "auc=" << (tm[t].auc.defined ? fmt(tm[t].auc.value) : "absent(" + tm[t].auc.reason + ")");
      out << " auprc="
          << (tm[t].auprc.defined ? fmt(tm[t].auprc.value) : "absent(" + tm[t].auprc.reason + ")");
      out << " brier=" << fmt(tm[t].brier) << "\n";
    }
  };
  block("overall", report.overall.empty() ? 0 : report.overall[0].support, report.overall);
  for (const PatternBlock& pb : report.patterns) {
    out << "\n";
    block("pattern " + pb.pattern, pb.support, pb.per_task);
  }
  atomic_write(path, out.str());
}

void write_report_csv(const std::vector<Report>& reports, const std::string& path) {
  std::ostringstream out;
  if (!reports.empty()) out << "# config_hash=" << reports.front().config_hash << "\n";
  out << "seed,task,pattern,auc,auprc,brier,rectified\n";
  auto cell = [&](const MetricValue& mv) { return mv.defined ? fmt(mv.value) : std::string(); };
  for (const Report& report : reports) {
    auto row = [&](const std::string& pattern, size_t t, const TaskMetrics& tm) {
      out << report.seed << "," << report.tasks[t] << "," << pattern << "," << cell(tm.auc) << ","
          << cell(tm.auprc) << "," << fmt(tm.brier) << "," << (report.rectified ? 1 : 0) << "\n";
    };
    for (size_t t = 0; t < report.tasks.size(); ++t) row("ALL", t, report.overall[t]);
    for (const PatternBlock& pb : report.patterns)
      for (size_t t = 0; t < report.tasks.size(); ++t) row(pb.pattern, t, pb.per_task[t]);
  }
  atomic_write(path, out.str());
}

ProbeReport embedding_probes(const std::vector<std::vector<double>>& z,
                             const std::vector<std::string>& patterns,
                             const std::vector<uint8_t>& labels_task0) {
  const size_t n = z.size();
  if (patterns.size() != n || labels_task0.size() != n)
    throw std::invalid_argument("embedding_probes: input lengths differ");
  if (n == 0) throw std::invalid_argument("embedding_probes: empty input");
  ProbeReport report;

  std::map<std::string, int> classes;
  for (const std::string& p : patterns) classes.try_emplace(p, static_cast<int>(classes.size()));
  report.n_patterns = static_cast<int>(classes.size());
  {
    std::map<std::string, int> counts;
    for (const std::string& p : patterns) ++counts[p];
    int top = 0;
    for (auto& [p, c] : counts) top = std::max(top, c);
    report.majority_freq = static_cast<double>(top) / static_cast<double>(n);
  }
  if (report.n_patterns == 1) {
    report.degenerate = true;
    report.pattern_accuracy = 1.0;
    report.norm_outcome_corr = MetricValue::absent("single pattern");
    return report;
  }

  // deterministic half split: even indices train, odd indices evaluate
  std::vector<size_t> train, eval;
  for (size_t i = 0; i < n; ++i) (i % 2 == 0 ? train : eval).push_back(i);
  if (eval.empty()) eval = train;

  const int dim = static_cast<int>(z[0].size());
  const int n_classes = report.n_patterns;
  // multinomial logistic probe, full-batch gradient descent
  std::vector<double> w(static_cast<size_t>(n_classes) * dim, 0.0), b(n_classes, 0.0);
  std::vector<double> logits(n_classes), p(n_classes);
  const double lr = 0.5;
  const int iters = 300;
  for (int it = 0; it < iters; ++it) {
    std::vector<double> gw(w.size(), 0.0), gb(b.size(), 0.0);
    for (size_t i : train) {
      const int cls = classes.at(patterns[i]);
      for (int c = 0; c < n_classes; ++c) {
        double s = b[c];
        const double* wc = w.data() + static_cast<size_t>(c) * dim;
        for (int j = 0; j < dim; ++j) s += wc[j] * z[i][j];
        logits[c] = s;
      }
      const double mx = *std::max_element(logits.begin(), logits.end());
      double zsum = 0.0;
      for (int c = 0; c < n_classes; ++c) {
        p[c] = std::exp(logits[c] - mx);
        zsum += p[c];
      }
      for (int c = 0; c < n_classes; ++c) {
        const double g = p[c] / zsum - (c == cls ? 1.0 : 0.0);
        gb[c] += g;
        double* gwc = gw.data() + static_cast<size_t>(c) * dim;
        for (int j = 0; j < dim; ++j) gwc[j] += g * z[i][j];
      }
    }
    const double inv = lr / static_cast<double>(train.size());
    for (size_t j = 0; j < w.size(); ++j) w[j] -= inv * gw[j];
    for (int c = 0; c < n_classes; ++c) b[c] -= inv * gb[c];
  }
  long correct = 0;
  for (size_t i : eval) {
    int best = 0;
    double best_score = -HUGE_VAL;
    for (int c = 0; c < n_classes; ++c) {
      double s = b[c];
      const double* wc = w.data() + static_cast<size_t>(c) * dim;
      for (int j = 0; j < dim; ++j) s += wc[j] * z[i][j];
      if (s > best_score) {
        best_score = s;
        best = c;
      }
    }
    correct += best == classes.at(patterns[i]) ? 1 : 0;
  }
  report.pattern_accuracy = static_cast<double>(correct) / static_cast<double>(eval.size());

  // correlation between per-pattern mean ||z|| and per-pattern label rate
  if (report.n_patterns < 3) {
    report.norm_outcome_corr = MetricValue::absent("fewer than 3 distinct patterns");
    return report;
  }
  std::map<std::string, std::pair<double, long>> norm_acc;
  std::map<std::string, std::pair<double, long>> rate_acc;
  for (size_t i = 0; i < n; ++i) {
    double s = 0.0;
    for (double v : z[i]) s += v * v;
    auto& na = norm_acc[patterns[i]];
    na.first += std::sqrt(s);
    na.second += 1;
    auto& ra = rate_acc[patterns[i]];
    ra.first += labels_task0[i];
    ra.second += 1;
  }
  std::vector<double> xs, ys;
  for (auto& [pattern, acc] : norm_acc) {
    xs.push_back(acc.first / acc.second);
    const auto& ra = rate_acc[pattern];
    ys.push_back(ra.first / ra.second);
  }
  const size_t m = xs.size();
  double mx = 0.0, my = 0.0;
  for (size_t i = 0; i < m; ++i) {
    mx += xs[i];
    my += ys[i];
  }
  mx /= m;
  my /= m;
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (size_t i = 0; i < m; ++i) {
    sxy += (xs[i] - mx) * (ys[i] - my);
    sxx += (xs[i] - mx) * (xs[i] - mx);
    syy += (ys[i] - my) * (ys[i] - my);
  }
  if (sxx <= 0.0 || syy <= 0.0)
    report.norm_outcome_corr = MetricValue::absent("zero variance across patterns");
  else
    report.norm_outcome_corr = MetricValue::ok(sxy / std::sqrt(sxx * syy));
  return report;
}

void write_probe_report(const ProbeReport& report, const std::string& path) {
  std::ostringstream out;
  out << "embedding probe report\n";
  out << "patterns " << report.n_patterns << "\n";
  out << "majority_pattern_freq " << fmt(report.majority_freq) << "\n";
  out << "pattern_probe_accuracy " << fmt(report.pattern_accuracy) << (report.degenerate ? " (degenerate: single pattern)" : "")
      << "\n";
  if (report.norm_outcome_corr.defined)
    out << "norm_outcome_correlation " << fmt(report.norm_outcome_corr.value) << "\n";
  else
    out << "norm_outcome_correlation absent (" << report.norm_outcome_corr.reason << ")\n";
  atomic_write(path, out.str());
}

}  // namespace mmnar::metrics
