#include "mmnar/rectifier.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "mmnar/rng.hpp"

namespace mmnar::rectifier {

double Table::applied_fraction() const {
  long total = 0, on = 0;
  for (const auto& [pattern, row] : cells)
    for (const Cell& c : row)
      for (bool a : c.applied) {
        ++total;
        on += a ? 1 : 0;
      }
  return total == 0 ? 0.0 : static_cast<double>(on) / static_cast<double>(total);
}

std::map<int64_t, int> assign_folds(const std::vector<ValSample>& samples, uint64_t seed) {
  std::map<std::string, std::vector<int64_t>> by_pattern;
  for (const ValSample& s : samples) by_pattern[s.pattern].push_back(s.id);
  std::map<int64_t, int> folds;
  for (auto& [pattern, ids] : by_pattern) {
    std::sort(ids.begin(), ids.end());
    StreamRng rng(seed, "rectifier-folds", fnv1a64(pattern));
    rng.shuffle(ids);
    for (size_t i = 0; i < ids.size(); ++i) folds[ids[i]] = i < ids.size() / 2 ? 0 : 1;
  }
  return folds;
}

Table fit(const std::vector<ValSample>& samples, const std::map<int64_t, int>& folds,
          const std::vector<std::string>& tasks, double kappa, int min_support) {
  if (kappa < 0.0) throw std::invalid_argument("rectifier: kappa must be >= 0");
  const int n_tasks = static_cast<int>(tasks.size());
  Table table;
  table.kappa = kappa;
  table.min_support = min_support;
  table.tasks = tasks;
  for (const ValSample& s : samples) {
    auto it = folds.find(s.id);
    if (it == folds.end()) throw std::invalid_argument("rectifier: sample id without fold assignment");
    const int k = it->second;
    auto& row = table.cells.try_emplace(s.pattern, n_tasks).first->second;
    for (int t = 0; t < n_tasks; ++t) {
      row[t].tau[k] += s.label[t] - s.yhat[t];
      row[t].support[k] += 1;
    }
  }
  for (auto& [pattern, row] : table.cells)
    for (Cell& c : row)
      for (int k = 0; k < 2; ++k) {
        if (c.support[k] > 0) c.tau[k] /= c.support[k];
        c.applied[k] = c.support[k] >= min_support && std::abs(c.tau[k]) > kappa;
      }
  return table;
}

double rectify(double yhat, const std::string& pattern, int task, int fold, const Table& table,
               ApplyCounters* counters) {
  auto it = table.cells.find(pattern);
  if (it == table.cells.end()) {
    if (counters) ++counters->unseen_pattern;
    return yhat;
  }
  const Cell& c = it->second.at(task);
  double correction = 0.0;
  bool applied = false;
  if (fold == 0 || fold == 1) {
    const int k = 1 - fold;  // estimate from the complementary fold
    if (c.applied[k]) {
      correction = c.tau[k];
      applied = true;
    }
  } else {
    if (c.applied[0] && c.applied[1]) {
      correction = 0.5 * (c.tau[0] + c.tau[1]);
      applied = true;
    } else if (c.applied[0]) {
      correction = c.tau[0];
      applied = true;
    } else if (c.applied[1]) {
      correction = c.tau[1];
      applied = true;
    }
  }
  if (!applied) return yhat;
  if (counters) ++counters->corrected;
  return std::clamp(yhat + correction, 0.0, 1.0);
}

double select_kappa(const std::vector<ValSample>& samples, const std::map<int64_t, int>& folds,
                    const std::vector<std::string>& tasks, std::vector<double> grid, int min_support) {
  if (grid.empty()) return 0.05;
  // largest kappa first: ties stay on the more conservative threshold
  std::sort(grid.begin(), grid.end(), std::greater<>());
  const int n_tasks = static_cast<int>(tasks.size());
  double best_kappa = grid.front();
  double best_brier = HUGE_VAL;
  for (double kappa : grid) {
    const Table table = fit(samples, folds, tasks, kappa, min_support);
    double se = 0.0;
    long count = 0;
    for (const ValSample& s : samples) {
      const int fold = folds.at(s.id);
      for (int t = 0; t < n_tasks; ++t) {
        const double r = rectify(s.yhat[t], s.pattern, t, fold, table);
        se += (r - s.label[t]) * (r - s.label[t]);
        ++count;
      }
    }
    const double brier = count > 0 ? se / count : 0.0;
    // strict improvement required, so ties land on the largest kappa
    if (brier < best_brier - 1e-12) {
      best_brier = brier;
      best_kappa = kappa;
    }
  }
  return best_kappa;
}

void write_table(const Table& table, const std::string& path) {
  std::ostringstream out;
  out << "# pattern rectifier table\n";
  out << "kappa " << table.kappa << "\n";
  out << "min_support " << table.min_support << "\n";
  out << "tasks";
  for (const auto& t : table.tasks) out << " " << t;
  out << "\n";
  out << "# pattern task tau1 tau2 n1 n2 applied1 applied2\n";
  char buf[256];
  for (const auto& [pattern, row] : table.cells)
    for (size_t t = 0; t < row.size(); ++t) {
      const Cell& c = row[t];
      std::snprintf(buf, sizeof(buf), "%s %s %+.6f %+.6f %d %d %d %d\n", pattern.c_str(),
                    table.tasks[t].c_str(), c.tau[0], c.tau[1], c.support[0], c.support[1],
                    c.applied[0] ? 1 : 0, c.applied[1] ? 1 : 0);
      out << buf;
    }
  const std::string tmp = path + ".tmp";
  {
    std::ofstream f(tmp, std::ios::trunc);
    if (!f) throw std::runtime_error("cannot open " + tmp + " for writing");
    f << out.str();
  }
  std::filesystem::rename(tmp, path);
}

Table read_table(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open rectifier table " + path);
  Table table;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ss(line);
    std::string head;
    ss >> head;
    if (head == "kappa") {
      ss >> table.kappa;
    } else if (head == "min_support") {
      ss >> table.min_support;
    } else if (head == "tasks") {
      std::string t;
      while (ss >> t) table.tasks.push_back(t);
    } else {
      // data row: head is the pattern
      std::string task;
      Cell c;
      int a1 = 0, a2 = 0;
      ss >> task >> c.tau[0] >> c.tau[1] >> c.support[0] >> c.support[1] >> a1 >> a2;
      if (!ss) throw std::runtime_error("rectifier table: malformed row '" + line + "'");
      c.applied[0] = a1 != 0;
      c.applied[1] = a2 != 0;
      auto& row = table.cells.try_emplace(head, table.tasks.size()).first->second;
      size_t tix = 0;
      for (; tix < table.tasks.size(); ++tix)
        if (table.tasks[tix] == task) break;
      if (tix == table.tasks.size()) throw std::runtime_error("rectifier table: unknown task " + task);
      row[tix] = c;
    }
  }
  return table;
}

}  // namespace mmnar::rectifier
