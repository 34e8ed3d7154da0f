#include "mmnar/datagen.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <set>
#include <stdexcept>

#include <json.hpp>

#include "mmnar/rng.hpp"

namespace mmnar::datagen {

namespace {

using ordered_json = nlohmann::ordered_json;

double sigmoid(double x) { return x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x)); }

// Per-seed fixed structures: loading matrices A^(m) (dim x k, entries
// N(0, 1/sqrt(k))) and the content readout directions q^(m).
struct FixedStructure {
  std::array<std::vector<double>, kNumModalities> loading;  // row-major dim x k
  std::array<std::vector<double>, kNumModalities> readout;  // length dim
};

FixedStructure make_structure(const GenConfig& cfg) {
  FixedStructure fs;
  const double scale = 1.0 / std::sqrt(static_cast<double>(cfg.latent_dim));
  for (int m = 0; m < kNumModalities; ++m) {
    const int dim = cfg.modalities[m].dim;
    StreamRng rng(cfg.seed, "loading", static_cast<uint64_t>(m));
    fs.loading[m].resize(static_cast<size_t>(dim) * cfg.latent_dim);
    for (double& v : fs.loading[m]) v = rng.normal() * scale;
    StreamRng rrng(cfg.seed, "readout", static_cast<uint64_t>(m));
    fs.readout[m].resize(dim);
    for (double& v : fs.readout[m]) v = rrng.normal() / std::sqrt(static_cast<double>(dim));
  }
  return fs;
}

int task_index(const GenConfig& cfg, const std::string& name) {
  for (size_t t = 0; t < cfg.tasks.size(); ++t)
    if (cfg.tasks[t] == name) return static_cast<int>(t);
  return -1;
}

}  // namespace

void GenConfig::validate() const {
  if (n_patients <= 0) throw std::invalid_argument("generator: n_patients must be positive");
  if (latent_dim <= 0) throw std::invalid_argument("generator: latent_dim must be positive");
  if (tasks.size() < 2) throw std::invalid_argument("generator: at least 2 tasks required");
  if (intercepts.size() != tasks.size())
    throw std::invalid_argument("generator: need one intercept per task");
  if (latent_coeffs.size() != tasks.size())
    throw std::invalid_argument("generator: need one latent coefficient vector per task");
  for (const auto& v : latent_coeffs)
    if (static_cast<int>(v.size()) != latent_dim)
      throw std::invalid_argument("generator: latent coefficient length must equal latent_dim");
  for (int m = 0; m < kNumModalities; ++m)
    if (modalities[m].dim <= 0)
      throw std::invalid_argument(std::string("generator: modality ") + kModalityNames[m] +
                                  " needs a positive feature dim");
  for (const auto& [pattern, effects] : pattern_effects) {
    if (pattern.size() != kNumModalities || pattern.find_first_not_of("01") != std::string::npos)
      throw std::invalid_argument("generator: bad pattern key '" + pattern + "'");
    if (pattern[0] != '1')
      throw std::invalid_argument("generator: pattern '" + pattern + "' marks S missing; S is always observed");
    for (const auto& [task, eff] : effects) {
      if (task_index(*this, task) < 0)
        throw std::invalid_argument("generator: pattern effect references unknown task '" + task + "'");
      // sigmoid outputs cover (0,1), so the worst-case probability excursion
      // outside [0,1] approaches |effect|; reject anything past the 0.2 band.
      if (std::abs(eff) > 0.2)
        throw std::invalid_argument("generator: pattern effect " + std::to_string(eff) + " for '" +
                                    pattern + "'/" + task +
                                    " is too large for the intercepts (|effect| must be <= 0.2)");
    }
  }
}

Dataset generate(const GenConfig& config) {
  config.validate();
  const FixedStructure fs = make_structure(config);
  const int k = config.latent_dim;
  const int n_tasks = static_cast<int>(config.tasks.size());

  Dataset ds;
  ds.config = config;
  ds.patients.resize(config.n_patients);

#pragma omp parallel for schedule(static)
  for (int i = 0; i < config.n_patients; ++i) {
    StreamRng rng(config.seed, "patient", static_cast<uint64_t>(i));
    PatientRecord& rec = ds.patients[i];
    rec.id = i;

    std::vector<double> h(k);
    for (double& v : h) v = rng.normal();

    // modality contents (drawn for every modality; the record only keeps
    // observed ones, and the observation draw may depend on the content)
    std::array<std::vector<double>, kNumModalities> contents;
    for (int m = 0; m < kNumModalities; ++m) {
      const int dim = config.modalities[m].dim;
      contents[m].resize(dim);
      for (int j = 0; j < dim; ++j) {
        double mean = 0.0;
        const double* row = fs.loading[m].data() + static_cast<size_t>(j) * k;
        for (int c = 0; c < k; ++c) mean += row[c] * h[c];
        contents[m][j] = mean + config.noise_scale * rng.normal();
      }
    }

    const double severity = h[0];
    rec.mask[0] = 1;  // S always observed
    for (int m = 1; m < kNumModalities; ++m) {
      const ModalitySpec& spec = config.modalities[m];
      double logit = spec.c;
      if (config.mode == MissMode::MNAR) {
        double readout = 0.0;
        for (size_t j = 0; j < contents[m].size(); ++j) readout += fs.readout[m][j] * contents[m][j];
        logit += spec.w * severity + spec.u * readout;
      }
      rec.mask[m] = rng.uniform() < sigmoid(logit) ? 1 : 0;
    }
    for (int m = 0; m < kNumModalities; ++m)
      if (rec.mask[m]) rec.features[m] = std::move(contents[m]);

    const std::string pattern = rec.pattern();
    PatientRecord::Hidden hidden;
    hidden.latent = h;
    hidden.true_probs.resize(n_tasks);
    hidden.pattern_effect.assign(n_tasks, 0.0);
    if (auto it = config.pattern_effects.find(pattern); it != config.pattern_effects.end())
      for (const auto& [task, eff] : it->second) hidden.pattern_effect[task_index(config, task)] = eff;

    rec.labels.resize(n_tasks);
    for (int t = 0; t < n_tasks; ++t) {
      double lin = config.intercepts[t];
      for (int c = 0; c < k; ++c) lin += config.latent_coeffs[t][c] * h[c];
      const double p = std::clamp(sigmoid(lin) + hidden.pattern_effect[t], 0.0, 1.0);
      hidden.true_probs[t] = p;
      rec.labels[t] = rng.uniform() < p ? 1 : 0;
    }
    rec.hidden = std::move(hidden);
  }
  return ds;
}

SplitIndices split(const Dataset& ds, std::array<double, 3> ratios, uint64_t seed) {
  const double rsum = ratios[0] + ratios[1] + ratios[2];
  if (std::abs(rsum - 1.0) > 1e-9) throw std::invalid_argument("split: ratios must sum to 1");

  const int n = static_cast<int>(ds.patients.size());
  auto stratum_of = [&](int i, bool with_pattern) {
    const PatientRecord& r = ds.patients[i];
    std::string key = r.labels.empty() ? "0" : std::to_string(static_cast<int>(r.labels[0]));
    if (with_pattern) key += ":" + r.pattern();
    return key;
  };

  auto build = [&](bool with_pattern) {
    std::map<std::string, std::vector<int>> strata;
    for (int i = 0; i < n; ++i) strata[stratum_of(i, with_pattern)].push_back(i);
    return strata;
  };

  auto allocate = [&](std::map<std::string, std::vector<int>>& strata) {
    // global targets by largest remainder
    std::array<int, 3> want{};
    {
      std::array<double, 3> exact{ratios[0] * n, ratios[1] * n, ratios[2] * n};
      int assigned = 0;
      for (int s = 0; s < 3; ++s) {
        want[s] = static_cast<int>(std::floor(exact[s]));
        assigned += want[s];
      }
      std::array<int, 3> order{0, 1, 2};
      std::sort(order.begin(), order.end(), [&](int a, int b) {
        return exact[a] - std::floor(exact[a]) > exact[b] - std::floor(exact[b]);
      });
      for (int r = 0; assigned < n; ++r, ++assigned) ++want[order[static_cast<size_t>(r) % 3]];
    }

    // per-stratum largest-remainder counts
    struct Alloc {
      std::vector<int> members;  // shuffled
      std::array<int, 3> take{};
    };
    std::vector<Alloc> allocs;
    std::array<int, 3> placed{};
    uint64_t idx = 0;
    for (auto& [key, members] : strata) {
      Alloc a;
      a.members = members;
      StreamRng rng(seed, "split", fnv1a64(key) ^ idx++);
      rng.shuffle(a.members);
      const int sz = static_cast<int>(a.members.size());
      std::array<double, 3> exact{ratios[0] * sz, ratios[1] * sz, ratios[2] * sz};
      int assigned = 0;
      for (int s = 0; s < 3; ++s) {
        a.take[s] = static_cast<int>(std::floor(exact[s]));
        assigned += a.take[s];
      }
      std::array<int, 3> order{0, 1, 2};
      std::sort(order.begin(), order.end(), [&](int x, int y) {
        return exact[x] - std::floor(exact[x]) > exact[y] - std::floor(exact[y]);
      });
      for (int r = 0; assigned < sz; ++r, ++assigned) ++a.take[order[static_cast<size_t>(r) % 3]];
      for (int s = 0; s < 3; ++s) placed[s] += a.take[s];
      allocs.push_back(std::move(a));
    }

    // rebalance to the exact global sizes: shift one patient at a time from a
    // surplus split to a deficit split inside the largest eligible stratum
    while (placed != want) {
      int from = -1, to = -1;
      for (int s = 0; s < 3; ++s) {
        if (placed[s] > want[s] && from < 0) from = s;
        if (placed[s] < want[s] && to < 0) to = s;
      }
      int best = -1;
      for (size_t a = 0; a < allocs.size(); ++a)
        if (allocs[a].take[from] > 0 && (best < 0 || allocs[a].take[from] > allocs[best].take[from]))
          best = static_cast<int>(a);
      allocs[best].take[from] -= 1;
      allocs[best].take[to] += 1;
      placed[from] -= 1;
      placed[to] += 1;
    }

    SplitIndices out;
    std::array<std::vector<int>*, 3> parts{&out.train, &out.val, &out.test};
    for (const Alloc& a : allocs) {
      int off = 0;
      for (int s = 0; s < 3; ++s)
        for (int c = 0; c < a.take[s]; ++c) parts[s]->push_back(a.members[off++]);
    }
    for (auto* part : parts) std::sort(part->begin(), part->end());
    return out;
  };

  auto strata = build(true);
  bool degenerate = false;
  for (auto& [key, members] : strata)
    if (members.empty()) degenerate = true;
  SplitIndices out = allocate(strata);

  // guarantee: every pattern with total support >= 10 that appears in train
  // also appears in val
  auto patterns_of = [&](const std::vector<int>& idxs) {
    std::set<std::string> s;
    for (int i : idxs) s.insert(ds.patients[i].pattern());
    return s;
  };
  std::map<std::string, int> support;
  for (const auto& r : ds.patients) ++support[r.pattern()];
  auto val_patterns = patterns_of(out.val);
  bool fixed_ok = true;
  for (const std::string& p : patterns_of(out.train)) {
    if (support[p] < 10 || val_patterns.count(p)) continue;
    // move one train patient of this pattern into val (deterministic: lowest id)
    int moved = -1;
    for (size_t j = 0; j < out.train.size(); ++j) {
      if (ds.patients[out.train[j]].pattern() == p) {
        moved = static_cast<int>(j);
        break;
      }
    }
    int remaining = 0;
    for (int i : out.train) remaining += ds.patients[i].pattern() == p ? 1 : 0;
    if (moved < 0 || remaining <= 1) {
      fixed_ok = false;
      continue;
    }
    out.val.push_back(out.train[moved]);
    out.train.erase(out.train.begin() + moved);
    std::sort(out.val.begin(), out.val.end());
  }

  if (degenerate || !fixed_ok) {
    std::cerr << "[split] warning: pattern strata degenerate, falling back to label-only stratification\n";
    auto label_strata = build(false);
    return allocate(label_strata);
  }
  return out;
}

std::vector<int> kfold_assignments(const Dataset& ds, int k, uint64_t seed) {
  if (k < 2) throw std::invalid_argument("kfold: k must be >= 2");
  const int n = static_cast<int>(ds.patients.size());
  std::vector<int> fold(n, 0);
  std::map<int, std::vector<int>> by_label;
  for (int i = 0; i < n; ++i)
    by_label[ds.patients[i].labels.empty() ? 0 : ds.patients[i].labels[0]].push_back(i);
  for (auto& [label, members] : by_label) {
    StreamRng rng(seed, "kfold", static_cast<uint64_t>(label));
    rng.shuffle(members);
    for (size_t j = 0; j < members.size(); ++j) fold[members[j]] = static_cast<int>(j % k);
  }
  return fold;
}

void write_jsonl(const Dataset& ds, const std::string& path, bool with_oracle) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot open " + tmp + " for writing");
    for (const auto& rec : ds.patients) {
      ordered_json j;
      j["id"] = rec.id;
      ordered_json x;
      for (int m = 0; m < kNumModalities; ++m) {
        if (rec.mask[m])
          x[kModalityNames[m]] = rec.features[m];
        else
          x[kModalityNames[m]] = nullptr;
      }
      j["x"] = std::move(x);
      j["delta"] = std::vector<int>(rec.mask.begin(), rec.mask.end());
      ordered_json y;
      for (size_t t = 0; t < ds.config.tasks.size(); ++t)
        y[ds.config.tasks[t]] = static_cast<int>(rec.labels[t]);
      j["y"] = std::move(y);
      if (with_oracle && rec.hidden) {
        ordered_json h;
        h["latent"] = rec.hidden->latent;
        ordered_json probs, effects;
        for (size_t t = 0; t < ds.config.tasks.size(); ++t) {
          probs[ds.config.tasks[t]] = rec.hidden->true_probs[t];
          effects[ds.config.tasks[t]] = rec.hidden->pattern_effect[t];
        }
        h["prob"] = std::move(probs);
        h["effect"] = std::move(effects);
        j["hidden"] = std::move(h);
      }
      out << j.dump() << "\n";
    }
    if (!out) throw std::runtime_error("failed writing " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

Dataset read_jsonl(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open dataset " + path);
  Dataset ds;
  ds.config.tasks.clear();
  std::string line;
  bool first = true;
  std::array<int, kNumModalities> dims{};
  dims.fill(-1);
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    ordered_json j = ordered_json::parse(line);
    PatientRecord rec;
    rec.id = j.at("id").get<int64_t>();
    const auto& x = j.at("x");
    const auto delta = j.at("delta").get<std::vector<int>>();
    if (delta.size() != kNumModalities) throw std::runtime_error("dataset: bad delta length");
    for (int m = 0; m < kNumModalities; ++m) {
      rec.mask[m] = delta[m] ? 1 : 0;
      const auto& xm = x.at(kModalityNames[m]);
      if (rec.mask[m]) {
        if (xm.is_null()) throw std::runtime_error("dataset: observed modality with null features");
        rec.features[m] = xm.get<std::vector<double>>();
        const int d = static_cast<int>(rec.features[m].size());
        if (dims[m] < 0) dims[m] = d;
        if (dims[m] != d) throw std::runtime_error("dataset: inconsistent feature dims for modality " +
                                                   std::string(kModalityNames[m]));
      } else if (!xm.is_null()) {
        throw std::runtime_error("dataset: missing modality with non-null features");
      }
    }
    const auto& y = j.at("y");
    if (first)
      for (auto it = y.begin(); it != y.end(); ++it) ds.config.tasks.push_back(it.key());
    rec.labels.resize(ds.config.tasks.size());
    for (size_t t = 0; t < ds.config.tasks.size(); ++t)
      rec.labels[t] = y.at(ds.config.tasks[t]).get<int>() ? 1 : 0;
    if (j.contains("hidden")) {
      PatientRecord::Hidden h;
      h.latent = j["hidden"].at("latent").get<std::vector<double>>();
      for (size_t t = 0; t < ds.config.tasks.size(); ++t) {
        h.true_probs.push_back(j["hidden"].at("prob").at(ds.config.tasks[t]).get<double>());
        h.pattern_effect.push_back(j["hidden"].at("effect").at(ds.config.tasks[t]).get<double>());
      }
      rec.hidden = std::move(h);
    }
    first = false;
    ds.patients.push_back(std::move(rec));
  }
  for (int m = 0; m < kNumModalities; ++m)
    if (dims[m] > 0) ds.config.modalities[m].dim = dims[m];
  ds.config.n_patients = static_cast<int>(ds.patients.size());
  ds.config.intercepts.assign(ds.config.tasks.size(), 0.0);
  ds.config.latent_coeffs.assign(ds.config.tasks.size(), std::vector<double>(ds.config.latent_dim, 0.0));
  return ds;
}

}  // namespace mmnar::datagen
