#include "mmnar/config.hpp"

#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>
#include <stdexcept>

#include "mmnar/rng.hpp"

namespace mmnar::harness {

namespace {

std::string trim(const std::string& s) {
  size_t a = s.find_first_not_of(" \t\r\n");
  if (a == std::string::npos) return "";
  size_t b = s.find_last_not_of(" \t\r\n");
  return s.substr(a, b - a + 1);
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : s) {
    if (c == ',') {
      out.push_back(trim(cur));
      cur.clear();
    } else {
      cur.push_back(c);
    }
  }
  if (!trim(cur).empty() || !out.empty()) out.push_back(trim(cur));
  while (!out.empty() && out.back().empty()) out.pop_back();
  return out;
}

double to_double(const std::string& section, const std::string& key, const std::string& v) {
  try {
    size_t pos = 0;
    const double d = std::stod(v, &pos);
    if (pos != v.size()) throw std::invalid_argument("trailing characters");
    return d;
  } catch (const std::exception&) {
    throw std::invalid_argument("config: [" + section + "] " + key + ": bad number '" + v + "'");
  }
}

int to_int(const std::string& section, const std::string& key, const std::string& v) {
  try {
    size_t pos = 0;
    const long d = std::stol(v, &pos);
    if (pos != v.size()) throw std::invalid_argument("trailing characters");
    return static_cast<int>(d);
  } catch (const std::exception&) {
    throw std::invalid_argument("config: [" + section + "] " + key + ": bad integer '" + v + "'");
  }
}

bool to_bool(const std::string& section, const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
  if (v == "false" || v == "0" || v == "no" || v == "off") return false;
  throw std::invalid_argument("config: [" + section + "] " + key + ": bad boolean '" + v + "'");
}

std::vector<double> to_doubles(const std::string& section, const std::string& key, const std::string& v) {
  std::vector<double> out;
  for (const std::string& part : split_list(v)) out.push_back(to_double(section, key, part));
  return out;
}

std::string fmt_g(double v) {
  char buf[48];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

int modality_index(const std::string& name) {
  for (int m = 0; m < datagen::kNumModalities; ++m)
    if (name == datagen::kModalityNames[m]) return m;
  return -1;
}

}  // namespace

std::string hash_hex(const std::string& text) {
  const uint64_t h = fnv1a64(text);
  char buf[24];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

KvMap parse_kv_text(const std::string& text) {
  KvMap kv;
  std::istringstream in(text);
  std::string line, section;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const size_t hashpos = line.find('#');
    if (hashpos != std::string::npos) line = line.substr(0, hashpos);
    line = trim(line);
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']')
        throw std::invalid_argument("config: line " + std::to_string(lineno) + ": malformed section header");
      section = trim(line.substr(1, line.size() - 2));
      kv.try_emplace(section);
      continue;
    }
    const size_t eq = line.find('=');
    if (eq == std::string::npos)
      throw std::invalid_argument("config: line " + std::to_string(lineno) + ": expected key = value");
    if (section.empty())
      throw std::invalid_argument("config: line " + std::to_string(lineno) + ": key outside any section");
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (key.empty()) throw std::invalid_argument("config: line " + std::to_string(lineno) + ": empty key");
    if (kv[section].count(key))
      throw std::invalid_argument("config: duplicate key '" + key + "' in [" + section + "]");
    kv[section][key] = value;
  }
  return kv;
}

RunConfig config_from_kv(const KvMap& kv) {
  static const std::set<std::string> known_sections = {"generator", "data",     "model",    "loss",
                                                       "optimizer", "training", "rectifier", "ablation"};
  for (const auto& [section, entries] : kv)
    if (!known_sections.count(section))
      throw std::invalid_argument("config: unknown section [" + section + "]");

  RunConfig cfg;
  cfg.raw = kv;
  auto get = [&](const std::string& section) -> const std::map<std::string, std::string>& {
    static const std::map<std::string, std::string> empty;
    auto it = kv.find(section);
    return it == kv.end() ? empty : it->second;
  };

  // [generator] -- latent_dim and the task list first, so per-task keys can
  // reference them regardless of file order
  if (auto it = get("generator").find("latent_dim"); it != get("generator").end())
    cfg.generator.latent_dim = to_int("generator", "latent_dim", it->second);
  if (auto it = get("generator").find("tasks"); it != get("generator").end()) {
    cfg.generator.tasks = split_list(it->second);
    cfg.generator.intercepts.assign(cfg.generator.tasks.size(), -1.0);
    cfg.generator.latent_coeffs.assign(cfg.generator.tasks.size(),
                                       std::vector<double>(cfg.generator.latent_dim, 0.0));
  }
  for (const auto& [key, value] : get("generator")) {
    auto& g = cfg.generator;
    if (key == "tasks") continue;  // handled above
    if (key == "n_patients") g.n_patients = to_int("generator", key, value);
    else if (key == "latent_dim") g.latent_dim = to_int("generator", key, value);
    else if (key == "noise_scale") g.noise_scale = to_double("generator", key, value);
    else if (key == "seed") g.seed = static_cast<uint64_t>(to_int("generator", key, value));
    else if (key == "mode") {
      if (value == "MNAR") g.mode = datagen::MissMode::MNAR;
      else if (value == "MCAR") g.mode = datagen::MissMode::MCAR;
      else throw std::invalid_argument("config: [generator] mode must be MNAR or MCAR, got '" + value + "'");
    } else if (key == "intercepts") {
      g.intercepts = to_doubles("generator", key, value);
    } else if (key.starts_with("dim_")) {
      const int m = modality_index(key.substr(4));
      if (m < 0) throw std::invalid_argument("config: [generator] unknown key '" + key + "'");
      g.modalities[m].dim = to_int("generator", key, value);
    } else if (key.starts_with("c_") || key.starts_with("w_") || key.starts_with("u_")) {
      const int m = modality_index(key.substr(2));
      if (m <= 0) throw std::invalid_argument("config: [generator] unknown key '" + key + "'");
      const double d = to_double("generator", key, value);
      if (key[0] == 'c') g.modalities[m].c = d;
      else if (key[0] == 'w') g.modalities[m].w = d;
      else g.modalities[m].u = d;
    } else if (key.starts_with("latent_coeffs_")) {
      const std::string task = key.substr(14);
      bool found = false;
      for (size_t t = 0; t < g.tasks.size(); ++t)
        if (g.tasks[t] == task) {
          while (g.latent_coeffs.size() < g.tasks.size()) g.latent_coeffs.emplace_back();
          g.latent_coeffs[t] = to_doubles("generator", key, value);
          found = true;
        }
      if (!found)
        throw std::invalid_argument("config: [generator] " + key + " references unknown task (declare tasks first)");
    } else if (key.starts_with("tau_")) {
      // tau_<pattern>_<task>
      const size_t underscore = key.find('_', 4);
      if (underscore == std::string::npos)
        throw std::invalid_argument("config: [generator] unknown key '" + key + "'");
      const std::string pattern = key.substr(4, underscore - 4);
      const std::string task = key.substr(underscore + 1);
      g.pattern_effects[pattern][task] = to_double("generator", key, value);
    } else {
      throw std::invalid_argument("config: [generator] unknown key '" + key + "'");
    }
  }

  // [data]
  for (const auto& [key, value] : get("data")) {
    if (key == "dataset") cfg.dataset_path = value;
    else if (key == "ratios") {
      const auto r = to_doubles("data", key, value);
      if (r.size() != 3) throw std::invalid_argument("config: [data] ratios needs 3 values");
      cfg.ratios = {r[0], r[1], r[2]};
    } else {
      throw std::invalid_argument("config: [data] unknown key '" + key + "'");
    }
  }

  // [model]
  for (const auto& [key, value] : get("model")) {
    auto& m = cfg.model;
    if (key == "embed_dim") m.embed_dim = to_int("model", key, value);
    else if (key == "encoder_hidden") m.encoder_hidden = to_int("model", key, value);
    else if (key == "miss_dim") m.miss_dim = to_int("model", key, value);
    else if (key == "miss_hidden") m.miss_hidden = to_int("model", key, value);
    else if (key == "heads") m.n_heads = to_int("model", key, value);
    else if (key == "decoder_hidden") m.decoder_hidden = to_int("model", key, value);
    else if (key == "head_hidden") m.head_hidden = to_int("model", key, value);
    else if (key == "dropout") m.dropout = to_double("model", key, value);
    else throw std::invalid_argument("config: [model] unknown key '" + key + "'");
  }

  // [loss]
  for (const auto& [key, value] : get("loss")) {
    auto& l = cfg.model.loss;
    if (key == "miss_weight") l.miss = to_double("loss", key, value);
    else if (key == "rec_weight") l.rec = to_double("loss", key, value);
    else if (key == "cont_weight") l.cont = to_double("loss", key, value);
    else if (key == "cont_temperature") l.cont_temperature = to_double("loss", key, value);
    else if (key == "pred_weights") l.pred = to_doubles("loss", key, value);
    else if (key == "focal") l.focal = to_bool("loss", key, value);
    else if (key == "focal_gamma") l.focal_gamma = to_double("loss", key, value);
    else throw std::invalid_argument("config: [loss] unknown key '" + key + "'");
  }

  // [optimizer]
  for (const auto& [key, value] : get("optimizer")) {
    auto& o = cfg.optimizer;
    if (key == "learning_rate") o.lr = to_double("optimizer", key, value);
    else if (key == "weight_decay") o.weight_decay = to_double("optimizer", key, value);
    else if (key == "beta1") o.beta1 = to_double("optimizer", key, value);
    else if (key == "beta2") o.beta2 = to_double("optimizer", key, value);
    else if (key == "epsilon") o.epsilon = to_double("optimizer", key, value);
    else if (key == "batch_size") cfg.batch_size = to_int("optimizer", key, value);
    else throw std::invalid_argument("config: [optimizer] unknown key '" + key + "'");
  }

  // [training]
  for (const auto& [key, value] : get("training")) {
    if (key == "max_epochs") cfg.max_epochs = to_int("training", key, value);
    else if (key == "patience") cfg.patience = to_int("training", key, value);
    else if (key == "schedule") {
      if (value != "end_to_end" && value != "two_phase")
        throw std::invalid_argument("config: [training] schedule must be end_to_end or two_phase");
      cfg.schedule = value;
    } else if (key == "phase1_epochs") cfg.phase1_epochs = to_int("training", key, value);
    else if (key == "seeds") {
      cfg.seeds.clear();
      for (const std::string& s : split_list(value))
        cfg.seeds.push_back(static_cast<uint64_t>(to_int("training", key, s)));
    } else {
      throw std::invalid_argument("config: [training] unknown key '" + key + "'");
    }
  }

  // [rectifier]
  for (const auto& [key, value] : get("rectifier")) {
    if (key == "kappa_grid") cfg.kappa_grid = to_doubles("rectifier", key, value);
    else if (key == "min_support") cfg.min_support = to_int("rectifier", key, value);
    else throw std::invalid_argument("config: [rectifier] unknown key '" + key + "'");
  }

  // [ablation]
  for (const auto& [key, value] : get("ablation")) {
    if (key == "mmnar_fusion") cfg.model.mmnar_fusion = to_bool("ablation", key, value);
    else if (key == "reconstruction") cfg.model.reconstruction = to_bool("ablation", key, value);
    else if (key == "rectifier") cfg.use_rectifier = to_bool("ablation", key, value);
    else throw std::invalid_argument("config: [ablation] unknown key '" + key + "'");
  }

  cfg.finalize();
  return cfg;
}

void RunConfig::finalize() {
  if (dataset_path.empty()) {
    generator.validate();
    model.task_names = generator.tasks;
    for (int m = 0; m < datagen::kNumModalities; ++m)
      model.feature_dims[m] = generator.modalities[m].dim;
  }
  if (model.loss.pred.size() != model.task_names.size()) {
    if (model.loss.pred == std::vector<double>{1.2, 1.0, 1.5})
      model.loss.pred.assign(model.task_names.size(), 1.0);  // defaults only fit 3 tasks
    else
      throw std::invalid_argument("config: pred_weights length must equal the number of tasks");
  }
  model.validate();
  if (batch_size <= 0) throw std::invalid_argument("config: batch_size must be positive");
  if (max_epochs <= 0) throw std::invalid_argument("config: max_epochs must be positive");
  if (patience < 0) throw std::invalid_argument("config: patience must be >= 0");
  if (seeds.empty()) throw std::invalid_argument("config: at least one seed required");
  if (min_support < 1) throw std::invalid_argument("config: min_support must be >= 1");
  if (schedule == "two_phase" && phase1_epochs <= 0)
    throw std::invalid_argument("config: two_phase schedule needs phase1_epochs > 0");
  hash = hash_hex(canonical());
}

std::string RunConfig::canonical() const {
  std::ostringstream out;
  out << "generator.n_patients=" << generator.n_patients << "\n";
  out << "generator.latent_dim=" << generator.latent_dim << "\n";
  out << "generator.noise_scale=" << fmt_g(generator.noise_scale) << "\n";
  out << "generator.mode=" << (generator.mode == datagen::MissMode::MNAR ? "MNAR" : "MCAR") << "\n";
  out << "generator.seed=" << generator.seed << "\n";
  for (int m = 0; m < datagen::kNumModalities; ++m) {
    const auto& spec = generator.modalities[m];
    out << "generator.modality." << datagen::kModalityNames[m] << "=" << spec.dim << ","
        << fmt_g(spec.c) << "," << fmt_g(spec.w) << "," << fmt_g(spec.u) << "\n";
  }
  for (size_t t = 0; t < generator.tasks.size(); ++t) {
    out << "generator.task." << generator.tasks[t] << "=" << fmt_g(generator.intercepts[t]) << ";";
    for (double c : generator.latent_coeffs[t]) out << fmt_g(c) << ",";
    out << "\n";
  }
  for (const auto& [pattern, effects] : generator.pattern_effects)
    for (const auto& [task, eff] : effects)
      out << "generator.tau." << pattern << "." << task << "=" << fmt_g(eff) << "\n";
  out << "data.dataset=" << dataset_path << "\n";
  out << "data.ratios=" << fmt_g(ratios[0]) << "," << fmt_g(ratios[1]) << "," << fmt_g(ratios[2]) << "\n";
  out << "model.embed_dim=" << model.embed_dim << "\n";
  out << "model.encoder_hidden=" << model.encoder_hidden << "\n";
  out << "model.miss_dim=" << model.miss_dim << "\n";
  out << "model.miss_hidden=" << model.miss_hidden << "\n";
  out << "model.heads=" << model.n_heads << "\n";
  out << "model.decoder_hidden=" << model.decoder_hidden << "\n";
  out << "model.head_hidden=" << model.head_hidden << "\n";
  out << "model.dropout=" << fmt_g(model.dropout) << "\n";
  out << "loss.miss=" << fmt_g(model.loss.miss) << "\n";
  out << "loss.rec=" << fmt_g(model.loss.rec) << "\n";
  out << "loss.cont=" << fmt_g(model.loss.cont) << "\n";
  out << "loss.cont_temperature=" << fmt_g(model.loss.cont_temperature) << "\n";
  out << "loss.pred=";
  for (double w : model.loss.pred) out << fmt_g(w) << ",";
  out << "\n";
  out << "loss.focal=" << (model.loss.focal ? 1 : 0) << "\n";
  out << "loss.focal_gamma=" << fmt_g(model.loss.focal_gamma) << "\n";
  out << "optimizer.lr=" << fmt_g(optimizer.lr) << "\n";
  out << "optimizer.weight_decay=" << fmt_g(optimizer.weight_decay) << "\n";
  out << "optimizer.beta1=" << fmt_g(optimizer.beta1) << "\n";
  out << "optimizer.beta2=" << fmt_g(optimizer.beta2) << "\n";
  out << "optimizer.epsilon=" << fmt_g(optimizer.epsilon) << "\n";
  out << "optimizer.batch_size=" << batch_size << "\n";
  out << "training.max_epochs=" << max_epochs << "\n";
  out << "training.patience=" << patience << "\n";
  out << "training.schedule=" << schedule << "\n";
  out << "training.phase1_epochs=" << phase1_epochs << "\n";
  out << "training.seeds=";
  for (uint64_t s : seeds) out << s << ",";
  out << "\n";
  out << "rectifier.kappa_grid=";
  for (double k : kappa_grid) out << fmt_g(k) << ",";
  out << "\n";
  out << "rectifier.min_support=" << min_support << "\n";
  out << "ablation.mmnar_fusion=" << (model.mmnar_fusion ? 1 : 0) << "\n";
  out << "ablation.reconstruction=" << (model.reconstruction ? 1 : 0) << "\n";
  out << "ablation.rectifier=" << (use_rectifier ? 1 : 0) << "\n";
  return out.str();
}

RunConfig parse_config_text(const std::string& text) { return config_from_kv(parse_kv_text(text)); }

RunConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open config " + path);
  std::stringstream buf;
  buf << in.rdbuf();
  return parse_config_text(buf.str());
}

RunConfig override_config(const RunConfig& base,
                          const std::vector<std::pair<std::string, std::string>>& entries) {
  KvMap kv = base.raw;
  for (const auto& [dotted_key, value] : entries) {
    const size_t dot = dotted_key.find('.');
    if (dot == std::string::npos)
      throw std::invalid_argument("override: expected section.key, got '" + dotted_key + "'");
    kv[dotted_key.substr(0, dot)][dotted_key.substr(dot + 1)] = value;
  }
  return config_from_kv(kv);
}

RunConfig override_config(const RunConfig& base, const std::string& dotted_key, const std::string& value) {
  return override_config(base, {{dotted_key, value}});
}

}  // namespace mmnar::harness
