#pragma once

#include <array>
#include <map>
#include <string>
#include <vector>

#include "mmnar/datagen.hpp"
#include "mmnar/model.hpp"
#include "mmnar/optimizer.hpp"

namespace mmnar::harness {

// Flat sectioned key=value text config ('#' comments). Unknown sections or
// keys are rejected. The hash covers the effective (fully defaulted) values,
// so formatting and key order never change it.
struct RunConfig {
  datagen::GenConfig generator;
  std::string dataset_path;  // when set, overrides inline generation
  std::array<double, 3> ratios = {0.8, 0.1, 0.1};

  model::ModelConfig model;
  AdamWConfig optimizer;
  int batch_size = 32;
  int max_epochs = 200;
  int patience = 30;
  std::string schedule = "end_to_end";  // or "two_phase"
  int phase1_epochs = 0;

  std::vector<uint64_t> seeds = {1, 2, 3, 4, 5};
  std::vector<double> kappa_grid = {0.01, 0.02, 0.03, 0.05};
  int min_support = 20;
  bool use_rectifier = true;

  std::string hash;  // filled by finalize()

  using KvMap = std::map<std::string, std::map<std::string, std::string>>;
  KvMap raw;  // the key=value pairs this config was built from

  // Validates, syncs derived fields (model dims/tasks from the generator
  // unless a dataset path is given) and computes the hash.
  void finalize();
  std::string canonical() const;
};

using KvMap = RunConfig::KvMap;

KvMap parse_kv_text(const std::string& text);
RunConfig config_from_kv(const KvMap& kv);
RunConfig load_config(const std::string& path);
RunConfig parse_config_text(const std::string& text);

// Applies "section.key" = value pairs on top of an existing config and
// rebuilds it (sweep and ablation support).
RunConfig override_config(const RunConfig& base, const std::string& dotted_key,
                          const std::string& value);
RunConfig override_config(const RunConfig& base,
                          const std::vector<std::pair<std::string, std::string>>& entries);

std::string hash_hex(const std::string& text);

}  // namespace mmnar::harness
