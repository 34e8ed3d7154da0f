#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

// Synthetic causal generator. A latent health state drives both the modality
// contents and (in MNAR mode) which modalities get recorded; outcomes depend
// on the latent state plus an additive per-pattern effect on the probability
// scale. The hidden ground truth block is exported for oracle tests only and
// is never read by training code.

namespace mmnar::datagen {

constexpr int kNumModalities = 4;
inline const std::array<const char*, kNumModalities> kModalityNames = {"S", "I", "T", "R"};

enum class MissMode { MNAR, MCAR };

struct ModalitySpec {
  int dim = 0;
  // P(observe) = sigmoid(c + w * severity + u * content_readout); "S" is
  // always observed and ignores these.
  double c = 1.0;
  double w = 0.0;
  double u = 0.0;
};

struct GenConfig {
  int n_patients = 5000;
  int latent_dim = 8;
  std::array<ModalitySpec, kNumModalities> modalities = {{
      {32, 0.0, 0.0, 0.0},  // S
      {64, 0.4, 1.2, 0.6},  // I
      {48, 0.8, 1.0, 0.5},  // T
      {40, 1.0, 0.8, 0.4},  // R
  }};
  std::vector<std::string> tasks = {"readmission", "icu", "mortality"};
  std::vector<double> intercepts = {-1.1, -1.3, -1.7};
  // One coefficient vector of length latent_dim per task.
  std::vector<std::vector<double>> latent_coeffs = {
      {1.4, 0.9, -0.6, 0.8, 0.0, 0.5, -0.4, 0.3},
      {1.1, -0.5, 0.9, 0.0, 0.8, -0.3, 0.6, 0.0},
      {1.6, 0.4, 0.3, -0.7, 0.5, 0.0, 0.0, 0.9},
  };
  // pattern string ("1101", order S,I,T,R) -> task name -> additive effect
  std::map<std::string, std::map<std::string, double>> pattern_effects;
  double noise_scale = 0.5;
  MissMode mode = MissMode::MNAR;
  uint64_t seed = 1;

  // Throws on invalid settings (|effect| > 0.2, dimension mismatches, < 2 tasks).
  void validate() const;
};

struct PatientRecord {
  int64_t id = 0;
  // Missing modalities hold an empty vector, never zeros.
  std::array<std::vector<double>, kNumModalities> features;
  std::array<uint8_t, kNumModalities> mask = {1, 0, 0, 0};
  std::vector<uint8_t> labels;

  struct Hidden {
    std::vector<double> latent;
    std::vector<double> true_probs;      // per task, after pattern effect + clamp
    std::vector<double> pattern_effect;  // per task
  };
  std::optional<Hidden> hidden;

  std::string pattern() const {
    std::string s(kNumModalities, '0');
    for (int m = 0; m < kNumModalities; ++m) s[m] = mask[m] ? '1' : '0';
    return s;
  }
};

struct Dataset {
  GenConfig config;
  std::vector<PatientRecord> patients;
};

Dataset generate(const GenConfig& config);

struct SplitIndices {
  std::vector<int> train, val, test;
};

// Stratified by (first-task label x pattern); falls back to label-only strata
// with a warning on stderr when the pattern strata degenerate. Deterministic
// given the seed. Any pattern with total support >= 10 that lands in train is
// also guaranteed a validation member.
SplitIndices split(const Dataset& ds, std::array<double, 3> ratios, uint64_t seed);

// k-fold assignment (0..k-1 per patient), stratified by first-task label.
std::vector<int> kfold_assignments(const Dataset& ds, int k, uint64_t seed);

void write_jsonl(const Dataset& ds, const std::string& path, bool with_oracle);
Dataset read_jsonl(const std::string& path);

}  // namespace mmnar::datagen
