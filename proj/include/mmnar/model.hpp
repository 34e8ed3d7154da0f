#pragma once

#include <array>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "mmnar/datagen.hpp"
#include "mmnar/tape.hpp"

namespace mmnar::model {

constexpr int kM = datagen::kNumModalities;

struct LossWeights {
  double miss = 0.5;
  double rec = 1.0;
  double cont = 0.3;
  double cont_temperature = 0.15;
  std::vector<double> pred = {1.2, 1.0, 1.5};
  bool focal = false;
  double focal_gamma = 2.0;
};

struct ModelConfig {
  std::array<int, kM> feature_dims = {32, 64, 48, 40};
  std::vector<std::string> task_names = {"readmission", "icu", "mortality"};
  int embed_dim = 128;
  int encoder_hidden = 128;
  int miss_dim = 32;
  int miss_hidden = 32;
  int n_heads = 4;
  int decoder_hidden = 128;
  int head_hidden = 64;
  double dropout = 0.2;
  bool mmnar_fusion = true;
  bool reconstruction = true;
  LossWeights loss;

  int n_tasks() const { return static_cast<int>(task_names.size()); }
  void validate() const;
};

// Minibatch in model-ready layout. Features are gathered per modality, so a
// missing modality's raw input never reaches the tape.
struct Batch {
  int n = 0;
  std::array<Tensor, kM> features;                // observed rows only, [n_m x dim_m]
  std::array<std::vector<int>, kM> feature_row;   // patient -> row in features[m], -1 if missing
  std::vector<std::array<uint8_t, kM>> mask;      // per patient
  Tensor delta;                                   // n x |M|
  Tensor labels;                                  // n x T
  std::vector<int> recon_modality;                // per patient, -1 = no reconstruction
};

Batch make_batch(const datagen::Dataset& ds, std::span<const int> indices);

// Per-patient masked-modality draw for the reconstruction losses: uniform over
// observed non-S modalities when any exist, else S; patients whose draw is
// their only observed modality are skipped (counted in Forward::skipped_loo).
void sample_recon_modalities(Batch& b, uint64_t key);

struct Forward {
  Var loss_total;
  Var loss_miss;
  Var loss_pred;
  Var loss_rec;   // lambda-weighted sum over modalities
  Var loss_cont;  // lambda-weighted sum over modalities
  std::array<std::optional<Var>, kM> rec_by_modality;   // raw sums
  std::array<std::optional<Var>, kM> cont_by_modality;  // raw InfoNCE means
  std::vector<Var> task_logits;  // per task, [n x 1]
  std::vector<Var> fused;        // per patient, [1 x d] (or [1 x |M|d] concat path)
  Var z;                         // [n x miss_dim]; invalid when fusion is off
  int recon_pairs = 0;
  int skipped_loo = 0;

  // diagnostic handles (valid on the fusion path)
  std::array<Var, kM> embeddings;        // encoder outputs, observed rows only
  std::vector<std::array<Var, kM>> gated;  // per patient gated rows; invalid slot = missing
  std::vector<Var> fused_loo;            // per patient; invalid when no leave-one-out
};

class FusionModel {
 public:
  explicit FusionModel(ModelConfig cfg);

  void init(uint64_t seed);

  const ModelConfig& config() const { return cfg_; }
  ParamStore& params() { return params_; }
  const ParamStore& params() const { return params_; }

  // Builds the whole training graph for one batch. dropout_key seeds the
  // dropout masks (ignored when train == false).
  Forward forward(Tape& tape, const Batch& batch, bool train, uint64_t dropout_key);

  struct Prediction {
    std::vector<std::vector<double>> probs;  // [n][T]
    std::vector<std::vector<double>> z;      // [n][miss_dim]; empty when fusion off
  };
  Prediction predict(const datagen::Dataset& ds, std::span<const int> indices, int chunk = 512);

 private:
  struct PatientFusion {
    Var h;
    Var h_loo;
    bool has_loo = false;
  };

  Var encoder_forward(Tape& t, int m, Var x);
  ModelConfig cfg_;
  ParamStore params_;
};

// Concatenation MLP over raw features with zero or training-mean imputation;
// mask bits are appended in the zero-fill variant.
struct BaselineConfig {
  std::array<int, kM> feature_dims = {32, 64, 48, 40};
  std::vector<std::string> task_names = {"readmission", "icu", "mortality"};
  int trunk_hidden = 128;
  int head_hidden = 64;
  double dropout = 0.2;
  bool append_mask_bits = true;
  LossWeights loss;

  int n_tasks() const { return static_cast<int>(task_names.size()); }
  int input_dim() const;
};

class BaselineMlp {
 public:
  explicit BaselineMlp(BaselineConfig cfg);

  void init(uint64_t seed);
  const BaselineConfig& config() const { return cfg_; }
  ParamStore& params() { return params_; }
  const ParamStore& params() const { return params_; }

  // fill[m] must hold the imputation vector for modality m (zeros or means).
  Forward forward(Tape& tape, const Batch& batch, const std::array<std::vector<double>, kM>& fill,
                  bool train, uint64_t dropout_key);

  std::vector<std::vector<double>> predict(const datagen::Dataset& ds, std::span<const int> indices,
                                           const std::array<std::vector<double>, kM>& fill,
                                           int chunk = 512);

 private:
  BaselineConfig cfg_;
  ParamStore params_;
};

// Training-set mean of each observed feature, per modality.
std::array<std::vector<double>, kM> feature_means(const datagen::Dataset& ds,
                                                  std::span<const int> train_indices);

}  // namespace mmnar::model
