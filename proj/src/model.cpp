#include "mmnar/model.hpp"

#include <cmath>
#include <stdexcept>

#include "mmnar/rng.hpp"

namespace mmnar::model {

namespace {

using datagen::kModalityNames;

void xavier_init(ParamStore& store, uint64_t seed) {
  uint64_t index = 0;
  for (auto& pp : store.all()) {
    Param& p = *pp;
    StreamRng rng(seed, "init", index++);
    if (p.name.ends_with(".b") || p.name.ends_with(".b1") || p.name.ends_with(".b2")) {
      std::fill(p.value.data.begin(), p.value.data.end(), 0.0);
      continue;
    }
    const double bound = std::sqrt(6.0 / (p.value.rows + p.value.cols));
    for (double& v : p.value.data) v = (2.0 * rng.uniform() - 1.0) * bound;
  }
}

Var mlp2(Tape& t, Var x, Param& w1, Param& b1, Param& w2, Param& b2) {
  Var h = relu(add_rowvec(matmul(x, t.leaf_param(w1)), t.leaf_param(b1)));
  return add_rowvec(matmul(h, t.leaf_param(w2)), t.leaf_param(b2));
}

double stable_sigmoid(double x) {
  return x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
}

}  // namespace

void ModelConfig::validate() const {
  if (embed_dim <= 0 || encoder_hidden <= 0 || miss_dim <= 0 || miss_hidden <= 0 ||
      decoder_hidden <= 0 || head_hidden <= 0)
    throw std::invalid_argument("model: all layer sizes must be positive");
  if (n_heads <= 0 || embed_dim % n_heads != 0)
    throw std::invalid_argument("model: embed_dim must be divisible by n_heads");
  if (dropout < 0.0 || dropout >= 1.0) throw std::invalid_argument("model: dropout must be in [0, 1)");
  if (task_names.empty()) throw std::invalid_argument("model: at least one task required");
  if (loss.pred.size() != task_names.size())
    throw std::invalid_argument("model: need one prediction weight per task");
  if (loss.cont_temperature <= 0.0)
    throw std::invalid_argument("model: contrastive temperature must be positive");
  if (reconstruction && !mmnar_fusion)
    throw std::invalid_argument("model: reconstruction requires mmnar_fusion");
}

Batch make_batch(const datagen::Dataset& ds, std::span<const int> indices) {
  Batch b;
  b.n = static_cast<int>(indices.size());
  const int n_tasks = static_cast<int>(ds.config.tasks.size());
  b.mask.resize(b.n);
  b.delta = Tensor(b.n, kM);
  b.labels = Tensor(b.n, n_tasks);
  b.recon_modality.assign(b.n, -1);

  std::array<std::vector<const std::vector<double>*>, kM> gathered;
  for (int m = 0; m < kM; ++m) b.feature_row[m].assign(b.n, -1);

  for (int i = 0; i < b.n; ++i) {
    const datagen::PatientRecord& rec = ds.patients[indices[i]];
    b.mask[i] = rec.mask;
    for (int m = 0; m < kM; ++m) {
      b.delta.at(i, m) = rec.mask[m] ? 1.0 : 0.0;
      if (!rec.mask[m]) continue;
      const int expected = ds.config.modalities[m].dim;
      if (static_cast<int>(rec.features[m].size()) != expected)
        throw std::runtime_error(std::string("encoder ") + kModalityNames[m] + ": expected feature dim " +
                                 std::to_string(expected) + ", got " +
                                 std::to_string(rec.features[m].size()) + " (patient " +
                                 std::to_string(rec.id) + ")");
      b.feature_row[m][i] = static_cast<int>(gathered[m].size());
      gathered[m].push_back(&rec.features[m]);
    }
    for (int t = 0; t < n_tasks; ++t) b.labels.at(i, t) = rec.labels[t];
  }
  for (int m = 0; m < kM; ++m) {
    const int dim = ds.config.modalities[m].dim;
    b.features[m] = Tensor(static_cast<int>(gathered[m].size()), dim);
    for (size_t r = 0; r < gathered[m].size(); ++r)
      std::copy(gathered[m][r]->begin(), gathered[m][r]->end(), b.features[m].row_ptr(static_cast<int>(r)));
  }
  return b;
}

void sample_recon_modalities(Batch& b, uint64_t key) {
  StreamRng rng(key, "recon-mask");
  for (int i = 0; i < b.n; ++i) {
    std::vector<int> observed_non_s;
    for (int m = 1; m < kM; ++m)
      if (b.mask[i][m]) observed_non_s.push_back(m);
    if (!observed_non_s.empty())
      b.recon_modality[i] = observed_non_s[rng.uniform_int(static_cast<int>(observed_non_s.size()))];
    else
      b.recon_modality[i] = 0;  // S; the leave-one-out guard below skips it
  }
}

FusionModel::FusionModel(ModelConfig cfg) : cfg_(std::move(cfg)) {
  cfg_.validate();
  const int d = cfg_.embed_dim;
  for (int m = 0; m < kM; ++m) {
    const std::string base = std::string("enc.") + kModalityNames[m];
    params_.add(base + ".w1", cfg_.feature_dims[m], cfg_.encoder_hidden);
    params_.add(base + ".b1", 1, cfg_.encoder_hidden);
    params_.add(base + ".w2", cfg_.encoder_hidden, d);
    params_.add(base + ".b2", 1, d);
  }
  if (cfg_.mmnar_fusion) {
    params_.add("miss.w1", kM, cfg_.miss_hidden);
    params_.add("miss.b1", 1, cfg_.miss_hidden);
    params_.add("miss.w2", cfg_.miss_hidden, cfg_.miss_dim);
    params_.add("miss.b2", 1, cfg_.miss_dim);
    params_.add("miss.dec.w", cfg_.miss_dim, kM);
    params_.add("miss.dec.b", 1, kM);
    for (int m = 0; m < kM; ++m) {
      const std::string base = std::string("gate.") + kModalityNames[m];
      params_.add(base + ".w", cfg_.miss_dim, d);
      params_.add(base + ".b", 1, d);
    }
    for (int m = 0; m < kM; ++m)
      params_.add(std::string("slot.") + kModalityNames[m], 1, d);
    const int dh = d / cfg_.n_heads;
    for (int h = 0; h < cfg_.n_heads; ++h) {
      const std::string base = "attn.h" + std::to_string(h);
      params_.add(base + ".wq", d, dh);
      params_.add(base + ".wk", d, dh);
      params_.add(base + ".wv", d, dh);
    }
    params_.add("attn.wo", d, d);
  }
  if (cfg_.reconstruction) {
    for (int m = 0; m < kM; ++m) {
      const std::string base = std::string("dec.") + kModalityNames[m];
      params_.add(base + ".w1", d, cfg_.decoder_hidden);
      params_.add(base + ".b1", 1, cfg_.decoder_hidden);
      params_.add(base + ".w2", cfg_.decoder_hidden, d);
      params_.add(base + ".b2", 1, d);
    }
  }
  const int head_in = cfg_.mmnar_fusion ? d : d * kM;
  for (const std::string& task : cfg_.task_names) {
    const std::string base = "head." + task;
    params_.add(base + ".w1", head_in, cfg_.head_hidden);
    params_.add(base + ".b1", 1, cfg_.head_hidden);
    params_.add(base + ".w2", cfg_.head_hidden, 1);
    params_.add(base + ".b2", 1, 1);
  }
}

void FusionModel::init(uint64_t seed) { xavier_init(params_, seed); }

Var FusionModel::encoder_forward(Tape& t, int m, Var x) {
  const std::string base = std::string("enc.") + kModalityNames[m];
  return mlp2(t, x, params_.at(base + ".w1"), params_.at(base + ".b1"),
              params_.at(base + ".w2"), params_.at(base + ".b2"));
}

Forward FusionModel::forward(Tape& t, const Batch& batch, bool train, uint64_t dropout_key) {
  const int n = batch.n;
  const int d = cfg_.embed_dim;
  const int n_tasks = cfg_.n_tasks();
  if (batch.labels.cols != n_tasks)
    throw std::invalid_argument("forward: batch has " + std::to_string(batch.labels.cols) +
                                " label columns, model expects " + std::to_string(n_tasks));
  Forward out;
  uint64_t drop_site = 0;
  auto maybe_dropout = [&](Var v) {
    if (!train || cfg_.dropout == 0.0) return v;
    return dropout(v, cfg_.dropout, dropout_key ^ (0x9e3779b97f4a7c15ULL * ++drop_site));
  };

  // per-modality embeddings for observed rows
  std::array<Var, kM> emb{};
  for (int m = 0; m < kM; ++m) {
    if (batch.features[m].rows == 0) continue;
    emb[m] = encoder_forward(t, m, t.leaf(batch.features[m]));
  }
  out.embeddings = emb;

  Var zero_row = t.leaf(Tensor(1, d));

  if (!cfg_.mmnar_fusion) {
    // concat path: zero-filled embeddings, per-task heads on the concat
    std::vector<Var> rows;
    rows.reserve(n);
    for (int i = 0; i < n; ++i) {
      std::array<Var, kM> parts;
      for (int m = 0; m < kM; ++m)
        parts[m] = batch.feature_row[m][i] >= 0 ? slice_rows(emb[m], batch.feature_row[m][i], 1) : zero_row;
      rows.push_back(concat_cols(parts));
      out.fused.push_back(rows.back());
    }
    Var H = maybe_dropout(stack_rows(rows));
    Var zero = t.leaf(Tensor::scalar(0.0));
    out.loss_miss = zero;
    out.loss_rec = zero;
    out.loss_cont = zero;
    Var pred = zero;
    for (int tix = 0; tix < n_tasks; ++tix) {
      const std::string base = "head." + cfg_.task_names[tix];
      Var h1 = relu(add_rowvec(matmul(H, t.leaf_param(params_.at(base + ".w1"))),
                               t.leaf_param(params_.at(base + ".b1"))));
      Var logits = add_rowvec(matmul(h1, t.leaf_param(params_.at(base + ".w2"))),
                              t.leaf_param(params_.at(base + ".b2")));
      out.task_logits.push_back(logits);
      Tensor y(n, 1);
      for (int i = 0; i < n; ++i) y.at(i, 0) = batch.labels.at(i, tix);
      Var elem = cfg_.loss.focal ? focal_bce_with_logits(logits, y, cfg_.loss.focal_gamma)
                                 : bce_with_logits(logits, y);
      pred = add(pred, scale(sum_all(elem), cfg_.loss.pred[tix] / n));
    }
    out.loss_pred = pred;
    out.loss_total = pred;
    return out;
  }

  // missingness embedding + self-supervised decoding
  Var delta_in = t.leaf(batch.delta);
  Var z = mlp2(t, delta_in, params_.at("miss.w1"), params_.at("miss.b1"), params_.at("miss.w2"),
               params_.at("miss.b2"));
  out.z = z;
  Var dec_logits = add_rowvec(matmul(z, t.leaf_param(params_.at("miss.dec.w"))),
                              t.leaf_param(params_.at("miss.dec.b")));
  out.loss_miss = scale(sum_all(bce_with_logits(dec_logits, batch.delta)), cfg_.loss.miss / n);

  // missingness-conditioned gates
  std::array<Var, kM> gates{};
  for (int m = 0; m < kM; ++m) {
    const std::string base = std::string("gate.") + kModalityNames[m];
    gates[m] = sigmoid(add_rowvec(matmul(z, t.leaf_param(params_.at(base + ".w"))),
                                  t.leaf_param(params_.at(base + ".b"))));
  }

  std::array<Var, kM> slots;
  for (int m = 0; m < kM; ++m) slots[m] = t.leaf_param(params_.at(std::string("slot.") + kModalityNames[m]));

  // gated rows, stacked patient-major for one shared QKV projection
  std::vector<Var> attn_rows;
  attn_rows.reserve(static_cast<size_t>(n) * kM);
  std::array<std::vector<Var>, kM> original;  // per patient original embeddings (recon targets)
  for (int m = 0; m < kM; ++m) original[m].resize(n);
  out.gated.resize(n);
  for (int i = 0; i < n; ++i) {
    for (int m = 0; m < kM; ++m) {
      Var row;
      if (batch.feature_row[m][i] >= 0) {
        Var e = slice_rows(emb[m], batch.feature_row[m][i], 1);
        original[m][i] = e;
        row = mul(slice_rows(gates[m], i, 1), e);
        out.gated[i][m] = row;
      } else {
        row = zero_row;  // missing modalities enter as exact zeros
      }
      attn_rows.push_back(add(row, slots[m]));
    }
  }
  Var E_all = stack_rows(attn_rows);

  const int n_heads = cfg_.n_heads;
  const int dh = d / n_heads;
  std::vector<Var> Q(n_heads), K(n_heads), V(n_heads);
  for (int h = 0; h < n_heads; ++h) {
    const std::string base = "attn.h" + std::to_string(h);
    Q[h] = matmul(E_all, t.leaf_param(params_.at(base + ".wq")));
    K[h] = matmul(E_all, t.leaf_param(params_.at(base + ".wk")));
    V[h] = matmul(E_all, t.leaf_param(params_.at(base + ".wv")));
  }
  Var wo = t.leaf_param(params_.at("attn.wo"));
  const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));

  // per-patient masked attention; the mean pool commutes with the output
  // projection, so wo is applied to the pooled context
  auto fuse_mask = [&](int i, const std::vector<uint8_t>& key_mask) {
    std::vector<Var> ctx(n_heads);
    for (int h = 0; h < n_heads; ++h) {
      Var q = slice_rows(Q[h], i * kM, kM);
      Var k = slice_rows(K[h], i * kM, kM);
      Var v = slice_rows(V[h], i * kM, kM);
      Var scores = scale(matmul_tb(q, k), inv_sqrt_dh);
      Var attn = masked_softmax_rows(scores, key_mask);
      ctx[h] = matmul(attn, v);
    }
    Var pooled = masked_mean_pool(concat_cols(ctx), key_mask);
    return matmul(pooled, wo);
  };

  std::vector<PatientFusion> fusions(n);
  std::vector<Var> h_rows;
  h_rows.reserve(n);
  for (int i = 0; i < n; ++i) {
    std::vector<uint8_t> key_mask(kM);
    int observed = 0;
    for (int m = 0; m < kM; ++m) {
      key_mask[m] = batch.mask[i][m];
      observed += key_mask[m] ? 1 : 0;
    }
    if (observed == 0) throw std::runtime_error("fuse: no observed modalities for patient in batch");
    fusions[i].h = fuse_mask(i, key_mask);
    h_rows.push_back(fusions[i].h);
    const int drop = batch.recon_modality[i];
    if (cfg_.reconstruction && drop >= 0 && batch.mask[i][drop]) {
      if (observed == 1) {
        ++out.skipped_loo;  // masking the only observed modality: no target pair
      } else {
        std::vector<uint8_t> loo = key_mask;
        loo[drop] = 0;
        fusions[i].h_loo = fuse_mask(i, loo);
        fusions[i].has_loo = true;
      }
    }
  }
  out.fused = h_rows;
  out.fused_loo.resize(n);
  for (int i = 0; i < n; ++i)
    if (fusions[i].has_loo) out.fused_loo[i] = fusions[i].h_loo;
  Var H_all = maybe_dropout(stack_rows(h_rows));

  Var zero = t.leaf(Tensor::scalar(0.0));
  Var rec_total = zero, cont_total = zero;
  if (cfg_.reconstruction) {
    for (int m = 0; m < kM; ++m) {
      std::vector<Var> loo_rows, target_rows;
      for (int i = 0; i < n; ++i) {
        if (batch.recon_modality[i] != m || !fusions[i].has_loo) continue;
        loo_rows.push_back(fusions[i].h_loo);
        target_rows.push_back(original[m][i]);
      }
      if (loo_rows.empty()) continue;
      out.recon_pairs += static_cast<int>(loo_rows.size());
      Var h_loo = maybe_dropout(stack_rows(loo_rows));
      const std::string base = std::string("dec.") + kModalityNames[m];
      Var recon = mlp2(t, h_loo, params_.at(base + ".w1"), params_.at(base + ".b1"),
                       params_.at(base + ".w2"), params_.at(base + ".b2"));
      Var targets = stack_rows(target_rows);
      Var rec_m = sum_squares(sub(targets, recon));
      Var cont_m = info_nce_rows(cosine_sim_matrix(targets, recon), cfg_.loss.cont_temperature);
      out.rec_by_modality[m] = rec_m;
      out.cont_by_modality[m] = cont_m;
      rec_total = add(rec_total, scale(rec_m, cfg_.loss.rec));
      cont_total = add(cont_total, scale(cont_m, cfg_.loss.cont));
    }
  }
  out.loss_rec = rec_total;
  out.loss_cont = cont_total;

  Var pred = zero;
  for (int tix = 0; tix < n_tasks; ++tix) {
    const std::string base = "head." + cfg_.task_names[tix];
    Var h1 = relu(add_rowvec(matmul(H_all, t.leaf_param(params_.at(base + ".w1"))),
                             t.leaf_param(params_.at(base + ".b1"))));
    Var logits = add_rowvec(matmul(h1, t.leaf_param(params_.at(base + ".w2"))),
                            t.leaf_param(params_.at(base + ".b2")));
    out.task_logits.push_back(logits);
    Tensor y(n, 1);
    for (int i = 0; i < n; ++i) y.at(i, 0) = batch.labels.at(i, tix);
    Var elem = cfg_.loss.focal ? focal_bce_with_logits(logits, y, cfg_.loss.focal_gamma)
                               : bce_with_logits(logits, y);
    pred = add(pred, scale(sum_all(elem), cfg_.loss.pred[tix] / n));
  }
  out.loss_pred = pred;
  out.loss_total = add(add(out.loss_miss, add(rec_total, cont_total)), pred);
  return out;
}

FusionModel::Prediction FusionModel::predict(const datagen::Dataset& ds, std::span<const int> indices,
                                             int chunk) {
  Prediction pred;
  pred.probs.reserve(indices.size());
  if (cfg_.mmnar_fusion) pred.z.reserve(indices.size());
  for (size_t start = 0; start < indices.size(); start += chunk) {
    const size_t stop = std::min(indices.size(), start + chunk);
    std::vector<int> part(indices.begin() + start, indices.begin() + stop);
    Batch b = make_batch(ds, part);
    Tape tape;
    Forward f = forward(tape, b, false, 0);
    for (int i = 0; i < b.n; ++i) {
      std::vector<double> row(cfg_.n_tasks());
      for (int tix = 0; tix < cfg_.n_tasks(); ++tix)
        row[tix] = stable_sigmoid(tape.value(f.task_logits[tix]).at(i, 0));
      pred.probs.push_back(std::move(row));
      if (cfg_.mmnar_fusion) {
        const Tensor& z = tape.value(f.z);
        pred.z.emplace_back(z.row_ptr(i), z.row_ptr(i) + z.cols);
      }
    }
  }
  return pred;
}

// ---- baseline --------------------------------------------------------------

int BaselineConfig::input_dim() const {
  int dim = 0;
  for (int m = 0; m < kM; ++m) dim += feature_dims[m];
  return dim + (append_mask_bits ? kM : 0);
}

BaselineMlp::BaselineMlp(BaselineConfig cfg) : cfg_(std::move(cfg)) {
  if (cfg_.loss.pred.size() != cfg_.task_names.size())
    throw std::invalid_argument("baseline: need one prediction weight per task");
  params_.add("trunk.w1", cfg_.input_dim(), cfg_.trunk_hidden);
  params_.add("trunk.b1", 1, cfg_.trunk_hidden);
  for (const std::string& task : cfg_.task_names) {
    const std::string base = "head." + task;
    params_.add(base + ".w1", cfg_.trunk_hidden, cfg_.head_hidden);
    params_.add(base + ".b1", 1, cfg_.head_hidden);
    params_.add(base + ".w2", cfg_.head_hidden, 1);
    params_.add(base + ".b2", 1, 1);
  }
}

void BaselineMlp::init(uint64_t seed) { xavier_init(params_, seed); }

Forward BaselineMlp::forward(Tape& t, const Batch& batch,
                             const std::array<std::vector<double>, kM>& fill, bool train,
                             uint64_t dropout_key) {
  const int n = batch.n;
  const int n_tasks = cfg_.n_tasks();
  Tensor input(n, cfg_.input_dim());
  for (int i = 0; i < n; ++i) {
    double* row = input.row_ptr(i);
    int off = 0;
    for (int m = 0; m < kM; ++m) {
      const int dim = cfg_.feature_dims[m];
      if (batch.feature_row[m][i] >= 0) {
        const double* src = batch.features[m].row_ptr(batch.feature_row[m][i]);
        std::copy(src, src + dim, row + off);
      } else {
        if (static_cast<int>(fill[m].size()) != dim)
          throw std::invalid_argument("baseline: fill vector for modality " +
                                      std::string(kModalityNames[m]) + " has wrong length");
        std::copy(fill[m].begin(), fill[m].end(), row + off);
      }
      off += dim;
    }
    if (cfg_.append_mask_bits)
      for (int m = 0; m < kM; ++m) row[off + m] = batch.mask[i][m] ? 1.0 : 0.0;
  }

  Forward out;
  Var x = t.leaf(std::move(input));
  Var h = relu(add_rowvec(matmul(x, t.leaf_param(params_.at("trunk.w1"))),
                          t.leaf_param(params_.at("trunk.b1"))));
  if (train && cfg_.dropout > 0.0) h = dropout(h, cfg_.dropout, dropout_key);
  Var zero = t.leaf(Tensor::scalar(0.0));
  out.loss_miss = zero;
  out.loss_rec = zero;
  out.loss_cont = zero;
  Var pred = zero;
  for (int tix = 0; tix < n_tasks; ++tix) {
    const std::string base = "head." + cfg_.task_names[tix];
    Var h1 = relu(add_rowvec(matmul(h, t.leaf_param(params_.at(base + ".w1"))),
                             t.leaf_param(params_.at(base + ".b1"))));
    Var logits = add_rowvec(matmul(h1, t.leaf_param(params_.at(base + ".w2"))),
                            t.leaf_param(params_.at(base + ".b2")));
    out.task_logits.push_back(logits);
    Tensor y(n, 1);
    for (int i = 0; i < n; ++i) y.at(i, 0) = batch.labels.at(i, tix);
    Var elem = cfg_.loss.focal ? focal_bce_with_logits(logits, y, cfg_.loss.focal_gamma)
                               : bce_with_logits(logits, y);
    pred = add(pred, scale(sum_all(elem), cfg_.loss.pred[tix] / n));
  }
  out.loss_pred = pred;
  out.loss_total = pred;
  return out;
}

std::vector<std::vector<double>> BaselineMlp::predict(const datagen::Dataset& ds,
                                                      std::span<const int> indices,
                                                      const std::array<std::vector<double>, kM>& fill,
                                                      int chunk) {
  std::vector<std::vector<double>> probs;
  probs.reserve(indices.size());
  for (size_t start = 0; start < indices.size(); start += chunk) {
    const size_t stop = std::min(indices.size(), start + chunk);
    std::vector<int> part(indices.begin() + start, indices.begin() + stop);
    Batch b = make_batch(ds, part);
    Tape tape;
    Forward f = forward(tape, b, fill, false, 0);
    for (int i = 0; i < b.n; ++i) {
      std::vector<double> row(cfg_.n_tasks());
      for (int tix = 0; tix < cfg_.n_tasks(); ++tix)
        row[tix] = stable_sigmoid(tape.value(f.task_logits[tix]).at(i, 0));
      probs.push_back(std::move(row));
    }
  }
  return probs;
}

std::array<std::vector<double>, kM> feature_means(const datagen::Dataset& ds,
                                                  std::span<const int> train_indices) {
  std::array<std::vector<double>, kM> means;
  for (int m = 0; m < kM; ++m) {
    const int dim = ds.config.modalities[m].dim;
    means[m].assign(dim, 0.0);
    long count = 0;
    for (int idx : train_indices) {
      const auto& rec = ds.patients[idx];
      if (!rec.mask[m]) continue;
      for (int j = 0; j < dim; ++j) means[m][j] += rec.features[m][j];
      ++count;
    }
    if (count > 0)
      for (double& v : means[m]) v /= static_cast<double>(count);
  }
  return means;
}

}  // namespace mmnar::model
