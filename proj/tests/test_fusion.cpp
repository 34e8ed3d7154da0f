#include <doctest.h>

#include <cmath>

#include "mmnar/model.hpp"
#include "test_support.hpp"

using namespace mmnar;
using namespace mmnar::model;
using testsupport::random_tensor;

namespace {

// small config used throughout; embed_dim stays divisible by heads
ModelConfig tiny_config() {
  ModelConfig cfg;
  cfg.feature_dims = {6, 5, 4, 7};
  cfg.embed_dim = 8;
  cfg.encoder_hidden = 10;
  cfg.miss_dim = 6;
  cfg.miss_hidden = 6;
  cfg.n_heads = 2;
  cfg.decoder_hidden = 9;
  cfg.head_hidden = 5;
  cfg.dropout = 0.2;
  return cfg;
}

datagen::GenConfig tiny_gen() {
  datagen::GenConfig g;
  g.n_patients = 40;
  g.latent_dim = 8;
  g.modalities[0].dim = 6;
  g.modalities[1].dim = 5;
  g.modalities[2].dim = 4;
  g.modalities[3].dim = 7;
  g.seed = 97;
  return g;
}

void set_identity_attention(FusionModel& model) {
  const int d = model.config().embed_dim;
  const int heads = model.config().n_heads;
  const int dh = d / heads;
  for (int h = 0; h < heads; ++h) {
    Param& wv = model.params().at("attn.h" + std::to_string(h) + ".wv");
    std::fill(wv.value.data.begin(), wv.value.data.end(), 0.0);
    for (int j = 0; j < dh; ++j) wv.value.at(h * dh + j, j) = 1.0;
  }
  Param& wo = model.params().at("attn.wo");
  std::fill(wo.value.data.begin(), wo.value.data.end(), 0.0);
  for (int i = 0; i < d; ++i) wo.value.at(i, i) = 1.0;
  for (const char* name : {"slot.S", "slot.I", "slot.T", "slot.R"}) {
    Param& slot = model.params().at(name);
    std::fill(slot.value.data.begin(), slot.value.data.end(), 0.0);
  }
}

void zero_gate_params(FusionModel& model) {
  for (const char* m : {"S", "I", "T", "R"}) {
    Param& w = model.params().at(std::string("gate.") + m + ".w");
    Param& b = model.params().at(std::string("gate.") + m + ".b");
    std::fill(w.value.data.begin(), w.value.data.end(), 0.0);
    std::fill(b.value.data.begin(), b.value.data.end(), 0.0);
  }
}

datagen::PatientRecord make_record(const datagen::GenConfig& g, std::array<uint8_t, 4> mask, uint64_t key) {
  datagen::PatientRecord rec;
  rec.id = static_cast<int64_t>(key);
  rec.mask = mask;
  StreamRng rng(key, "record");
  for (int m = 0; m < kM; ++m) {
    if (!mask[m]) continue;
    rec.features[m].resize(g.modalities[m].dim);
    for (double& v : rec.features[m]) v = rng.normal();
  }
  rec.labels = {1, 0, 1};
  return rec;
}

}  // namespace

TEST_CASE("init is deterministic per seed and respects the xavier bound") {
  FusionModel a(tiny_config()), b(tiny_config()), c(tiny_config());
  a.init(5);
  b.init(5);
  c.init(6);
  bool all_equal = true, any_diff = false;
  for (size_t i = 0; i < a.params().count(); ++i) {
    all_equal &= a.params().all()[i]->value.data == b.params().all()[i]->value.data;
    any_diff |= a.params().all()[i]->value.data != c.params().all()[i]->value.data;
  }
  CHECK(all_equal);
  CHECK(any_diff);
  for (const auto& p : a.params().all()) {
    const double bound = std::sqrt(6.0 / (p->value.rows + p->value.cols));
    for (double v : p->value.data) CHECK(std::abs(v) <= bound);
  }
}

TEST_CASE("encoders: only observed modalities produce embeddings") {
  datagen::GenConfig g = tiny_gen();
  datagen::Dataset ds;
  ds.config = g;
  ds.patients.push_back(make_record(g, {1, 0, 0, 0}, 1));
  FusionModel model(tiny_config());
  model.init(1);
  std::vector<int> idx{0};
  Batch batch = make_batch(ds, idx);
  CHECK(batch.features[0].rows == 1);
  CHECK(batch.features[1].rows == 0);
  CHECK(batch.features[2].rows == 0);
  CHECK(batch.features[3].rows == 0);
  Tape t;
  Forward f = model.forward(t, batch, false, 0);
  CHECK(f.embeddings[0].valid());
  CHECK_FALSE(f.embeddings[1].valid());
}

TEST_CASE("encoders: zero final layer collapses every embedding to its bias") {
  datagen::GenConfig g = tiny_gen();
  datagen::Dataset ds;
  ds.config = g;
  for (int i = 0; i < 3; ++i) ds.patients.push_back(make_record(g, {1, 1, 1, 1}, 10 + i));
  FusionModel model(tiny_config());
  model.init(2);
  Param& w2 = model.params().at("enc.S.w2");
  Param& b2 = model.params().at("enc.S.b2");
  std::fill(w2.value.data.begin(), w2.value.data.end(), 0.0);
  for (int j = 0; j < b2.value.cols; ++j) b2.value.data[j] = 0.1 * j;
  std::vector<int> idx{0, 1, 2};
  Batch batch = make_batch(ds, idx);
  Tape t;
  Forward f = model.forward(t, batch, false, 0);
  const Tensor& emb = t.value(f.embeddings[0]);
  for (int i = 0; i < emb.rows; ++i)
    for (int j = 0; j < emb.cols; ++j) CHECK(emb.at(i, j) == b2.value.data[j]);
}

TEST_CASE("encoders: wrong feature dimension names the modality") {
  datagen::GenConfig g = tiny_gen();
  datagen::Dataset ds;
  ds.config = g;
  ds.patients.push_back(make_record(g, {1, 1, 0, 0}, 3));
  ds.patients[0].features[1].resize(2);  // I should have dim 5
  std::vector<int> idx{0};
  CHECK_THROWS_WITH_AS(make_batch(ds, idx), doctest::Contains("encoder I"), std::runtime_error);
}

TEST_CASE("encoder output norms stay within the init sanity bound") {
  datagen::GenConfig g = tiny_gen();
  g.n_patients = 64;
  datagen::Dataset ds = datagen::generate(g);
  ModelConfig cfg = tiny_config();
  for (int m = 0; m < kM; ++m) cfg.feature_dims[m] = g.modalities[m].dim;
  FusionModel model(cfg);
  model.init(7);
  std::vector<int> idx;
  for (int i = 0; i < 64; ++i) idx.push_back(i);
  Batch batch = make_batch(ds, idx);
  Tape t;
  Forward f = model.forward(t, batch, false, 0);
  const double bound = 10.0 * std::sqrt(static_cast<double>(cfg.embed_dim));
  for (int m = 0; m < kM; ++m) {
    if (!f.embeddings[m].valid()) continue;
    const Tensor& emb = t.value(f.embeddings[m]);
    for (int i = 0; i < emb.rows; ++i) {
      double norm = 0.0;
      for (int j = 0; j < emb.cols; ++j) norm += emb.at(i, j) * emb.at(i, j);
      CHECK(std::sqrt(norm) <= bound);
    }
  }
}

TEST_CASE("miss_embed: saturated correct logits and all-zero logits") {
  datagen::GenConfig g = tiny_gen();
  datagen::Dataset ds;
  ds.config = g;
  ds.patients.push_back(make_record(g, {1, 1, 0, 1}, 4));
  FusionModel model(tiny_config());
  model.init(3);
  std::vector<int> idx{0};

  // decoder reproduces delta with +/-20 logits -> loss below 1e-6 * lambda
  Param& dw = model.params().at("miss.dec.w");
  Param& db = model.params().at("miss.dec.b");
  std::fill(dw.value.data.begin(), dw.value.data.end(), 0.0);
  db.value.data = {20.0, 20.0, -20.0, 20.0};
  {
    Batch batch = make_batch(ds, idx);
    Tape t;
    Forward f = model.forward(t, batch, false, 0);
    CHECK(t.value(f.loss_miss).data[0] < 1e-6 * model.config().loss.miss);
  }
  // all-zero logits -> lambda * |M| * ln 2
  db.value.data = {0.0, 0.0, 0.0, 0.0};
  {
    Batch batch = make_batch(ds, idx);
    Tape t;
    Forward f = model.forward(t, batch, false, 0);
    CHECK(t.value(f.loss_miss).data[0] ==
          doctest::Approx(model.config().loss.miss * kM * std::log(2.0)).epsilon(1e-12));
  }
  CHECK(ModelConfig{}.loss.miss == 0.5);  // default weight
}

TEST_CASE("gate: zero gate parameters halve the embedding, coordinates scale monotonically") {
  datagen::GenConfig g = tiny_gen();
  datagen::Dataset ds;
  ds.config = g;
  ds.patients.push_back(make_record(g, {1, 1, 1, 1}, 5));
  FusionModel model(tiny_config());
  model.init(4);
  zero_gate_params(model);
  std::vector<int> idx{0};
  Batch batch = make_batch(ds, idx);
  {
    Tape t;
    Forward f = model.forward(t, batch, false, 0);
    const Tensor& emb = t.value(f.embeddings[1]);
    const Tensor& gated = t.value(f.gated[0][1]);
    for (int j = 0; j < gated.cols; ++j)
      CHECK(gated.data[j] == doctest::Approx(0.5 * emb.at(0, j)).epsilon(1e-12));
  }
  // raising one gate logit coordinate strictly increases that output magnitude
  const int coord = 2;
  Param& gb = model.params().at("gate.I.b");
  gb.value.data[coord] = 1.5;
  double emb_val, gated_val;
  {
    Tape t;
    Forward f = model.forward(t, batch, false, 0);
    emb_val = t.value(f.embeddings[1]).at(0, coord);
    gated_val = t.value(f.gated[0][1]).data[coord];
  }
  REQUIRE(emb_val != 0.0);
  CHECK(std::abs(gated_val) > std::abs(0.5 * emb_val));
  CHECK(gated_val == doctest::Approx(emb_val / (1.0 + std::exp(-1.5))).epsilon(1e-12));
}

TEST_CASE("fuse: a single observed modality passes through attention as its value row") {
  datagen::GenConfig g = tiny_gen();
  datagen::Dataset ds;
  ds.config = g;
  ds.patients.push_back(make_record(g, {1, 0, 0, 0}, 6));
  ModelConfig cfg = tiny_config();
  FusionModel model(cfg);
  model.init(5);
  set_identity_attention(model);
  zero_gate_params(model);
  std::vector<int> idx{0};
  Batch batch = make_batch(ds, idx);
  Tape t;
  Forward f = model.forward(t, batch, false, 0);
  // with V = identity slices, Wo = identity, slots = 0 and sigma(0) = 0.5
  // gates, h must equal exactly 0.5 * e_S
  const Tensor& emb = t.value(f.embeddings[0]);
  const Tensor& h = t.value(f.fused[0]);
  REQUIRE(h.cols == emb.cols);
  for (int j = 0; j < h.cols; ++j) CHECK(h.data[j] == doctest::Approx(0.5 * emb.at(0, j)).epsilon(1e-12));
}

TEST_CASE("fuse: junk stored under missing modalities never changes any output") {
  datagen::GenConfig g = tiny_gen();
  datagen::Dataset ds;
  ds.config = g;
  ds.patients.push_back(make_record(g, {1, 1, 0, 0}, 7));
  ds.patients.push_back(make_record(g, {1, 0, 1, 0}, 8));
  datagen::Dataset perturbed = ds;
  // stuff junk into the missing slots (and swap junk between the two patients)
  perturbed.patients[0].features[2] = {9.0, -9.0, 4.0, 4.0};
  perturbed.patients[0].features[3] = {1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0};
  perturbed.patients[1].features[1] = {-3.0, 0.5, 0.5, 0.5, 0.5};

  FusionModel model(tiny_config());
  model.init(6);
  std::vector<int> idx{0, 1};
  Batch b1 = make_batch(ds, idx);
  Batch b2 = make_batch(perturbed, idx);
  b1.recon_modality = {1, 2};
  b2.recon_modality = {1, 2};
  Tape t1, t2;
  Forward f1 = model.forward(t1, b1, true, 314);
  Forward f2 = model.forward(t2, b2, true, 314);
  for (int i = 0; i < 2; ++i)
    CHECK(t1.value(f1.fused[i]).data == t2.value(f2.fused[i]).data);
  for (size_t tix = 0; tix < f1.task_logits.size(); ++tix)
    CHECK(t1.value(f1.task_logits[tix]).data == t2.value(f2.task_logits[tix]).data);
  CHECK(t1.value(f1.loss_total).data[0] == t2.value(f2.loss_total).data[0]);
}

TEST_CASE("fuse: same observed content under a different pattern gives a different h") {
  datagen::GenConfig g = tiny_gen();
  datagen::Dataset ds;
  ds.config = g;
  datagen::PatientRecord a = make_record(g, {1, 1, 0, 0}, 9);
  datagen::PatientRecord b = a;
  b.id = 100;
  b.mask[2] = 1;  // T additionally observed
  StreamRng rng(101, "extra");
  b.features[2].resize(g.modalities[2].dim);
  for (double& v : b.features[2]) v = rng.normal();
  ds.patients = {a, b};

  FusionModel model(tiny_config());
  model.init(7);
  std::vector<int> idx{0, 1};
  Batch batch = make_batch(ds, idx);
  Tape t;
  Forward f = model.forward(t, batch, false, 0);
  // gates for the shared modality S differ because z(delta) differs
  CHECK(t.value(f.gated[0][0]).data != t.value(f.gated[1][0]).data);
  CHECK(t.value(f.fused[0]).data != t.value(f.fused[1]).data);
}

TEST_CASE("fuse: empty mask is rejected") {
  datagen::GenConfig g = tiny_gen();
  datagen::Dataset ds;
  ds.config = g;
  ds.patients.push_back(make_record(g, {1, 0, 0, 0}, 10));
  ds.patients[0].mask[0] = 0;
  ds.patients[0].features[0].clear();
  FusionModel model(tiny_config());
  model.init(8);
  std::vector<int> idx{0};
  Batch batch = make_batch(ds, idx);
  Tape t;
  CHECK_THROWS_WITH_AS(model.forward(t, batch, false, 0), doctest::Contains("no observed"),
                       std::runtime_error);
}

TEST_CASE("leave-one-out: masked modality content cannot reach its own h") {
  datagen::GenConfig g = tiny_gen();
  datagen::Dataset ds;
  ds.config = g;
  ds.patients.push_back(make_record(g, {1, 1, 1, 1}, 11));
  datagen::Dataset perturbed = ds;
  for (double& v : perturbed.patients[0].features[2]) v += 2.5;  // change T content

  FusionModel model(tiny_config());
  model.init(9);
  std::vector<int> idx{0};
  Batch b1 = make_batch(ds, idx);
  Batch b2 = make_batch(perturbed, idx);
  b1.recon_modality = {2};
  b2.recon_modality = {2};
  Tape t1, t2;
  Forward f1 = model.forward(t1, b1, false, 0);
  Forward f2 = model.forward(t2, b2, false, 0);
  REQUIRE(f1.fused_loo[0].valid());
  // h^{\T} ignores T's content entirely
  CHECK(t1.value(f1.fused_loo[0]).data == t2.value(f2.fused_loo[0]).data);
  // while the full h does depend on it
  CHECK(t1.value(f1.fused[0]).data != t2.value(f2.fused[0]).data);
  // and h^{\T} differs from h in general
  CHECK(t1.value(f1.fused_loo[0]).data != t1.value(f1.fused[0]).data);
}

TEST_CASE("leave-one-out: the only observed modality is skipped") {
  datagen::GenConfig g = tiny_gen();
  datagen::Dataset ds;
  ds.config = g;
  ds.patients.push_back(make_record(g, {1, 0, 0, 0}, 12));
  FusionModel model(tiny_config());
  model.init(10);
  std::vector<int> idx{0};
  Batch batch = make_batch(ds, idx);
  sample_recon_modalities(batch, 55);
  CHECK(batch.recon_modality[0] == 0);  // no observed non-S: falls back to S
  Tape t;
  Forward f = model.forward(t, batch, true, 0);
  CHECK(f.skipped_loo == 1);
  CHECK(f.recon_pairs == 0);
  CHECK(t.value(f.loss_rec).data[0] == 0.0);
}

TEST_CASE("recon sampling: uniform over observed non-S modalities") {
  datagen::GenConfig g = tiny_gen();
  datagen::Dataset ds;
  ds.config = g;
  for (int i = 0; i < 300; ++i) ds.patients.push_back(make_record(g, {1, 1, 0, 1}, 900 + i));
  std::vector<int> idx;
  for (int i = 0; i < 300; ++i) idx.push_back(i);
  Batch batch = make_batch(ds, idx);
  sample_recon_modalities(batch, 77);
  int count_i = 0, count_r = 0;
  for (int m : batch.recon_modality) {
    CHECK((m == 1 || m == 3));
    count_i += m == 1 ? 1 : 0;
    count_r += m == 3 ? 1 : 0;
  }
  CHECK(count_i + count_r == 300);
  CHECK(count_i > 100);
  CHECK(count_r > 100);
}

TEST_CASE("masked softmax puts exactly zero mass on masked positions") {
  Tape t;
  Var scores = t.leaf(random_tensor(4, 4, 500, 2.0));
  Var attn = masked_softmax_rows(scores, {1, 0, 1, 0});
  const Tensor& a = t.value(attn);
  for (int i = 0; i < 4; ++i) {
    CHECK(a.at(i, 1) == 0.0);
    CHECK(a.at(i, 3) == 0.0);
    CHECK(a.at(i, 0) + a.at(i, 2) == doctest::Approx(1.0).epsilon(1e-12));
  }
}

TEST_CASE("model config validation") {
  ModelConfig cfg = tiny_config();
  cfg.n_heads = 3;  // 8 % 3 != 0
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
  cfg = tiny_config();
  cfg.reconstruction = true;
  cfg.mmnar_fusion = false;
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
  cfg = tiny_config();
  cfg.loss.cont_temperature = 0.0;
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
}
