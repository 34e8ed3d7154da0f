#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "mmnar/config.hpp"
#include "mmnar/trainer.hpp"

using namespace mmnar;
using namespace mmnar::harness;

namespace fs = std::filesystem;

namespace {

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  REQUIRE(in.good());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

// small but real end-to-end config: a few epochs on a few hundred patients
const char* kTinyConfig = R"(
[generator]
n_patients = 420
seed = 5
mode = MNAR
dim_S = 8
dim_I = 7
dim_T = 6
dim_R = 5

[data]
ratios = 0.7, 0.15, 0.15

[model]
embed_dim = 8
encoder_hidden = 8
miss_dim = 6
miss_hidden = 6
heads = 2
decoder_hidden = 8
head_hidden = 4
dropout = 0.1

[optimizer]
learning_rate = 0.003
batch_size = 32

[training]
max_epochs = 3
patience = 5
seeds = 1

[rectifier]
min_support = 10
)";

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / name) {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
  std::string str() const { return path.string(); }
};

}  // namespace

TEST_CASE("config: defaults carry the documented training settings") {
  RunConfig cfg = parse_config_text("[training]\nseeds = 1\n");
  CHECK(cfg.optimizer.lr == 2e-4);
  CHECK(cfg.optimizer.weight_decay == 1e-6);
  CHECK(cfg.optimizer.beta1 == 0.9);
  CHECK(cfg.optimizer.beta2 == 0.999);
  CHECK(cfg.optimizer.epsilon == 1e-8);
  CHECK(cfg.batch_size == 32);
  CHECK(cfg.patience == 30);
  CHECK(cfg.max_epochs == 200);
  CHECK(cfg.model.embed_dim == 128);
  CHECK(cfg.model.dropout == 0.2);
  CHECK(cfg.model.loss.pred == std::vector<double>{1.2, 1.0, 1.5});
  CHECK(cfg.kappa_grid == std::vector<double>{0.01, 0.02, 0.03, 0.05});
  CHECK(cfg.model.task_names == std::vector<std::string>{"readmission", "icu", "mortality"});
}

TEST_CASE("config: unknown sections and keys are rejected") {
  CHECK_THROWS_WITH_AS(parse_config_text("[nonsense]\nx = 1\n"), doctest::Contains("unknown section"),
                       std::invalid_argument);
  CHECK_THROWS_WITH_AS(parse_config_text("[model]\nembed_dims = 4\n"), doctest::Contains("unknown key"),
                       std::invalid_argument);
  CHECK_THROWS_WITH_AS(parse_config_text("[model]\nembed_dim = four\n"), doctest::Contains("bad"),
                       std::invalid_argument);
  CHECK_THROWS_AS(parse_config_text("[model]\nembed_dim = 4\nembed_dim = 8\n"), std::invalid_argument);
  CHECK_THROWS_AS(parse_config_text("orphan = 1\n"), std::invalid_argument);
}

TEST_CASE("config: hash ignores formatting but tracks values") {
  RunConfig a = parse_config_text("[model]\nembed_dim = 64\nheads=4\n[training]\nseeds=1,2\n");
  RunConfig b = parse_config_text("# comment\n[training]\nseeds = 1, 2\n\n[model]\nheads = 4\nembed_dim=64\n");
  CHECK(a.hash == b.hash);
  RunConfig c = parse_config_text("[model]\nembed_dim = 32\nheads=4\n[training]\nseeds=1,2\n");
  CHECK(a.hash != c.hash);
  CHECK(a.hash.size() == 16);
}

TEST_CASE("config: generator keys round through, pattern effects included") {
  RunConfig cfg = parse_config_text(
      "[generator]\nn_patients = 100\nmode = MCAR\nw_I = 0\nu_I = 0\ntau_1101_readmission = 0.08\n");
  CHECK(cfg.generator.n_patients == 100);
  CHECK(cfg.generator.mode == datagen::MissMode::MCAR);
  CHECK(cfg.generator.pattern_effects.at("1101").at("readmission") == 0.08);
  CHECK_THROWS_AS(parse_config_text("[generator]\ntau_1101_nosuchtask = 0.08\n"), std::invalid_argument);
}

TEST_CASE("config: override rebuilds and rehashes") {
  RunConfig cfg = parse_config_text(kTinyConfig);
  RunConfig other = override_config(cfg, "model.dropout", "0.3");
  CHECK(other.model.dropout == 0.3);
  CHECK(other.hash != cfg.hash);
  CHECK_THROWS_AS(override_config(cfg, "nodot", "1"), std::invalid_argument);
  CHECK_THROWS_AS(override_config(cfg, "model.bogus", "1"), std::invalid_argument);
}

TEST_CASE("end-to-end: training produces artifacts and is byte-reproducible") {
  RunConfig cfg = parse_config_text(kTinyConfig);
  TempDir dir1("mmnar_e2e_run1"), dir2("mmnar_e2e_run2");
  {
    Runner runner(cfg, dir1.str());
    auto results = runner.train_all(RunKind::fusion);
    REQUIRE(results.size() == 1);
    CHECK(results[0].used_rectifier);
    CHECK(results[0].epochs_ran == 3);
    for (const auto& pt : results[0].curve) {
      CHECK(std::isfinite(pt.total));
      CHECK(std::isfinite(pt.val_pred));
    }
  }
  const std::string seed_dir = dir1.str() + "/fusion_seed_1";
  for (const char* artifact : {"checkpoint.bin", "rectifier.txt", "metrics.txt", "metrics_rectified.txt",
                               "metrics.csv", "train_curve.csv", "log.txt"})
    CHECK(fs::exists(seed_dir + "/" + std::string(artifact)));
  CHECK(fs::exists(dir1.str() + "/fusion_aggregate.csv"));

  {
    Runner runner(cfg, dir2.str());
    runner.train_all(RunKind::fusion);
  }
  // identical config + seed -> byte-identical outputs
  CHECK(read_file(seed_dir + "/metrics.csv") == read_file(dir2.str() + "/fusion_seed_1/metrics.csv"));
  CHECK(read_file(seed_dir + "/train_curve.csv") ==
        read_file(dir2.str() + "/fusion_seed_1/train_curve.csv"));
  CHECK(read_file(seed_dir + "/checkpoint.bin") == read_file(dir2.str() + "/fusion_seed_1/checkpoint.bin"));

  // the metrics CSV records the config hash and the pinned column order
  const std::string csv = read_file(seed_dir + "/metrics.csv");
  CHECK(csv.find("# config_hash=" + cfg.hash) != std::string::npos);
  CHECK(csv.find("seed,task,pattern,auc,auprc,brier,rectified") != std::string::npos);

  // rectifier stage ordering is auditable from the log
  const std::string log = read_file(seed_dir + "/log.txt");
  const size_t fit_pos = log.find("rectifier-fit inputs=validation");
  const size_t test_pos = log.find("test-eval");
  REQUIRE(fit_pos != std::string::npos);
  REQUIRE(test_pos != std::string::npos);
  CHECK(fit_pos < test_pos);
}

TEST_CASE("end-to-end: evaluate on the emitted checkpoint reproduces the recorded test metrics") {
  RunConfig cfg = parse_config_text(kTinyConfig);
  TempDir train_dir("mmnar_eval_train"), eval_dir("mmnar_eval_eval");
  SeedResult trained;
  {
    Runner runner(cfg, train_dir.str());
    trained = runner.train_all(RunKind::fusion)[0];
  }
  const std::string ckpt = train_dir.str() + "/fusion_seed_1/checkpoint.bin";
  const std::string table = train_dir.str() + "/fusion_seed_1/rectifier.txt";
  REQUIRE(evaluate_checkpoint(cfg, ckpt, table, false, eval_dir.str()) == 0);

  // compare data rows (evaluate does not stamp a seed)
  auto rows_without_seed = [&](const std::string& path) {
    std::istringstream in(read_file(path));
    std::string line;
    std::vector<std::string> rows;
    while (std::getline(in, line)) {
      if (line.empty() || line[0] == '#' || line.starts_with("seed,")) continue;
      rows.push_back(line.substr(line.find(',')));
    }
    return rows;
  };
  CHECK(rows_without_seed(train_dir.str() + "/fusion_seed_1/metrics.csv") ==
        rows_without_seed(eval_dir.str() + "/metrics.csv"));
}

TEST_CASE("evaluate refuses a config hash mismatch unless forced") {
  RunConfig cfg = parse_config_text(kTinyConfig);
  TempDir train_dir("mmnar_force_train"), eval_dir("mmnar_force_eval");
  {
    Runner runner(cfg, train_dir.str());
    runner.train_all(RunKind::fusion);
  }
  const std::string ckpt = train_dir.str() + "/fusion_seed_1/checkpoint.bin";
  RunConfig other = override_config(cfg, "model.dropout", "0.05");
  CHECK(evaluate_checkpoint(other, ckpt, "", false, eval_dir.str()) != 0);
  CHECK(evaluate_checkpoint(other, ckpt, "", true, eval_dir.str()) == 0);
}

TEST_CASE("baselines: train, and imputation only touches missing slots") {
  RunConfig cfg = parse_config_text(kTinyConfig);
  TempDir dir("mmnar_baselines");
  Runner runner(cfg, dir.str());
  auto zero = runner.train_all(RunKind::baseline_zero);
  auto mean = runner.train_all(RunKind::baseline_mean);
  CHECK_FALSE(zero[0].used_rectifier);
  CHECK_FALSE(mean[0].used_rectifier);
  CHECK(fs::exists(dir.str() + "/baseline_zero_fill_seed_1/metrics.csv"));
  CHECK(fs::exists(dir.str() + "/baseline_mean_impute_seed_1/metrics.csv"));

  // for a fully observed patient the fill vectors are irrelevant
  const datagen::Dataset& ds = runner.dataset();
  int full = -1;
  for (size_t i = 0; i < ds.patients.size(); ++i) {
    const auto& m = ds.patients[i].mask;
    if (m[0] && m[1] && m[2] && m[3]) full = static_cast<int>(i);
  }
  REQUIRE(full >= 0);
  model::BaselineConfig bcfg;
  bcfg.feature_dims = cfg.model.feature_dims;
  bcfg.append_mask_bits = false;
  model::BaselineMlp mlp(bcfg);
  mlp.init(3);
  std::array<std::vector<double>, model::kM> zeros, junk;
  for (int m = 0; m < model::kM; ++m) {
    zeros[m].assign(bcfg.feature_dims[m], 0.0);
    junk[m].assign(bcfg.feature_dims[m], 42.0);
  }
  std::vector<int> idx{full};
  auto p1 = mlp.predict(ds, idx, zeros);
  auto p2 = mlp.predict(ds, idx, junk);
  CHECK(p1 == p2);
}

TEST_CASE("ablation grid: four variants, first delta is blank") {
  RunConfig cfg = parse_config_text(kTinyConfig);
  TempDir dir("mmnar_ablate");
  Runner runner(cfg, dir.str());
  auto rows = runner.ablate();
  REQUIRE(rows.size() == 4);
  CHECK(rows[0].variant == "base");
  CHECK(rows[3].variant == "+rectifier");
  for (size_t t = 0; t < rows[0].dauc.size(); ++t) CHECK(std::isnan(rows[0].dauc[t]));
  for (size_t t = 0; t < rows[1].dauc.size(); ++t) CHECK_FALSE(std::isnan(rows[1].dauc[t]));
  CHECK(fs::exists(dir.str() + "/ablation_table.txt"));
  const std::string csv = read_file(dir.str() + "/ablation.csv");
  CHECK(csv.find("base,readmission") != std::string::npos);
  CHECK(csv.find("+rectifier,mortality") != std::string::npos);
}

TEST_CASE("sweep emits one row per value") {
  RunConfig cfg = parse_config_text(kTinyConfig);
  TempDir dir("mmnar_sweep");
  Runner runner(cfg, dir.str());
  runner.sweep("model.dropout", {"0.1", "0.3"});
  const std::string csv = read_file(dir.str() + "/sensitivity.csv");
  int lines = 0;
  for (char c : csv) lines += c == '\n' ? 1 : 0;
  CHECK(lines == 3);  // header + 2 values
  CHECK(csv.find("model.dropout,0.1") != std::string::npos);
  CHECK(csv.find("model.dropout,0.3") != std::string::npos);
}

TEST_CASE("two-phase schedule trains stage 1 first") {
  RunConfig cfg = parse_config_text(kTinyConfig);
  cfg = override_config(cfg, {{"training.schedule", "two_phase"},
                              {"training.phase1_epochs", "2"},
                              {"training.max_epochs", "4"}});
  Runner runner(cfg, "");
  auto results = runner.train_all(RunKind::fusion);
  CHECK(results[0].epochs_ran == 4);
  CHECK(results[0].best_epoch >= 2);  // early stopping only tracks phase 2
}

TEST_CASE("dataset files can drive training in place of the generator") {
  RunConfig cfg = parse_config_text(kTinyConfig);
  TempDir dir("mmnar_dataset_file");
  const std::string data_path = dir.str() + "/data.jsonl";
  datagen::write_jsonl(datagen::generate(cfg.generator), data_path, false);
  RunConfig file_cfg = override_config(cfg, "data.dataset", data_path);
  Runner runner(file_cfg, dir.str());
  auto results = runner.train_all(RunKind::fusion);
  CHECK(results[0].unrectified.overall.size() == 3);
}
