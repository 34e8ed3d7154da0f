#include "mmnar/trainer.hpp"

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <sstream>

#include <json.hpp>

#include "mmnar/checkpoint.hpp"
#include "mmnar/optimizer.hpp"
#include "mmnar/rng.hpp"
#include "mmnar/tape.hpp"

namespace mmnar::harness {

namespace fs = std::filesystem;
using nlohmann::json;
using model::Batch;
using model::Forward;
using model::kM;

namespace {

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.6f", v);
  return buf;
}

uint64_t derive_key(uint64_t seed, std::string_view label, uint64_t a, uint64_t b = 0) {
  StreamRng rng(seed, label, a * 1000003ULL + b);
  return rng.next_u64();
}

void atomic_write(const std::string& path, const std::string& content) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::trunc);
    if (!out) throw std::runtime_error("cannot open " + tmp + " for writing");
    out << content;
  }
  fs::rename(tmp, path);
}

// uniform driver over the fusion model and the two imputation baselines
struct Engine {
  ParamStore* params = nullptr;
  std::function<Forward(Tape&, Batch&, bool, uint64_t)> forward;
  std::function<model::FusionModel::Prediction(std::span<const int>)> predict;
  bool samples_recon = false;
};

Engine make_engine(const RunConfig& cfg, RunKind kind, uint64_t seed, const datagen::Dataset& ds,
                   const datagen::SplitIndices& split, std::optional<model::FusionModel>& fusion,
                   std::optional<model::BaselineMlp>& baseline,
                   std::array<std::vector<double>, kM>& fill) {
  Engine eng;
  if (kind == RunKind::fusion) {
    fusion.emplace(cfg.model);
    fusion->init(seed);
    eng.params = &fusion->params();
    eng.samples_recon = cfg.model.reconstruction;
    auto* m = &*fusion;
    eng.forward = [m](Tape& t, Batch& b, bool train, uint64_t key) { return m->forward(t, b, train, key); };
    const datagen::Dataset* dsp = &ds;
    eng.predict = [m, dsp](std::span<const int> idx) { return m->predict(*dsp, idx); };
    return eng;
  }
  model::BaselineConfig bcfg;
  bcfg.feature_dims = cfg.model.feature_dims;
  bcfg.task_names = cfg.model.task_names;
  bcfg.dropout = cfg.model.dropout;
  bcfg.append_mask_bits = kind == RunKind::baseline_zero;
  bcfg.loss = cfg.model.loss;
  baseline.emplace(bcfg);
  baseline->init(seed);
  eng.params = &baseline->params();
  for (int m = 0; m < kM; ++m) fill[m].assign(cfg.model.feature_dims[m], 0.0);
  if (kind == RunKind::baseline_mean) fill = model::feature_means(ds, split.train);
  auto* b = &*baseline;
  auto* fillp = &fill;
  eng.forward = [b, fillp](Tape& t, Batch& batch, bool train, uint64_t key) {
    return b->forward(t, batch, *fillp, train, key);
  };
  const datagen::Dataset* dsp = &ds;
  eng.predict = [b, fillp, dsp, bcfg](std::span<const int> idx) {
    model::FusionModel::Prediction p;
    p.probs = b->predict(*dsp, idx, *fillp);
    return p;
  };
  return eng;
}

double mean_of(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x;
  return v.empty() ? 0.0 : s / v.size();
}

double sd_of(const std::vector<double>& v) {
  if (v.size() < 2) return 0.0;
  const double m = mean_of(v);
  double s = 0.0;
  for (double x : v) s += (x - m) * (x - m);
  return std::sqrt(s / (v.size() - 1));
}

}  // namespace

std::string run_kind_name(RunKind kind) {
  switch (kind) {
    case RunKind::fusion: return "fusion";
    case RunKind::baseline_zero: return "baseline_zero_fill";
    case RunKind::baseline_mean: return "baseline_mean_impute";
  }
  return "?";
}

datagen::Dataset load_or_generate(const RunConfig& cfg) {
  if (!cfg.dataset_path.empty()) return datagen::read_jsonl(cfg.dataset_path);
  return datagen::generate(cfg.generator);
}

std::string checkpoint_meta(const RunConfig& cfg, RunKind kind) {
  json meta;
  meta["config_hash"] = cfg.hash;
  meta["kind"] = run_kind_name(kind);
  meta["tasks"] = cfg.model.task_names;
  meta["feature_dims"] = cfg.model.feature_dims;
  json m;
  m["embed_dim"] = cfg.model.embed_dim;
  m["encoder_hidden"] = cfg.model.encoder_hidden;
  m["miss_dim"] = cfg.model.miss_dim;
  m["miss_hidden"] = cfg.model.miss_hidden;
  m["heads"] = cfg.model.n_heads;
  m["decoder_hidden"] = cfg.model.decoder_hidden;
  m["head_hidden"] = cfg.model.head_hidden;
  m["dropout"] = cfg.model.dropout;
  m["mmnar_fusion"] = cfg.model.mmnar_fusion;
  m["reconstruction"] = cfg.model.reconstruction;
  m["pred_weights"] = cfg.model.loss.pred;
  meta["model"] = m;
  return meta.dump();
}

SeedResult run_training(const RunConfig& cfg, RunKind kind, uint64_t seed, const datagen::Dataset& ds,
                        const datagen::SplitIndices& split, const std::string& out_dir) {
  SeedResult result;
  result.seed = seed;
  result.kind = kind;

  std::ofstream log;
  if (!out_dir.empty()) {
    fs::create_directories(out_dir);
    log.open(out_dir + "/log.txt", std::ios::trunc);
  }
  auto logln = [&](const std::string& line) {
    if (log.is_open()) log << line << "\n" << std::flush;
  };
  logln("[stage] train kind=" + run_kind_name(kind) + " seed=" + std::to_string(seed) +
        " config=" + cfg.hash);

  std::optional<model::FusionModel> fusion;
  std::optional<model::BaselineMlp> baseline;
  std::array<std::vector<double>, kM> fill;
  Engine eng = make_engine(cfg, kind, seed, ds, split, fusion, baseline, fill);

  AdamW opt(cfg.optimizer);
  const int n_train = static_cast<int>(split.train.size());
  const int B = cfg.batch_size;
  const std::vector<std::string>& tasks = cfg.model.task_names;

  double best_val = HUGE_VAL;
  std::vector<double> best_snapshot;
  int patience_left = cfg.patience;

  auto val_loss = [&]() {
    double total = 0.0;
    long count = 0;
    for (size_t start = 0; start < split.val.size(); start += 512) {
      const size_t stop = std::min(split.val.size(), start + 512);
      std::vector<int> part(split.val.begin() + start, split.val.begin() + stop);
      Batch batch = model::make_batch(ds, part);
      Tape tape;
      Forward f = eng.forward(tape, batch, false, 0);
      total += tape.value(f.loss_pred).data[0] * batch.n;
      count += batch.n;
    }
    return count > 0 ? total / count : 0.0;
  };

  for (int epoch = 0; epoch < cfg.max_epochs; ++epoch) {
    const bool phase1 = cfg.schedule == "two_phase" && epoch < cfg.phase1_epochs &&
                        kind == RunKind::fusion && cfg.model.mmnar_fusion;
    std::vector<int> order(split.train.begin(), split.train.end());
    StreamRng(seed, "shuffle", static_cast<uint64_t>(epoch)).shuffle(order);

    CurvePoint pt;
    pt.epoch = epoch;
    double weight = 0.0;
    for (int start = 0, bidx = 0; start < n_train; start += B, ++bidx) {
      const int stop = std::min(n_train, start + B);
      std::vector<int> part(order.begin() + start, order.begin() + stop);
      Batch batch = model::make_batch(ds, part);
      if (eng.samples_recon)
        sample_recon_modalities(batch, derive_key(seed, "recon", static_cast<uint64_t>(epoch), bidx));
      Tape tape;
      Forward f =
          eng.forward(tape, batch, true, derive_key(seed, "drop", static_cast<uint64_t>(epoch), bidx));
      Var loss = phase1 ? add(f.loss_miss, add(f.loss_rec, f.loss_cont)) : f.loss_total;
      const double lv = tape.value(loss).data[0];
      if (!std::isfinite(lv)) {
        logln("[error] diverged at epoch " + std::to_string(epoch) + " batch " + std::to_string(bidx));
        throw std::runtime_error("training diverged (non-finite loss) at epoch " + std::to_string(epoch) +
                                 ", batch " + std::to_string(bidx));
      }
      tape.backward(loss);
      opt.step(*eng.params);
      pt.total += tape.value(f.loss_total).data[0] * batch.n;
      pt.miss += tape.value(f.loss_miss).data[0] * batch.n;
      pt.rec += tape.value(f.loss_rec).data[0] * batch.n;
      pt.cont += tape.value(f.loss_cont).data[0] * batch.n;
      pt.pred += tape.value(f.loss_pred).data[0] * batch.n;
      weight += batch.n;
    }
    pt.total /= weight;
    pt.miss /= weight;
    pt.rec /= weight;
    pt.cont /= weight;
    pt.pred /= weight;
    pt.val_pred = val_loss();
    result.curve.push_back(pt);
    result.epochs_ran = epoch + 1;

    if (!phase1) {
      if (pt.val_pred < best_val - 1e-9) {
        best_val = pt.val_pred;
        best_snapshot = eng.params->snapshot();
        result.best_epoch = epoch;
        patience_left = cfg.patience;
      } else if (--patience_left < 0) {
        logln("[stage] early-stop epoch=" + std::to_string(epoch) +
              " best=" + std::to_string(result.best_epoch));
        break;
      }
    }
  }
  if (!best_snapshot.empty()) eng.params->restore(best_snapshot);
  logln("[stage] training done epochs=" + std::to_string(result.epochs_ran) +
        " best_epoch=" + std::to_string(result.best_epoch));

  // ---- rectifier on validation only ----
  const bool rectify_this_run = cfg.use_rectifier && kind == RunKind::fusion;
  std::map<int64_t, int> folds;
  if (rectify_this_run) {
    auto val_pred = eng.predict(split.val);
    std::vector<rectifier::ValSample> samples(split.val.size());
    for (size_t i = 0; i < split.val.size(); ++i) {
      const auto& rec = ds.patients[split.val[i]];
      samples[i].id = rec.id;
      samples[i].pattern = rec.pattern();
      samples[i].yhat = val_pred.probs[i];
      samples[i].label.assign(rec.labels.begin(), rec.labels.end());
    }
    folds = rectifier::assign_folds(samples, seed);
    logln("[stage] rectifier-fit inputs=validation n=" + std::to_string(samples.size()) +
          " (test labels untouched)");
    result.kappa_star = rectifier::select_kappa(samples, folds, tasks, cfg.kappa_grid, cfg.min_support);
    result.table = rectifier::fit(samples, folds, tasks, result.kappa_star, cfg.min_support);
    result.used_rectifier = true;
    logln("[stage] rectifier kappa=" + fmt(result.kappa_star) +
          " applied_fraction=" + fmt(result.table.applied_fraction()));
  }

  // ---- test evaluation ----
  logln("[stage] test-eval n=" + std::to_string(split.test.size()));
  auto test_pred = eng.predict(split.test);
  std::vector<std::vector<uint8_t>> labels(split.test.size());
  std::vector<std::string> patterns(split.test.size());
  for (size_t i = 0; i < split.test.size(); ++i) {
    const auto& rec = ds.patients[split.test[i]];
    labels[i].assign(rec.labels.begin(), rec.labels.end());
    patterns[i] = rec.pattern();
  }
  result.unrectified = metrics::evaluate(test_pred.probs, labels, patterns, tasks);
  result.unrectified.seed = seed;
  result.unrectified.config_hash = cfg.hash;
  result.unrectified.rectified = false;
  if (result.used_rectifier) {
    rectifier::ApplyCounters counters;
    std::vector<std::vector<double>> rect = test_pred.probs;
    for (size_t i = 0; i < rect.size(); ++i)
      for (size_t t = 0; t < tasks.size(); ++t)
        rect[i][t] = rectifier::rectify(rect[i][t], patterns[i], static_cast<int>(t), -1, result.table,
                                        &counters);
    result.rectified = metrics::evaluate(rect, labels, patterns, tasks);
    result.rectified.seed = seed;
    result.rectified.config_hash = cfg.hash;
    result.rectified.rectified = true;
    logln("[stage] rectified test predictions corrected=" + std::to_string(counters.corrected) +
          " unseen_pattern=" + std::to_string(counters.unseen_pattern));
  }

  // ---- artifacts ----
  if (!out_dir.empty()) {
    save_checkpoint(*eng.params, checkpoint_meta(cfg, kind), out_dir + "/checkpoint.bin");
    if (result.used_rectifier) rectifier::write_table(result.table, out_dir + "/rectifier.txt");
    metrics::write_report_text(result.unrectified, out_dir + "/metrics.txt");
    std::vector<metrics::Report> reports{result.unrectified};
    if (result.used_rectifier) {
      metrics::write_report_text(result.rectified, out_dir + "/metrics_rectified.txt");
      reports.push_back(result.rectified);
    }
    metrics::write_report_csv(reports, out_dir + "/metrics.csv");
    std::ostringstream curve;
    curve << "epoch,total,miss,rec,cont,pred,val_pred\n";
    for (const CurvePoint& pt : result.curve)
      curve << pt.epoch << "," << fmt(pt.total) << "," << fmt(pt.miss) << "," << fmt(pt.rec) << ","
            << fmt(pt.cont) << "," << fmt(pt.pred) << "," << fmt(pt.val_pred) << "\n";
    atomic_write(out_dir + "/train_curve.csv", curve.str());
    logln("[stage] artifacts written");
  }
  return result;
}

Runner::Runner(RunConfig cfg, std::string out_dir) : cfg_(std::move(cfg)), out_dir_(std::move(out_dir)) {
  if (!out_dir_.empty()) fs::create_directories(out_dir_);
}

const datagen::Dataset& Runner::dataset() {
  if (!ds_) {
    ds_ = load_or_generate(cfg_);
    if (!cfg_.dataset_path.empty()) {
      // sync model dims/tasks with the loaded file
      cfg_.model.task_names = ds_->config.tasks;
      for (int m = 0; m < kM; ++m) cfg_.model.feature_dims[m] = ds_->config.modalities[m].dim;
      if (cfg_.model.loss.pred.size() != cfg_.model.task_names.size())
        cfg_.model.loss.pred.assign(cfg_.model.task_names.size(), 1.0);
    }
  }
  return *ds_;
}

const datagen::SplitIndices& Runner::splits() {
  if (!split_) split_ = datagen::split(dataset(), cfg_.ratios, cfg_.generator.seed);
  return *split_;
}

std::vector<SeedResult> Runner::train_all(RunKind kind) {
  const datagen::Dataset& ds = dataset();
  const datagen::SplitIndices& split = splits();
  std::vector<SeedResult> results;
  for (uint64_t seed : cfg_.seeds) {
    const std::string dir =
        out_dir_.empty() ? "" : out_dir_ + "/" + run_kind_name(kind) + "_seed_" + std::to_string(seed);
    results.push_back(run_training(cfg_, kind, seed, ds, split, dir));
    const auto& rep = results.back().final_report();
    std::cout << "[" << run_kind_name(kind) << " seed " << seed << "]";
    for (size_t t = 0; t < rep.tasks.size(); ++t)
      std::cout << " " << rep.tasks[t]
                << " auc=" << (rep.overall[t].auc.defined ? fmt(rep.overall[t].auc.value) : "absent");
    std::cout << "\n";
  }
  if (!out_dir_.empty())
    write_aggregate(results, cfg_.model.task_names, out_dir_ + "/" + run_kind_name(kind) + "_aggregate");
  return results;
}

std::vector<Runner::AblationRow> Runner::ablate() {
  const datagen::Dataset& ds = dataset();
  const datagen::SplitIndices& split = splits();
  struct Variant {
    const char* name;
    bool fusion, recon, rect;
  };
  const Variant variants[] = {
      {"base", false, false, false},
      {"+mmnar_fusion", true, false, false},
      {"+reconstruction", true, true, false},
      {"+rectifier", true, true, true},
  };
  const size_t n_tasks = cfg_.model.task_names.size();
  std::vector<AblationRow> rows;
  for (const Variant& v : variants) {
    RunConfig vcfg = override_config(cfg_, {{"ablation.mmnar_fusion", v.fusion ? "true" : "false"},
                                            {"ablation.reconstruction", v.recon ? "true" : "false"},
                                            {"ablation.rectifier", v.rect ? "true" : "false"}});
    std::vector<std::vector<double>> auc(n_tasks), auprc(n_tasks);
    for (uint64_t seed : cfg_.seeds) {
      const std::string dir = out_dir_.empty()
                                  ? ""
                                  : out_dir_ + "/ablation/" + std::string(v.name) + "/seed_" +
                                        std::to_string(seed);
      SeedResult res = run_training(vcfg, RunKind::fusion, seed, ds, split, dir);
      const metrics::Report& rep = res.final_report();
      for (size_t t = 0; t < n_tasks; ++t) {
        if (rep.overall[t].auc.defined) auc[t].push_back(rep.overall[t].auc.value);
        if (rep.overall[t].auprc.defined) auprc[t].push_back(rep.overall[t].auprc.value);
      }
    }
    AblationRow row;
    row.variant = v.name;
    for (size_t t = 0; t < n_tasks; ++t) {
      row.auc_mean.push_back(mean_of(auc[t]));
      row.auc_sd.push_back(sd_of(auc[t]));
      row.auprc_mean.push_back(mean_of(auprc[t]));
      row.auprc_sd.push_back(sd_of(auprc[t]));
      row.dauc.push_back(rows.empty() ? std::nan("") : row.auc_mean[t] - rows.back().auc_mean[t]);
    }
    rows.push_back(std::move(row));
    std::cout << "[ablate] " << v.name << " done\n";
  }

  if (!out_dir_.empty()) {
    std::ostringstream txt, csv;
    csv << "variant,task,auc_mean,auc_sd,auprc_mean,auprc_sd,dauc\n";
    txt << "component ablation (mean over " << cfg_.seeds.size() << " seeds)\n\n";
    char buf[256];
    std::snprintf(buf, sizeof(buf), "%-18s", "variant");
    txt << buf;
    for (const std::string& t : cfg_.model.task_names) {
      std::snprintf(buf, sizeof(buf), " | %-10s AUC APR dAUC", t.c_str());
      txt << buf;
    }
    txt << "\n";
    for (const AblationRow& row : rows) {
      std::snprintf(buf, sizeof(buf), "%-18s", row.variant.c_str());
      txt << buf;
      for (size_t t = 0; t < n_tasks; ++t) {
        if (std::isnan(row.dauc[t]))
          std::snprintf(buf, sizeof(buf), " | %.3f %.3f   --  ", row.auc_mean[t], row.auprc_mean[t]);
        else
          std::snprintf(buf, sizeof(buf), " | %.3f %.3f %+.3f", row.auc_mean[t], row.auprc_mean[t],
                        row.dauc[t]);
        txt << buf;
        csv << row.variant << "," << cfg_.model.task_names[t] << "," << fmt(row.auc_mean[t]) << ","
            << fmt(row.auc_sd[t]) << "," << fmt(row.auprc_mean[t]) << "," << fmt(row.auprc_sd[t]) << ",";
        csv << (std::isnan(row.dauc[t]) ? std::string() : fmt(row.dauc[t]));
        csv << "\n";
      }
      txt << "\n";
    }
    atomic_write(out_dir_ + "/ablation_table.txt", txt.str());
    atomic_write(out_dir_ + "/ablation.csv", csv.str());
  }
  return rows;
}

void Runner::sweep(const std::string& dotted_key, const std::vector<std::string>& values) {
  if (values.empty()) throw std::invalid_argument("sweep: no values given");
  const uint64_t seed = cfg_.seeds.front();
  const bool touches_data = dotted_key.starts_with("generator.") || dotted_key.starts_with("data.");
  std::ostringstream csv;
  csv << "param,value";
  for (const std::string& t : cfg_.model.task_names) csv << "," << t << "_auc," << t << "_auprc," << t << "_brier";
  csv << "\n";
  for (const std::string& value : values) {
    RunConfig vcfg = override_config(cfg_, dotted_key, value);
    datagen::Dataset local_ds;
    const datagen::Dataset* ds = nullptr;
    const datagen::SplitIndices* split = nullptr;
    datagen::SplitIndices local_split;
    if (touches_data) {
      local_ds = load_or_generate(vcfg);
      local_split = datagen::split(local_ds, vcfg.ratios, vcfg.generator.seed);
      ds = &local_ds;
      split = &local_split;
    } else {
      ds = &dataset();
      split = &splits();
    }
    SeedResult res = run_training(vcfg, RunKind::fusion, seed, *ds, *split, "");
    const metrics::Report& rep = res.final_report();
    csv << dotted_key << "," << value;
    for (size_t t = 0; t < rep.tasks.size(); ++t) {
      csv << "," << (rep.overall[t].auc.defined ? fmt(rep.overall[t].auc.value) : std::string());
      csv << "," << (rep.overall[t].auprc.defined ? fmt(rep.overall[t].auprc.value) : std::string());
      csv << "," << fmt(rep.overall[t].brier);
    }
    csv << "\n";
    std::cout << "[sweep] " << dotted_key << "=" << value << " done\n";
  }
  if (!out_dir_.empty()) atomic_write(out_dir_ + "/sensitivity.csv", csv.str());
}

void write_aggregate(const std::vector<SeedResult>& results, const std::vector<std::string>& tasks,
                     const std::string& path_prefix) {
  std::ostringstream txt, csv;
  csv << "rectified,task,metric,mean,sd,n_seeds\n";
  txt << "aggregate over " << results.size() << " seeds (mean +/- sd)\n";
  for (int rectified = 0; rectified <= 1; ++rectified) {
    bool any = false;
    for (const SeedResult& r : results) any |= rectified ? r.used_rectifier : true;
    if (!any) continue;
    txt << "\n" << (rectified ? "rectified" : "unrectified") << "\n";
    for (size_t t = 0; t < tasks.size(); ++t) {
      std::vector<double> aucs, auprcs, briers;
      for (const SeedResult& r : results) {
        if (rectified && !r.used_rectifier) continue;
        const metrics::Report& rep = rectified ? r.rectified : r.unrectified;
        if (rep.overall[t].auc.defined) aucs.push_back(rep.overall[t].auc.value);
        if (rep.overall[t].auprc.defined) auprcs.push_back(rep.overall[t].auprc.value);
        briers.push_back(rep.overall[t].brier);
      }
      if (briers.empty()) continue;
      txt << "  " << tasks[t] << ": auc=" << fmt(mean_of(aucs)) << "+/-" << fmt(sd_of(aucs))
          << " auprc=" << fmt(mean_of(auprcs)) << "+/-" << fmt(sd_of(auprcs))
          << " brier=" << fmt(mean_of(briers)) << "+/-" << fmt(sd_of(briers)) << "\n";
      csv << rectified << "," << tasks[t] << ",auc," << fmt(mean_of(aucs)) << "," << fmt(sd_of(aucs))
          << "," << aucs.size() << "\n";
      csv << rectified << "," << tasks[t] << ",auprc," << fmt(mean_of(auprcs)) << ","
          << fmt(sd_of(auprcs)) << "," << auprcs.size() << "\n";
      csv << rectified << "," << tasks[t] << ",brier," << fmt(mean_of(briers)) << ","
          << fmt(sd_of(briers)) << "," << briers.size() << "\n";
    }
  }
  atomic_write(path_prefix + ".txt", txt.str());
  atomic_write(path_prefix + ".csv", csv.str());
}

// ---- checkpoint-driven subcommands -----------------------------------------

LoadedModel load_model_checkpoint(const std::string& path) {
  CheckpointData data = load_checkpoint(path);
  json meta = json::parse(data.meta);
  LoadedModel lm;
  lm.config_hash = meta.at("config_hash").get<std::string>();
  lm.tasks = meta.at("tasks").get<std::vector<std::string>>();
  const std::string kind = meta.at("kind").get<std::string>();
  const auto dims = meta.at("feature_dims").get<std::vector<int>>();
  if (kind == "fusion") {
    lm.kind = RunKind::fusion;
    model::ModelConfig mc;
    for (int m = 0; m < kM; ++m) mc.feature_dims[m] = dims.at(m);
    mc.task_names = lm.tasks;
    const json& m = meta.at("model");
    mc.embed_dim = m.at("embed_dim").get<int>();
    mc.encoder_hidden = m.at("encoder_hidden").get<int>();
    mc.miss_dim = m.at("miss_dim").get<int>();
    mc.miss_hidden = m.at("miss_hidden").get<int>();
    mc.n_heads = m.at("heads").get<int>();
    mc.decoder_hidden = m.at("decoder_hidden").get<int>();
    mc.head_hidden = m.at("head_hidden").get<int>();
    mc.dropout = m.at("dropout").get<double>();
    mc.mmnar_fusion = m.at("mmnar_fusion").get<bool>();
    mc.reconstruction = m.at("reconstruction").get<bool>();
    mc.loss.pred = m.at("pred_weights").get<std::vector<double>>();
    lm.fusion.emplace(mc);
    load_checkpoint_into(data, lm.fusion->params());
  } else {
    lm.kind = kind == "baseline_zero_fill" ? RunKind::baseline_zero : RunKind::baseline_mean;
    model::BaselineConfig bc;
    for (int m = 0; m < kM; ++m) bc.feature_dims[m] = dims.at(m);
    bc.task_names = lm.tasks;
    bc.append_mask_bits = lm.kind == RunKind::baseline_zero;
    const json& m = meta.at("model");
    bc.dropout = m.at("dropout").get<double>();
    bc.loss.pred = m.at("pred_weights").get<std::vector<double>>();
    lm.baseline.emplace(bc);
    load_checkpoint_into(data, lm.baseline->params());
  }
  return lm;
}

namespace {

int check_hash(const RunConfig& cfg, const LoadedModel& lm, bool force) {
  if (lm.config_hash != cfg.hash) {
    if (!force) {
      std::cerr << "config hash mismatch: checkpoint " << lm.config_hash << ", config " << cfg.hash
                << " (pass --force to evaluate anyway)\n";
      return 1;
    }
    std::cerr << "warning: config hash mismatch, continuing due to --force\n";
  }
  return 0;
}

}  // namespace

int evaluate_checkpoint(const RunConfig& cfg, const std::string& checkpoint_path,
                        const std::string& rectifier_path, bool force, const std::string& out_dir) {
  LoadedModel lm = load_model_checkpoint(checkpoint_path);
  if (int rc = check_hash(cfg, lm, force); rc != 0) return rc;
  datagen::Dataset ds = load_or_generate(cfg);
  datagen::SplitIndices split = datagen::split(ds, cfg.ratios, cfg.generator.seed);

  std::vector<std::vector<double>> probs;
  if (lm.kind == RunKind::fusion) {
    probs = lm.fusion->predict(ds, split.test).probs;
  } else {
    std::array<std::vector<double>, kM> fill;
    for (int m = 0; m < kM; ++m) fill[m].assign(ds.config.modalities[m].dim, 0.0);
    if (lm.kind == RunKind::baseline_mean) fill = model::feature_means(ds, split.train);
    probs = lm.baseline->predict(ds, split.test, fill);
  }
  std::vector<std::vector<uint8_t>> labels(split.test.size());
  std::vector<std::string> patterns(split.test.size());
  for (size_t i = 0; i < split.test.size(); ++i) {
    const auto& rec = ds.patients[split.test[i]];
    labels[i].assign(rec.labels.begin(), rec.labels.end());
    patterns[i] = rec.pattern();
  }
  std::vector<metrics::Report> reports;
  metrics::Report rep = metrics::evaluate(probs, labels, patterns, lm.tasks);
  rep.config_hash = cfg.hash;
  reports.push_back(rep);
  if (!rectifier_path.empty()) {
    rectifier::Table table = rectifier::read_table(rectifier_path);
    for (size_t i = 0; i < probs.size(); ++i)
      for (size_t t = 0; t < lm.tasks.size(); ++t)
        probs[i][t] = rectifier::rectify(probs[i][t], patterns[i], static_cast<int>(t), -1, table);
    metrics::Report rrep = metrics::evaluate(probs, labels, patterns, lm.tasks);
    rrep.config_hash = cfg.hash;
    rrep.rectified = true;
    reports.push_back(rrep);
  }
  fs::create_directories(out_dir);
  metrics::write_report_text(reports.front(), out_dir + "/metrics.txt");
  if (reports.size() > 1) metrics::write_report_text(reports.back(), out_dir + "/metrics_rectified.txt");
  metrics::write_report_csv(reports, out_dir + "/metrics.csv");
  for (const auto& r : reports)
    for (size_t t = 0; t < r.tasks.size(); ++t)
      std::cout << (r.rectified ? "rectified " : "") << r.tasks[t]
                << " auc=" << (r.overall[t].auc.defined ? fmt(r.overall[t].auc.value) : "absent")
                << " brier=" << fmt(r.overall[t].brier) << "\n";
  return 0;
}

int probe_checkpoint(const RunConfig& cfg, const std::string& checkpoint_path, bool force,
                     const std::string& out_dir) {
  LoadedModel lm = load_model_checkpoint(checkpoint_path);
  if (int rc = check_hash(cfg, lm, force); rc != 0) return rc;
  if (lm.kind != RunKind::fusion || !lm.fusion->config().mmnar_fusion) {
    std::cerr << "probe: checkpoint has no missingness embedding (fusion disabled)\n";
    return 1;
  }
  datagen::Dataset ds = load_or_generate(cfg);
  datagen::SplitIndices split = datagen::split(ds, cfg.ratios, cfg.generator.seed);
  auto pred = lm.fusion->predict(ds, split.test);
  std::vector<std::string> patterns(split.test.size());
  std::vector<uint8_t> labels0(split.test.size());
  for (size_t i = 0; i < split.test.size(); ++i) {
    const auto& rec = ds.patients[split.test[i]];
    patterns[i] = rec.pattern();
    labels0[i] = rec.labels.empty() ? 0 : rec.labels[0];
  }
  metrics::ProbeReport report = metrics::embedding_probes(pred.z, patterns, labels0);
  fs::create_directories(out_dir);
  metrics::write_probe_report(report, out_dir + "/probe.txt");
  std::cout << "probe accuracy " << fmt(report.pattern_accuracy) << " over " << report.n_patterns
            << " patterns (majority " << fmt(report.majority_freq) << ")\n";
  return 0;
}

int rectify_checkpoint(const RunConfig& cfg, const std::string& checkpoint_path, bool force,
                       const std::string& out_dir) {
  LoadedModel lm = load_model_checkpoint(checkpoint_path);
  if (int rc = check_hash(cfg, lm, force); rc != 0) return rc;
  datagen::Dataset ds = load_or_generate(cfg);
  datagen::SplitIndices split = datagen::split(ds, cfg.ratios, cfg.generator.seed);
  std::vector<std::vector<double>> probs;
  if (lm.kind == RunKind::fusion) {
    probs = lm.fusion->predict(ds, split.val).probs;
  } else {
    std::array<std::vector<double>, kM> fill;
    for (int m = 0; m < kM; ++m) fill[m].assign(ds.config.modalities[m].dim, 0.0);
    if (lm.kind == RunKind::baseline_mean) fill = model::feature_means(ds, split.train);
    probs = lm.baseline->predict(ds, split.val, fill);
  }
  std::vector<rectifier::ValSample> samples(split.val.size());
  for (size_t i = 0; i < split.val.size(); ++i) {
    const auto& rec = ds.patients[split.val[i]];
    samples[i].id = rec.id;
    samples[i].pattern = rec.pattern();
    samples[i].yhat = probs[i];
    samples[i].label.assign(rec.labels.begin(), rec.labels.end());
  }
  auto folds = rectifier::assign_folds(samples, cfg.seeds.front());
  const double kappa =
      rectifier::select_kappa(samples, folds, lm.tasks, cfg.kappa_grid, cfg.min_support);
  rectifier::Table table = rectifier::fit(samples, folds, lm.tasks, kappa, cfg.min_support);
  fs::create_directories(out_dir);
  rectifier::write_table(table, out_dir + "/rectifier.txt");
  std::cout << "rectifier table written (kappa=" << fmt(kappa)
            << ", applied fraction=" << fmt(table.applied_fraction()) << ")\n";
  return 0;
}

}  // namespace mmnar::harness
