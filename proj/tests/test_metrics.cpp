#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <map>

#include "mmnar/metrics.hpp"
#include "mmnar/rng.hpp"

using namespace mmnar;
using namespace mmnar::metrics;

namespace {

// exhaustive pair enumeration: the independent AUC oracle
double auc_brute_force(const std::vector<double>& scores, const std::vector<uint8_t>& labels) {
  double num = 0.0;
  long pairs = 0;
  for (size_t i = 0; i < scores.size(); ++i) {
    if (!labels[i]) continue;
    for (size_t j = 0; j < scores.size(); ++j) {
      if (labels[j]) continue;
      ++pairs;
      if (scores[i] > scores[j]) num += 1.0;
      else if (scores[i] == scores[j]) num += 0.5;
    }
  }
  return num / pairs;
}

}  // namespace

TEST_CASE("auc basics") {
  // perfectly separated
  CHECK(auc(std::vector<double>{0.9, 0.8, 0.2, 0.1}, std::vector<uint8_t>{1, 1, 0, 0}).value == 1.0);
  // all ties
  CHECK(auc(std::vector<double>{0.5, 0.5, 0.5, 0.5}, std::vector<uint8_t>{1, 0, 1, 0}).value == 0.5);
  // 4 pairs, 3 concordant
  CHECK(auc(std::vector<double>{0.1, 0.4, 0.35, 0.8}, std::vector<uint8_t>{0, 0, 1, 1}).value ==
        doctest::Approx(0.75).epsilon(1e-12));
  // single-class labels are undefined with a reason
  MetricValue undef = auc(std::vector<double>{0.1, 0.2}, std::vector<uint8_t>{1, 1});
  CHECK_FALSE(undef.defined);
  CHECK(undef.reason == "no negative labels");
}

TEST_CASE("auc equals exhaustive pair enumeration for n <= 12") {
  StreamRng rng(2024, "auc-oracle");
  for (int rep = 0; rep < 200; ++rep) {
    const int n = 2 + rng.uniform_int(11);
    std::vector<double> scores(n);
    std::vector<uint8_t> labels(n);
    bool has_pos = false, has_neg = false;
    for (int i = 0; i < n; ++i) {
      // coarse grid so ties actually happen
      scores[i] = rng.uniform_int(5) / 4.0;
      labels[i] = rng.uniform() < 0.5 ? 1 : 0;
      (labels[i] ? has_pos : has_neg) = true;
    }
    if (!has_pos || !has_neg) continue;
    const MetricValue fast = auc(scores, labels);
    CHECK(fast.value == doctest::Approx(auc_brute_force(scores, labels)).epsilon(1e-12));
  }
}

TEST_CASE("auc symmetry and invariance under monotone transforms") {
  StreamRng rng(77, "auc-sym");
  std::vector<double> scores(40);
  std::vector<uint8_t> labels(40);
  for (size_t i = 0; i < scores.size(); ++i) {
    scores[i] = rng.normal();  // continuous, ties have probability zero
    labels[i] = rng.uniform() < 0.4 ? 1 : 0;
  }
  labels[0] = 1;
  labels[1] = 0;
  std::vector<double> negated(scores.size()), transformed(scores.size());
  for (size_t i = 0; i < scores.size(); ++i) {
    negated[i] = -scores[i];
    transformed[i] = std::exp(3.0 * scores[i]) + 7.0;  // strictly increasing
  }
  CHECK(auc(scores, labels).value + auc(negated, labels).value == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(auc(scores, labels).value == doctest::Approx(auc(transformed, labels).value).epsilon(1e-12));
}

TEST_CASE("auprc basics") {
  // all positives ranked first
  CHECK(auprc(std::vector<double>{0.9, 0.8, 0.2, 0.1}, std::vector<uint8_t>{1, 1, 0, 0}).value == 1.0);
  // one positive ranked last of four
  CHECK(auprc(std::vector<double>{0.9, 0.8, 0.7, 0.1}, std::vector<uint8_t>{0, 0, 0, 1}).value ==
        doctest::Approx(0.25).epsilon(1e-12));
  MetricValue undef = auprc(std::vector<double>{0.1, 0.2}, std::vector<uint8_t>{0, 0});
  CHECK_FALSE(undef.defined);
}

TEST_CASE("auprc of random scores approaches prevalence") {
  StreamRng rng(99, "auprc-mc");
  const int n = 10000;
  const double prevalence = 0.2;
  std::vector<double> scores(n);
  std::vector<uint8_t> labels(n);
  for (int i = 0; i < n; ++i) {
    scores[i] = rng.uniform();
    labels[i] = rng.uniform() < prevalence ? 1 : 0;
  }
  CHECK(std::abs(auprc(scores, labels).value - prevalence) < 0.05);
}

TEST_CASE("brier basics") {
  CHECK(brier(std::vector<double>{1.0, 0.0, 1.0}, std::vector<uint8_t>{1, 0, 1}) == 0.0);
  CHECK(brier(std::vector<double>{0.5, 0.5}, std::vector<uint8_t>{1, 0}) == 0.25);
  // (1 - 0.38)^2
  CHECK(brier(std::vector<double>{0.38}, std::vector<uint8_t>{1}) == doctest::Approx(0.3844).epsilon(1e-12));
}

TEST_CASE("brier convexity: elementwise mixtures never exceed the worse input") {
  StreamRng rng(55, "brier-mix");
  const int n = 50;
  std::vector<double> a(n), b(n), mix(n);
  std::vector<uint8_t> y(n);
  for (int i = 0; i < n; ++i) {
    a[i] = rng.uniform();
    b[i] = rng.uniform();
    y[i] = rng.uniform() < 0.5 ? 1 : 0;
  }
  for (double lambda : {0.25, 0.5, 0.75}) {
    for (int i = 0; i < n; ++i) mix[i] = lambda * a[i] + (1 - lambda) * b[i];
    CHECK(brier(mix, y) <= std::max(brier(a, y), brier(b, y)) + 1e-12);
  }
}

TEST_CASE("pattern report pools rare patterns and keeps supports consistent") {
  StreamRng rng(31, "report");
  const std::vector<std::string> tasks = {"readmission", "icu"};
  std::vector<std::vector<double>> probs;
  std::vector<std::vector<uint8_t>> labels;
  std::vector<std::string> patterns;
  auto push = [&](const std::string& pattern, int count) {
    for (int i = 0; i < count; ++i) {
      probs.push_back({rng.uniform(), rng.uniform()});
      labels.push_back({static_cast<uint8_t>(rng.uniform() < 0.4), static_cast<uint8_t>(rng.uniform() < 0.3)});
      patterns.push_back(pattern);
    }
  };
  push("1111", 80);
  push("1100", 45);
  push("1010", 10);  // below the floor of 30
  push("1000", 5);   // below the floor of 30
  Report report = evaluate(probs, labels, patterns, tasks, 30);
  REQUIRE(report.overall.size() == 2);
  CHECK(report.overall[0].support == 140);
  int support_sum = 0;
  bool has_other = false;
  for (const auto& block : report.patterns) {
    support_sum += block.support;
    has_other |= block.pattern == "other";
    CHECK((block.pattern == "other" || block.support >= 30));
  }
  CHECK(support_sum == 140);
  CHECK(has_other);
  for (const auto& block : report.patterns)
    for (const auto& tm : block.per_task) {
      if (tm.auc.defined) CHECK((tm.auc.value >= 0.0 && tm.auc.value <= 1.0));
      CHECK((tm.brier >= 0.0 && tm.brier <= 1.0));
    }
}

TEST_CASE("probe on patient-independent random z scores near the majority frequency") {
  StreamRng rng(71, "probe-null");
  const int n = 3000;
  std::vector<std::vector<double>> z(n, std::vector<double>(8));
  std::vector<std::string> patterns(n);
  std::vector<uint8_t> labels(n);
  const std::vector<std::string> pool = {"1111", "1101", "1011", "1000"};
  const std::vector<double> freq = {0.4, 0.3, 0.2, 0.1};
  for (int i = 0; i < n; ++i) {
    for (double& v : z[i]) v = rng.normal();  // unrelated to the pattern
    const double u = rng.uniform();
    double acc = 0.0;
    for (size_t k = 0; k < pool.size(); ++k) {
      acc += freq[k];
      if (u < acc || k + 1 == pool.size()) {
        patterns[i] = pool[k];
        break;
      }
    }
    labels[i] = rng.uniform() < 0.3 ? 1 : 0;
  }
  ProbeReport report = embedding_probes(z, patterns, labels);
  CHECK(report.n_patterns == 4);
  CHECK(report.majority_freq == doctest::Approx(0.4).epsilon(0.1));
  CHECK(report.pattern_accuracy < report.majority_freq + 0.06);
}

TEST_CASE("probe separates patterns when z is a function of the pattern") {
  // distinct z per pattern (as the missingness MLP produces) -> near-perfect probe
  StreamRng rng(72, "probe-sep");
  const std::vector<std::string> pool = {"1111", "1101", "1011", "1001", "1110"};
  std::map<std::string, std::vector<double>> z_of;
  for (size_t k = 0; k < pool.size(); ++k) {
    std::vector<double> z(8);
    for (double& v : z) v = rng.normal();
    z_of[pool[k]] = z;
  }
  const int n = 1000;
  std::vector<std::vector<double>> z(n);
  std::vector<std::string> patterns(n);
  std::vector<uint8_t> labels(n, 0);
  for (int i = 0; i < n; ++i) {
    patterns[i] = pool[rng.uniform_int(static_cast<int>(pool.size()))];
    z[i] = z_of[patterns[i]];
  }
  ProbeReport report = embedding_probes(z, patterns, labels);
  CHECK(report.pattern_accuracy >= 0.99);
}

TEST_CASE("probe degenerate cases") {
  std::vector<std::vector<double>> z(10, std::vector<double>(4, 1.0));
  std::vector<std::string> patterns(10, "1111");
  std::vector<uint8_t> labels(10, 1);
  ProbeReport single = embedding_probes(z, patterns, labels);
  CHECK(single.degenerate);
  CHECK(single.pattern_accuracy == 1.0);
  CHECK_FALSE(single.norm_outcome_corr.defined);

  // two patterns: probe runs, correlation still absent (needs >= 3)
  for (int i = 0; i < 5; ++i) patterns[i] = "1000";
  for (int i = 0; i < 5; ++i) z[i] = std::vector<double>(4, -1.0);
  ProbeReport two = embedding_probes(z, patterns, labels);
  CHECK_FALSE(two.degenerate);
  CHECK_FALSE(two.norm_outcome_corr.defined);
  CHECK(two.norm_outcome_corr.reason == "fewer than 3 distinct patterns");
}

TEST_CASE("probe correlation tracks the norm-vs-rate relationship") {
  // three patterns with increasing ||z|| and increasing label rate
  std::vector<std::vector<double>> z;
  std::vector<std::string> patterns;
  std::vector<uint8_t> labels;
  StreamRng rng(73, "probe-corr");
  const std::vector<std::string> pool = {"1000", "1100", "1111"};
  for (int k = 0; k < 3; ++k) {
    for (int i = 0; i < 400; ++i) {
      z.push_back(std::vector<double>(6, 0.5 * (k + 1)));
      patterns.push_back(pool[k]);
      labels.push_back(rng.uniform() < 0.2 + 0.2 * k ? 1 : 0);
    }
  }
  ProbeReport report = embedding_probes(z, patterns, labels);
  REQUIRE(report.norm_outcome_corr.defined);
  CHECK(report.norm_outcome_corr.value > 0.9);
}
