#include <gtest/gtest.h>

#include <cmath>

#include "c2f/metrics.hpp"
#include "c2f/rng.hpp"
#include "oracles.hpp"

using namespace c2f;

namespace {

EvalBatch batch(std::size_t n, std::size_t c, std::vector<double> scores, std::vector<std::uint8_t> labels,
                std::vector<std::size_t> ks = {3, 5}) {
  EvalBatch b;
  b.samples = n;
  b.classes = c;
  b.scores = std::move(scores);
  b.labels = std::move(labels);
  b.ks = std::move(ks);
  return b;
}

EvalBatch random_batch(Rng& rng, bool coarse) {
  const std::size_t n = 1 + rng.below(8), c = 1 + rng.below(6);
  EvalBatch b;
  b.samples = n;
  b.classes = c;
  b.ks = {1 + rng.below(c + 1), 1 + rng.below(c + 1)};
  for (std::size_t i = 0; i < n * c; ++i) {
    // Coarse scores produce plenty of ties.
    b.scores.push_back(coarse ? static_cast<double>(rng.below(4)) / 4.0 : rng.uniform());
    b.labels.push_back(rng.uniform() < 0.4);
  }
  return b;
}

void expect_matches_oracle(const EvalBatch& b) {
  const MetricsReport r = evaluate(b);
  const oracle::Metrics m = oracle::metrics(b);
  bool any_pos = false;
  for (auto y : b.labels) any_pos |= y != 0;
  if (!any_pos) return;  // every row excluded: nothing to compare per sample
  for (std::size_t ki = 0; ki < b.ks.size(); ++ki) {
    const std::size_t k = b.ks[ki];
    EXPECT_EQ(r.get("precision", k), m.p[ki]);
    EXPECT_EQ(r.get("recall", k), m.r[ki]);
    EXPECT_EQ(r.get("f1", k), m.f[ki]);
    EXPECT_EQ(r.get("hamming", k), m.h[ki]);
    EXPECT_EQ(r.get("accuracy", k), m.a[ki]);
  }
  EXPECT_EQ(r.get("one_error"), m.one_error);
  EXPECT_EQ(r.get("coverage"), m.coverage);
  EXPECT_EQ(r.get("rank_loss"), m.rank_loss);
  EXPECT_EQ(r.get("mAP"), m.map);
}

}  // namespace

TEST(Metrics, PerfectScores) {
  EvalBatch b = batch(3, 4, {1, 0, 1, 0, 0, 1, 0, 0, 1, 1, 1, 0}, {1, 0, 1, 0, 0, 1, 0, 0, 1, 1, 1, 0});
  MetricsReport r = evaluate(b);
  EXPECT_EQ(r.get("one_error"), 0.0);
  EXPECT_EQ(r.get("rank_loss"), 0.0);
  EXPECT_EQ(r.get("mAP"), 1.0);
  EXPECT_DOUBLE_EQ(r.get("coverage"), (2.0 + 1.0 + 3.0) / 3.0 - 1.0);
}

TEST(Metrics, WorkedSingleSample) {
  MetricsReport r = evaluate(batch(1, 4, {0.9, 0.8, 0.2, 0.1}, {1, 0, 1, 0}, {3}));
  EXPECT_DOUBLE_EQ(r.get("precision", 3), 2.0 / 3.0);
  EXPECT_EQ(r.get("recall", 3), 1.0);
  EXPECT_EQ(r.get("one_error"), 0.0);
  EXPECT_EQ(r.get("coverage"), 2.0);
  EXPECT_EQ(r.get("rank_loss"), 0.25);
  EXPECT_DOUBLE_EQ(r.get("f1", 3), 0.8);
  EXPECT_EQ(r.get("hamming", 3), 0.25);
  EXPECT_DOUBLE_EQ(r.get("accuracy", 3), 2.0 / 3.0);
}

TEST(Metrics, AntiPerfectScores) {
  MetricsReport r = evaluate(batch(2, 3, {0, 1, 1, 1, 0, 0}, {1, 0, 0, 0, 1, 1}));
  EXPECT_EQ(r.get("one_error"), 1.0);
  EXPECT_EQ(r.get("rank_loss"), 1.0);
}

TEST(Metrics, TiesBreakTowardLowerIndexAndCountHalf) {
  MetricsReport r = evaluate(batch(1, 3, {0.5, 0.5, 0.5}, {0, 1, 0}, {1}));
  EXPECT_EQ(r.get("precision", 1), 0.0);  // class 0 wins the tie
  EXPECT_EQ(r.get("one_error"), 1.0);
  EXPECT_EQ(r.get("coverage"), 1.0);
  EXPECT_EQ(r.get("rank_loss"), 0.5);
}

TEST(Metrics, RowsWithoutPositivesAreExcludedAndCounted) {
  MetricsReport r = evaluate(batch(2, 2, {0.9, 0.1, 0.8, 0.3}, {1, 0, 0, 0}, {1}));
  EXPECT_EQ(r.excluded_rows, 1u);
  EXPECT_EQ(r.get("precision", 1), 1.0);
  EXPECT_EQ(r.get("one_error"), 0.0);
}

TEST(Metrics, ClassesWithoutPositivesLeaveMapAverage) {
  // Class 1 never positive; class 0 ranked perfectly.
  MetricsReport r = evaluate(batch(2, 2, {0.9, 0.5, 0.1, 0.5}, {1, 0, 0, 0}, {1}));
  EXPECT_EQ(r.get("mAP"), 1.0);
}

TEST(Metrics, Errors) {
  EXPECT_THROW(evaluate(EvalBatch{}), std::invalid_argument);
  EXPECT_THROW(evaluate(batch(1, 2, {0.1}, {1, 0})), std::invalid_argument);
  EXPECT_THROW(evaluate(batch(1, 2, {0.1, 0.2}, {1, 0}, {0})), std::invalid_argument);
  EXPECT_THROW(evaluate(batch(1, 2, {0.1, 0.2}, {1, 0})).get("precision", 7), std::out_of_range);
}

TEST(Metrics, ReportFormats) {
  MetricsReport r = evaluate(batch(1, 4, {0.9, 0.8, 0.2, 0.1}, {1, 0, 1, 0}, {3}));
  const std::string csv = r.csv();
  EXPECT_EQ(csv.rfind("metric,k,value\n", 0), 0u);
  EXPECT_NE(csv.find("precision,3,0.6667\n"), std::string::npos);
  EXPECT_NE(csv.find("rank_loss,,0.2500\n"), std::string::npos);
  EXPECT_NE(r.text().find("precision@3:"), std::string::npos);
  EXPECT_NE(r.text().find("mAP:"), std::string::npos);
}

TEST(Metrics, MatchesOracleOnRandomBatches) {
  for (std::uint64_t s = 0; s < 300; ++s) {
    Rng rng(derive_seed(1, s));
    expect_matches_oracle(random_batch(rng, s % 2 == 0));
  }
}

TEST(Metrics, BoundsHold) {
  for (std::uint64_t s = 0; s < 200; ++s) {
    Rng rng(derive_seed(2, s));
    const EvalBatch b = random_batch(rng, false);
    for (const MetricRow& row : evaluate(b).rows) {
      EXPECT_GE(row.value, 0.0);
      if (row.name == "coverage") EXPECT_LE(row.value, static_cast<double>(b.classes - 1));
      else EXPECT_LE(row.value, 1.0) << row.name;
    }
  }
}

TEST(Metrics, RankInvariantUnderIncreasingTransforms) {
  for (std::uint64_t s = 0; s < 100; ++s) {
    Rng rng(derive_seed(3, s));
    EvalBatch b = random_batch(rng, s % 2 == 0);
    const MetricsReport base = evaluate(b);
    for (double& v : b.scores) v = std::exp(3.0 * v) - 7.0;
    const MetricsReport moved = evaluate(b);
    ASSERT_EQ(base.rows.size(), moved.rows.size());
    for (std::size_t i = 0; i < base.rows.size(); ++i) EXPECT_EQ(base.rows[i].value, moved.rows[i].value);
  }
}
