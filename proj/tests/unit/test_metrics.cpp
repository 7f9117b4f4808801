#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <vector>

#include "uql/metrics.hpp"
#include "uql/nn.hpp"
#include "uql/rng.hpp"

namespace uql {
namespace {

const double kLn2 = std::log(2.0);

PredictiveDistribution dist(std::size_t n, std::size_t k, std::vector<double> rows) {
  return PredictiveDistribution(n, k, std::move(rows));
}

PredictiveDistribution random_dist(Rng& rng, std::size_t n, std::size_t k) {
  std::vector<double> rows(n * k);
  for (std::size_t i = 0; i < n; ++i) {
    double s = 0;
    for (std::size_t c = 0; c < k; ++c) {
      // Occasional exact zeros exercise the 0 ln 0 convention.
      rows[i * k + c] = rng.uniform() < 0.1 ? 0.0 : -std::log(1.0 - rng.uniform());
      s += rows[i * k + c];
    }
    if (s == 0.0) {
      rows[i * k] = 1.0;
      s = 1.0;
    }
    for (std::size_t c = 0; c < k; ++c) rows[i * k + c] /= s;
  }
  return dist(n, k, rows);
}

TEST(Distribution, ValidatesRows) {
  EXPECT_THROW(dist(1, 2, {0.7, 0.7}), std::invalid_argument);
  EXPECT_THROW(dist(1, 2, {1.2, -0.2}), std::invalid_argument);
  EXPECT_THROW(dist(2, 2, {0.5, 0.5}), std::invalid_argument);
  EXPECT_THROW(dist(0, 2, {}), std::invalid_argument);
}

TEST(Distribution, MeanIsArithmeticMean) {
  const auto d = dist(2, 2, {0.9, 0.1, 0.7, 0.3});
  EXPECT_NEAR(d.mean_probs()[0], 0.8, 1e-15);
  EXPECT_NEAR(d.mean_probs()[1], 0.2, 1e-15);
}

TEST(Uncertainty, UniformAndCertain) {
  EXPECT_NEAR(predictive_uncertainty(dist(1, 2, {0.5, 0.5})), kLn2, 1e-12);
  EXPECT_EQ(predictive_uncertainty(dist(1, 2, {1.0, 0.0})), 0.0);
}

TEST(Uncertainty, TwoPassExample) {
  const auto d = dist(2, 2, {0.9, 0.1, 0.7, 0.3});
  const double pu = -0.8 * std::log(0.8) - 0.2 * std::log(0.2);
  const double h1 = -0.9 * std::log(0.9) - 0.1 * std::log(0.1);
  const double h2 = -0.7 * std::log(0.7) - 0.3 * std::log(0.3);
  EXPECT_NEAR(pu, 0.500402, 1e-6);
  EXPECT_NEAR(pu - 0.5 * (h1 + h2), 0.032429, 1e-6);
  EXPECT_NEAR(predictive_uncertainty(d), pu, 1e-14);
  EXPECT_NEAR(model_uncertainty(d), pu - 0.5 * (h1 + h2), 1e-14);
}

TEST(Uncertainty, MaximalDisagreement) {
  const auto d = dist(2, 2, {1, 0, 0, 1});
  EXPECT_NEAR(model_uncertainty(d), kLn2, 1e-12);
  EXPECT_EQ(variance_uncertainty(d), 0.25);
}

TEST(Uncertainty, IdenticalRowsHaveNoModelUncertainty) {
  const auto d = dist(3, 3, {0.2, 0.3, 0.5, 0.2, 0.3, 0.5, 0.2, 0.3, 0.5});
  EXPECT_EQ(model_uncertainty(d), 0.0);
  EXPECT_LE(variance_uncertainty(d), 1e-12);
  EXPECT_GT(predictive_uncertainty(d), 0.0);
}

TEST(Uncertainty, VarianceNeedsTwoPasses) {
  EXPECT_THROW(variance_uncertainty(dist(1, 2, {0.5, 0.5})), std::invalid_argument);
}

TEST(Uncertainty, VarianceUnchangedByDuplicatingRows) {
  Rng rng(4);
  const auto d = random_dist(rng, 5, 3);
  std::vector<double> doubled(d.samples().begin(), d.samples().end());
  doubled.insert(doubled.end(), d.samples().begin(), d.samples().end());
  EXPECT_NEAR(variance_uncertainty(dist(10, 3, doubled)), variance_uncertainty(d), 1e-15);
}

TEST(UncertaintyProperty, JensenAndEntropyBounds) {
  Rng rng(2025);
  for (int t = 0; t < 10000; ++t) {
    const std::size_t k = 2 + rng.uniform_index(5);
    const std::size_t n = 1 + rng.uniform_index(12);
    const auto d = random_dist(rng, n, k);
    const double pu = predictive_uncertainty(d), mu = model_uncertainty(d);
    ASSERT_GE(mu, 0.0);
    ASSERT_LE(mu, pu + 1e-12);
    ASSERT_LE(pu, std::log(static_cast<double>(k)) + 1e-12);
  }
}

TEST(UncertaintyProperty, RowPermutationInvariance) {
  Rng rng(31);
  for (int t = 0; t < 200; ++t) {
    const auto d = random_dist(rng, 6, 3);
    std::vector<std::size_t> perm(6);
    std::iota(perm.begin(), perm.end(), 0);
    shuffle(std::span<std::size_t>(perm), rng);
    std::vector<double> rows;
    for (std::size_t i : perm) rows.insert(rows.end(), d.row(i).begin(), d.row(i).end());
    const auto p = dist(6, 3, rows);
    EXPECT_NEAR(predictive_uncertainty(p), predictive_uncertainty(d), 1e-14);
    EXPECT_NEAR(model_uncertainty(p), model_uncertainty(d), 1e-14);
    EXPECT_NEAR(variance_uncertainty(p), variance_uncertainty(d), 1e-15);
  }
}

TEST(PredictMc, DropoutFreeModelGivesIdenticalRows) {
  Rng rng(3);
  ModelSpec spec = default_detector_spec(2, 0.0);
  const DeterministicModel m = build_model(spec, rng);
  Tensor x({2, 3, 32, 32}, 0.4);
  const auto dists = predict_mc(m, x, 5, Rng(9));
  for (const auto& d : dists) {
    for (std::size_t i = 1; i < d.n(); ++i) {
      EXPECT_TRUE(std::equal(d.row(i).begin(), d.row(i).end(), d.row(0).begin()));
    }
    EXPECT_EQ(model_uncertainty(d), 0.0);
  }
  EXPECT_THROW(predict_mc(m, x, 0, Rng(9)), std::invalid_argument);
}

TEST(PredictMc, SinglePassMeanEqualsPass) {
  Rng rng(3);
  const DeterministicModel m = build_model(default_detector_spec(2, 0.5), rng);
  Tensor x({1, 3, 32, 32}, 0.6);
  const auto d = predict_mc(m, x, 1, Rng(2))[0];
  EXPECT_TRUE(std::equal(d.mean_probs().begin(), d.mean_probs().end(), d.row(0).begin()));
}

// Report with explicit uncertainty values and correctness flags.
UncertaintyReport make_report(const std::vector<double>& u, const std::vector<bool>& correct) {
  UncertaintyReport r;
  std::size_t ok = 0;
  for (std::size_t i = 0; i < u.size(); ++i) {
    UncertaintyRecord rec;
    rec.true_class = 1;
    rec.predicted_class = correct[i] ? 1 : 0;
    rec.correct = correct[i];
    rec.pu = u[i];
    ok += correct[i];
    r.records.push_back(rec);
  }
  r.accuracy = accuracy_percent(ok, u.size());
  return r;
}

// Independent oracle: stable sort by uncertainty, then count.
std::vector<double> retention_oracle(const std::vector<double>& u, const std::vector<bool>& correct,
                                     const std::vector<double>& fractions) {
  std::vector<std::size_t> order(u.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return u[a] < u[b]; });
  std::vector<double> out;
  for (double f : fractions) {
    const auto keep = static_cast<std::size_t>(std::ceil(f * static_cast<double>(u.size()) - 1e-12));
    std::size_t ok = 0;
    for (std::size_t i = 0; i < keep; ++i) ok += correct[order[i]];
    out.push_back(100.0 * static_cast<double>(ok) / static_cast<double>(keep));
  }
  return out;
}

TEST(Retention, PerfectRankingAtNinetyPercent) {
  std::vector<double> u(10, 0.0);
  std::vector<bool> c(10, true);
  u[3] = 1.0;
  c[3] = false;
  const auto report = make_report(u, c);
  const auto curve = retention_curve(report, default_retention_fractions());
  for (std::size_t i = 0; i < curve.fractions.size(); ++i) {
    if (curve.fractions[i] <= 0.9 + 1e-12) EXPECT_EQ(curve.accuracies[i], 100.0);
  }
  EXPECT_EQ(curve.accuracies.back(), report.accuracy);
}

TEST(Retention, MatchesOracleOverAllOrderings) {
  const std::size_t n = 6;
  const std::vector<double> fractions{1.0 / 6, 0.25, 0.5, 0.7, 5.0 / 6, 1.0};
  for (unsigned mask = 0; mask < (1u << n); ++mask) {
    std::vector<bool> c(n);
    for (std::size_t i = 0; i < n; ++i) c[i] = (mask >> i) & 1u;
    std::vector<double> u{0, 1, 2, 3, 4, 5};
    do {
      const auto curve = retention_curve(make_report(u, c), fractions);
      const auto expected = retention_oracle(u, c, fractions);
      for (std::size_t i = 0; i < fractions.size(); ++i) ASSERT_EQ(curve.accuracies[i], expected[i]);
    } while (std::next_permutation(u.begin(), u.end()));
  }
}

TEST(Retention, OracleRankingIsNonIncreasingAndAntiOracleNonDecreasing) {
  for (std::size_t n : {8u, 10u}) {
    std::vector<double> fractions;
    for (std::size_t i = 1; i <= n; ++i) fractions.push_back(static_cast<double>(i) / static_cast<double>(n));
    for (unsigned mask = 1; mask < (1u << n); ++mask) {
      std::vector<bool> c(n);
      std::vector<double> oracle(n), anti(n);
      for (std::size_t i = 0; i < n; ++i) {
        c[i] = (mask >> i) & 1u;
        oracle[i] = c[i] ? 0.0 : 1.0;
        anti[i] = 1.0 - oracle[i];
      }
      const auto up = retention_curve(make_report(oracle, c), fractions).accuracies;
      const auto down = retention_curve(make_report(anti, c), fractions).accuracies;
      for (std::size_t i = 1; i < n; ++i) {
        ASSERT_LE(up[i], up[i - 1] + 1e-12);
        ASSERT_GE(down[i], down[i - 1] - 1e-12);
      }
      ASSERT_EQ(up.back(), make_report(oracle, c).accuracy);
      ASSERT_EQ(down.back(), make_report(oracle, c).accuracy);
    }
  }
}

TEST(Retention, RejectsBadInput) {
  const auto report = make_report({0.1}, {true});
  EXPECT_THROW(retention_curve(report, std::vector<double>{}), std::invalid_argument);
  EXPECT_THROW(retention_curve(report, std::vector<double>{0.0}), std::invalid_argument);
  EXPECT_THROW(retention_curve(UncertaintyReport{}, default_retention_fractions()), std::invalid_argument);
}

TEST(Histogram, ZeroUncertaintyLandsInFirstBin) {
  const auto report = make_report(std::vector<double>(20, 0.0), std::vector<bool>(20, true));
  const auto h = density_histogram(report, 5);
  EXPECT_EQ(h.total(), 20u);
  std::size_t first = 0;
  for (const auto& g : h.counts) first += g[0];
  EXPECT_EQ(first, 20u);
  EXPECT_NEAR(h.edges.back(), kLn2, 1e-15);
}

TEST(Histogram, UniformValuesSplitEvenly) {
  Rng rng(8);
  const std::size_t n = 10000;
  std::vector<double> u(n);
  std::vector<bool> c(n);
  for (std::size_t i = 0; i < n; ++i) {
    u[i] = kLn2 * rng.uniform();
    c[i] = rng.bernoulli(0.7);
  }
  const auto h = density_histogram(make_report(u, c), 2);
  EXPECT_EQ(h.total(), n);
  std::size_t low = 0;
  for (const auto& g : h.counts) low += g[0];
  EXPECT_NEAR(static_cast<double>(low) / n, 0.5, 0.05);
  EXPECT_THROW(density_histogram(make_report(u, c), 1), std::invalid_argument);
}

TEST(Histogram, LabelSplitConservesCounts) {
  UncertaintyReport r;
  r.num_classes = 3;
  for (int i = 0; i < 30; ++i) {
    UncertaintyRecord rec;
    rec.true_class = i % 3;
    rec.pu = 0.03 * i;
    r.records.push_back(rec);
  }
  const auto h = density_histogram(r, 4, HistogramSplit::label);
  EXPECT_EQ(h.groups.size(), 3u);
  EXPECT_EQ(h.total(), 30u);
}

TEST(ReportCsv, RoundTripPreservesRecords) {
  Rng rng(5);
  std::vector<PredictiveDistribution> dists;
  std::vector<int> labels;
  std::vector<std::string> ids;
  for (int i = 0; i < 12; ++i) {
    dists.push_back(random_dist(rng, 4, 2));
    labels.push_back(i % 2);
    ids.push_back("s" + std::to_string(i));
  }
  const auto report = build_report(dists, labels, ids);
  std::stringstream ss;
  write_report_csv(ss, report);
  EXPECT_EQ(ss.str().substr(0, ss.str().find('\n')), "sample_id,true,pred,correct,pu,mu,var_u");
  const auto back = read_report_csv(ss, 2);
  ASSERT_EQ(back.records.size(), 12u);
  for (std::size_t i = 0; i < 12; ++i) {
    EXPECT_EQ(back.records[i].sample_id, report.records[i].sample_id);
    EXPECT_EQ(back.records[i].correct, report.records[i].correct);
    EXPECT_NEAR(back.records[i].pu, report.records[i].pu, 1e-9);
    EXPECT_NEAR(back.records[i].mu, report.records[i].mu, 1e-9);
  }
  EXPECT_EQ(back.accuracy, report.accuracy);
}

TEST(ReportCsv, FormatIsLocaleIndependent) {
  EXPECT_EQ(format_number(0.5), "0.5");
  EXPECT_EQ(format_number(100.0), "100");
  std::stringstream bad("wrong,header\n");
  EXPECT_THROW(read_report_csv(bad, 2), std::invalid_argument);
}

TEST(Report, AccuracyAndMeans) {
  std::vector<PredictiveDistribution> dists{dist(2, 2, {0.9, 0.1, 0.7, 0.3}), dist(2, 2, {1, 0, 0, 1})};
  const std::vector<int> labels{0, 1};
  const auto r = build_report(dists, labels);
  EXPECT_EQ(r.accuracy, 50.0);  // second is a tie, resolved to class 0
  EXPECT_NEAR(r.mean_mu, 0.5 * (model_uncertainty(dists[0]) + model_uncertainty(dists[1])), 1e-15);
  EXPECT_EQ(r.records[1].var_u, 0.25);
}

}  // namespace
}  // namespace uql
