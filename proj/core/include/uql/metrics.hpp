#pragma once

#include <cstddef>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "uql/bayes.hpp"
#include "uql/nn.hpp"
#include "uql/rng.hpp"
#include "uql/tensor.hpp"

namespace uql {

// n Monte-Carlo probability vectors over K classes for one input.
class PredictiveDistribution {
 public:
  // samples is n x K row-major. Rows must be probability vectors (entries in
  // [0,1], sums within 1e-9 of 1).
  PredictiveDistribution(std::size_t n, std::size_t k, std::vector<double> samples);

  std::size_t n() const { return n_; }
  std::size_t k() const { return k_; }
  std::span<const double> row(std::size_t i) const { return {samples_.data() + i * k_, k_}; }
  std::span<const double> samples() const { return samples_; }
  std::span<const double> mean_probs() const { return mean_; }

 private:
  std::size_t n_;
  std::size_t k_;
  std::vector<double> samples_;
  std::vector<double> mean_;
};

// Shannon entropy in nats with 0 ln 0 = 0.
double entropy_nats(std::span<const double> probs);

// Entropy of the MC-mean distribution.
double predictive_uncertainty(const PredictiveDistribution& d);
// Predictive entropy minus mean per-pass entropy (mutual information).
// Clamped into [0, PU] against rounding; identical passes give exactly 0.
double model_uncertainty(const PredictiveDistribution& d);
// Mean over classes of the population variance of sampled probabilities.
// Requires n >= 2.
double variance_uncertainty(const PredictiveDistribution& d);

// n stochastic passes with weight sampling. Pass i uses rng.split(i), so the
// result does not depend on the number of worker threads.
std::vector<PredictiveDistribution> predict_mc(const BayesianModel& model, const Tensor& batch,
                                               std::size_t n, const Rng& rng);
// MC dropout: n passes with fresh dropout masks (mc_inference mode).
std::vector<PredictiveDistribution> predict_mc(const DeterministicModel& model, const Tensor& batch,
                                               std::size_t n, const Rng& rng);
// Wraps a single deterministic softmax pass as n = 1 distributions.
std::vector<PredictiveDistribution> predict_single(const DeterministicModel& model, const Tensor& batch);

struct UncertaintyRecord {
  std::string sample_id;
  int true_class = 0;
  int predicted_class = 0;
  bool correct = false;
  double pu = 0.0;
  double mu = 0.0;
  double var_u = 0.0;
};

struct UncertaintyReport {
  std::vector<UncertaintyRecord> records;
  double mean_pu = 0.0;
  double mean_mu = 0.0;
  double mean_var_u = 0.0;
  double accuracy = 0.0;  // percent
  std::size_t num_classes = 2;
};

// var_u is left at 0 for single-pass distributions.
UncertaintyReport build_report(std::span<const PredictiveDistribution> dists, std::span<const int> labels,
                               std::span<const std::string> sample_ids = {});

double accuracy_percent(std::size_t correct, std::size_t total);

enum class UncertaintyKey { pu, mu, var_u };
const char* key_name(UncertaintyKey key);
UncertaintyKey parse_key(const std::string& name);
double key_value(const UncertaintyRecord& r, UncertaintyKey key);

struct RetentionCurve {
  std::vector<double> fractions;
  std::vector<double> accuracies;
  UncertaintyKey ranking_key = UncertaintyKey::pu;
};

// Keeps the ceil(f * N) least uncertain records (ties by record order) and
// reports their accuracy for every fraction f in (0, 1].
RetentionCurve retention_curve(const UncertaintyReport& report, std::span<const double> fractions,
                               UncertaintyKey key = UncertaintyKey::pu);
std::vector<double> default_retention_fractions();  // 0.1, 0.2, ..., 1.0

enum class HistogramSplit { correctness, label };

struct DensityHistogram {
  std::vector<double> edges;  // bins + 1 entries
  std::vector<std::string> groups;
  std::vector<std::vector<std::size_t>> counts;  // [group][bin]
  UncertaintyKey key = UncertaintyKey::pu;
  bool normalized = false;

  std::size_t total() const;
};

// Bins span [0, ln K] for pu/mu and [0, 0.25] for var_u; values above the
// range land in the last bin.
DensityHistogram density_histogram(const UncertaintyReport& report, std::size_t bins,
                                   HistogramSplit split = HistogramSplit::correctness,
                                   UncertaintyKey key = UncertaintyKey::pu);

// CSV exports. Headers:
//   report:    sample_id,true,pred,correct,pu,mu,var_u
//   retention: fraction,accuracy
//   histogram: bin_lo,bin_hi,group,count
void write_report_csv(std::ostream& out, const UncertaintyReport& report);
UncertaintyReport read_report_csv(std::istream& in, std::size_t num_classes);
void write_retention_csv(std::ostream& out, const RetentionCurve& curve);
void write_histogram_csv(std::ostream& out, const DensityHistogram& hist);

std::string format_number(double v);  // 10 significant digits, locale-independent

}  // namespace uql
