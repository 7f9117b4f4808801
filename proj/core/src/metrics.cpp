#include "uql/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <istream>
#include <numeric>
#include <ostream>
#include <sstream>
#include <stdexcept>

#include "uql/ops.hpp"
#include "uql/parallel.hpp"

namespace uql {

PredictiveDistribution::PredictiveDistribution(std::size_t n, std::size_t k, std::vector<double> samples)
    : n_(n), k_(k), samples_(std::move(samples)), mean_(k, 0.0) {
  if (n == 0) throw std::invalid_argument("PredictiveDistribution: need at least one sample");
  if (k == 0) throw std::invalid_argument("PredictiveDistribution: need at least one class");
  if (samples_.size() != n * k) {
    throw std::invalid_argument("PredictiveDistribution: expected " + std::to_string(n * k) + " values, got " +
                                std::to_string(samples_.size()));
  }
  for (std::size_t i = 0; i < n; ++i) {
    double total = 0.0;
    for (std::size_t c = 0; c < k; ++c) {
      const double p = samples_[i * k + c];
      if (!(p >= 0.0 && p <= 1.0)) {
        throw std::invalid_argument("PredictiveDistribution: probability outside [0,1] in row " + std::to_string(i));
      }
      total += p;
    }
    if (std::abs(total - 1.0) > 1e-9) {
      throw std::invalid_argument("PredictiveDistribution: row " + std::to_string(i) + " sums to " +
                                  std::to_string(total));
    }
  }
  // Accumulated as offsets from the first row so identical rows give a mean
  // equal to that row bit for bit.
  for (std::size_t c = 0; c < k; ++c) {
    double offset = 0.0;
    for (std::size_t i = 1; i < n; ++i) offset += samples_[i * k + c] - samples_[c];
    mean_[c] = samples_[c] + offset / static_cast<double>(n);
  }
}

double entropy_nats(std::span<const double> probs) {
  double h = 0.0;
  for (double p : probs) {
    if (p > 0.0) h -= p * std::log(p);
  }
  return h;
}

double predictive_uncertainty(const PredictiveDistribution& d) {
  const double bound = std::log(static_cast<double>(d.k()));
  return std::clamp(entropy_nats(d.mean_probs()), 0.0, bound);
}

// Evaluated as the mean KL divergence of each pass from the MC mean, which
// equals entropy-of-mean minus mean-entropy and is exactly 0 for identical
// passes.
double model_uncertainty(const PredictiveDistribution& d) {
  const auto mean = d.mean_probs();
  double total = 0.0;
  for (std::size_t i = 0; i < d.n(); ++i) {
    const auto row = d.row(i);
    for (std::size_t c = 0; c < d.k(); ++c) {
      if (row[c] > 0.0) total += row[c] * (std::log(row[c]) - std::log(mean[c]));
    }
  }
  return std::clamp(total / static_cast<double>(d.n()), 0.0, predictive_uncertainty(d));
}

double variance_uncertainty(const PredictiveDistribution& d) {
  if (d.n() < 2) throw std::invalid_argument("variance_uncertainty: need at least 2 samples");
  const auto mean = d.mean_probs();
  double total = 0.0;
  for (std::size_t c = 0; c < d.k(); ++c) {
    double acc = 0.0;
    for (std::size_t i = 0; i < d.n(); ++i) {
      const double diff = d.row(i)[c] - mean[c];
      acc += diff * diff;
    }
    total += acc / static_cast<double>(d.n());
  }
  return total / static_cast<double>(d.k());
}

namespace {

constexpr std::size_t kEvalChunk = 128;

// probs[pass] is a batch x K probability block.
std::vector<PredictiveDistribution> assemble(const std::vector<std::vector<double>>& probs, std::size_t batch,
                                             std::size_t k) {
  const std::size_t n = probs.size();
  std::vector<PredictiveDistribution> out;
  out.reserve(batch);
  for (std::size_t b = 0; b < batch; ++b) {
    std::vector<double> samples(n * k);
    for (std::size_t i = 0; i < n; ++i) {
      std::copy_n(probs[i].begin() + static_cast<long>(b * k), k, samples.begin() + static_cast<long>(i * k));
    }
    out.emplace_back(n, k, std::move(samples));
  }
  return out;
}

template <typename PassFn>
std::vector<PredictiveDistribution> run_passes(const Tensor& batch, std::size_t n, std::size_t k, PassFn pass) {
  if (n == 0) throw std::invalid_argument("predict_mc: n must be at least 1");
  if (batch.rank() != 4) throw std::invalid_argument("predict_mc: batch must be [N,C,H,W]");
  const std::size_t count = batch.dim(0);
  std::vector<std::vector<double>> probs(n);
  parallel_for(n, [&](std::size_t i) {
    NoGradGuard guard;
    probs[i].resize(count * k);
    pass(i, probs[i]);
  });
  return assemble(probs, count, k);
}

// Calls fn(chunk_tensor, offset) for consecutive chunks of the batch.
template <typename Fn>
void for_each_chunk(const Tensor& batch, Fn fn) {
  const std::size_t count = batch.dim(0);
  for (std::size_t start = 0; start < count; start += kEvalChunk) {
    const std::size_t end = std::min(count, start + kEvalChunk);
    fn(start == 0 && end == count ? batch : ops::slice(batch, 0, start, end), start);
  }
}

}  // namespace

std::vector<PredictiveDistribution> predict_mc(const BayesianModel& model, const Tensor& batch, std::size_t n,
                                               const Rng& rng) {
  const std::size_t k = model.spec.num_classes;
  return run_passes(batch, n, k, [&](std::size_t i, std::vector<double>& out) {
    Rng pass_rng = rng.split(i);
    const WeightNoise noise = draw_weight_noise(model, pass_rng);
    for_each_chunk(batch, [&](const Tensor& chunk, std::size_t offset) {
      const Tensor p = ops::softmax(bayesian_logits(model, chunk, &noise));
      std::copy(p.values().begin(), p.values().end(), out.begin() + static_cast<long>(offset * k));
    });
  });
}

std::vector<PredictiveDistribution> predict_mc(const DeterministicModel& model, const Tensor& batch, std::size_t n,
                                               const Rng& rng) {
  const std::size_t k = model.spec.num_classes;
  return run_passes(batch, n, k, [&](std::size_t i, std::vector<double>& out) {
    Rng pass_rng = rng.split(i);
    ForwardOptions opts;
    opts.dropout = DropoutMode::mc_inference;
    opts.rng = &pass_rng;
    for_each_chunk(batch, [&](const Tensor& chunk, std::size_t offset) {
      const Tensor p = ops::softmax(forward(model, chunk, opts));
      std::copy(p.values().begin(), p.values().end(), out.begin() + static_cast<long>(offset * k));
    });
  });
}

std::vector<PredictiveDistribution> predict_single(const DeterministicModel& model, const Tensor& batch) {
  const std::size_t k = model.spec.num_classes;
  return run_passes(batch, 1, k, [&](std::size_t, std::vector<double>& out) {
    for_each_chunk(batch, [&](const Tensor& chunk, std::size_t offset) {
      const Tensor p = ops::softmax(forward(model, chunk));
      std::copy(p.values().begin(), p.values().end(), out.begin() + static_cast<long>(offset * k));
    });
  });
}

double accuracy_percent(std::size_t correct, std::size_t total) {
  if (total == 0) return 0.0;
  return 100.0 * static_cast<double>(correct) / static_cast<double>(total);
}

UncertaintyReport build_report(std::span<const PredictiveDistribution> dists, std::span<const int> labels,
                               std::span<const std::string> sample_ids) {
  if (dists.size() != labels.size()) throw std::invalid_argument("build_report: one label per distribution required");
  if (!sample_ids.empty() && sample_ids.size() != dists.size()) {
    throw std::invalid_argument("build_report: one sample id per distribution required");
  }
  UncertaintyReport report;
  if (!dists.empty()) report.num_classes = dists.front().k();
  std::size_t correct = 0;
  for (std::size_t i = 0; i < dists.size(); ++i) {
    const PredictiveDistribution& d = dists[i];
    UncertaintyRecord r;
    r.sample_id = sample_ids.empty() ? std::to_string(i) : sample_ids[i];
    r.true_class = labels[i];
    r.predicted_class = static_cast<int>(argmax(d.mean_probs()));
    r.correct = r.true_class == r.predicted_class;
    r.pu = predictive_uncertainty(d);
    r.mu = model_uncertainty(d);
    r.var_u = d.n() >= 2 ? variance_uncertainty(d) : 0.0;
    correct += r.correct ? 1 : 0;
    report.mean_pu += r.pu;
    report.mean_mu += r.mu;
    report.mean_var_u += r.var_u;
    report.records.push_back(std::move(r));
  }
  if (!dists.empty()) {
    const double n = static_cast<double>(dists.size());
    report.mean_pu /= n;
    report.mean_mu /= n;
    report.mean_var_u /= n;
  }
  report.accuracy = accuracy_percent(correct, dists.size());
  return report;
}

const char* key_name(UncertaintyKey key) {
  switch (key) {
    case UncertaintyKey::pu: return "pu";
    case UncertaintyKey::mu: return "mu";
    case UncertaintyKey::var_u: return "var_u";
  }
  return "pu";
}

UncertaintyKey parse_key(const std::string& name) {
  if (name == "pu") return UncertaintyKey::pu;
  if (name == "mu") return UncertaintyKey::mu;
  if (name == "var_u") return UncertaintyKey::var_u;
  throw std::invalid_argument("unknown uncertainty key '" + name + "' (expected pu, mu or var_u)");
}

double key_value(const UncertaintyRecord& r, UncertaintyKey key) {
  switch (key) {
    case UncertaintyKey::pu: return r.pu;
    case UncertaintyKey::mu: return r.mu;
    case UncertaintyKey::var_u: return r.var_u;
  }
  return r.pu;
}

RetentionCurve retention_curve(const UncertaintyReport& report, std::span<const double> fractions,
                               UncertaintyKey key) {
  if (report.records.empty()) throw std::invalid_argument("retention_curve: empty report");
  if (fractions.empty()) throw std::invalid_argument("retention_curve: no fractions given");
  const std::size_t n = report.records.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return key_value(report.records[a], key) < key_value(report.records[b], key);
  });
  // prefix[m] = number of correct records among the m least uncertain
  std::vector<std::size_t> prefix(n + 1, 0);
  for (std::size_t i = 0; i < n; ++i) prefix[i + 1] = prefix[i] + (report.records[order[i]].correct ? 1 : 0);

  RetentionCurve curve;
  curve.ranking_key = key;
  for (double f : fractions) {
    if (!(f > 0.0 && f <= 1.0)) throw std::invalid_argument("retention_curve: fractions must lie in (0,1]");
    const double scaled = f * static_cast<double>(n);
    std::size_t keep = static_cast<std::size_t>(std::ceil(scaled - 1e-9 * std::max(1.0, scaled)));
    keep = std::clamp<std::size_t>(keep, 1, n);
    curve.fractions.push_back(f);
    curve.accuracies.push_back(accuracy_percent(prefix[keep], keep));
  }
  return curve;
}

std::vector<double> default_retention_fractions() {
  std::vector<double> out;
  for (int i = 1; i <= 10; ++i) out.push_back(i / 10.0);
  return out;
}

std::size_t DensityHistogram::total() const {
  std::size_t t = 0;
  for (const auto& g : counts) t = std::accumulate(g.begin(), g.end(), t);
  return t;
}

DensityHistogram density_histogram(const UncertaintyReport& report, std::size_t bins, HistogramSplit split,
                                   UncertaintyKey key) {
  if (bins < 2) throw std::invalid_argument("density_histogram: need at least 2 bins");
  DensityHistogram hist;
  hist.key = key;
  const double hi = key == UncertaintyKey::var_u ? 0.25 : std::log(static_cast<double>(std::max<std::size_t>(2, report.num_classes)));
  for (std::size_t b = 0; b <= bins; ++b) hist.edges.push_back(hi * static_cast<double>(b) / static_cast<double>(bins));
  if (split == HistogramSplit::correctness) {
    hist.groups = {"correct", "incorrect"};
  } else {
    for (std::size_t c = 0; c < report.num_classes; ++c) hist.groups.push_back("class_" + std::to_string(c));
  }
  hist.counts.assign(hist.groups.size(), std::vector<std::size_t>(bins, 0));
  for (const UncertaintyRecord& r : report.records) {
    const double v = key_value(r, key);
    auto bin = static_cast<long>(std::floor(v / hi * static_cast<double>(bins)));
    bin = std::clamp<long>(bin, 0, static_cast<long>(bins) - 1);
    std::size_t group = 0;
    if (split == HistogramSplit::correctness) {
      group = r.correct ? 0 : 1;
    } else {
      if (r.true_class < 0 || static_cast<std::size_t>(r.true_class) >= report.num_classes) {
        throw std::invalid_argument("density_histogram: label outside class range");
      }
      group = static_cast<std::size_t>(r.true_class);
    }
    ++hist.counts[group][static_cast<std::size_t>(bin)];
  }
  return hist;
}

std::string format_number(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

void write_report_csv(std::ostream& out, const UncertaintyReport& report) {
  out << "sample_id,true,pred,correct,pu,mu,var_u\n";
  for (const auto& r : report.records) {
    out << r.sample_id << ',' << r.true_class << ',' << r.predicted_class << ',' << (r.correct ? 1 : 0) << ','
        << format_number(r.pu) << ',' << format_number(r.mu) << ',' << format_number(r.var_u) << '\n';
  }
}

UncertaintyReport read_report_csv(std::istream& in, std::size_t num_classes) {
  std::string line;
  if (!std::getline(in, line) || line != "sample_id,true,pred,correct,pu,mu,var_u") {
    throw std::invalid_argument("report csv: unexpected header '" + line + "'");
  }
  UncertaintyReport report;
  report.num_classes = num_classes;
  std::size_t correct = 0;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    if (cells.size() != 7) throw std::invalid_argument("report csv: expected 7 columns in '" + line + "'");
    UncertaintyRecord r;
    r.sample_id = cells[0];
    r.true_class = std::stoi(cells[1]);
    r.predicted_class = std::stoi(cells[2]);
    r.correct = cells[3] == "1";
    r.pu = std::stod(cells[4]);
    r.mu = std::stod(cells[5]);
    r.var_u = std::stod(cells[6]);
    correct += r.correct ? 1 : 0;
    report.mean_pu += r.pu;
    report.mean_mu += r.mu;
    report.mean_var_u += r.var_u;
    report.records.push_back(r);
  }
  if (!report.records.empty()) {
    const double n = static_cast<double>(report.records.size());
    report.mean_pu /= n;
    report.mean_mu /= n;
    report.mean_var_u /= n;
  }
  report.accuracy = accuracy_percent(correct, report.records.size());
  return report;
}

void write_retention_csv(std::ostream& out, const RetentionCurve& curve) {
  out << "fraction,accuracy\n";
  for (std::size_t i = 0; i < curve.fractions.size(); ++i) {
    out << format_number(curve.fractions[i]) << ',' << format_number(curve.accuracies[i]) << '\n';
  }
}

void write_histogram_csv(std::ostream& out, const DensityHistogram& hist) {
  out << "bin_lo,bin_hi,group,count\n";
  for (std::size_t g = 0; g < hist.groups.size(); ++g) {
    for (std::size_t b = 0; b + 1 < hist.edges.size(); ++b) {
      out << format_number(hist.edges[b]) << ',' << format_number(hist.edges[b + 1]) << ',' << hist.groups[g] << ','
          << hist.counts[g][b] << '\n';
    }
  }
}

}  // namespace uql
