#include "uql/train.hpp"

#include <cmath>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "uql/ops.hpp"

namespace uql {

Tensor LabeledImages::batch(std::span<const std::size_t> indices) const {
  const std::size_t per = shape.numel();
  std::vector<double> out(indices.size() * per);
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] >= size()) throw std::out_of_range("LabeledImages::batch: index out of range");
    std::copy_n(pixels.begin() + static_cast<long>(indices[i] * per), per, out.begin() + static_cast<long>(i * per));
  }
  return Tensor({indices.size(), shape.channels, shape.height, shape.width}, std::move(out));
}

Tensor LabeledImages::all() const {
  return Tensor({size(), shape.channels, shape.height, shape.width}, pixels);
}

std::vector<int> LabeledImages::batch_labels(std::span<const std::size_t> indices) const {
  std::vector<int> out;
  out.reserve(indices.size());
  for (std::size_t i : indices) out.push_back(labels.at(i));
  return out;
}

LabeledImages LabeledImages::subset(std::span<const std::size_t> indices) const {
  LabeledImages out;
  out.shape = shape;
  const std::size_t per = shape.numel();
  out.pixels.reserve(indices.size() * per);
  for (std::size_t i : indices) {
    out.pixels.insert(out.pixels.end(), pixels.begin() + static_cast<long>(i * per),
                      pixels.begin() + static_cast<long>((i + 1) * per));
    out.labels.push_back(labels.at(i));
  }
  return out;
}

void validate(const TrainConfig& cfg) {
  if (!(cfg.learning_rate >= 0.0) || !std::isfinite(cfg.learning_rate)) {
    throw std::invalid_argument("train config: learning_rate must be a nonnegative finite value");
  }
  if (cfg.epochs == 0) throw std::invalid_argument("train config: epochs must be positive");
  if (cfg.batch_size == 0) throw std::invalid_argument("train config: batch_size must be positive");
  if (!(cfg.beta1 > 0.0 && cfg.beta1 < 1.0) || !(cfg.beta2 > 0.0 && cfg.beta2 < 1.0)) {
    throw std::invalid_argument("train config: Adam betas must lie in (0,1)");
  }
  if (!(cfg.epsilon > 0.0)) throw std::invalid_argument("train config: epsilon must be positive");
}

Adam::Adam(std::vector<Tensor> params, const TrainConfig& cfg)
    : params_(std::move(params)), lr_(cfg.learning_rate), beta1_(cfg.beta1), beta2_(cfg.beta2), eps_(cfg.epsilon) {
  for (const Tensor& p : params_) {
    m_.emplace_back(p.numel(), 0.0);
    v_.emplace_back(p.numel(), 0.0);
  }
}

void Adam::step() {
  ++t_;
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (std::size_t k = 0; k < params_.size(); ++k) {
    Tensor& p = params_[k];
    if (!p.has_grad()) continue;
    const auto g = p.grad();
    auto w = p.mutable_values();
    auto& m = m_[k];
    auto& v = v_[k];
    for (std::size_t i = 0; i < w.size(); ++i) {
      m[i] = beta1_ * m[i] + (1.0 - beta1_) * g[i];
      v[i] = beta2_ * v[i] + (1.0 - beta2_) * g[i] * g[i];
      w[i] -= lr_ * (m[i] / c1) / (std::sqrt(v[i] / c2) + eps_);
    }
  }
}

void Adam::zero_grad() {
  for (Tensor& p : params_) p.zero_grad();
}

TrainTrace run_training(const TrainingHooks& hooks, std::size_t train_size, const TrainConfig& cfg) {
  validate(cfg);
  if (train_size == 0) throw std::invalid_argument("train: empty training set");
  Adam adam(hooks.parameters, cfg);
  Rng rng(cfg.seed);
  std::vector<std::size_t> order(train_size);
  std::iota(order.begin(), order.end(), 0);

  TrainTrace trace;
  trace.initial_val_loss = hooks.validation_loss ? hooks.validation_loss() : 0.0;
  double best = INFINITY;
  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    Rng epoch_rng = rng.split(epoch);
    shuffle(std::span<std::size_t>(order), epoch_rng);
    double total = 0.0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < train_size; start += cfg.batch_size) {
      const std::size_t end = std::min(train_size, start + cfg.batch_size);
      std::span<const std::size_t> idx(order.data() + start, end - start);
      adam.zero_grad();
      GradTape::current().clear();
      Tensor loss = hooks.batch_loss(idx, epoch_rng);
      const double value = loss.item();
      if (!std::isfinite(value)) {
        std::ostringstream os;
        os << "train: non-finite loss " << value << " at epoch " << epoch << ", batch " << batches;
        GradTape::current().clear();
        throw std::runtime_error(os.str());
      }
      backward(loss);
      adam.step();
      total += value;
      ++batches;
    }
    EpochStats stats;
    stats.epoch = epoch;
    stats.train_loss = total / static_cast<double>(batches);
    stats.val_loss = hooks.validation_loss ? hooks.validation_loss() : stats.train_loss;
    if (!std::isfinite(stats.val_loss)) {
      throw std::runtime_error("train: non-finite validation loss at epoch " + std::to_string(epoch));
    }
    trace.epochs.push_back(stats);
    if (stats.val_loss < best) {
      best = stats.val_loss;
      trace.best_epoch = epoch;
      hooks.save_best();
    }
  }
  adam.zero_grad();
  return trace;
}

double evaluate_loss(const DeterministicModel& model, const LabeledImages& data) {
  NoGradGuard guard;
  constexpr std::size_t kChunk = 128;
  double total = 0.0;
  std::vector<std::size_t> idx;
  for (std::size_t start = 0; start < data.size(); start += kChunk) {
    const std::size_t end = std::min(data.size(), start + kChunk);
    idx.resize(end - start);
    std::iota(idx.begin(), idx.end(), start);
    const Tensor logits = forward(model, data.batch(idx));
    total += ops::cross_entropy(logits, data.batch_labels(idx)).item() * static_cast<double>(idx.size());
  }
  return total / static_cast<double>(data.size());
}

TrainResult train(const DeterministicModel& initial, const LabeledImages& train_set,
                  const LabeledImages& val_set, const TrainConfig& cfg) {
  for (int y : train_set.labels) {
    if (y < 0 || static_cast<std::size_t>(y) >= initial.spec.num_classes) {
      throw std::invalid_argument("train: label " + std::to_string(y) + " outside [0," +
                                  std::to_string(initial.spec.num_classes) + ")");
    }
  }
  TrainResult result;
  DeterministicModel model = initial.clone();
  model.set_requires_grad(true);
  result.model = model.clone();

  TrainingHooks hooks;
  hooks.parameters = model.parameters();
  hooks.batch_loss = [&](std::span<const std::size_t> idx, Rng& rng) {
    ForwardOptions opts;
    opts.dropout = DropoutMode::train;
    opts.rng = &rng;
    return ops::cross_entropy(forward(model, train_set.batch(idx), opts), train_set.batch_labels(idx));
  };
  if (val_set.size() > 0) {
    hooks.validation_loss = [&] { return evaluate_loss(model, val_set); };
  }
  hooks.save_best = [&] { result.model = model.clone(); };
  result.trace = run_training(hooks, train_set.size(), cfg);
  return result;
}

}  // namespace uql
