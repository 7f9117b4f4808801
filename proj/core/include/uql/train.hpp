#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "uql/nn.hpp"
#include "uql/rng.hpp"
#include "uql/tensor.hpp"

namespace uql {

// In-memory image set with one integer label per image.
struct LabeledImages {
  ImageShape shape;
  std::vector<double> pixels;  // N * C * H * W
  std::vector<int> labels;

  std::size_t size() const { return labels.size(); }
  Tensor batch(std::span<const std::size_t> indices) const;
  Tensor all() const;
  std::vector<int> batch_labels(std::span<const std::size_t> indices) const;
  LabeledImages subset(std::span<const std::size_t> indices) const;
};

struct TrainConfig {
  double learning_rate = 1e-4;
  std::size_t epochs = 50;
  std::size_t batch_size = 64;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  std::uint64_t seed = 7;
};

void validate(const TrainConfig& cfg);

// Adam with bias correction. Parameters whose gradient was never populated
// are skipped for that step. From a fresh state a zero gradient gives a zero
// first moment and therefore a zero update.
class Adam {
 public:
  Adam(std::vector<Tensor> params, const TrainConfig& cfg);

  void step();
  void zero_grad();
  std::size_t steps() const { return t_; }

 private:
  std::vector<Tensor> params_;
  std::vector<std::vector<double>> m_;
  std::vector<std::vector<double>> v_;
  double lr_, beta1_, beta2_, eps_;
  std::size_t t_ = 0;
};

struct EpochStats {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double val_loss = 0.0;
};

struct TrainTrace {
  double initial_val_loss = 0.0;
  std::vector<EpochStats> epochs;
  std::size_t best_epoch = 0;
};

// Objective-agnostic minibatch loop shared by deterministic and Bayesian
// training. The best-validation-loss snapshot is kept through save_best.
struct TrainingHooks {
  std::vector<Tensor> parameters;
  std::function<Tensor(std::span<const std::size_t> batch, Rng& rng)> batch_loss;
  std::function<double()> validation_loss;
  std::function<void()> save_best;
};

TrainTrace run_training(const TrainingHooks& hooks, std::size_t train_size, const TrainConfig& cfg);

struct TrainResult {
  DeterministicModel model;
  TrainTrace trace;
};

// Cross-entropy training with Adam. Returns the weights of the epoch with
// the lowest validation loss (training loss when val_set is empty).
TrainResult train(const DeterministicModel& initial, const LabeledImages& train_set,
                  const LabeledImages& val_set, const TrainConfig& cfg);

// Mean cross-entropy with dropout off, evaluated in chunks.
double evaluate_loss(const DeterministicModel& model, const LabeledImages& data);

}  // namespace uql
