#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "uql/nn.hpp"
#include "uql/rng.hpp"
#include "uql/tensor.hpp"
#include "uql/train.hpp"

namespace uql {

// Diagonal Gaussian posterior over one weight array: sigma = softplus(rho).
struct VariationalParam {
  Tensor mu;
  Tensor rho;

  Tensor sigma() const;  // recorded op, differentiable in rho
};

struct VariationalLayer {
  VariationalParam weight;
  VariationalParam bias;
};

struct PriorConfig {
  double mu = 0.0;
  double sigma = 1.0;
};

struct MopedConfig {
  double delta = 0.1;
  bool enabled = true;
};

struct ElboConfig {
  double kl_factor = 1.0;
  std::size_t num_train_samples = 1;
  std::size_t mc_train_samples = 1;
};

void validate(const PriorConfig& prior);
void validate(const MopedConfig& moped);
void validate(const ElboConfig& cfg);

inline constexpr double kDefaultPosteriorRho = -3.0;

double softplus(double x);
double inverse_softplus(double y);  // y > 0

struct BayesianModel {
  ModelSpec spec;
  std::vector<VariationalLayer> layers;  // one per parametric layer
  PriorConfig prior;

  std::vector<Tensor> parameters() const;  // mu/rho for weight then bias, per layer
  BayesianModel clone() const;
  void set_requires_grad(bool on);
  std::size_t num_weights() const;
};

// Replaces every conv/linear weight and bias by a variational pair. With
// MOPED: mu = w and sigma = delta * |w| (biases floored at 1e-6 * delta);
// otherwise mu = 0 and rho = -3.
BayesianModel convert_to_bayesian(const DeterministicModel& model, const PriorConfig& prior,
                                  const MopedConfig& moped);

// Standard-normal draws for every variational array, in parameter order.
// Freezing one of these makes a stochastic pass a deterministic function of
// the input.
using WeightNoise = std::vector<LayerWeights>;
WeightNoise draw_weight_noise(const BayesianModel& model, Rng& rng);

// Logits for weights mu + sigma * noise (noise == nullptr means the
// posterior mean). Dropout layers are inactive in Bayesian passes.
Tensor bayesian_logits(const BayesianModel& model, const Tensor& x, const WeightNoise* noise,
                       ActivationCapture* capture = nullptr);

// Probability vectors. With sample_weights, fresh noise is drawn from rng.
Tensor bayesian_forward(const BayesianModel& model, const Tensor& batch, Rng& rng, bool sample_weights);

// Closed-form KL(q || prior) summed over every variational weight; recorded
// on the tape so it can be differentiated with respect to mu and rho.
Tensor kl_to_prior(const BayesianModel& model, const PriorConfig& prior);

// Mean over mc_train_samples of batch-mean cross-entropy plus
// kl_factor * KL / num_train_samples.
Tensor elbo_loss(const BayesianModel& model, const Tensor& batch, std::span<const int> labels,
                 const ElboConfig& cfg, Rng& rng);

struct BayesianTrainResult {
  BayesianModel model;
  TrainTrace trace;
};

// Validation loss is the ELBO on the validation set with noise drawn from a
// fixed seed, so epochs are compared under identical weight samples.
BayesianTrainResult train_bayesian(const BayesianModel& initial, const LabeledImages& train_set,
                                   const LabeledImages& val_set, const TrainConfig& cfg,
                                   const ElboConfig& elbo);

}  // namespace uql
