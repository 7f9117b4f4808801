#pragma once

#include <span>

#include "uql/bayes.hpp"
#include "uql/nn.hpp"
#include "uql/tensor.hpp"

namespace uql {

struct AdversarialConfig {
  double epsilon = 0.05;  // infinity-norm budget, in [0, 0.1]
};

void validate(const AdversarialConfig& cfg);

// x' = clamp(x + eps * sign(dCE/dx), 0, 1) with the gradient taken on the
// surrogate. |x' - x| <= eps holds exactly in floating point.
Tensor fgsm_attack(const DeterministicModel& surrogate, const Tensor& batch, std::span<const int> labels,
                   const AdversarialConfig& cfg);

// White-box variant through the posterior-mean weights of a Bayesian model.
Tensor fgsm_attack(const BayesianModel& target, const Tensor& batch, std::span<const int> labels,
                   const AdversarialConfig& cfg);

}  // namespace uql
