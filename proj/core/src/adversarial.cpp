#include "uql/adversarial.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <stdexcept>
#include <string>

#include "uql/ops.hpp"

namespace uql {

void validate(const AdversarialConfig& cfg) {
  if (!(cfg.epsilon >= 0.0 && cfg.epsilon <= 0.1)) {
    throw std::invalid_argument("adversarial epsilon must lie in [0, 0.1], got " + std::to_string(cfg.epsilon));
  }
}

namespace {

constexpr std::size_t kChunk = 128;

double perturb(double x, double direction, double eps) {
  if (direction == 0.0 || eps == 0.0) return x;
  double out = std::clamp(x + (direction > 0 ? eps : -eps), 0.0, 1.0);
  // x + eps can round past the budget; step back one ulp at a time.
  while (std::abs(out - x) > eps) out = std::nextafter(out, x);
  return out;
}

Tensor attack_with(const std::function<Tensor(const Tensor&)>& logits_of, const Tensor& batch,
                   std::span<const int> labels, const AdversarialConfig& cfg) {
  validate(cfg);
  if (batch.rank() != 4) throw std::invalid_argument("fgsm_attack: batch must be [N,C,H,W], got " + shape_str(batch.shape()));
  const std::size_t n = batch.dim(0);
  if (labels.size() != n) throw std::invalid_argument("fgsm_attack: label count does not match batch");
  const std::size_t per = batch.numel() / std::max<std::size_t>(n, 1);
  std::vector<double> out(batch.values().begin(), batch.values().end());
  if (cfg.epsilon == 0.0) return Tensor(batch.shape(), std::move(out));

  for (std::size_t start = 0; start < n; start += kChunk) {
    const std::size_t end = std::min(n, start + kChunk);
    Tensor x = ops::slice(batch, 0, start, end).clone();
    x.set_requires_grad(true);
    GradTape::current().clear();
    const Tensor loss = ops::cross_entropy(logits_of(x), labels.subspan(start, end - start));
    backward(loss);
    const auto grad = x.grad();
    for (std::size_t i = 0; i < grad.size(); ++i) {
      if (!std::isfinite(grad[i])) throw std::runtime_error("fgsm_attack: non-finite input gradient");
      double& v = out[start * per + i];
      v = perturb(v, grad[i], cfg.epsilon);
    }
  }
  return Tensor(batch.shape(), std::move(out));
}

}  // namespace

Tensor fgsm_attack(const DeterministicModel& surrogate, const Tensor& batch, std::span<const int> labels,
                   const AdversarialConfig& cfg) {
  DeterministicModel frozen = surrogate.clone();
  frozen.set_requires_grad(false);
  return attack_with([&](const Tensor& x) { return forward(frozen, x); }, batch, labels, cfg);
}

Tensor fgsm_attack(const BayesianModel& target, const Tensor& batch, std::span<const int> labels,
                   const AdversarialConfig& cfg) {
  BayesianModel frozen = target.clone();
  frozen.set_requires_grad(false);
  return attack_with([&](const Tensor& x) { return bayesian_logits(frozen, x, nullptr); }, batch, labels, cfg);
}

}  // namespace uql
