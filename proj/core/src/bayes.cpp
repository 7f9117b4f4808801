#include "uql/bayes.hpp"

#include <cmath>
#include <numeric>
#include <stdexcept>

#include "uql/ops.hpp"

namespace uql {

double softplus(double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))); }

double inverse_softplus(double y) {
  if (!(y > 0.0)) throw std::domain_error("inverse_softplus: argument must be positive");
  return y > 30.0 ? y + std::log1p(-std::exp(-y)) : std::log(std::expm1(y));
}

void validate(const PriorConfig& prior) {
  if (!(prior.sigma > 0.0) || !std::isfinite(prior.sigma) || !std::isfinite(prior.mu)) {
    throw std::invalid_argument("prior: sigma_prior must be positive and finite");
  }
}

void validate(const MopedConfig& moped) {
  if (!(moped.delta > 0.0) || !std::isfinite(moped.delta)) {
    throw std::invalid_argument("moped: delta must be positive");
  }
}

void validate(const ElboConfig& cfg) {
  if (!(cfg.kl_factor >= 0.0) || !std::isfinite(cfg.kl_factor)) {
    throw std::invalid_argument("elbo: kl_factor must be nonnegative");
  }
  if (cfg.num_train_samples == 0) throw std::invalid_argument("elbo: num_train_samples must be positive");
  if (cfg.mc_train_samples == 0) throw std::invalid_argument("elbo: mc_train_samples must be positive");
}

Tensor VariationalParam::sigma() const { return ops::softplus(rho); }

std::vector<Tensor> BayesianModel::parameters() const {
  std::vector<Tensor> out;
  for (const auto& l : layers) {
    out.push_back(l.weight.mu);
    out.push_back(l.weight.rho);
    out.push_back(l.bias.mu);
    out.push_back(l.bias.rho);
  }
  return out;
}

BayesianModel BayesianModel::clone() const {
  BayesianModel copy;
  copy.spec = spec;
  copy.prior = prior;
  for (const auto& l : layers) {
    copy.layers.push_back({{l.weight.mu.clone(), l.weight.rho.clone()}, {l.bias.mu.clone(), l.bias.rho.clone()}});
  }
  return copy;
}

void BayesianModel::set_requires_grad(bool on) {
  for (Tensor& p : parameters()) p.set_requires_grad(on);
}

std::size_t BayesianModel::num_weights() const {
  std::size_t n = 0;
  for (const auto& l : layers) n += l.weight.mu.numel() + l.bias.mu.numel();
  return n;
}

namespace {

VariationalParam convert_array(const Tensor& w, const MopedConfig& moped) {
  Tensor mu(w.shape());
  Tensor rho(w.shape());
  auto mv = mu.mutable_values();
  auto rv = rho.mutable_values();
  const auto wv = w.values();
  const double floor = 1e-6 * moped.delta;
  for (std::size_t i = 0; i < wv.size(); ++i) {
    if (moped.enabled) {
      mv[i] = wv[i];
      rv[i] = inverse_softplus(std::max(moped.delta * std::abs(wv[i]), floor));
    } else {
      mv[i] = 0.0;
      rv[i] = kDefaultPosteriorRho;
    }
  }
  return {mu, rho};
}

Tensor sample_array(const VariationalParam& p, const Tensor* eps) {
  if (eps == nullptr) return p.mu;
  return ops::add(p.mu, ops::mul(p.sigma(), *eps));
}

Tensor normal_like(const Tensor& t, Rng& rng) { return ops::sample_gaussian(rng, t.shape()); }

}  // namespace

BayesianModel convert_to_bayesian(const DeterministicModel& model, const PriorConfig& prior,
                                  const MopedConfig& moped) {
  validate(prior);
  if (moped.enabled) validate(moped);
  validate_spec(model.spec);
  std::size_t parametric = 0;
  for (const LayerSpec& l : model.spec.layers) parametric += l.parametric() ? 1 : 0;
  if (parametric != model.params.size()) {
    throw std::invalid_argument("convert_to_bayesian: model has " + std::to_string(model.params.size()) +
                                " weight layers but its spec declares " + std::to_string(parametric));
  }
  BayesianModel out;
  out.spec = model.spec;
  out.prior = prior;
  for (const LayerWeights& w : model.params) {
    out.layers.push_back({convert_array(w.weight, moped), convert_array(w.bias, moped)});
  }
  out.set_requires_grad(true);
  return out;
}

WeightNoise draw_weight_noise(const BayesianModel& model, Rng& rng) {
  WeightNoise noise;
  noise.reserve(model.layers.size());
  for (const auto& l : model.layers) {
    Tensor w = normal_like(l.weight.mu, rng);
    Tensor b = normal_like(l.bias.mu, rng);
    noise.push_back({w, b});
  }
  return noise;
}

Tensor bayesian_logits(const BayesianModel& model, const Tensor& x, const WeightNoise* noise,
                       ActivationCapture* capture) {
  if (noise != nullptr && noise->size() != model.layers.size()) {
    throw std::invalid_argument("bayesian_logits: noise does not match model layers");
  }
  ForwardOptions opts;
  opts.capture = capture;
  return forward_layers(
      model.spec, x,
      [&](std::size_t i) {
        const VariationalLayer& l = model.layers.at(i);
        const LayerWeights* eps = noise != nullptr ? &(*noise)[i] : nullptr;
        return LayerWeights{sample_array(l.weight, eps ? &eps->weight : nullptr),
                            sample_array(l.bias, eps ? &eps->bias : nullptr)};
      },
      opts);
}

Tensor bayesian_forward(const BayesianModel& model, const Tensor& batch, Rng& rng, bool sample_weights) {
  if (!sample_weights) return ops::softmax(bayesian_logits(model, batch, nullptr));
  const WeightNoise noise = draw_weight_noise(model, rng);
  return ops::softmax(bayesian_logits(model, batch, &noise));
}

Tensor kl_to_prior(const BayesianModel& model, const PriorConfig& prior) {
  validate(prior);
  const double inv_two_var = 1.0 / (2.0 * prior.sigma * prior.sigma);
  const double constant = std::log(prior.sigma) - 0.5;
  Tensor total = Tensor::scalar(0.0);
  auto add_term = [&](const VariationalParam& p) {
    const Tensor sigma = p.sigma();
    const Tensor diff = ops::add_scalar(p.mu, -prior.mu);
    const Tensor quad = ops::scale(ops::add(ops::mul(sigma, sigma), ops::mul(diff, diff)), inv_two_var);
    const Tensor per_weight = ops::add_scalar(ops::sub(quad, ops::log(sigma)), constant);
    total = ops::add(total, ops::sum(per_weight));
  };
  for (const auto& l : model.layers) {
    add_term(l.weight);
    add_term(l.bias);
  }
  return total;
}

Tensor elbo_loss(const BayesianModel& model, const Tensor& batch, std::span<const int> labels,
                 const ElboConfig& cfg, Rng& rng) {
  validate(cfg);
  Tensor data_term = Tensor::scalar(0.0);
  for (std::size_t s = 0; s < cfg.mc_train_samples; ++s) {
    const WeightNoise noise = draw_weight_noise(model, rng);
    data_term = ops::add(data_term, ops::cross_entropy(bayesian_logits(model, batch, &noise), labels));
  }
  if (cfg.mc_train_samples > 1) data_term = ops::scale(data_term, 1.0 / static_cast<double>(cfg.mc_train_samples));
  if (cfg.kl_factor == 0.0) return data_term;
  const double weight = cfg.kl_factor / static_cast<double>(cfg.num_train_samples);
  return ops::add(data_term, ops::scale(kl_to_prior(model, model.prior), weight));
}

namespace {

constexpr std::uint64_t kValidationNoiseStream = 0x76616C6964ULL;

double validation_elbo(const BayesianModel& model, const LabeledImages& val, const ElboConfig& cfg,
                       std::uint64_t seed) {
  NoGradGuard guard;
  Rng rng = Rng(seed).split(kValidationNoiseStream);
  const WeightNoise noise = draw_weight_noise(model, rng);
  constexpr std::size_t kChunk = 128;
  double ce = 0.0;
  std::vector<std::size_t> idx;
  for (std::size_t start = 0; start < val.size(); start += kChunk) {
    const std::size_t end = std::min(val.size(), start + kChunk);
    idx.resize(end - start);
    std::iota(idx.begin(), idx.end(), start);
    const Tensor logits = bayesian_logits(model, val.batch(idx), &noise);
    ce += ops::cross_entropy(logits, val.batch_labels(idx)).item() * static_cast<double>(idx.size());
  }
  ce /= static_cast<double>(val.size());
  if (cfg.kl_factor == 0.0) return ce;
  return ce + cfg.kl_factor * kl_to_prior(model, model.prior).item() / static_cast<double>(cfg.num_train_samples);
}

}  // namespace

BayesianTrainResult train_bayesian(const BayesianModel& initial, const LabeledImages& train_set,
                                   const LabeledImages& val_set, const TrainConfig& cfg,
                                   const ElboConfig& elbo) {
  validate(elbo);
  for (int y : train_set.labels) {
    if (y < 0 || static_cast<std::size_t>(y) >= initial.spec.num_classes) {
      throw std::invalid_argument("train_bayesian: label " + std::to_string(y) + " out of range");
    }
  }
  BayesianTrainResult result;
  BayesianModel model = initial.clone();
  model.set_requires_grad(true);
  result.model = model.clone();

  TrainingHooks hooks;
  hooks.parameters = model.parameters();
  hooks.batch_loss = [&](std::span<const std::size_t> idx, Rng& rng) {
    const std::vector<int> labels = train_set.batch_labels(idx);
    return elbo_loss(model, train_set.batch(idx), labels, elbo, rng);
  };
  if (val_set.size() > 0) {
    hooks.validation_loss = [&] { return validation_elbo(model, val_set, elbo, cfg.seed); };
  }
  hooks.save_best = [&] { result.model = model.clone(); };
  result.trace = run_training(hooks, train_set.size(), cfg);
  return result;
}

}  // namespace uql
