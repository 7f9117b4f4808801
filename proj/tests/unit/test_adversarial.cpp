#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "uql/adversarial.hpp"
#include "uql/bayes.hpp"
#include "uql/nn.hpp"
#include "uql/ops.hpp"
#include "uql/rng.hpp"

namespace uql {
namespace {

ModelSpec spec() {
  ModelSpec s;
  s.input = {3, 8, 8};
  s.layers = {LayerSpec::conv(4, 3, 1, 1), LayerSpec::relu(), LayerSpec::max_pool(2, 2), LayerSpec::flatten(),
              LayerSpec::linear(2)};
  return s;
}

Tensor batch(std::uint64_t seed, std::size_t n = 6) {
  Rng rng(seed);
  Tensor x({n, 3, 8, 8});
  // Include exact 0 and 1 so clamping is exercised.
  for (double& v : x.mutable_values()) v = std::clamp(1.2 * rng.uniform() - 0.1, 0.0, 1.0);
  return x;
}

TEST(Fgsm, ZeroEpsilonIsIdentity) {
  Rng rng(1);
  const auto m = build_model(spec(), rng);
  const Tensor x = batch(2);
  const std::vector<int> y{0, 1, 0, 1, 0, 1};
  const Tensor adv = fgsm_attack(m, x, y, AdversarialConfig{0.0});
  EXPECT_TRUE(std::equal(x.values().begin(), x.values().end(), adv.values().begin()));
}

TEST(Fgsm, BudgetAndRangeHoldExactly) {
  Rng rng(3);
  const auto m = build_model(spec(), rng);
  const auto b = convert_to_bayesian(m, PriorConfig{}, MopedConfig{});
  const std::vector<int> y{1, 1, 0, 0, 1, 0};
  for (double eps : {0.01, 0.05, 0.1}) {
    const Tensor x = batch(4);
    for (const Tensor& adv : {fgsm_attack(m, x, y, AdversarialConfig{eps}), fgsm_attack(b, x, y, AdversarialConfig{eps})}) {
      std::size_t moved = 0;
      for (std::size_t i = 0; i < x.numel(); ++i) {
        ASSERT_LE(std::abs(adv.at(i) - x.at(i)), eps);
        ASSERT_GE(adv.at(i), 0.0);
        ASSERT_LE(adv.at(i), 1.0);
        moved += adv.at(i) != x.at(i);
      }
      EXPECT_GT(moved, x.numel() / 2);
    }
  }
}

TEST(Fgsm, IncreasesLossOnSurrogate) {
  Rng rng(5);
  const auto m = build_model(spec(), rng);
  const Tensor x = batch(6);
  const std::vector<int> y{0, 1, 1, 0, 0, 1};
  const Tensor adv = fgsm_attack(m, x, y, AdversarialConfig{0.05});
  NoGradGuard guard;
  EXPECT_GT(ops::cross_entropy(forward(m, adv), y).item(), ops::cross_entropy(forward(m, x), y).item());
}

TEST(Fgsm, RejectsOutOfRangeBudget) {
  EXPECT_THROW(validate(AdversarialConfig{0.2}), std::invalid_argument);
  EXPECT_THROW(validate(AdversarialConfig{-0.01}), std::invalid_argument);
}

TEST(Fgsm, DoesNotTouchModelGradients) {
  Rng rng(7);
  auto m = build_model(spec(), rng);
  m.set_requires_grad(true);
  const std::vector<int> y{0, 1, 0, 1, 0, 1};
  fgsm_attack(m, batch(8), y, AdversarialConfig{0.05});
  for (const Tensor& p : m.parameters()) EXPECT_FALSE(p.has_grad());
}

}  // namespace
}  // namespace uql
