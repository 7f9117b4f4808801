#include <gtest/gtest.h>

#include <cmath>
#include <numeric>
#include <vector>

#include "uql/nn.hpp"
#include "uql/ops.hpp"
#include "uql/rng.hpp"
#include "uql/train.hpp"

namespace uql {
namespace {

ModelSpec small_mlp() {
  ModelSpec spec;
  spec.input = {1, 4, 4};
  spec.num_classes = 2;
  spec.layers = {LayerSpec::flatten(), LayerSpec::linear(8), LayerSpec::relu(), LayerSpec::linear(2)};
  return spec;
}

// Two Gaussian blobs at pixel level 0.2 and 0.8.
LabeledImages blobs(std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  LabeledImages d;
  d.shape = {1, 4, 4};
  for (std::size_t i = 0; i < n; ++i) {
    const int y = static_cast<int>(i % 2);
    for (std::size_t p = 0; p < 16; ++p) d.pixels.push_back((y ? 0.8 : 0.2) + 0.1 * rng.normal());
    d.labels.push_back(y);
  }
  return d;
}

double accuracy(const DeterministicModel& m, const LabeledImages& d) {
  Tensor p = predict_deterministic(m, d.all());
  std::size_t ok = 0;
  for (std::size_t i = 0; i < d.size(); ++i) {
    if (static_cast<int>(argmax(p.values().subspan(i * 2, 2))) == d.labels[i]) ++ok;
  }
  return 100.0 * static_cast<double>(ok) / static_cast<double>(d.size());
}

bool same_parameters(const DeterministicModel& a, const DeterministicModel& b) {
  const auto pa = a.parameters(), pb = b.parameters();
  for (std::size_t i = 0; i < pa.size(); ++i) {
    if (!std::equal(pa[i].values().begin(), pa[i].values().end(), pb[i].values().begin())) return false;
  }
  return true;
}

TEST(Train, SeparableBlobsReachHighAccuracy) {
  Rng rng(1);
  const auto init = build_model(small_mlp(), rng);
  TrainConfig cfg;
  cfg.learning_rate = 1e-2;
  cfg.epochs = 20;
  cfg.batch_size = 16;
  const auto train_set = blobs(200, 2);
  const auto result = train(init, train_set, blobs(40, 3), cfg);
  EXPECT_GE(accuracy(result.model, train_set), 99.0);
  EXPECT_EQ(result.trace.epochs.size(), 20u);
  EXPECT_LT(result.trace.epochs[result.trace.best_epoch - 1].val_loss, result.trace.initial_val_loss);
}

TEST(Train, ZeroLearningRateLeavesWeightsUnchanged) {
  Rng rng(4);
  const auto init = build_model(small_mlp(), rng);
  TrainConfig cfg;
  cfg.learning_rate = 0.0;
  cfg.epochs = 3;
  cfg.batch_size = 8;
  const auto result = train(init, blobs(32, 5), {}, cfg);
  EXPECT_TRUE(same_parameters(init, result.model));
}

TEST(Train, ConstantLabelsDriveLossDown) {
  Rng rng(6);
  const auto init = build_model(small_mlp(), rng);
  auto data = blobs(64, 7);
  std::fill(data.labels.begin(), data.labels.end(), 1);
  TrainConfig cfg;
  cfg.learning_rate = 1e-2;
  cfg.epochs = 15;
  cfg.batch_size = 16;
  const auto result = train(init, data, {}, cfg);
  const double before = evaluate_loss(init, data);
  const double after = evaluate_loss(result.model, data);
  EXPECT_LT(after, before);
  EXPECT_LT(after, 0.05);
}

TEST(Train, ConfigValidation) {
  TrainConfig cfg;
  cfg.epochs = 0;
  EXPECT_THROW(validate(cfg), std::invalid_argument);
  cfg = {};
  cfg.learning_rate = -1;
  EXPECT_THROW(validate(cfg), std::invalid_argument);
  cfg = {};
  cfg.beta1 = 1.0;
  EXPECT_THROW(validate(cfg), std::invalid_argument);
}

TEST(Adam, ZeroGradientFromFreshStateDoesNotMove) {
  Tensor w = Tensor::from_values({1.0, -2.0});
  w.set_requires_grad();
  Adam opt({w}, TrainConfig{});
  backward(ops::scale(ops::sum(w), 0.0));
  opt.step();
  EXPECT_EQ(w.at(0), 1.0);
  EXPECT_EQ(w.at(1), -2.0);
}

TEST(Adam, MatchesReferenceRecurrence) {
  TrainConfig cfg;
  cfg.learning_rate = 0.05;
  Tensor w = Tensor::from_values({1.5, -0.5});
  w.set_requires_grad();
  Adam opt({w}, cfg);
  // Reference: loss = sum(w^3), grad = 3 w^2.
  std::vector<double> ref{1.5, -0.5}, m(2, 0.0), v(2, 0.0);
  for (int t = 1; t <= 10; ++t) {
    opt.zero_grad();
    backward(ops::sum(ops::mul(ops::mul(w, w), w)));
    opt.step();
    for (std::size_t i = 0; i < 2; ++i) {
      const double g = 3 * ref[i] * ref[i];
      m[i] = 0.9 * m[i] + 0.1 * g;
      v[i] = 0.999 * v[i] + 0.001 * g * g;
      const double mh = m[i] / (1 - std::pow(0.9, t));
      const double vh = v[i] / (1 - std::pow(0.999, t));
      ref[i] -= 0.05 * mh / (std::sqrt(vh) + 1e-8);
    }
  }
  EXPECT_NEAR(w.at(0), ref[0], 1e-12);
  EXPECT_NEAR(w.at(1), ref[1], 1e-12);
  EXPECT_EQ(opt.steps(), 10u);
}

TEST(Train, SameSeedIsReproducible) {
  Rng r1(9), r2(9);
  TrainConfig cfg;
  cfg.learning_rate = 1e-2;
  cfg.epochs = 3;
  cfg.batch_size = 8;
  const auto a = train(build_model(small_mlp(), r1), blobs(40, 1), blobs(10, 2), cfg);
  const auto b = train(build_model(small_mlp(), r2), blobs(40, 1), blobs(10, 2), cfg);
  EXPECT_TRUE(same_parameters(a.model, b.model));
}

TEST(LabeledImages, BatchAndSubset) {
  const auto d = blobs(6, 1);
  const std::vector<std::size_t> idx{4, 1};
  Tensor b = d.batch(idx);
  EXPECT_EQ(b.shape(), (Shape{2, 1, 4, 4}));
  EXPECT_EQ(b.at(0), d.pixels[4 * 16]);
  EXPECT_EQ(d.batch_labels(idx), (std::vector<int>{0, 1}));
  EXPECT_EQ(d.subset(idx).size(), 2u);
  const std::vector<std::size_t> bad{6};
  EXPECT_THROW(d.batch(bad), std::out_of_range);
}

}  // namespace
}  // namespace uql
