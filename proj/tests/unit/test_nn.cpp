#include <gtest/gtest.h>

#include <cmath>
#include <numeric>
#include <stdexcept>
#include <vector>

#include "uql/nn.hpp"
#include "uql/ops.hpp"
#include "uql/rng.hpp"

namespace uql {
namespace {

Tensor random_images(std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  Tensor x({n, 3, 32, 32});
  for (double& v : x.mutable_values()) v = rng.uniform();
  return x;
}

TEST(Nn, DefaultSpecLogitShapes) {
  for (std::size_t k : {2u, 6u}) {
    Rng rng(7);
    const DeterministicModel m = build_model(default_detector_spec(k), rng);
    EXPECT_EQ(forward(m, random_images(3, 1)).shape(), (Shape{3, k}));
  }
}

TEST(Nn, McDropoutSpecHasNoInputDropout) {
  const ModelSpec spec = mc_dropout_detector_spec(2, 0.3);
  ASSERT_FALSE(spec.layers.empty());
  EXPECT_NE(spec.layers.front().kind, LayerKind::dropout);
  std::size_t drops = 0;
  for (const auto& l : spec.layers) {
    if (l.kind == LayerKind::dropout) {
      ++drops;
      EXPECT_EQ(l.dropout_ratio, 0.3);
    }
  }
  EXPECT_EQ(drops, 4u);
  EXPECT_NO_THROW(validate_spec(spec));
}

TEST(Nn, SameSeedSameWeights) {
  Rng a(99), b(99);
  const auto pa = build_model(default_detector_spec(), a).parameters();
  const auto pb = build_model(default_detector_spec(), b).parameters();
  ASSERT_EQ(pa.size(), pb.size());
  for (std::size_t i = 0; i < pa.size(); ++i) {
    EXPECT_TRUE(std::equal(pa[i].values().begin(), pa[i].values().end(), pb[i].values().begin()));
  }
}

TEST(Nn, ValidateSpecNamesBadLayer) {
  ModelSpec spec = default_detector_spec();
  spec.layers.insert(spec.layers.begin(), LayerSpec::conv(8, 40));
  try {
    validate_spec(spec);
    FAIL();
  } catch (const std::invalid_argument& e) {
    EXPECT_NE(std::string(e.what()).find("layer 0"), std::string::npos) << e.what();
  }
  ModelSpec one_class = default_detector_spec();
  one_class.num_classes = 1;
  EXPECT_THROW(validate_spec(one_class), std::invalid_argument);
}

TEST(Nn, SpecTextRoundTrip) {
  for (const ModelSpec& spec : {default_detector_spec(6, 0.25), mc_dropout_detector_spec(2, 0.5)}) {
    EXPECT_EQ(spec_from_text(spec_to_text(spec)), spec);
  }
  EXPECT_THROW(spec_from_text("layer bogus\n"), std::invalid_argument);
}

TEST(Nn, PenultimateActivationIsLastConvRelu) {
  const ModelSpec spec = default_detector_spec();
  const std::size_t i = penultimate_activation_layer(spec);
  EXPECT_EQ(spec.layers[i].kind, LayerKind::relu);
  EXPECT_EQ(spec.layers[i - 1].kind, LayerKind::conv2d);
  for (std::size_t j = i + 1; j < spec.layers.size(); ++j) EXPECT_NE(spec.layers[j].kind, LayerKind::conv2d);
}

TEST(Dropout, ZeroRatioIsIdentityInEveryMode) {
  Rng rng(1);
  Tensor x = ops::sample_gaussian(rng, {100});
  for (DropoutMode mode : {DropoutMode::train, DropoutMode::mc_inference, DropoutMode::off}) {
    Tensor y = dropout_forward(x, 0.0, mode, &rng);
    EXPECT_TRUE(std::equal(x.values().begin(), x.values().end(), y.values().begin()));
  }
}

TEST(Dropout, OffModeIsIdentity) {
  Tensor x({50}, 2.0);
  Tensor y = dropout_forward(x, 0.5, DropoutMode::off, nullptr);
  for (double v : y.values()) EXPECT_EQ(v, 2.0);
}

TEST(Dropout, HalfRatioZeroFraction) {
  Rng rng(17);
  Tensor x({1000000}, 1.0);
  Tensor y = dropout_forward(x, 0.5, DropoutMode::train, &rng);
  const auto zeros = std::count(y.values().begin(), y.values().end(), 0.0);
  const double frac = static_cast<double>(zeros) / 1e6;
  EXPECT_GE(frac, 0.498);
  EXPECT_LE(frac, 0.502);
  for (double v : y.values()) EXPECT_TRUE(v == 0.0 || v == 2.0);
}

TEST(Dropout, InvertedScalingPreservesMean) {
  Rng rng(3);
  Tensor x = ops::add_scalar(ops::sample_gaussian(rng, {20}), 3.0).clone();
  std::vector<double> acc(20, 0.0);
  const int masks = 10000;
  for (int m = 0; m < masks; ++m) {
    Tensor y = dropout_forward(x, 0.3, DropoutMode::mc_inference, &rng);
    for (std::size_t i = 0; i < 20; ++i) acc[i] += y.at(i);
  }
  // Per-unit means carry ~0.65% binomial noise at this mask count; the
  // pooled mean is the 1% check.
  double out_total = 0, in_total = 0;
  for (std::size_t i = 0; i < 20; ++i) {
    out_total += acc[i] / masks;
    in_total += x.at(i);
    EXPECT_NEAR(acc[i] / masks, x.at(i), 0.035 * std::abs(x.at(i)));
  }
  EXPECT_NEAR(out_total, in_total, 0.01 * std::abs(in_total));
}

TEST(Dropout, ActiveModeNeedsRngAndValidRatio) {
  Tensor x({4}, 1.0);
  EXPECT_THROW(dropout_forward(x, 0.5, DropoutMode::train, nullptr), std::invalid_argument);
  Rng rng(0);
  EXPECT_THROW(dropout_forward(x, 1.0, DropoutMode::train, &rng), std::invalid_argument);
}

TEST(Predict, ZeroFinalLayerGivesUniform) {
  for (std::size_t k : {2u, 6u}) {
    Rng rng(5);
    DeterministicModel m = build_model(default_detector_spec(k), rng);
    for (double& v : m.params.back().weight.mutable_values()) v = 0.0;
    for (double& v : m.params.back().bias.mutable_values()) v = 0.0;
    Tensor p = predict_deterministic(m, random_images(4, 2));
    for (double v : p.values()) EXPECT_NEAR(v, 1.0 / k, 1e-15);
  }
}

TEST(Predict, RowsSumToOne) {
  Rng rng(8);
  const DeterministicModel m = build_model(default_detector_spec(6), rng);
  Tensor p = predict_deterministic(m, random_images(5, 3));
  for (std::size_t r = 0; r < 5; ++r) {
    const auto row = p.values().subspan(r * 6, 6);
    EXPECT_NEAR(std::accumulate(row.begin(), row.end(), 0.0), 1.0, 1e-9);
  }
}

TEST(Predict, ArgmaxTiesGoToLowestIndex) {
  const std::vector<double> tie{0.25, 0.5, 0.5, 0.1};
  EXPECT_EQ(argmax(tie), 1u);
  const std::vector<double> flat{0.5, 0.5};
  EXPECT_EQ(argmax(flat), 0u);
}

TEST(Predict, BatchPermutationEquivariance) {
  Rng rng(21);
  const DeterministicModel m = build_model(default_detector_spec(), rng);
  Tensor x = random_images(4, 9);
  Tensor swapped({4, 3, 32, 32});
  const std::size_t per = 3 * 32 * 32;
  const std::vector<std::size_t> perm{2, 0, 3, 1};
  for (std::size_t i = 0; i < 4; ++i) {
    std::copy_n(x.values().begin() + perm[i] * per, per, swapped.mutable_values().begin() + i * per);
  }
  Tensor a = predict_deterministic(m, x);
  Tensor b = predict_deterministic(m, swapped);
  for (std::size_t i = 0; i < 4; ++i) {
    for (std::size_t c = 0; c < 2; ++c) EXPECT_NEAR(b.at(i * 2 + c), a.at(perm[i] * 2 + c), 1e-12);
  }
}

TEST(Forward, RejectsWrongInputShape) {
  Rng rng(1);
  const DeterministicModel m = build_model(default_detector_spec(), rng);
  EXPECT_THROW(forward(m, Tensor({1, 1, 32, 32})), std::invalid_argument);
}

}  // namespace
}  // namespace uql
