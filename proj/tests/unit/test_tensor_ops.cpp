#include <gtest/gtest.h>

#include <cmath>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include "uql/ops.hpp"
#include "uql/rng.hpp"
#include "uql/tensor.hpp"

namespace uql {
namespace {

std::vector<double> as_vec(const Tensor& t) { return {t.values().begin(), t.values().end()}; }

TEST(Tensor, RejectsNonFiniteAndSizeMismatch) {
  EXPECT_THROW(Tensor({2}, std::vector<double>{1.0, NAN}), std::domain_error);
  EXPECT_THROW(Tensor({3}, std::vector<double>{1.0, 2.0}), std::invalid_argument);
  EXPECT_THROW(Tensor({2}, INFINITY), std::domain_error);
}

TEST(Tensor, CopiesShareStorageCloneDoesNot) {
  Tensor a = Tensor::from_values({1, 2, 3});
  Tensor b = a;
  Tensor c = a.clone();
  a.mutable_values()[0] = 9;
  EXPECT_EQ(b.at(0), 9);
  EXPECT_EQ(c.at(0), 1);
  EXPECT_TRUE(a.shares_storage(b));
  EXPECT_FALSE(a.shares_storage(c));
}

TEST(Ops, AddElementwise) {
  EXPECT_EQ(as_vec(ops::add(Tensor::from_values({1, 2}), Tensor::from_values({3, 4}))),
            (std::vector<double>{4, 6}));
}

TEST(Ops, AddBroadcastsRowVector) {
  Tensor a({2, 3}, std::vector<double>{1, 2, 3, 4, 5, 6});
  Tensor b({3}, std::vector<double>{10, 20, 30});
  EXPECT_EQ(as_vec(ops::add(a, b)), (std::vector<double>{11, 22, 33, 14, 25, 36}));
  EXPECT_EQ(ops::broadcast_shape({4, 1, 3}, {2, 1}), (Shape{4, 2, 3}));
}

TEST(Ops, MatmulIdentity) {
  Rng rng(3);
  Tensor a = ops::sample_gaussian(rng, {3, 3});
  Tensor eye({3, 3}, std::vector<double>{1, 0, 0, 0, 1, 0, 0, 0, 1});
  EXPECT_EQ(as_vec(ops::matmul(eye, a)), as_vec(a));
}

TEST(Ops, MatmulMatchesNaiveLoop) {
  Rng rng(11);
  Tensor a = ops::sample_gaussian(rng, {5, 7});
  Tensor b = ops::sample_gaussian(rng, {7, 4});
  Tensor c = ops::matmul(a, b);
  for (std::size_t i = 0; i < 5; ++i) {
    for (std::size_t j = 0; j < 4; ++j) {
      double s = 0;
      for (std::size_t k = 0; k < 7; ++k) s += a.at(i * 7 + k) * b.at(k * 4 + j);
      EXPECT_NEAR(c.at(i * 4 + j), s, 1e-12);
    }
  }
}

TEST(Ops, ConvOfOnesSumsWindow) {
  Tensor x({1, 1, 4, 4}, 1.0);
  Tensor w({1, 1, 3, 3}, 1.0);
  Tensor y = ops::conv2d(x, w, std::nullopt);
  EXPECT_EQ(y.shape(), (Shape{1, 1, 2, 2}));
  for (double v : y.values()) EXPECT_EQ(v, 9.0);
}

// Direct summation over the receptive field, zero outside the image.
std::vector<double> naive_conv(const Tensor& x, const Tensor& w, const Tensor& b, std::size_t stride,
                               std::size_t pad) {
  const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), wd = x.dim(3);
  const std::size_t o = w.dim(0), k = w.dim(2);
  const std::size_t oh = (h + 2 * pad - k) / stride + 1, ow = (wd + 2 * pad - k) / stride + 1;
  std::vector<double> out(n * o * oh * ow);
  for (std::size_t ni = 0; ni < n; ++ni)
    for (std::size_t oi = 0; oi < o; ++oi)
      for (std::size_t y = 0; y < oh; ++y)
        for (std::size_t xx = 0; xx < ow; ++xx) {
          double s = b.at(oi);
          for (std::size_t ci = 0; ci < c; ++ci)
            for (std::size_t ky = 0; ky < k; ++ky)
              for (std::size_t kx = 0; kx < k; ++kx) {
                const long iy = static_cast<long>(y * stride + ky) - static_cast<long>(pad);
                const long ix = static_cast<long>(xx * stride + kx) - static_cast<long>(pad);
                if (iy < 0 || ix < 0 || iy >= static_cast<long>(h) || ix >= static_cast<long>(wd)) continue;
                s += x.at(((ni * c + ci) * h + iy) * wd + ix) * w.at(((oi * c + ci) * k + ky) * k + kx);
              }
          out[((ni * o + oi) * oh + y) * ow + xx] = s;
        }
  return out;
}

TEST(Ops, ConvMatchesNaiveLoop) {
  Rng rng(5);
  Tensor x = ops::sample_gaussian(rng, {2, 3, 8, 8});
  Tensor w = ops::sample_gaussian(rng, {4, 3, 3, 3});
  Tensor b = ops::sample_gaussian(rng, {4});
  for (std::size_t stride : {1u, 2u}) {
    for (std::size_t pad : {0u, 1u}) {
      Tensor y = ops::conv2d(x, w, b, {stride, pad});
      const auto ref = naive_conv(x, w, b, stride, pad);
      ASSERT_EQ(y.numel(), ref.size());
      for (std::size_t i = 0; i < ref.size(); ++i) EXPECT_NEAR(y.at(i), ref[i], 1e-10);
    }
  }
}

TEST(Ops, SoftmaxRowsSumToOneAndSurviveLargeLogits) {
  Tensor logits({3, 4}, std::vector<double>{1, 2, 3, 4, -1000, 0, 1000, 5, 0, 0, 0, 0});
  Tensor p = ops::softmax(logits);
  for (std::size_t r = 0; r < 3; ++r) {
    double s = 0;
    for (std::size_t c = 0; c < 4; ++c) s += p.at(r * 4 + c);
    EXPECT_NEAR(s, 1.0, 1e-12);
  }
  EXPECT_NEAR(p.at(6), 1.0, 1e-12);
  EXPECT_NEAR(p.at(8), 0.25, 1e-15);
}

TEST(Ops, CrossEntropyOfUniformLogitsIsLogK) {
  Tensor logits({2, 3}, 0.0);
  const std::vector<int> labels{0, 2};
  EXPECT_NEAR(ops::cross_entropy(logits, labels).item(), std::log(3.0), 1e-12);
}

TEST(Ops, EntropyUsesZeroLogZero) {
  Tensor p({2, 2}, std::vector<double>{1, 0, 0.5, 0.5});
  Tensor h = ops::entropy(p);
  EXPECT_EQ(h.at(0), 0.0);
  EXPECT_NEAR(h.at(1), std::log(2.0), 1e-15);
}

TEST(Ops, PoolingAndSliceValues) {
  Tensor x({1, 1, 2, 4}, std::vector<double>{1, 5, 2, 0, 3, 4, 8, 6});
  EXPECT_EQ(as_vec(ops::max_pool2d(x, 2, 2)), (std::vector<double>{5, 8}));
  EXPECT_EQ(as_vec(ops::mean_pool2d(x, 2, 2)), (std::vector<double>{3.25, 4}));
  EXPECT_EQ(as_vec(ops::slice(x, 3, 1, 3)), (std::vector<double>{5, 2, 4, 8}));
  EXPECT_EQ(as_vec(ops::sum_axis(Tensor({2, 2}, std::vector<double>{1, 2, 3, 4}), 0)),
            (std::vector<double>{4, 6}));
}

TEST(Ops, SoftplusIsStableAtExtremes) {
  Tensor y = ops::softplus(Tensor::from_values({-800, 0, 800}));
  EXPECT_EQ(y.at(0), 0.0);
  EXPECT_NEAR(y.at(1), std::log(2.0), 1e-15);
  EXPECT_EQ(y.at(2), 800.0);
}

void expect_error_names(const std::function<void()>& f, const std::string& op) {
  try {
    f();
    FAIL() << "expected invalid_argument from " << op;
  } catch (const std::invalid_argument& e) {
    EXPECT_NE(std::string(e.what()).find(op), std::string::npos) << e.what();
  }
}

TEST(Ops, ShapeErrorsNameTheOperation) {
  expect_error_names([] { ops::add(Tensor({2, 3}), Tensor({4})); }, "add");
  expect_error_names([] { ops::matmul(Tensor({2, 3}), Tensor({2, 3})); }, "matmul");
  expect_error_names([] { ops::conv2d(Tensor({1, 2, 5, 5}), Tensor({1, 3, 3, 3}), std::nullopt); }, "conv2d");
  expect_error_names([] { ops::reshape(Tensor({2, 3}), {4}); }, "reshape");
  expect_error_names([] { ops::softmax(Tensor({6})); }, "softmax");
}

TEST(Ops, LogRejectsNonPositive) {
  EXPECT_THROW(ops::log(Tensor::from_values({1.0, 0.0})), std::domain_error);
}

TEST(SampleGaussian, DeterministicForSeed) {
  Rng a(42), b(42);
  EXPECT_EQ(as_vec(ops::sample_gaussian(a, {4})), as_vec(ops::sample_gaussian(b, {4})));
}

TEST(SampleGaussian, EmptyShape) {
  Rng r(1);
  Tensor t = ops::sample_gaussian(r, {0});
  EXPECT_EQ(t.numel(), 0u);
  EXPECT_EQ(t.shape(), (Shape{0}));
}

TEST(SampleGaussian, MillionDrawMoments) {
  Rng r(42);
  Tensor t = ops::sample_gaussian(r, {1000000});
  const auto v = t.values();
  const double mean = std::accumulate(v.begin(), v.end(), 0.0) / v.size();
  double var = 0;
  for (double x : v) var += (x - mean) * (x - mean);
  var /= v.size();
  EXPECT_LT(std::abs(mean), 0.01);
  EXPECT_LT(std::abs(var - 1.0), 0.01);
}

}  // namespace
}  // namespace uql
