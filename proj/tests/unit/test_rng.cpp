#include <gtest/gtest.h>

#include <cmath>
#include <numeric>
#include <set>
#include <vector>

#include "uql/rng.hpp"

namespace uql {
namespace {

TEST(Rng, DrawIsPureFunctionOfKeyAndCounter) {
  Rng a(42), b(42);
  for (int i = 0; i < 100; ++i) EXPECT_EQ(a.next_u64(), b.next_u64());
  EXPECT_EQ(a.counter(), 100u);
}

TEST(Rng, MatchesSplitMixFormula) {
  // Independent restatement of the stream definition.
  const std::uint64_t golden = 0x9E3779B97F4A7C15ULL;
  const std::uint64_t key = mix64(std::uint64_t{9} ^ 0x5851F42D4C957F2DULL);
  Rng r(9);
  for (std::uint64_t i = 0; i < 5; ++i) EXPECT_EQ(r.next_u64(), mix64(key + (i + 1) * golden));
}

TEST(Rng, Mix64KnownValue) {
  // SplitMix64 finalizer of 0 + golden is the first output of splitmix64(0).
  EXPECT_EQ(mix64(0x9E3779B97F4A7C15ULL), 0xE220A8397B1DCDAFULL);
}

TEST(Rng, SplitDoesNotAdvanceParentAndIsOrderIndependent) {
  Rng parent(5);
  const Rng c1 = parent.split(1);
  const Rng c2 = parent.split(2);
  EXPECT_EQ(parent.counter(), 0u);
  Rng again = Rng(5).split(2);
  Rng c2copy = c2;
  EXPECT_EQ(again.next_u64(), c2copy.next_u64());
  Rng c1copy = c1;
  Rng c2copy2 = c2;
  EXPECT_NE(c1copy.next_u64(), c2copy2.next_u64());
}

TEST(Rng, UniformInUnitInterval) {
  Rng r(1);
  double sum = 0.0;
  for (int i = 0; i < 20000; ++i) {
    const double u = r.uniform();
    ASSERT_GE(u, 0.0);
    ASSERT_LT(u, 1.0);
    sum += u;
  }
  EXPECT_NEAR(sum / 20000, 0.5, 0.01);
}

TEST(Rng, UniformIndexCoversRange) {
  Rng r(3);
  std::set<std::uint64_t> seen;
  for (int i = 0; i < 1000; ++i) {
    const auto v = r.uniform_index(7);
    ASSERT_LT(v, 7u);
    seen.insert(v);
  }
  EXPECT_EQ(seen.size(), 7u);
}

TEST(Rng, NormalMoments) {
  Rng r(11);
  const int n = 200000;
  double s = 0.0, s2 = 0.0;
  for (int i = 0; i < n; ++i) {
    const double z = r.normal();
    s += z;
    s2 += z * z;
  }
  EXPECT_NEAR(s / n, 0.0, 0.01);
  EXPECT_NEAR(s2 / n, 1.0, 0.01);
}

TEST(Rng, ShuffleIsPermutation) {
  Rng r(4);
  std::vector<int> v(50);
  std::iota(v.begin(), v.end(), 0);
  shuffle(std::span<int>(v), r);
  std::vector<int> sorted = v;
  std::sort(sorted.begin(), sorted.end());
  for (int i = 0; i < 50; ++i) EXPECT_EQ(sorted[i], i);
  std::vector<int> w(50);
  std::iota(w.begin(), w.end(), 0);
  EXPECT_NE(v, w);
}

}  // namespace
}  // namespace uql
