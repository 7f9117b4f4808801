#pragma once

#include <cstddef>
#include <cstdint>
#include <span>

namespace uql {

// Counter-based generator built on the SplitMix64 finalizer.
//
// Draw i of a stream with key k is mix64(k + (i + 1) * 0x9E3779B97F4A7C15),
// so the integer sequence is a pure function of (seed, counter) and is
// identical on every platform. Independent child streams are derived with
// split(), which hashes the parent key with a stream id; the parent counter
// is not consumed, so derived streams do not depend on the order in which
// they are requested.
//
// Normal draws use the Marsaglia polar method (sqrt and log only).
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) noexcept;

  std::uint64_t seed() const noexcept { return seed_; }
  std::uint64_t counter() const noexcept { return counter_; }

  std::uint64_t next_u64() noexcept;
  // Uniform on [0, 1) with 53 bits of resolution.
  double uniform() noexcept;
  // Uniform integer on [0, bound). bound must be > 0.
  std::uint64_t uniform_index(std::uint64_t bound) noexcept;
  double normal() noexcept;
  bool bernoulli(double p) noexcept { return uniform() < p; }

  void fill_normal(std::span<double> out) noexcept;

  // Child stream keyed on (seed, stream_id). Does not advance this stream.
  Rng split(std::uint64_t stream_id) const noexcept;

 private:
  std::uint64_t seed_;
  std::uint64_t key_;
  std::uint64_t counter_ = 0;
  double cached_normal_ = 0.0;
  bool has_cached_normal_ = false;
};

std::uint64_t mix64(std::uint64_t z) noexcept;

// Fisher-Yates shuffle of indices driven by rng.
template <typename T>
void shuffle(std::span<T> values, Rng& rng) {
  for (std::size_t i = values.size(); i > 1; --i) {
    const std::size_t j = static_cast<std::size_t>(rng.uniform_index(i));
    std::swap(values[i - 1], values[j]);
  }
}

}  // namespace uql
