#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>

namespace aotp {

inline constexpr std::uint64_t splitmix64(std::uint64_t x) noexcept {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

// Combine a seed with any number of stream/counter words.
inline constexpr std::uint64_t mix_key(std::uint64_t seed) noexcept { return splitmix64(seed); }

template <typename... Rest>
constexpr std::uint64_t mix_key(std::uint64_t seed, std::uint64_t word, Rest... rest) noexcept {
  return mix_key(splitmix64(seed ^ splitmix64(word + 0x632BE59BD9B4E019ull)), static_cast<std::uint64_t>(rest)...);
}

// Counter-based generator: draw k of stream s is a pure function of
// (seed, s, k). Two generators built from the same key produce the same
// sequence regardless of what else ran in between.
class CounterRng {
 public:
  explicit CounterRng(std::uint64_t seed, std::uint64_t stream = 0) noexcept
      : key_(mix_key(seed, stream)) {}

  std::uint64_t next_u64() noexcept { return splitmix64(key_ + counter_++ * 0xD1B54A32D192ED03ull); }

  // Uniform in [0, 1) with 53 random bits.
  double uniform() noexcept { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  // Uniform integer in [0, n). Rejection keeps it unbiased.
  std::uint64_t below(std::uint64_t n) noexcept {
    if (n <= 1) return 0;
    const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    std::uint64_t x;
    do {
      x = next_u64();
    } while (x >= limit);
    return x % n;
  }

  // Standard normal via Box-Muller (one value per call, no caching so the
  // draw count stays a simple function of the call count).
  double normal() noexcept {
    double u1 = uniform();
    const double u2 = uniform();
    if (u1 < 0x1.0p-60) u1 = 0x1.0p-60;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

  std::uint64_t counter() const noexcept { return counter_; }

 private:
  std::uint64_t key_;
  std::uint64_t counter_ = 0;
};

// Keyed uniform draw without generator state, used for dropout masks so that
// a forward pass can be replayed exactly.
inline double keyed_uniform(std::uint64_t key, std::uint64_t index) noexcept {
  return static_cast<double>(splitmix64(key + index * 0xD1B54A32D192ED03ull) >> 11) * 0x1.0p-53;
}

template <typename Range>
void shuffle(Range& range, CounterRng& rng) {
  using std::swap;
  const auto n = static_cast<std::uint64_t>(range.size());
  for (std::uint64_t i = n; i > 1; --i) {
    const auto j = rng.below(i);
    swap(range[i - 1], range[j]);
  }
}

}  // namespace aotp
