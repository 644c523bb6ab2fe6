#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>

namespace abstain {

// SplitMix64 finalizer; bijective 64-bit mixing.
constexpr std::uint64_t mix64(std::uint64_t z) noexcept {
  z += 0x9E3779B97F4A7C15ULL;
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

// Child seed for stream `index` of `base`. Used for per-mask / per-sample / per-cell seeds.
constexpr std::uint64_t derive_seed(std::uint64_t base, std::uint64_t index) noexcept {
  return mix64(base ^ mix64(index + 0x632BE59BD9B4E019ULL));
}

/// Counter-based generator: the i-th draw is a pure function of (key, i), so
/// streams are reproducible bit-for-bit and cheap to fork.
class Rng {
 public:
  explicit constexpr Rng(std::uint64_t seed = 0) noexcept : key_(mix64(seed)) {}

  constexpr std::uint64_t next_u64() noexcept { return mix64(key_ + 0xD1B54A32D192ED03ULL * (counter_++)); }

  // Uniform in [0, 1) with 53 random bits.
  constexpr double uniform() noexcept { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) noexcept { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [0, n). n must be > 0.
  std::uint64_t below(std::uint64_t n) noexcept {
    // Lemire's multiply-shift; bias is < 2^-64 * n and irrelevant here.
    return static_cast<std::uint64_t>((static_cast<unsigned __int128>(next_u64()) * n) >> 64);
  }

  // Standard normal via Box-Muller (one value per call, no caching so the stream stays counter-addressable).
  double normal() noexcept {
    double u1 = uniform();
    const double u2 = uniform();
    if (u1 < 1e-300) u1 = 1e-300;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

  Rng fork(std::uint64_t stream) const noexcept { return Rng(derive_seed(key_, stream)); }

  constexpr std::uint64_t counter() const noexcept { return counter_; }

 private:
  std::uint64_t key_;
  std::uint64_t counter_ = 0;
};

}  // namespace abstain
