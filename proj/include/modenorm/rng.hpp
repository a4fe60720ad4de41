#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>

namespace modenorm {

// Deterministic 64-bit random stream. Equal seeds give byte-identical draw
// sequences on a given platform; every normal draw consumes exactly two
// uniform draws, so streams stay aligned across code paths.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : seed_(seed), engine_(seed) {}

  std::uint64_t seed() const { return seed_; }

  std::uint64_t next_u64() { return engine_(); }

  // Uniform on (0, 1]; zero is excluded so logarithms stay finite.
  double next_uniform() {
    return (static_cast<double>(engine_() >> 11) + 1.0) * 0x1.0p-53;
  }

  // Standard normal via Box-Muller: sqrt(-2 ln u1) * cos(2 pi u2).
  double next_normal() {
    const double u1 = next_uniform();
    const double u2 = next_uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(kTwoPi * u2);
  }

  // Uniform on [lo, hi).
  double next_range(double lo, double hi) { return lo + (hi - lo) * (next_uniform() - 0x1.0p-53); }

  // Uniform integer in [0, bound).
  std::uint64_t next_below(std::uint64_t bound) {
    if (bound == 0) throw std::invalid_argument("Rng::next_below: bound must be nonzero");
    return engine_() % bound;
  }

  // Independent deterministic substream; same (seed, tag) gives the same stream.
  Rng split(std::uint64_t tag) const { return Rng(mix(seed_, tag)); }

 private:
  static constexpr double kTwoPi = 6.283185307179586476925286766559;

  static std::uint64_t mix(std::uint64_t a, std::uint64_t b) {
    std::uint64_t z = a + 0x9E3779B97F4A7C15ull * (b + 1);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
  }

  std::uint64_t seed_;
  std::mt19937_64 engine_;
};

}  // namespace modenorm
