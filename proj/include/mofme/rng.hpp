#pragma once

#include <cmath>
#include <cstdint>

namespace mofme {

// Stream ids for the different noise consumers. Keeping them disjoint means
// e.g. regenerating a dataset never perturbs dropout masks.
namespace streams {
inline constexpr std::uint64_t kInit = 1;
inline constexpr std::uint64_t kData = 2;
inline constexpr std::uint64_t kDropout = 3;
inline constexpr std::uint64_t kShuffle = 4;
inline constexpr std::uint64_t kAugment = 5;
inline constexpr std::uint64_t kEval = 6;
inline constexpr std::uint64_t kBench = 7;
}  // namespace streams

// Counter-based generator: value = f(seed, stream, draw index). Draws are
// random-access and identical across platforms, which is what makes datasets,
// dropout masks and init reproducible bit-for-bit.
class RngStream {
 public:
  RngStream(std::uint64_t seed, std::uint64_t stream)
      : base_(mix(seed ^ 0x6a09e667f3bcc909ull, stream)), counter_(0) {}

  std::uint64_t next_u64() { return at(counter_++); }

  // Uniform in [0, 1), 53-bit resolution.
  double uniform() { return double(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [0, n). n must be positive.
  std::uint64_t uniform_index(std::uint64_t n) { return next_u64() % n; }

  // Standard normal via Box-Muller; consumes exactly two draws.
  double normal() {
    double u1 = double((next_u64() >> 11) | 1ull) * 0x1.0p-53;  // never 0
    double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586477 * u2);
  }

  std::uint64_t counter() const { return counter_; }
  void seek(std::uint64_t c) { counter_ = c; }

 private:
  // splitmix64 finalizer, addressable at an arbitrary index.
  static std::uint64_t finalize(std::uint64_t z) {
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
  }
  static std::uint64_t mix(std::uint64_t a, std::uint64_t b) {
    return finalize(a + 0x9e3779b97f4a7c15ull * (b + 1));
  }
  std::uint64_t at(std::uint64_t i) const {
    return finalize(base_ + 0x9e3779b97f4a7c15ull * (i + 1));
  }

  std::uint64_t base_;
  std::uint64_t counter_;
};

}  // namespace mofme
