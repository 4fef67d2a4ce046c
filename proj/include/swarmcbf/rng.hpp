#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>

namespace swarmcbf {

/// Splittable counter-based random stream (splitmix64 core).
///
/// Streams are derived by hashing a tuple of identifiers, e.g.
/// (seed, episode index, robot id), so every consumer gets an independent,
/// reproducible sequence no matter how other streams are advanced.
class RngStream {
 public:
  explicit RngStream(std::uint64_t state = 0) : state_(state) {}

  static RngStream derive(std::uint64_t seed, std::uint64_t a = 0,
                          std::uint64_t b = 0, std::uint64_t c = 0) {
    std::uint64_t s = mix(seed + 0x9E3779B97F4A7C15ull);
    s = mix(s ^ mix(a + 0xBF58476D1CE4E5B9ull));
    s = mix(s ^ mix(b + 0x94D049BB133111EBull));
    s = mix(s ^ mix(c + 0xD6E8FEB86659FD93ull));
    return RngStream(s);
  }

  std::uint64_t next_u64() {
    state_ += 0x9E3779B97F4A7C15ull;
    return mix(state_);
  }

  /// Uniform double in [0, 1).
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Uniform integer in [0, n).
  std::uint64_t uniform_index(std::uint64_t n) {
    if (n == 0) throw std::invalid_argument("uniform_index: n must be > 0");
    // Rejection sampling to avoid modulo bias.
    const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    std::uint64_t x;
    do {
      x = next_u64();
    } while (x >= limit);
    return x % n;
  }

  /// Poisson sample via Knuth's product method. Exact for the moderate means
  /// used by the delay model; guarded against exp underflow.
  int poisson(double mean) {
    if (!(mean >= 0.0)) throw std::invalid_argument("poisson: mean must be >= 0");
    if (mean == 0.0) return 0;
    if (mean > 500.0) throw std::invalid_argument("poisson: mean too large for product method");
    const double limit = std::exp(-mean);
    int k = 0;
    double p = 1.0;
    do {
      ++k;
      p *= uniform();
    } while (p > limit);
    return k - 1;
  }

 private:
  static std::uint64_t mix(std::uint64_t z) {
    z ^= z >> 30;
    z *= 0xBF58476D1CE4E5B9ull;
    z ^= z >> 27;
    z *= 0x94D049BB133111EBull;
    z ^= z >> 31;
    return z;
  }

  std::uint64_t state_;
};

}  // namespace swarmcbf
