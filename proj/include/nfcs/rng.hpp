#pragma once

#include <cmath>
#include <cstdint>

namespace nfcs {

// splitmix64 stream. The whole artifact depends on run-to-run reproducibility,
// so all randomness flows through this instead of std:: distributions (whose
// algorithms are implementation-defined).
class Rng {
 public:
  explicit Rng(uint64_t seed) : state_(seed) {}

  uint64_t next_u64() {
    uint64_t z = (state_ += 0x9E3779B97f4A7C15ull);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
  }

  // Uniform integer in [0, n). Lemire's multiply-shift; debiased.
  uint32_t bounded(uint32_t n) {
    uint64_t x = next_u64() >> 32;
    uint64_t m = x * n;
    uint32_t l = static_cast<uint32_t>(m);
    if (l < n) {
      uint32_t t = (-n) % n;
      while (l < t) {
        x = next_u64() >> 32;
        m = x * n;
        l = static_cast<uint32_t>(m);
      }
    }
    return static_cast<uint32_t>(m >> 32);
  }

  // Uniform in [0, 1), 53-bit resolution.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Box-Muller. The pair's second half is discarded so the entire generator
  // state stays one u64 (checkpoint resume restores it exactly).
  double normal() {
    double u1 = uniform();
    double u2 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    double r = std::sqrt(-2.0 * std::log(u1));
    double a = 2.0 * 3.14159265358979323846 * u2;
    return r * std::cos(a);
  }

  uint64_t state() const { return state_; }
  void set_state(uint64_t s) { state_ = s; }

  // Independent stream for (seed, stream-id) pairs; used to give every
  // evaluation job its own seed so parallelism cannot change results.
  static uint64_t derive(uint64_t seed, uint64_t stream) {
    uint64_t z = seed ^ (0x9E3779B97f4A7C15ull + (stream << 1));
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
  }

 private:
  uint64_t state_;
};

}  // namespace nfcs
