#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>

namespace ctxcomp {

// ----------------------------- error taxonomy -----------------------------

struct Error : std::runtime_error {
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

struct DimensionError : Error { using Error::Error; };     // shape mismatch
struct ParameterError : Error { using Error::Error; };     // bad argument value
struct CapacityError : Error { using Error::Error; };      // sequence too long
struct StateError : Error { using Error::Error; };         // wrong lifecycle order
struct VocabularyError : Error { using Error::Error; };    // unknown symbol / id
struct ConfigError : Error { using Error::Error; };        // invalid configuration
struct PersistenceError : Error { using Error::Error; };   // checkpoint I/O
struct VerificationError : Error { using Error::Error; };  // gradient-check harness
struct NumericError : Error { using Error::Error; };       // NaN/Inf detected
struct TemplateError : Error { using Error::Error; };      // prompt template misuse

// ----------------------------- deterministic RNG -----------------------------

// Seeded splitmix64 stream. The generator is algorithm-stable: the same seed
// and call sequence produce bit-identical doubles on every platform.
class RandomSource {
 public:
  explicit RandomSource(uint64_t seed) : seed_(seed), state_(seed) {}

  uint64_t seed() const { return seed_; }

  uint64_t next_u64() {
    state_ += 0x9e3779b97f4a7c15ULL;
    uint64_t z = state_;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  // Uniform double in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  // Inclusive range. Modulo bias is irrelevant at the ranges used here; what
  // matters is that the mapping is fixed.
  int uniform_int(int lo, int hi) {
    if (hi < lo) throw ParameterError("uniform_int: empty range");
    uint64_t span = static_cast<uint64_t>(hi - lo) + 1;
    return lo + static_cast<int>(next_u64() % span);
  }

  // Standard normal via Box-Muller. Two uniforms per sample, no cached spare,
  // so each call consumes a fixed amount of the stream.
  double normal() {
    double u1 = uniform();
    double u2 = uniform();
    // u1 == 0 would take log(0); nudge onto (0, 1).
    if (u1 <= 0.0) u1 = 0x1.0p-53;
    const double two_pi = 6.283185307179586476925286766559;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(two_pi * u2);
  }

  double normal(double mean, double stddev) { return mean + stddev * normal(); }

  // Derive an independent seed for a named sub-stream without disturbing the
  // parent stream.
  static uint64_t derive(uint64_t seed, uint64_t stream_id) {
    RandomSource r(seed ^ (0x5851f42d4c957f2dULL * (stream_id + 1)));
    return r.next_u64();
  }

 private:
  uint64_t seed_;
  uint64_t state_;
};

}  // namespace ctxcomp
