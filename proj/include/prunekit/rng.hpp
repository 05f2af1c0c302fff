#pragma once

#include <cmath>
#include <cstdint>
#include <string_view>

namespace prunekit {

// Deterministic, platform-independent RNG (splitmix64 core). std::<random>
// distributions are implementation-defined, so uniform/normal conversion is
// done by hand to keep runs byte-reproducible.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : state_(seed) {}

  std::uint64_t next_u64() {
    std::uint64_t z = (state_ += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  // Uniform in [0, 1).
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  // Uniform in [lo, 1 - lo]; keeps logit(u) finite.
  double uniform_clamped(double lo) {
    const double u = uniform();
    const double hi = 1.0 - lo;
    return u < lo ? lo : (u > hi ? hi : u);
  }

  // Standard normal, Box-Muller with cached spare.
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    const double u1 = 1.0 - uniform();  // (0, 1]
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double theta = 2.0 * 3.14159265358979323846 * u2;
    spare_ = r * std::sin(theta);
    has_spare_ = true;
    return r * std::cos(theta);
  }

  std::size_t below(std::size_t n) {
    return static_cast<std::size_t>(next_u64() % static_cast<std::uint64_t>(n));
  }

 private:
  std::uint64_t state_;
  bool has_spare_{false};
  double spare_{0.0};
};

inline std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const char c : s) {
    h ^= static_cast<std::uint8_t>(c);
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::uint64_t mix_u64(std::uint64_t a, std::uint64_t b) {
  std::uint64_t z = a + 0x9e3779b97f4a7c15ULL + (b << 6) + (b >> 2);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  return z ^ (z >> 27);
}

// Independent stream keyed by (seed, step, name); used for gate noise so
// replicas can replay the exact same u per gate per step.
inline Rng stream_rng(std::uint64_t seed, std::uint64_t step, std::string_view name) {
  return Rng(mix_u64(mix_u64(seed, step), fnv1a(name)));
}

}  // namespace prunekit
