#pragma once

// Deterministic RNG. All randomness in the project flows from one u64 seed;
// consumers derive independent streams by hashing a purpose string, so adding
// a new consumer never perturbs existing streams.

#include <cmath>
#include <cstdint>
#include <string_view>

namespace kinepose {

namespace detail {

inline std::uint64_t splitmix64(std::uint64_t& state) {
  state += 0x9e3779b97f4a7c15ull;
  std::uint64_t z = state;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

inline std::uint64_t fnv1a64(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return h;
}

}  // namespace detail

class Rng {
 public:
  explicit Rng(std::uint64_t seed) : state_(seed) {
    // Decorrelate trivially related seeds (0, 1, 2, ...).
    next_u64();
    next_u64();
  }

  // Stream derivation: one root seed + a purpose string -> independent stream.
  static Rng stream(std::uint64_t seed, std::string_view purpose) {
    return Rng(seed ^ detail::fnv1a64(purpose));
  }

  std::uint64_t next_u64() { return detail::splitmix64(state_); }

  // Uniform in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [0, n).
  std::uint64_t uniform_int(std::uint64_t n) {
    // Multiply-shift bounded draw; bias is negligible for desk-scale n.
    return static_cast<std::uint64_t>(uniform() * static_cast<double>(n));
  }

  bool coin() { return (next_u64() & 1ull) != 0; }

  // Standard normal via Box-Muller (fresh pair per call, cached second value).
  double normal() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    double u1 = 0.0;
    do {
      u1 = uniform();
    } while (u1 <= 0.0);
    double u2 = uniform();
    double r = std::sqrt(-2.0 * std::log(u1));
    double a = 6.283185307179586476925286766559 * u2;
    spare_ = r * std::sin(a);
    have_spare_ = true;
    return r * std::cos(a);
  }

  double normal(double mean, double stddev) { return mean + stddev * normal(); }

 private:
  std::uint64_t state_ = 0;
  double spare_ = 0.0;
  bool have_spare_ = false;
};

}  // namespace kinepose
