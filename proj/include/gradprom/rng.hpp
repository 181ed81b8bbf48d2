#pragma once

#include <cmath>
#include <cstdint>
#include <string_view>

namespace gradprom {

// splitmix64: the single PRNG used everywhere. Chosen because its output is
// fully specified by the algorithm, so streams are bit-identical across
// platforms and standard-library versions (std::mt19937 distributions are not).
inline std::uint64_t splitmix64_next(std::uint64_t& state) {
  std::uint64_t z = (state += 0x9E3779B97F4A7C15ull);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

inline std::uint64_t fnv1a64(std::string_view s) {
  std::uint64_t h = 0xCBF29CE484222325ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001B3ull;
  }
  return h;
}

// Derives an independent stream seed from (seed, tag, index). Used for the
// per-sample, per-epoch and per-parameter stream keying: no stream ever
// shares state with another, so adding a consumer never perturbs the rest.
inline std::uint64_t derive_seed(std::uint64_t seed, std::string_view tag,
                                 std::uint64_t index = 0) {
  std::uint64_t s = seed;
  splitmix64_next(s);
  s ^= fnv1a64(tag);
  splitmix64_next(s);
  s ^= index * 0xD1342543DE82EF95ull + 0x2545F4914F6CDD1Dull;
  splitmix64_next(s);
  return s;
}

class Rng {
 public:
  explicit Rng(std::uint64_t seed) : state_(seed) {}
  Rng(std::uint64_t seed, std::string_view tag, std::uint64_t index = 0)
      : state_(derive_seed(seed, tag, index)) {}

  std::uint64_t next_u64() { return splitmix64_next(state_); }

  // [0, 1) with 53 random bits.
  double next_double() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * next_double(); }

  // Inclusive on both ends.
  int uniform_int(int lo, int hi) {
    return lo + static_cast<int>(next_u64() % static_cast<std::uint64_t>(hi - lo + 1));
  }

  bool bernoulli(double p) { return next_double() < p; }

  // Box-Muller. Two uniforms per draw; no cached spare so the state advance
  // per call is fixed.
  double normal() {
    double u1 = 1.0 - next_double();  // (0, 1]
    double u2 = next_double();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586476925286766559 * u2);
  }

  // Knuth's product method; fine for the desk-scale means used here (< ~30).
  int poisson(double mean) {
    if (mean <= 0.0) return 0;
    double limit = std::exp(-mean);
    double prod = next_double();
    int k = 0;
    while (prod > limit) {
      prod *= next_double();
      ++k;
    }
    return k;
  }

 private:
  std::uint64_t state_;
};

}  // namespace gradprom
