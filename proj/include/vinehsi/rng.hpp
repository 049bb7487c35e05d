#ifndef VINEHSI_RNG_HPP
#define VINEHSI_RNG_HPP

/// Deterministic random number generation.
///
/// Two flavours are used across the pipeline:
///  - Stream: a stateful splitmix64 sequence for shuffles and sampling.
///  - keyed draws: stateless hashes of (seed, step, lane, index) used where a
///    value must not depend on evaluation order (dropout masks, per-patch
///    augmentation picks). Identical keys give identical draws on any machine.

#include <cmath>
#include <cstdint>
#include <vector>

namespace vinehsi::rng {

inline std::uint64_t splitmix64(std::uint64_t& state) {
  state += 0x9e3779b97f4a7c15ull;
  std::uint64_t z = state;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

/// Stateless mix of up to four 64-bit words.
inline std::uint64_t mix(std::uint64_t a, std::uint64_t b = 0, std::uint64_t c = 0,
                         std::uint64_t d = 0) {
  std::uint64_t s = a;
  std::uint64_t h = splitmix64(s);
  s ^= b + 0x9e3779b97f4a7c15ull;
  h ^= splitmix64(s);
  s ^= c + 0xc2b2ae3d27d4eb4full;
  h ^= splitmix64(s);
  s ^= d + 0x165667b19e3779f9ull;
  h ^= splitmix64(s);
  return h;
}

/// Uniform double in [0, 1) from a 64-bit word (53 mantissa bits).
inline double to_unit(std::uint64_t x) {
  return static_cast<double>(x >> 11) * 0x1.0p-53;
}

/// Stateful deterministic stream.
class Stream {
 public:
  explicit Stream(std::uint64_t seed) : state_(seed) {}

  std::uint64_t next_u64() { return splitmix64(state_); }
  double next_unit() { return to_unit(next_u64()); }

  /// Uniform integer in [0, n); n > 0.
  std::uint64_t next_below(std::uint64_t n) {
    // Rejection sampling keeps the draw exactly uniform.
    std::uint64_t threshold = (0 - n) % n;
    for (;;) {
      std::uint64_t r = next_u64();
      if (r >= threshold) return r % n;
    }
  }

  double next_uniform(double lo, double hi) { return lo + (hi - lo) * next_unit(); }

  /// Standard normal via Box-Muller.
  double next_normal() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    double u1 = next_unit();
    double u2 = next_unit();
    while (u1 <= 0.0) u1 = next_unit();
    double r = std::sqrt(-2.0 * std::log(u1));
    double theta = 6.283185307179586476925286766559 * u2;
    spare_ = r * std::sin(theta);
    have_spare_ = true;
    return r * std::cos(theta);
  }

  /// In-place Fisher-Yates shuffle.
  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::size_t j = static_cast<std::size_t>(next_below(i));
      std::swap(v[i - 1], v[j]);
    }
  }

 private:
  std::uint64_t state_;
  bool have_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace vinehsi::rng

#endif
