#pragma once

#include <cstdint>

namespace sapo::rng {

// All randomness in the project goes through splitmix64 so that runs are
// bit-reproducible regardless of the standard library implementation.
inline std::uint64_t splitmix64(std::uint64_t& state) {
  std::uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

inline std::uint64_t hash_combine(std::uint64_t a, std::uint64_t b) {
  std::uint64_t s = a ^ (b + 0x9e3779b97f4a7c15ULL + (a << 6) + (a >> 2));
  return splitmix64(s);
}

// Derives an independent stream seed from a root seed and a few tags
// (stage ids, iteration numbers, batch indices).
template <class... Tags>
std::uint64_t derive(std::uint64_t seed, Tags... tags) {
  ((seed = hash_combine(seed, static_cast<std::uint64_t>(tags))), ...);
  return seed;
}

// Sequential stream.
class Stream {
 public:
  explicit Stream(std::uint64_t seed) : state_(seed) {}

  std::uint64_t next_u64() { return splitmix64(state_); }

  // Uniform in [0, 1), 53 usable bits.
  double next_unit() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  // Uniform in [0, n). n must be > 0.
  std::uint64_t next_below(std::uint64_t n) {
    return static_cast<std::uint64_t>(
        (static_cast<unsigned __int128>(next_u64()) * n) >> 64);
  }

  double next_in(double lo, double hi) { return lo + (hi - lo) * next_unit(); }

 private:
  std::uint64_t state_;
};

// Counter-based form: the value depends only on (key, counter), so parallel
// or out-of-order evaluation cannot change results.
inline double unit_at(std::uint64_t key, std::uint64_t counter) {
  std::uint64_t s = hash_combine(key, counter);
  return static_cast<double>(splitmix64(s) >> 11) * 0x1.0p-53;
}

}  // namespace sapo::rng
