#pragma once

// Seeded random streams with portable output.
//
// Every randomized decision in the simulator draws from an Rng. std::mt19937_64
// with single-value seeding is fully specified by the standard, but the stdlib
// *distributions* are not, so uniform ints/reals are derived here from raw
// 64-bit draws and nothing else. Two runs with the same seed therefore produce
// identical streams on any conforming implementation.

#include <cstdint>
#include <random>
#include <utility>
#include <vector>

namespace localswarm {

// SplitMix64: used only to stretch/whiten seeds for sub-streams.
inline std::uint64_t splitmix64(std::uint64_t& state) {
  std::uint64_t z = (state += 0x9e3779b97f4a7c15ull);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

class Rng {
 public:
  Rng() : Rng(0, 0) {}

  // Sub-stream `stream` of master seed `seed`. Distinct streams are
  // statistically independent; the mapping is stable across versions.
  Rng(std::uint64_t seed, std::uint64_t stream) {
    std::uint64_t s = seed;
    (void)splitmix64(s);
    s ^= 0x6a09e667f3bcc909ull * (stream + 1);
    gen_.seed(splitmix64(s));
  }

  std::uint64_t next_u64() { return gen_(); }

  // Uniform integer in [0, n). n == 0 is a caller bug; returns 0.
  std::uint64_t below(std::uint64_t n) {
    if (n <= 1) return 0;
    // Rejection sampling: unbiased and implementation-independent.
    const std::uint64_t limit = ~std::uint64_t{0} - (~std::uint64_t{0} % n + 1) % n;
    std::uint64_t x;
    do {
      x = gen_();
    } while (x > limit);
    return x % n;
  }

  std::uint32_t below32(std::uint32_t n) { return static_cast<std::uint32_t>(below(n)); }

  // Uniform double in [0, 1) with 53 random bits.
  double unit() { return static_cast<double>(gen_() >> 11) * 0x1.0p-53; }

  // Uniform double in [a, b).
  double uniform(double a, double b) { return a + (b - a) * unit(); }

  bool chance(double p) { return unit() < p; }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::size_t j = static_cast<std::size_t>(below(i));
      std::swap(v[i - 1], v[j]);
    }
  }

  // Sample `k` distinct elements of `pool` (order randomized) via a partial
  // Fisher-Yates on the pool itself; the pool's element *set* is preserved.
  template <typename T>
  std::vector<T> sample(std::vector<T>& pool, std::size_t k) {
    if (k > pool.size()) k = pool.size();
    std::vector<T> out;
    out.reserve(k);
    for (std::size_t i = 0; i < k; ++i) {
      std::size_t j = i + static_cast<std::size_t>(below(pool.size() - i));
      std::swap(pool[i], pool[j]);
      out.push_back(pool[i]);
    }
    return out;
  }

 private:
  std::mt19937_64 gen_;
};

}  // namespace localswarm
