#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string_view>

namespace sparseloc {

// splitmix64 finalizer; also used as the hash mixer for coordinate keys.
inline std::uint64_t mix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

/// Seedable random stream. All sampling helpers are implemented explicitly
/// on top of mt19937_64 so that a fixed seed yields the same byte-level
/// sequence regardless of the standard library's distribution internals.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : gen_(seed) {}

  std::uint64_t next_u64() { return gen_(); }

  /// Uniform double in [0, 1).
  double uniform() {
    return static_cast<double>(gen_() >> 11) * 0x1.0p-53;
  }

  /// Uniform double in [lo, hi).
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Uniform integer in [0, n). n must be > 0.
  std::uint64_t uniform_index(std::uint64_t n) {
    // rejection sampling to avoid modulo bias
    const std::uint64_t limit = n * (UINT64_MAX / n);
    std::uint64_t r;
    do {
      r = gen_();
    } while (r >= limit);
    return r % n;
  }

  bool bernoulli(double p) { return uniform() < p; }

  /// Standard normal via Box-Muller (one value per call, no caching, so the
  /// stream position is a pure function of the call count).
  double normal() {
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) *
           std::cos(2.0 * 3.14159265358979323846 * u2);
  }

  /// Fisher-Yates shuffle.
  template <typename Vec>
  void shuffle(Vec& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      const std::size_t j = static_cast<std::size_t>(uniform_index(i));
      std::swap(v[i - 1], v[j]);
    }
  }

 private:
  std::mt19937_64 gen_;
};

/// Derives a stream seed from a master seed, a purpose tag and an index.
/// Every random stream in the pipeline is keyed this way, so reruns and
/// resumed runs consume identical sequences independent of scheduling.
inline std::uint64_t derive_seed(std::uint64_t master, std::string_view tag,
                                 std::uint64_t index = 0) {
  std::uint64_t h = mix64(master);
  for (const char c : tag) h = mix64(h ^ static_cast<std::uint64_t>(static_cast<unsigned char>(c)));
  return mix64(h ^ index);
}

}  // namespace sparseloc
