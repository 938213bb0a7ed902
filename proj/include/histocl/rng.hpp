#pragma once

#include <cmath>
#include <cstdint>
#include <random>

namespace histocl {

using Rng = std::mt19937_64;

/// SplitMix64 finalizer. Used to derive independent stream seeds from a base
/// seed and a salt so that sub-computations never share generator state.
constexpr std::uint64_t mix_seed(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

constexpr std::uint64_t derive_seed(std::uint64_t base, std::uint64_t salt) {
  return mix_seed(base ^ mix_seed(salt));
}

inline Rng make_rng(std::uint64_t base, std::uint64_t salt) {
  return Rng(derive_seed(base, salt));
}

/// Uniform real in [lo, hi]. Deterministic per generator state; does not go
/// through std::uniform_real_distribution so the draw sequence is identical
/// across standard library implementations.
inline double uniform(Rng& rng, double lo, double hi) {
  const double u = static_cast<double>(rng() >> 11) * 0x1.0p-53;
  return lo + (hi - lo) * u;
}

/// Uniform integer in [0, n). Lemire-style rejection keeps it unbiased.
inline std::uint64_t uniform_index(Rng& rng, std::uint64_t n) {
  if (n <= 1) return 0;
  const std::uint64_t limit = (~std::uint64_t{0}) - ((~std::uint64_t{0}) % n);
  std::uint64_t r;
  do {
    r = rng();
  } while (r >= limit);
  return r % n;
}

/// Standard normal via Box-Muller; portable for the same reason as uniform().
inline double normal(Rng& rng, double mean = 0.0, double stddev = 1.0) {
  double u1 = uniform(rng, 0.0, 1.0);
  while (u1 <= 0.0) u1 = uniform(rng, 0.0, 1.0);
  const double u2 = uniform(rng, 0.0, 1.0);
  const double r = std::sqrt(-2.0 * std::log(u1));
  return mean + stddev * r * std::cos(6.283185307179586 * u2);
}

/// Fisher-Yates with uniform_index.
template <typename It>
void shuffle(It first, It last, Rng& rng) {
  const auto n = static_cast<std::uint64_t>(last - first);
  for (std::uint64_t i = n; i > 1; --i) {
    const auto j = uniform_index(rng, i);
    std::swap(first[i - 1], first[j]);
  }
}

}  // namespace histocl
