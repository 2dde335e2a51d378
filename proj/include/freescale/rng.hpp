#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>

namespace freescale {

// splitmix64; chosen over std distributions so that streams are identical
// across standard libraries and platforms.
inline std::uint64_t rng_next(std::uint64_t& state) {
  state += 0x9e3779b97f4a7c15ULL;
  std::uint64_t z = state;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

/// Uniform integer in [0, n). n must be positive.
inline std::uint64_t rng_below(std::uint64_t& state, std::uint64_t n) {
  // Lemire multiply-shift; bias is eliminated by rejection.
  std::uint64_t x = rng_next(state);
  unsigned __int128 m = static_cast<unsigned __int128>(x) * n;
  auto lo = static_cast<std::uint64_t>(m);
  if (lo < n) {
    const std::uint64_t threshold = (0 - n) % n;
    while (lo < threshold) {
      x = rng_next(state);
      m = static_cast<unsigned __int128>(x) * n;
      lo = static_cast<std::uint64_t>(m);
    }
  }
  return static_cast<std::uint64_t>(m >> 64);
}

/// Uniform double in [0, 1).
inline double rng_double(std::uint64_t& state) {
  return static_cast<double>(rng_next(state) >> 11) * 0x1.0p-53;
}

/// Standard normal via Box-Muller (one value per call; the pair's second half
/// is discarded to keep the stream position independent of call parity).
inline double rng_normal(std::uint64_t& state) {
  double u1 = rng_double(state);
  double u2 = rng_double(state);
  while (u1 <= 0.0) u1 = rng_double(state);
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

template <typename T>
void rng_shuffle(std::uint64_t& state, std::vector<T>& v) {
  for (std::size_t i = v.size(); i > 1; --i) {
    std::size_t j = static_cast<std::size_t>(rng_below(state, i));
    std::swap(v[i - 1], v[j]);
  }
}

}  // namespace freescale
