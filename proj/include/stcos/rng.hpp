#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace stcos {

using Rng = std::mt19937_64;

// SplitMix64 finalizer; used to derive independent substreams from a root seed.
constexpr std::uint64_t mix64(std::uint64_t x) noexcept {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

constexpr std::uint64_t fnv1a(std::string_view s) noexcept {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (char c : s) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001b3ULL;
  }
  return h;
}

/// Seed for the substream identified by `keys` under `seed`.
template <typename... Keys>
constexpr std::uint64_t derive_seed(std::uint64_t seed, Keys... keys) noexcept {
  std::uint64_t s = mix64(seed);
  ((s = mix64(s ^ static_cast<std::uint64_t>(keys))), ...);
  return s;
}

template <typename... Keys>
Rng make_rng(std::uint64_t seed, Keys... keys) {
  return Rng(derive_seed(seed, keys...));
}

/// Uniform double in [0, 1) built from the top 53 bits; identical across standard libraries.
inline double uniform01(Rng& rng) {
  return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

}  // namespace stcos
