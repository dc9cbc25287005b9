#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace ciss {

using Rng = std::mt19937_64;

/// SplitMix64 finaliser.
constexpr std::uint64_t mix64(std::uint64_t z) noexcept {
  z += 0x9e3779b97f4a7c15ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

constexpr std::uint64_t fnv1a(std::string_view s, std::uint64_t h = 0xcbf29ce484222325ULL) noexcept {
  for (unsigned char ch : s) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  return h;
}

/// Seed streams. Every random consumer derives its seed from the root seed
/// through a named stream and up to two indices, so that adding a consumer
/// never perturbs the others:
///
///   derive_seed(root, "corpus.train", scene_index)
///   derive_seed(root, "init")
///   derive_seed(root, "order", step, epoch)
///   derive_seed(root, "replay", step, epoch)
///   derive_seed(root, "expand", step)
constexpr std::uint64_t derive_seed(std::uint64_t root, std::string_view stream, std::uint64_t a = 0,
                                    std::uint64_t b = 0) noexcept {
  std::uint64_t s = mix64(root ^ fnv1a(stream));
  s = mix64(s ^ mix64(a + 0x632be59bd9b4e019ULL));
  return mix64(s ^ mix64(b + 0x8cb92ba72f3d8dd7ULL));
}

inline Rng make_rng(std::uint64_t root, std::string_view stream, std::uint64_t a = 0, std::uint64_t b = 0) {
  return Rng(derive_seed(root, stream, a, b));
}

}  // namespace ciss
