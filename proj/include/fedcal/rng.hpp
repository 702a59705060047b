#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>

namespace fedcal {

using Rng = std::mt19937_64;

/// SplitMix64 finalizer; a bijective 64-bit mixer.
constexpr std::uint64_t mix64(std::uint64_t x) noexcept {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

/// Derive an independent stream seed from a base seed and a list of tags
/// (round index, client id, purpose code, ...). Order of tags matters.
constexpr std::uint64_t derive_seed(std::uint64_t base,
                                    std::initializer_list<std::uint64_t> tags) noexcept {
  std::uint64_t h = mix64(base);
  for (std::uint64_t t : tags) h = mix64(h ^ mix64(t + 0x632BE59BD9B4E019ULL));
  return h;
}

inline Rng make_rng(std::uint64_t base, std::initializer_list<std::uint64_t> tags = {}) {
  return Rng(derive_seed(base, tags));
}

/// Purpose codes for derived streams, so two consumers never share a stream.
namespace stream {
inline constexpr std::uint64_t kInit = 1;
inline constexpr std::uint64_t kSelect = 2;
inline constexpr std::uint64_t kTrain = 3;
inline constexpr std::uint64_t kScaler = 4;
inline constexpr std::uint64_t kMatching = 5;
inline constexpr std::uint64_t kScalerNoise = 6;
inline constexpr std::uint64_t kPartition = 7;
inline constexpr std::uint64_t kHoldout = 8;
inline constexpr std::uint64_t kScalerInit = 9;
inline constexpr std::uint64_t kData = 10;
inline constexpr std::uint64_t kLambda = 11;
}  // namespace stream

}  // namespace fedcal
