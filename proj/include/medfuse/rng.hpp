#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace medfuse {

// SplitMix64 finalizer; used to derive independent stream seeds.
inline std::uint64_t mix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline std::uint64_t hash_name(std::string_view name) {
  std::uint64_t h = 0xcbf29ce484222325ULL;  // FNV-1a
  for (unsigned char c : name) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::uint64_t derive_seed(std::uint64_t seed, std::string_view stream) {
  return mix64(seed ^ mix64(hash_name(stream)));
}

inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t index) {
  return mix64(seed ^ mix64(index + 0x632be59bd9b4e019ULL));
}

using Rng = std::mt19937_64;

// Named RNG stream. Every random draw in the project comes from a stream
// keyed by (run seed, purpose), so arms of an experiment that share a seed
// see identical draws for every purpose they have in common.
inline Rng make_stream(std::uint64_t seed, std::string_view stream) {
  return Rng(derive_seed(seed, stream));
}

// Hash of the first `draws` outputs of a stream.
inline std::uint64_t stream_fingerprint(std::uint64_t seed, std::string_view stream,
                                        int draws = 16) {
  Rng rng = make_stream(seed, stream);
  std::uint64_t h = 0;
  for (int i = 0; i < draws; ++i) h = mix64(h ^ rng());
  return h;
}

}  // namespace medfuse
