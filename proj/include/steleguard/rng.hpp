#pragma once

#include <cstdint>

namespace steleguard {

// splitmix64 finalizer, used to derive independent seed streams.
inline uint64_t mix_seed(uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

inline uint64_t derive_seed(uint64_t seed, uint64_t stream) { return mix_seed(seed ^ mix_seed(stream)); }

}  // namespace steleguard
