#pragma once

#include <cstdint>
#include <random>
#include <span>

#include "retrostory/config.h"

namespace retrostory {

// Uniform double in [0, 1) from the top 53 bits; identical on every platform.
inline double uniform01(std::mt19937_64& rng) {
  return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

// Derives an independent stream seed for `stream` from a run seed.
std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream);

// Draws one token id from raw logits. temperature <= 0 or top_k == 1 is
// greedy (first maximum); top_k <= 0 keeps the full distribution.
std::int64_t sample_token(std::span<const float> logits, double temperature, int top_k,
                          std::mt19937_64& rng);

}  // namespace retrostory
