#include "retrostory/sampler.h"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

namespace retrostory {

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream) {
  // splitmix64 finalizer over the combined value
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

std::int64_t sample_token(std::span<const float> logits, double temperature, int top_k,
                          std::mt19937_64& rng) {
  const auto n = static_cast<std::int64_t>(logits.size());
  if (temperature <= 0.0 || top_k == 1)
    return std::distance(logits.begin(), std::max_element(logits.begin(), logits.end()));

  std::vector<std::int64_t> order(static_cast<size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  const auto keep = (top_k <= 0 || top_k >= n) ? n : top_k;
  std::partial_sort(order.begin(), order.begin() + keep, order.end(),
                    [&](std::int64_t a, std::int64_t b) {
                      return logits[a] != logits[b] ? logits[a] > logits[b] : a < b;
                    });
  order.resize(static_cast<size_t>(keep));

  const double top = logits[order.front()] / temperature;
  std::vector<double> weights(order.size());
  double total = 0.0;
  for (size_t i = 0; i < order.size(); ++i) {
    weights[i] = std::exp(logits[order[i]] / temperature - top);
    total += weights[i];
  }
  double u = uniform01(rng) * total;
  for (size_t i = 0; i < order.size(); ++i) {
    u -= weights[i];
    if (u < 0.0) return order[i];
  }
  return order.back();
}

}  // namespace retrostory
