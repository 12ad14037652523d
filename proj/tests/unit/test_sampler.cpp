#include "testing.h"
#include "retrostory/sampler.h"

#include <cmath>
#include <map>
#include <vector>

using namespace retrostory;

TEST_SUITE("sampler") {
  TEST_CASE("greedy picks the first maximum") {
    std::mt19937_64 rng(1);
    const std::vector<float> logits = {0.1f, 2.0f, 2.0f, -1.0f};
    CHECK(sample_token(logits, 0.0, 0, rng) == 1);
    CHECK(sample_token(logits, 1.0, 1, rng) == 1);
  }

  TEST_CASE("top-k never leaves the k best tokens") {
    std::mt19937_64 rng(2);
    const std::vector<float> logits = {5.0f, 4.0f, 3.0f, 2.0f, 1.0f, 0.0f};
    for (int i = 0; i < 500; ++i) CHECK(sample_token(logits, 3.0, 2, rng) < 2);
  }

  TEST_CASE("sampling frequencies follow the softmax") {
    std::mt19937_64 rng(3);
    const std::vector<float> logits = {0.0f, std::log(3.0f)};
    int ones = 0;
    const int n = 20000;
    for (int i = 0; i < n; ++i) ones += sample_token(logits, 1.0, 0, rng) == 1;
    CHECK(ones / static_cast<double>(n) == doctest::Approx(0.75).epsilon(0.03));
  }

  TEST_CASE("same seed gives the same draws") {
    const std::vector<float> logits = {0.3f, 0.2f, 0.1f, 0.0f};
    std::mt19937_64 a(9), b(9);
    for (int i = 0; i < 100; ++i) CHECK(sample_token(logits, 1.0, 0, a) == sample_token(logits, 1.0, 0, b));
  }

  TEST_CASE("mix_seed separates streams") {
    CHECK(mix_seed(1, 0) != mix_seed(1, 1));
    CHECK(mix_seed(1, 0) != mix_seed(2, 0));
    CHECK(mix_seed(5, 7) == mix_seed(5, 7));
  }

  TEST_CASE("uniform01 stays in [0, 1)") {
    std::mt19937_64 rng(4);
    for (int i = 0; i < 1000; ++i) {
      const double u = uniform01(rng);
      CHECK(u >= 0.0);
      CHECK(u < 1.0);
    }
  }
}
