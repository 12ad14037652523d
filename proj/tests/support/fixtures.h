#pragma once

#include <cstdint>

#include <torch/torch.h>

#include "retrostory/config.h"
#include "retrostory/story_transformer.h"

namespace fixture {

// A model small enough for exhaustive property checks: 16x16 frames on a
// 4x4 grid, three blocks with cross-attention in blocks 0 and 2.
retrostory::ModelConfig tiny_config();

// Random but valid batch for `config`: captions without padding in the
// first half, random image prefix of `image_rows` tokens.
retrostory::model::TokenBatch random_batch(const retrostory::ModelConfig& config, std::int64_t batch,
                                           std::int64_t image_rows, std::uint64_t seed);

// Fills every parameter and buffer with fresh normal noise of scale `std`
// so zero-initialized branches take part in checks.
void randomize(torch::nn::Module& module, double std, std::uint64_t seed);

}  // namespace fixture
