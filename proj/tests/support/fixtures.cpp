#include "fixtures.h"

namespace fixture {

using namespace retrostory;

ModelConfig tiny_config() {
  ModelConfig c;
  c.image_size = 16;
  c.grid_size = 4;
  c.code_dim = 8;
  c.codebook_size = 16;
  c.vae_channels = 8;
  c.d_model = 32;
  c.n_heads = 4;
  c.n_blocks = 3;
  c.retro_density = 2;
  c.text_vocab = 20;
  c.text_length = 6;
  c.prompt_length = 2;
  c.max_frames = 4;
  c.sentence_dim = 16;
  c.story_heads = 2;
  return c;
}

model::TokenBatch random_batch(const ModelConfig& config, std::int64_t batch, std::int64_t image_rows,
                               std::uint64_t seed) {
  auto gen = at::detail::createCPUGenerator(seed);
  const auto t = config.max_frames, n = config.text_length;
  model::TokenBatch b;
  b.story_captions = torch::randint(4, config.text_vocab, {batch, t, n}, gen, torch::kLong);
  b.story_captions.slice(2, n / 2 + 1, n).zero_();
  b.story_valid = torch::ones({batch, t}, torch::kBool);
  b.frame_index = torch::randint(1, t, {batch}, gen, torch::kLong);
  b.captions = b.story_captions.index({torch::arange(batch), b.frame_index}).clone();
  b.images = torch::randint(0, config.codebook_size, {batch, image_rows}, gen, torch::kLong);
  b.source = torch::randint(0, config.codebook_size, {batch, config.image_tokens()}, gen, torch::kLong);
  return b;
}

void randomize(torch::nn::Module& module, double std, std::uint64_t seed) {
  auto gen = at::detail::createCPUGenerator(seed);
  torch::NoGradGuard no_grad;
  for (auto& p : module.parameters())
    p.copy_(torch::randn(p.sizes(), gen, torch::TensorOptions().dtype(p.dtype())) * std);
}

}  // namespace fixture
