#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "retrostory/attention.h"
#include "retrostory/conditioning.h"
#include "retrostory/config.h"
#include "retrostory/tokenizer.h"

namespace retrostory::model {

// One training/inference batch for the story transformer. Row r asks for
// frame frame_index[r] of a story whose captions are story_captions[r].
struct TokenBatch {
  torch::Tensor captions;        // [B, N_text] int64, caption of the target frame
  torch::Tensor images;          // [B, n] int64, target image tokens, n <= N_img
  torch::Tensor story_captions;  // [B, T, N_text] int64, every caption of the story
  torch::Tensor story_valid;     // [B, T] bool, optional (all valid when undefined)
  torch::Tensor frame_index;     // [B] int64
  torch::Tensor source;          // [B, N_img] int64, source frame tokens

  std::int64_t size() const { return captions.size(0); }
};

struct LmLoss {
  torch::Tensor total;
  torch::Tensor text;
  torch::Tensor image;
};

// Parameter groups; the training regimes freeze and schedule by group.
enum class ParamGroup { kBackbone, kEmbeddings, kRetro, kStory, kPrompt };
const char* to_string(ParamGroup group);
ParamGroup group_of(const std::string& parameter_name);

struct ParameterCensus {
  std::map<std::string, std::int64_t> by_group;
  std::int64_t total = 0;

  std::int64_t count(ParamGroup g) const;
  // Added cross-attention parameters relative to the rest of the model.
  double retro_increase() const;
};

struct BlockCache {
  attention::KeyValue self;
  attention::KeyValue cross;
};

// Per-call incremental decoding state; never shared between calls.
struct DecodeState {
  std::vector<BlockCache> blocks;
  std::int64_t length = 0;
};

// Pre-norm transformer block with an optional cross-attention layer between
// the causal self-attention and the feed-forward layer.
class BlockImpl : public torch::nn::Module {
 public:
  BlockImpl(const ModelConfig& config, bool retro);

  // x [B, L, D]; c_img [B, N_img, D] (required iff retro); mask [L, L] bool.
  torch::Tensor forward(const torch::Tensor& x, const torch::Tensor& c_img,
                        const torch::Tensor& mask);
  // x_new [B, n, D] appended after cache.self; cache.cross must be filled.
  torch::Tensor forward_cached(const torch::Tensor& x_new, BlockCache& cache);

  bool retro() const { return retro_; }

  torch::nn::LayerNorm ln_self{nullptr}, ln_cross{nullptr}, ln_ffn{nullptr};
  attention::MultiHeadAttention self_attn{nullptr}, cross_attn{nullptr};
  torch::nn::Linear fc1{nullptr}, fc2{nullptr};

 private:
  torch::Tensor feed_forward(const torch::Tensor& x);
  bool retro_;
};
TORCH_MODULE(Block);

class StoryTransformerImpl : public torch::nn::Module {
 public:
  explicit StoryTransformerImpl(const ModelConfig& config);

  const ModelConfig& config() const { return config_; }

  // Source frame tokens [B, N_img] -> conditioning rows [B, N_img, D].
  torch::Tensor embed_source(const torch::Tensor& source_tokens);
  // All captions [B, T, N_text] -> S_global [B, T, D]. Undefined when the
  // model has no story encoder.
  torch::Tensor story_context(const torch::Tensor& story_captions,
                              const torch::Tensor& valid = {});
  // P_theta [P, D], undefined when P == 0.
  torch::Tensor prompt();

  // Embedded [prompt | story | caption | image prefix] for a batch.
  std::pair<torch::Tensor, conditioning::LayoutSpec> layout_sequence(
      const torch::Tensor& captions, const torch::Tensor& story_vec,
      const torch::Tensor& image_prefix);

  // Embedded input [B, L, D] -> logits [B, L, V_text + V_img].
  torch::Tensor forward_embedded(const torch::Tensor& x, const torch::Tensor& c_img);
  torch::Tensor forward_logits(const TokenBatch& batch);
  LmLoss lm_loss(const torch::Tensor& logits, const TokenBatch& batch) const;

  // Autoregressive decoding of N_img tokens per row. Row r draws from an RNG
  // seeded with row_seeds[r]. Returns int64 [B, N_img].
  torch::Tensor sample_images(const torch::Tensor& captions, const torch::Tensor& story_vec,
                              const torch::Tensor& c_img, const SamplerConfig& sampler,
                              std::span<const std::uint64_t> row_seeds);

  // Same decode without the KV cache; used to validate the cached path.
  torch::Tensor sample_images_uncached(const torch::Tensor& captions,
                                       const torch::Tensor& story_vec,
                                       const torch::Tensor& c_img, const SamplerConfig& sampler,
                                       std::span<const std::uint64_t> row_seeds);

  // One frame: caption [N_text], story vector [D] (or undefined), c_img [N_img, D].
  tokenizer::ImageTokenGrid sample_frame(const torch::Tensor& caption,
                                         const torch::Tensor& story_vec,
                                         const torch::Tensor& c_img,
                                         const SamplerConfig& sampler);

  // Frames 2..T of a story: captions [T, N_text], source tokens [N_img]. Each
  // target frame t uses caption t, S_global[t] and the same source frame.
  std::vector<tokenizer::ImageTokenGrid> generate_story(const torch::Tensor& story_captions,
                                                        const torch::Tensor& source_tokens,
                                                        const SamplerConfig& sampler);

  ParameterCensus census() const;

  // Sets every cross-attention output projection to zero.
  void zero_cross_attention_outputs();

  torch::nn::Embedding text_embedding{nullptr}, image_embedding{nullptr};
  torch::Tensor text_position, image_position, source_position;
  conditioning::SentenceEncoder sentence_encoder{nullptr};
  conditioning::StoryEncoder story_encoder{nullptr};
  conditioning::PromptNetwork prompt_network{nullptr};
  torch::nn::ModuleList blocks{nullptr};
  torch::nn::LayerNorm ln_final{nullptr};
  torch::nn::Linear head{nullptr};

 private:
  torch::Tensor embed_text(const torch::Tensor& captions);
  torch::Tensor embed_images(const torch::Tensor& images, std::int64_t offset);
  torch::Tensor forward_cached(const torch::Tensor& x_new, DecodeState& state);
  DecodeState start_decode(const torch::Tensor& c_img);

  ModelConfig config_;
  std::vector<Block> block_list_;
};
TORCH_MODULE(StoryTransformer);

// Copies every tensor that exists in both models with the same name and shape
// from `from` into `to`; returns the number copied.
std::size_t copy_shared_parameters(const StoryTransformerImpl& from, StoryTransformerImpl& to);

}  // namespace retrostory::model
