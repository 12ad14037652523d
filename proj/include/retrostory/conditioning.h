#pragma once

#include <cstdint>

#include <torch/torch.h>

#include "retrostory/attention.h"
#include "retrostory/config.h"

namespace retrostory::conditioning {

// Fixed, parameter-free sinusoid position table [positions, dim].
torch::Tensor sinusoid_table(std::int64_t positions, std::int64_t dim);

enum class Segment { kPrompt, kStory, kText, kImage };

// Order and extent of the per-frame input sequence:
// [prompt | story vector | caption tokens | image tokens].
struct LayoutSpec {
  int prompt = 0;
  int story = 1;
  int text = 0;
  int image = 0;

  static LayoutSpec from_config(const ModelConfig& config, int image_rows);

  int length() const { return prompt + story + text + image; }
  int start(Segment s) const;
  int size(Segment s) const;

  struct Location {
    Segment segment;
    int offset;
  };
  // Throws std::out_of_range outside [0, length()).
  Location locate(int position) const;
};

// Bag-of-tokens sentence encoder: mean of word embeddings over non-pad ids.
class SentenceEncoderImpl : public torch::nn::Module {
 public:
  SentenceEncoderImpl(std::int64_t vocab, std::int64_t dim);
  // tokens [..., N] int64 -> [..., dim]
  torch::Tensor forward(const torch::Tensor& tokens);

  torch::nn::Embedding embedding{nullptr};
};
TORCH_MODULE(SentenceEncoder);

// Global story encoder: one unmasked self-attention layer over all caption
// embeddings of a story plus the sinusoid frame positions, followed by a
// linear bridge into the transformer width.
class StoryEncoderImpl : public torch::nn::Module {
 public:
  explicit StoryEncoderImpl(const ModelConfig& config);

  // sentences [B, T, d_sent], valid [B, T] bool (optional) -> [B, T, d_model]
  torch::Tensor forward(const torch::Tensor& sentences, const torch::Tensor& valid = {});

  // Zeroes the attention and feed-forward output projections so the encoder
  // reduces to bridge(S + S_pos).
  void zero_residual_branches();

  const torch::Tensor& positions() const { return positions_; }

  torch::nn::LayerNorm ln_attn{nullptr}, ln_ffn{nullptr};
  attention::MultiHeadAttention attn{nullptr};
  torch::nn::Linear fc1{nullptr}, fc2{nullptr}, bridge{nullptr};

 private:
  int max_frames_;
  torch::Tensor positions_;
};
TORCH_MODULE(StoryEncoder);

// Prompt parameterization: P = P_raw + fc2(tanh(fc1(P_raw))), with fc2
// zero-initialized so the network starts as the identity.
class PromptNetworkImpl : public torch::nn::Module {
 public:
  PromptNetworkImpl(std::int64_t length, std::int64_t dim);
  // [length, dim]
  torch::Tensor forward();

  std::int64_t length() const { return length_; }

  torch::Tensor raw;
  torch::nn::Linear fc1{nullptr}, fc2{nullptr};

 private:
  std::int64_t length_;
};
TORCH_MODULE(PromptNetwork);

// Concatenates already-embedded segments into [B, L, D]. `prompt` is [P, D]
// (shared by every row) and may be undefined when P == 0; `story` is [B, D]
// and may be undefined when the layout has no story slot.
torch::Tensor assemble(const torch::Tensor& prompt, const torch::Tensor& story,
                       const torch::Tensor& text, const torch::Tensor& image,
                       const LayoutSpec& spec);

}  // namespace retrostory::conditioning
