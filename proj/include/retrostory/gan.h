#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "retrostory/attention.h"
#include "retrostory/config.h"
#include "retrostory/evaluation.h"
#include "retrostory/image.h"

namespace retrostory::gan {

// Patch similarity between a target grid and a source grid. Both are
// [B, C, H, W]; every location contributes the zero-padded patch centered on
// it. p[b, i, j] = <t_i / (|t_i| + eps), s_j / (|s_j| + eps)> where i runs
// over target locations and j over source locations (row-major).
torch::Tensor patch_similarity(const torch::Tensor& target, const torch::Tensor& source, int patch,
                               double eps = 1e-8);

struct ContextualAttention {
  torch::Tensor similarity;  // [B, Ht*Wt, Hs*Ws]
  torch::Tensor weights;     // softmax over source locations, same shape
  torch::Tensor output;      // target + copied source patches, [B, C, Ht, Wt]
};

// Matches target patches against source patches, softmax-normalizes the
// scaled similarities over source locations and pastes the weighted source
// patches back onto the target (overlaps averaged over patch area).
ContextualAttention contextual_attention(const torch::Tensor& target, const torch::Tensor& source,
                                         int patch = 3, double softmax_scale = 10.0);

// sum 0.5 * (mu^2 + exp(logvar) - 1 - logvar) over features, mean over batch.
torch::Tensor kl_loss(const torch::Tensor& mu, const torch::Tensor& logvar);

// Concatenates every caption of a story behind a summary token, marks the
// tokens of the caption being generated with a segment embedding and returns
// the summary position's output (h_0).
class CaptionEncoderImpl : public torch::nn::Module {
 public:
  CaptionEncoderImpl(int vocab, int text_length, int max_frames, int dim, int heads);

  // captions [B, T, N] int64, target index t in [0, T) -> [B, dim]
  torch::Tensor forward(const torch::Tensor& captions, std::int64_t t);
  // [B, T, N] -> [B, T, dim], h_0 for every t.
  torch::Tensor encode_all(const torch::Tensor& captions);

  torch::nn::Embedding token{nullptr}, segment{nullptr};
  torch::Tensor position, summary;
  torch::nn::LayerNorm ln_attn{nullptr}, ln_ffn{nullptr}, ln_out{nullptr};
  attention::MultiHeadAttention attn{nullptr};
  torch::nn::Linear fc1{nullptr}, fc2{nullptr};

 private:
  int text_length_, max_frames_;
};
TORCH_MODULE(CaptionEncoder);

struct GeneratorOutput {
  torch::Tensor frames;  // [B, T-1, 3, H, W] in (0, 1)
  torch::Tensor mu, logvar;
  torch::Tensor encodings;  // [B, T, d_txt]
};

class StoryGanImpl : public torch::nn::Module {
 public:
  StoryGanImpl(const GanConfig& config, int vocab, int text_length, int max_frames, int image_size);

  // captions [B, T, N], source [B, 3, H, W]; generates frames 1..T-1.
  // `noise` is [B, T-1, noise_dim] (drawn from the global generator when undefined).
  GeneratorOutput generate(const torch::Tensor& captions, const torch::Tensor& source,
                           const torch::Tensor& noise = {});

  // Per-frame logits [B, T-1] for frames [B, T-1, 3, H, W] and encodings [B, T-1, d].
  torch::Tensor image_scores(const torch::Tensor& frames, const torch::Tensor& encodings);
  // One logit per story [B]; depends on frame order.
  torch::Tensor story_scores(const torch::Tensor& frames, const torch::Tensor& encodings);

  std::vector<torch::Tensor> generator_parameters() const;
  std::vector<torch::Tensor> image_discriminator_parameters() const;
  std::vector<torch::Tensor> story_discriminator_parameters() const;

  const GanConfig& config() const { return config_; }
  int image_size() const { return image_size_; }
  int max_frames() const { return max_frames_; }
  int text_length() const { return text_length_; }
  int vocab() const { return vocab_; }

  // theta_G
  CaptionEncoder encoder{nullptr};
  torch::nn::Linear cond{nullptr}, init_hidden{nullptr}, to_grid{nullptr};
  torch::nn::GRUCell recurrence{nullptr};
  torch::nn::Sequential source_encoder{nullptr}, decoder{nullptr};
  // theta_I
  torch::nn::Sequential image_features{nullptr};
  torch::nn::Linear image_text{nullptr}, image_out{nullptr};
  // theta_S
  torch::nn::Conv3d story_conv{nullptr};
  torch::nn::Linear story_text{nullptr}, story_out{nullptr};

 private:
  GanConfig config_;
  int vocab_, text_length_, max_frames_, image_size_;
};
TORCH_MODULE(StoryGan);

struct GanLosses {
  double kl = 0.0;
  double d_image = 0.0;   // discriminator BCE, real + fake
  double d_story = 0.0;
  double g_image = 0.0;   // generator BCE against "real"
  double g_story = 0.0;
  double g_total = 0.0;
  double d_total = 0.0;

  bool finite() const;
  Json to_json() const;
};

struct GanBatch {
  torch::Tensor captions;  // [B, T, N] int64
  torch::Tensor frames;    // [B, T, 3, H, W] float, frame 0 is the source
};

// Binary cross-entropy of real/fake logits; both discriminators at once.
struct DiscriminatorLosses {
  torch::Tensor image, story;
};
DiscriminatorLosses discriminator_losses(StoryGanImpl& gan, const torch::Tensor& real,
                                         const torch::Tensor& fake, const torch::Tensor& encodings);

class GanTrainer {
 public:
  GanTrainer(StoryGan gan, const GanConfig& config);

  // Discriminator update: only theta_I and theta_S change.
  GanLosses d_step(const GanBatch& batch);
  // Generator update: only theta_G changes.
  GanLosses g_step(const GanBatch& batch);
  // d_step followed by g_step on the same batch.
  GanLosses step(const GanBatch& batch);

 private:
  StoryGan gan_;
  torch::optim::Adam opt_g_, opt_d_;
};

void save_gan(const std::filesystem::path& path, const StoryGanImpl& gan, const Json& meta = Json::object());
StoryGan load_gan(const std::filesystem::path& path, Json* meta = nullptr);

}  // namespace retrostory::gan
