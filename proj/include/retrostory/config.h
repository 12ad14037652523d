#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

namespace retrostory {

using Json = nlohmann::json;

// Git revision the library was built from ("unknown" outside a checkout).
const char* build_id();

// Architecture hyperparameters shared by the tokenizer and the story
// transformer. Embedded verbatim in every checkpoint.
struct ModelConfig {
  // tokenizer
  int image_size = 64;
  int grid_size = 16;
  int code_dim = 64;
  int codebook_size = 512;
  int vae_channels = 64;
  double commitment_beta = 0.25;

  // transformer
  int d_model = 256;
  int n_heads = 8;
  int n_blocks = 6;
  // One cross-attention layer in every k-th block (blocks 0, k, 2k, ...).
  // A density larger than n_blocks disables cross-attention entirely.
  int retro_density = 3;
  int ffn_mult = 4;
  int text_vocab = 0;
  int text_length = 64;
  int prompt_length = 16;
  int max_frames = 8;
  int sentence_dim = 256;
  int story_heads = 4;
  bool story_encoder = true;

  int image_tokens() const { return grid_size * grid_size; }
  int story_slots() const { return story_encoder ? 1 : 0; }
  int sequence_length() const {
    return prompt_length + story_slots() + text_length + image_tokens();
  }
  int vocab_size() const { return text_vocab + codebook_size; }
  bool has_retro(int block) const {
    return retro_density <= n_blocks && block % retro_density == 0;
  }
  int retro_block_count() const;

  // Throws ConfigError naming the first violated invariant.
  void validate() const;

  template <class Self, class V>
  static void fields(Self& s, V&& v) {
    v("image_size", s.image_size);
    v("grid_size", s.grid_size);
    v("code_dim", s.code_dim);
    v("codebook_size", s.codebook_size);
    v("vae_channels", s.vae_channels);
    v("commitment_beta", s.commitment_beta);
    v("d_model", s.d_model);
    v("n_heads", s.n_heads);
    v("n_blocks", s.n_blocks);
    v("retro_density", s.retro_density);
    v("ffn_mult", s.ffn_mult);
    v("text_vocab", s.text_vocab);
    v("text_length", s.text_length);
    v("prompt_length", s.prompt_length);
    v("max_frames", s.max_frames);
    v("sentence_dim", s.sentence_dim);
    v("story_heads", s.story_heads);
    v("story_encoder", s.story_encoder);
  }

  bool operator==(const ModelConfig&) const = default;
};

struct TrainConfig {
  std::string mode = "finetune";  // finetune | prompt
  int epochs = 5;
  int batch_size = 8;
  double lr_new = 1e-4;
  double lr_pretrained = 1e-5;
  double lr_prompt = 5e-4;
  std::string schedule = "auto";  // auto | cosine | linear
  int warmup_steps = 750;
  double min_lr_ratio = 0.1;
  double weight_decay = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.95;
  double grad_clip = 1.0;
  std::uint64_t seed = 0;
  // Validation stories generated per epoch for checkpoint selection.
  int val_stories = 32;

  template <class Self, class V>
  static void fields(Self& s, V&& v) {
    v("mode", s.mode);
    v("epochs", s.epochs);
    v("batch_size", s.batch_size);
    v("lr_new", s.lr_new);
    v("lr_pretrained", s.lr_pretrained);
    v("lr_prompt", s.lr_prompt);
    v("schedule", s.schedule);
    v("warmup_steps", s.warmup_steps);
    v("min_lr_ratio", s.min_lr_ratio);
    v("weight_decay", s.weight_decay);
    v("beta1", s.beta1);
    v("beta2", s.beta2);
    v("grad_clip", s.grad_clip);
    v("seed", s.seed);
    v("val_stories", s.val_stories);
  }
};

struct VaeTrainConfig {
  int steps = 3000;
  int batch_size = 32;
  double lr = 1e-3;
  // Extra random renders mixed into the tokenizer corpus (all palette colors).
  int render_frames = 4000;
  std::uint64_t seed = 0;

  template <class Self, class V>
  static void fields(Self& s, V&& v) {
    v("steps", s.steps);
    v("batch_size", s.batch_size);
    v("lr", s.lr);
    v("render_frames", s.render_frames);
    v("seed", s.seed);
  }
};

struct ClassifierConfig {
  int steps = 1500;
  int batch_size = 32;
  double lr = 2e-3;
  int feature_dim = 128;
  double threshold = 0.5;
  std::uint64_t seed = 0;

  template <class Self, class V>
  static void fields(Self& s, V&& v) {
    v("steps", s.steps);
    v("batch_size", s.batch_size);
    v("lr", s.lr);
    v("feature_dim", s.feature_dim);
    v("threshold", s.threshold);
    v("seed", s.seed);
  }
};

// Caption-to-image pretraining of the transformer backbone on random renders
// over every character; the story models start from these weights.
struct PretrainConfig {
  // Zero skips pretraining.
  int steps = 0;
  int batch_size = 32;
  double lr = 1e-3;
  int warmup_steps = 100;
  int frames = 4000;
  std::uint64_t seed = 0;

  template <class Self, class V>
  static void fields(Self& s, V&& v) {
    v("steps", s.steps);
    v("batch_size", s.batch_size);
    v("lr", s.lr);
    v("warmup_steps", s.warmup_steps);
    v("frames", s.frames);
    v("seed", s.seed);
  }
};

struct GanConfig {
  int epochs = 30;
  // When positive, overrides epochs with an exact number of steps.
  int steps = 0;
  int batch_size = 8;
  double lr_generator = 1e-4;
  double lr_discriminator = 1e-5;
  int text_dim = 64;
  int noise_dim = 16;
  int channels = 32;
  int feature_grid = 8;
  int patch = 3;
  int checkpoint_every = 10;
  std::uint64_t seed = 0;

  template <class Self, class V>
  static void fields(Self& s, V&& v) {
    v("epochs", s.epochs);
    v("steps", s.steps);
    v("batch_size", s.batch_size);
    v("lr_generator", s.lr_generator);
    v("lr_discriminator", s.lr_discriminator);
    v("text_dim", s.text_dim);
    v("noise_dim", s.noise_dim);
    v("channels", s.channels);
    v("feature_grid", s.feature_grid);
    v("patch", s.patch);
    v("checkpoint_every", s.checkpoint_every);
    v("seed", s.seed);
  }
};

struct SamplerConfig {
  double temperature = 1.0;
  int top_k = 64;
  std::uint64_t seed = 0;

  template <class Self, class V>
  static void fields(Self& s, V&& v) {
    v("temperature", s.temperature);
    v("top_k", s.top_k);
    v("seed", s.seed);
  }
  bool operator==(const SamplerConfig&) const = default;
};

struct SyntheticSpec {
  int n_chars = 8;
  int n_unseen = 2;
  int n_backgrounds = 4;
  int frames_per_story = 4;
  int train = 800;
  int val = 64;
  int test = 96;
  double unseen_fraction = 0.5;
  double color_mention_prob = 0.5;
  int image_size = 64;
  std::uint64_t seed = 7;

  template <class Self, class V>
  static void fields(Self& s, V&& v) {
    v("n_chars", s.n_chars);
    v("n_unseen", s.n_unseen);
    v("n_backgrounds", s.n_backgrounds);
    v("frames_per_story", s.frames_per_story);
    v("train", s.train);
    v("val", s.val);
    v("test", s.test);
    v("unseen_fraction", s.unseen_fraction);
    v("color_mention_prob", s.color_mention_prob);
    v("image_size", s.image_size);
    v("seed", s.seed);
  }
};

// Everything a run needs; serialized into run.json so the run can be
// reproduced from that file alone.
struct RunConfig {
  ModelConfig model;
  TrainConfig train;
  VaeTrainConfig vae;
  ClassifierConfig classifier;
  PretrainConfig pretrain;
  GanConfig gan;
  SamplerConfig sampler;
  SyntheticSpec synthetic;

  Json to_json() const;
  static RunConfig from_json(const Json& j);

  // Applies "section.key=value". Unknown keys and type mismatches throw.
  void apply_override(std::string_view assignment);

  // Desk-scale preset: 32x32 frames, 8x8 token grid, small transformer.
  static RunConfig toy();
};

Json to_json(const ModelConfig& c);
ModelConfig model_config_from_json(const Json& j);
Json to_json(const SamplerConfig& c);
SamplerConfig sampler_config_from_json(const Json& j);

// Keys whose values differ between two configs, e.g. {"d_model", "n_heads"}.
std::vector<std::string> config_differences(const ModelConfig& a,
                                            const ModelConfig& b);

}  // namespace retrostory
