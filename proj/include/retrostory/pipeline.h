#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "retrostory/config.h"
#include "retrostory/data.h"
#include "retrostory/evaluation.h"
#include "retrostory/gan.h"
#include "retrostory/story_transformer.h"
#include "retrostory/text.h"
#include "retrostory/tokenizer.h"
#include "retrostory/training.h"

namespace retrostory::pipeline {

using Logger = std::function<void(const std::string&)>;

// ---- tokenizer ------------------------------------------------------------

struct VaeReport {
  int steps = 0;
  double final_loss = 0.0;
  double train_mse = 0.0;
  double heldout_mse = 0.0;
  double codebook_usage = 0.0;
  int restarted_codes = 0;
};

// Mean squared error of decode(quantize(encode(x))) against x over pixels in [0, 1].
double reconstruction_mse(tokenizer::VqVaeImpl& vae, const std::vector<const Image*>& images);

// Adam on the VQ-VAE loss. The codebook is seeded from encoder outputs and
// rows unused for a while are restarted from random latents.
VaeReport train_vae(tokenizer::VqVaeImpl& vae, const std::vector<const Image*>& train,
                    const std::vector<const Image*>& heldout, const VaeTrainConfig& config,
                    const Logger& log = {});

// ---- token data -------------------------------------------------------------

struct TokenizedStory {
  const data::StorySample* sample = nullptr;
  torch::Tensor captions;  // [T, N_text] int64
  torch::Tensor frames;    // [T, N_img] int64
};

struct TokenizedDataset {
  Vocabulary vocab;
  std::vector<TokenizedStory> stories;

  std::vector<const TokenizedStory*> split(data::Split s) const;
};

// Vocabulary from the train split plus any extra captions. Without a
// pretraining corpus, colors absent from training map to <unk>.
Vocabulary build_vocabulary(const data::Dataset& dataset, const std::vector<std::string>& extra = {});
torch::Tensor encode_captions(const Vocabulary& vocab, const std::vector<std::string>& captions,
                              int text_length);
TokenizedDataset tokenize_dataset(const data::Dataset& dataset, tokenizer::VqVaeImpl& vae,
                                  const Vocabulary& vocab, int text_length);

struct Row {
  const TokenizedStory* story = nullptr;
  int frame = 1;
};

// Every (story, target frame) pair.
std::vector<Row> target_rows(const std::vector<const TokenizedStory*>& stories);
model::TokenBatch make_batch(const std::vector<Row>& rows);

// ---- story model ------------------------------------------------------------

struct EpochRecord {
  int epoch = 0;
  int steps = 0;
  int aborted = 0;
  double loss = 0.0;
  double text_loss = 0.0;
  double image_loss = 0.0;
  double lr = 0.0;
  std::optional<double> val_fid;
  double seconds = 0.0;

  Json to_json() const;
};

struct StoryTrainResult {
  std::vector<EpochRecord> epochs;
  int best_epoch = 0;
  training::TrainableReport trainable;
  std::filesystem::path best_checkpoint;

  Json to_json() const;
};

// Trains for config.train.epochs over every target frame of the train split.
// After each epoch the model generates config.train.val_stories validation
// stories and, when a classifier is given, scores val FID; the weights of the
// best epoch are restored at the end. With a non-empty out_dir, epoch and
// best checkpoints are written there.
StoryTrainResult train_story_model(model::StoryTransformer model, tokenizer::VqVaeImpl& vae,
                                   const TokenizedDataset& tokens, eval::CharacterClassifierImpl* classifier,
                                   const RunConfig& config, const std::filesystem::path& out_dir,
                                   const Logger& log = {});

// Frames 2..T for each story, generated in row batches. Every story uses the
// sampler seed, so the result per story matches generate_story.
std::vector<std::vector<Image>> generate_stories(model::StoryTransformerImpl& model,
                                                 tokenizer::VqVaeImpl& vae,
                                                 const std::vector<const TokenizedStory*>& stories,
                                                 const SamplerConfig& sampler);

// Scores generated frames 2..T of each story against the real ones: char
// metrics (overall and on stories with unseen characters), FID and source
// correlation.
eval::EvalReport score_stories(const std::vector<const TokenizedStory*>& stories,
                               const std::vector<std::vector<Image>>& generated,
                               eval::CharacterClassifierImpl& classifier, const std::set<int>& unseen,
                               double threshold = 0.5);

// Generates and scores the given stories against their real target frames.
eval::EvalReport evaluate_stories(model::StoryTransformerImpl& model, tokenizer::VqVaeImpl& vae,
                                  eval::CharacterClassifierImpl& classifier,
                                  const std::vector<const TokenizedStory*>& stories,
                                  const std::set<int>& unseen, const SamplerConfig& sampler,
                                  double threshold = 0.5);

// ---- experiments ------------------------------------------------------------

struct TokenizerRun {
  tokenizer::VqVae vae{nullptr};
  VaeReport report;
};

// Trains a tokenizer on the train frames, held out on test frames. With
// `renders_from`, random synthetic scenes over every character are added.
TokenizerRun build_tokenizer(const data::Dataset& dataset, const RunConfig& config,
                             const SyntheticSpec* renders_from = nullptr, const Logger& log = {});

struct ClassifierRun {
  eval::CharacterClassifier classifier{nullptr};
  // Quality on real target frames of the test split.
  eval::CharMetrics real;
};

// Trains the character classifier on random synthetic scenes when
// `renders_from` is given, otherwise on labeled train frames.
ClassifierRun build_classifier(const data::Dataset& dataset, const RunConfig& config,
                               const SyntheticSpec* renders_from = nullptr, const Logger& log = {});
eval::CharMetrics classifier_quality(const data::Dataset& dataset, eval::CharacterClassifierImpl& classifier,
                                     double threshold);

// ---- backbone pretraining ---------------------------------------------------

// `config` without retro blocks, story encoder or prompt.
ModelConfig backbone_config(ModelConfig config);

struct PretrainCorpus {
  std::vector<std::string> captions;
  torch::Tensor images;  // [N, N_img] int64
};

// Random captioned scenes over every character, tokenized by `vae`.
PretrainCorpus render_pretrain_corpus(const SyntheticSpec& spec, const PretrainConfig& config,
                                      tokenizer::VqVaeImpl& vae);

// Trains a backbone_config model to produce each image from its caption.
// `config.text_vocab` must equal the vocabulary size.
model::StoryTransformer pretrain_backbone(const ModelConfig& config, const PretrainCorpus& corpus,
                                          const Vocabulary& vocab, const PretrainConfig& pretrain,
                                          const Logger& log = {});

// Shared inputs of the synthetic experiments: dataset, tokenizer and classifier.
struct Assets {
  RunConfig config;
  data::Dataset dataset;
  tokenizer::VqVae vae{nullptr};
  eval::CharacterClassifier classifier{nullptr};
  TokenizedDataset tokens;
  std::set<int> unseen;
  VaeReport vae_report;
  // Classifier quality on real target frames of the test split.
  eval::CharMetrics classifier_real;
  // Pretrained weights every story model starts from; may be null.
  model::StoryTransformer backbone{nullptr};
};

// Toy tokenizer, classifier and backbone corpora are random renders over
// every character; see data::render_random_frames. The backbone is skipped
// when config.pretrain.steps is zero.
Assets prepare_synthetic_assets(const RunConfig& config, const Logger& log = {});

// Assets from an existing dataset and trained tokenizer; the classifier and
// backbone may be null. A backbone brings its own vocabulary.
Assets assemble_assets(const RunConfig& config, data::Dataset dataset, tokenizer::VqVae vae,
                       eval::CharacterClassifier classifier, model::StoryTransformer backbone = nullptr,
                       const Vocabulary* backbone_vocab = nullptr);

enum class Variant { kRetro, kNoRetro };
const char* to_string(Variant v);
ModelConfig variant_config(ModelConfig config, Variant v);

struct ExperimentResult {
  Variant variant = Variant::kRetro;
  std::uint64_t seed = 0;
  StoryTrainResult train;
  eval::EvalReport val;
  eval::EvalReport test;
  double seconds = 0.0;

  Json to_json() const;
};

// Trains one story model on the assets and evaluates it on val and test.
ExperimentResult run_experiment(Assets& assets, Variant variant, std::uint64_t seed,
                                const std::filesystem::path& out_dir = {}, const Logger& log = {});

// ---- GAN baseline ------------------------------------------------------------

gan::GanBatch make_gan_batch(const std::vector<const TokenizedStory*>& stories);

// Frames 2..T per story with noise drawn from `seed`.
std::vector<std::vector<Image>> generate_gan_stories(gan::StoryGanImpl& gan,
                                                    const std::vector<const TokenizedStory*>& stories,
                                                    std::uint64_t seed);

struct GanRunResult {
  int steps = 0;
  bool finite = true;
  std::vector<Json> history;  // sampled step losses
  std::vector<std::pair<int, double>> val_fid;  // (epoch, FID)
  eval::EvalReport test;
  double seconds = 0.0;

  Json to_json() const;
};

// config.gan.steps > 0 fixes the number of updates, otherwise config.gan.epochs
// passes over the train split. Val FID is recorded after every epoch and a
// checkpoint written every checkpoint_every epochs when out_dir is set.
GanRunResult run_gan(Assets& assets, std::uint64_t seed, const std::filesystem::path& out_dir = {},
                     const Logger& log = {});

// run.json: config, seeds, build id and metric history.
void write_run_json(const std::filesystem::path& dir, const std::string& command, const RunConfig& config,
                    const Json& metrics);
void write_model_card(const std::filesystem::path& path, const ModelConfig& config, const Json& details);

}  // namespace retrostory::pipeline
