#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <set>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "retrostory/checkpoint.h"
#include "retrostory/config.h"
#include "retrostory/story_transformer.h"
#include "retrostory/text.h"
#include "retrostory/tokenizer.h"

namespace retrostory::training {

enum class Mode { kFinetune, kPrompt };
enum class Schedule { kCosine, kLinear };

Mode parse_mode(const std::string& text);
const char* to_string(Mode mode);
const char* to_string(Schedule schedule);

// Linear warmup from 0 to max_lr over warmup_steps, then decay to
// min_ratio * max_lr at total_steps (cosine or linear). Steps past
// total_steps stay at the floor. Throws ConfigError when
// total_steps < warmup_steps or step < 0.
double lr_schedule(std::int64_t step, double max_lr, std::int64_t warmup_steps,
                   std::int64_t total_steps, Schedule schedule = Schedule::kCosine,
                   double min_ratio = 0.1);

struct TrainRegime {
  Mode mode = Mode::kFinetune;
  std::set<model::ParamGroup> trainable;
  std::map<model::ParamGroup, double> max_lr;
  Schedule schedule = Schedule::kCosine;
  std::int64_t warmup_steps = 750;
  std::int64_t total_steps = 0;
  double min_ratio = 0.1;

  // finetune: every group, new modules at lr_new and the rest at
  // lr_pretrained, cosine decay. prompt: prompt/story/retro groups plus the
  // token embedding tables at lr_prompt, linear decay. An explicit
  // config.schedule overrides the per-mode default.
  static TrainRegime resolve(const TrainConfig& config, std::int64_t total_steps);

  bool trains(model::ParamGroup group) const { return trainable.count(group) > 0; }
  double lr_at(model::ParamGroup group, std::int64_t step) const;
};

struct StepMetrics {
  double total = 0.0;
  double text_loss = 0.0;
  double image_loss = 0.0;
  double grad_norm = 0.0;
  double lr = 0.0;  // learning rate of the first trainable group
  bool aborted = false;
  std::string reason;
};

struct TrainableReport {
  struct Row {
    std::int64_t total = 0;
    std::int64_t trainable = 0;
  };
  std::map<std::string, Row> groups;
  std::set<std::string> trainable_names;
  std::int64_t total = 0;
  std::int64_t trainable = 0;

  double fraction() const { return total == 0 ? 0.0 : static_cast<double>(trainable) / total; }
  Json to_json() const;
};

// Owns the optimizer for one model and applies the regime's freeze.
class Trainer {
 public:
  Trainer(model::StoryTransformer model, TrainRegime regime, const TrainConfig& config);

  // One AdamW update. The k-th update (1-based) uses lr_schedule(k). A
  // non-finite loss or gradient norm aborts the step without touching any
  // parameter and is reported in the returned metrics.
  StepMetrics step(const model::TokenBatch& batch);

  TrainableReport report() const;
  const TrainRegime& regime() const { return regime_; }
  std::int64_t steps_taken() const { return steps_; }
  std::int64_t aborted_steps() const { return aborted_; }

 private:
  model::StoryTransformer model_;
  TrainRegime regime_;
  double grad_clip_;
  std::vector<model::ParamGroup> group_order_;
  std::vector<torch::Tensor> trainable_;
  std::unique_ptr<torch::optim::AdamW> optimizer_;
  std::int64_t steps_ = 0;
  std::int64_t aborted_ = 0;
};

// ---- checkpoints ----------------------------------------------------------

// Story checkpoints bundle the tokenizer, the transformer and the caption
// vocabulary so a single file is enough to generate.
struct StoryBundle {
  ModelConfig config;
  tokenizer::VqVae vae{nullptr};
  model::StoryTransformer model{nullptr};
  Vocabulary vocab;
  Json meta = Json::object();
};

void save_story_checkpoint(const std::filesystem::path& path, const model::StoryTransformerImpl& model,
                           const tokenizer::VqVaeImpl& vae, const Vocabulary& vocab,
                           const Json& meta = Json::object());

// Throws CheckpointError on corruption, version mismatch, a config that
// conflicts with `expected` (when given) or a missing tensor.
StoryBundle load_story_checkpoint(const std::filesystem::path& path,
                                  const ModelConfig* expected = nullptr);

void save_tokenizer(const std::filesystem::path& path, const tokenizer::VqVaeImpl& vae,
                    const Json& meta = Json::object());
tokenizer::VqVae load_tokenizer(const std::filesystem::path& path, Json* meta = nullptr);

}  // namespace retrostory::training
