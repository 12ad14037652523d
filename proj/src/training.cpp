#include "retrostory/training.h"

#include <cmath>
#include <numbers>
#include <sstream>

#include "retrostory/errors.h"

namespace retrostory::training {

using model::ParamGroup;

Mode parse_mode(const std::string& text) {
  if (text == "finetune") return Mode::kFinetune;
  if (text == "prompt") return Mode::kPrompt;
  throw ConfigError("unknown training mode '" + text + "' (expected finetune or prompt)");
}

const char* to_string(Mode mode) { return mode == Mode::kFinetune ? "finetune" : "prompt"; }
const char* to_string(Schedule schedule) {
  return schedule == Schedule::kCosine ? "cosine" : "linear";
}

double lr_schedule(std::int64_t step, double max_lr, std::int64_t warmup_steps,
                   std::int64_t total_steps, Schedule schedule, double min_ratio) {
  if (step < 0) throw ConfigError("lr_schedule: step must be non-negative");
  if (warmup_steps < 0) throw ConfigError("lr_schedule: warmup_steps must be non-negative");
  if (total_steps < warmup_steps)
    throw ConfigError("lr_schedule: total_steps (" + std::to_string(total_steps) +
                      ") < warmup_steps (" + std::to_string(warmup_steps) + ")");
  const double floor = min_ratio * max_lr;
  if (step >= total_steps) return floor;
  if (step < warmup_steps)
    return max_lr * static_cast<double>(step) / static_cast<double>(warmup_steps);
  const double progress = static_cast<double>(step - warmup_steps) /
                          static_cast<double>(total_steps - warmup_steps);
  if (schedule == Schedule::kLinear) return max_lr + (floor - max_lr) * progress;
  return floor + (max_lr - floor) * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

TrainRegime TrainRegime::resolve(const TrainConfig& config, std::int64_t total_steps) {
  TrainRegime r;
  r.mode = parse_mode(config.mode);
  r.warmup_steps = config.warmup_steps;
  r.total_steps = total_steps;
  r.min_ratio = config.min_lr_ratio;
  if (total_steps < r.warmup_steps)
    throw ConfigError("training: total steps (" + std::to_string(total_steps) +
                      ") < warmup_steps (" + std::to_string(r.warmup_steps) + ")");
  if (r.mode == Mode::kFinetune) {
    r.schedule = Schedule::kCosine;
    for (auto g : {ParamGroup::kRetro, ParamGroup::kStory, ParamGroup::kPrompt}) {
      r.trainable.insert(g);
      r.max_lr[g] = config.lr_new;
    }
    for (auto g : {ParamGroup::kBackbone, ParamGroup::kEmbeddings}) {
      r.trainable.insert(g);
      r.max_lr[g] = config.lr_pretrained;
    }
  } else {
    r.schedule = Schedule::kLinear;
    for (auto g : {ParamGroup::kRetro, ParamGroup::kStory, ParamGroup::kPrompt,
                   ParamGroup::kEmbeddings}) {
      r.trainable.insert(g);
      r.max_lr[g] = config.lr_prompt;
    }
  }
  if (config.schedule == "cosine") r.schedule = Schedule::kCosine;
  else if (config.schedule == "linear") r.schedule = Schedule::kLinear;
  else if (config.schedule != "auto")
    throw ConfigError("unknown schedule '" + config.schedule + "' (expected auto, cosine or linear)");
  return r;
}

double TrainRegime::lr_at(ParamGroup group, std::int64_t step) const {
  auto it = max_lr.find(group);
  if (it == max_lr.end()) return 0.0;
  return lr_schedule(step, it->second, warmup_steps, total_steps, schedule, min_ratio);
}

Json TrainableReport::to_json() const {
  Json groups_json = Json::object();
  for (const auto& [name, row] : groups)
    groups_json[name] = {{"total", row.total}, {"trainable", row.trainable}};
  return {{"groups", groups_json},
          {"total", total},
          {"trainable", trainable},
          {"trainable_fraction", fraction()}};
}

Trainer::Trainer(model::StoryTransformer model, TrainRegime regime, const TrainConfig& config)
    : model_(std::move(model)), regime_(std::move(regime)), grad_clip_(config.grad_clip) {
  std::map<ParamGroup, std::vector<torch::Tensor>> by_group;
  for (auto& item : model_->named_parameters(true)) {
    const auto group = model::group_of(item.key());
    const bool train = regime_.trains(group);
    item.value().set_requires_grad(train);
    if (train) by_group[group].push_back(item.value());
  }
  std::vector<torch::optim::OptimizerParamGroup> groups;
  for (auto& [group, params] : by_group) {
    auto options = std::make_unique<torch::optim::AdamWOptions>(regime_.lr_at(group, 1));
    options->betas({config.beta1, config.beta2}).weight_decay(config.weight_decay);
    groups.emplace_back(params, std::move(options));
    group_order_.push_back(group);
    trainable_.insert(trainable_.end(), params.begin(), params.end());
  }
  if (groups.empty()) throw ConfigError("training: the regime leaves no trainable parameters");
  optimizer_ = std::make_unique<torch::optim::AdamW>(std::move(groups));
}

StepMetrics Trainer::step(const model::TokenBatch& batch) {
  StepMetrics m;
  model_->train();
  optimizer_->zero_grad();
  auto abort = [&](std::string reason) {
    optimizer_->zero_grad();
    m.aborted = true;
    m.reason = std::move(reason);
    ++aborted_;
    return m;
  };
  model::LmLoss loss;
  try {
    loss = model_->lm_loss(model_->forward_logits(batch), batch);
  } catch (const NumericError& e) {
    return abort(e.what());
  }
  m.total = loss.total.item<double>();
  m.text_loss = loss.text.item<double>();
  m.image_loss = loss.image.item<double>();
  if (!std::isfinite(m.total)) return abort("non-finite loss " + std::to_string(m.total));
  loss.total.backward();
  m.grad_norm = torch::nn::utils::clip_grad_norm_(trainable_, grad_clip_);
  if (!std::isfinite(m.grad_norm))
    return abort("non-finite gradient norm " + std::to_string(m.grad_norm));

  const std::int64_t k = steps_ + 1;
  for (size_t i = 0; i < group_order_.size(); ++i) {
    auto& options = static_cast<torch::optim::AdamWOptions&>(optimizer_->param_groups()[i].options());
    options.lr(regime_.lr_at(group_order_[i], k));
  }
  m.lr = regime_.lr_at(group_order_.front(), k);
  optimizer_->step();
  ++steps_;
  return m;
}

TrainableReport Trainer::report() const {
  TrainableReport r;
  for (const auto& item : model_->named_parameters(true)) {
    const auto n = item.value().numel();
    auto& row = r.groups[model::to_string(model::group_of(item.key()))];
    row.total += n;
    r.total += n;
    if (item.value().requires_grad()) {
      row.trainable += n;
      r.trainable += n;
      r.trainable_names.insert(item.key());
    }
  }
  return r;
}

// ---- checkpoints ----------------------------------------------------------

void save_story_checkpoint(const std::filesystem::path& path, const model::StoryTransformerImpl& model,
                           const tokenizer::VqVaeImpl& vae, const Vocabulary& vocab,
                           const Json& meta) {
  const auto& a = model.config();
  const auto& b = vae.config();
  if (a.image_size != b.image_size || a.grid_size != b.grid_size || a.code_dim != b.code_dim ||
      a.codebook_size != b.codebook_size || a.vae_channels != b.vae_channels)
    throw CheckpointError("tokenizer and transformer disagree on the tokenizer settings");
  Archive archive;
  archive.kind = "story";
  archive.config = model.config();
  archive.meta = meta;
  archive.meta["vocab"] = vocab.to_json();
  export_module(vae, "tokenizer.", archive);
  export_module(model, "model.", archive);
  save_archive(path, archive);
}

StoryBundle load_story_checkpoint(const std::filesystem::path& path, const ModelConfig* expected) {
  const Archive archive = load_archive(path);
  if (archive.kind != "story")
    throw CheckpointError(path.string() + ": expected a story checkpoint, found '" + archive.kind + "'");
  if (expected) require_config(archive, *expected);
  if (!archive.meta.contains("vocab")) throw CheckpointError(path.string() + ": missing vocabulary");
  StoryBundle b;
  b.config = archive.config;
  b.vocab = Vocabulary::from_json(archive.meta.at("vocab"));
  if (b.vocab.size() != b.config.text_vocab)
    throw CheckpointError(path.string() + ": vocabulary size " + std::to_string(b.vocab.size()) +
                          " does not match config text_vocab " + std::to_string(b.config.text_vocab));
  b.meta = archive.meta;
  b.meta.erase("vocab");
  b.vae = tokenizer::VqVae(b.config);
  b.model = model::StoryTransformer(b.config);
  import_module(*b.vae, "tokenizer.", archive, true);
  import_module(*b.model, "model.", archive, true);
  b.vae->eval();
  b.model->eval();
  return b;
}

void save_tokenizer(const std::filesystem::path& path, const tokenizer::VqVaeImpl& vae,
                    const Json& meta) {
  Archive archive;
  archive.kind = "tokenizer";
  archive.config = vae.config();
  archive.meta = meta;
  export_module(vae, "tokenizer.", archive);
  save_archive(path, archive);
}

tokenizer::VqVae load_tokenizer(const std::filesystem::path& path, Json* meta) {
  const Archive archive = load_archive(path);
  if (archive.kind != "tokenizer" && archive.kind != "story")
    throw CheckpointError(path.string() + ": expected a tokenizer checkpoint, found '" + archive.kind + "'");
  tokenizer::VqVae vae(archive.config);
  import_module(*vae, "tokenizer.", archive, true);
  vae->eval();
  if (meta) *meta = archive.meta;
  return vae;
}

}  // namespace retrostory::training
