#include "retrostory/pipeline.h"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>
#include <random>
#include <sstream>

#include "retrostory/errors.h"
#include "retrostory/sampler.h"

namespace retrostory::pipeline {
namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point start) {
  return std::chrono::duration<double>(Clock::now() - start).count();
}

void say(const Logger& log, const std::string& line) {
  if (log) log(line);
}

std::string fmt(double v, int precision = 4) {
  std::ostringstream out;
  out.setf(std::ios::fixed);
  out.precision(precision);
  out << v;
  return out.str();
}

torch::Tensor stack_images(const std::vector<const Image*>& images, size_t start, size_t end) {
  std::vector<const Image*> chunk(images.begin() + static_cast<long>(start),
                                  images.begin() + static_cast<long>(end));
  return images_to_batch(chunk);
}

std::vector<const Image*> frame_pointers(const std::vector<const data::StorySample*>& samples,
                                         bool targets_only) {
  std::vector<const Image*> out;
  for (const auto* s : samples)
    for (int t = targets_only ? 1 : 0; t < s->length(); ++t) out.push_back(s->frames[static_cast<size_t>(t)].get());
  return out;
}

// Snapshot of every parameter and buffer, used to restore the best epoch.
using Snapshot = std::vector<torch::Tensor>;

Snapshot snapshot(const torch::nn::Module& module) {
  Snapshot out;
  for (const auto& p : module.parameters(true)) out.push_back(p.detach().clone());
  for (const auto& b : module.buffers(true)) out.push_back(b.detach().clone());
  return out;
}

void restore(torch::nn::Module& module, const Snapshot& state) {
  torch::NoGradGuard no_grad;
  size_t i = 0;
  for (auto& p : module.parameters(true)) p.copy_(state[i++]);
  for (auto& b : module.buffers(true)) b.copy_(state[i++]);
}

}  // namespace

// ---- tokenizer ------------------------------------------------------------

double reconstruction_mse(tokenizer::VqVaeImpl& vae, const std::vector<const Image*>& images) {
  if (images.empty()) throw ValidationError("reconstruction_mse: no images");
  torch::NoGradGuard no_grad;
  vae.eval();
  double sum = 0.0;
  std::int64_t count = 0;
  for (size_t start = 0; start < images.size(); start += 64) {
    const size_t end = std::min(images.size(), start + 64);
    const auto batch = stack_images(images, start, end);
    const auto recon = vae.decode(vae.tokenize_batch(batch));  // [B, H, W, 3]
    const auto diff = recon - batch.permute({0, 2, 3, 1});
    sum += diff.pow(2).sum().item<double>();
    count += diff.numel();
  }
  return sum / static_cast<double>(count);
}

VaeReport train_vae(tokenizer::VqVaeImpl& vae, const std::vector<const Image*>& train,
                    const std::vector<const Image*>& heldout, const VaeTrainConfig& config,
                    const Logger& log) {
  if (train.empty()) throw ValidationError("train_vae: empty corpus");
  torch::manual_seed(config.seed);
  std::mt19937_64 rng(config.seed);
  const auto all = stack_images(train, 0, train.size());
  const auto n = all.size(0);
  const int v = vae.config().codebook_size;
  const auto start = Clock::now();

  {
    torch::NoGradGuard no_grad;
    const auto probe = all.index_select(0, torch::randperm(n).slice(0, 0, std::min<std::int64_t>(n, 256)));
    vae.init_codebook_from(vae.encode(probe.permute({0, 2, 3, 1})), config.seed);
  }

  torch::optim::Adam opt(vae.parameters(), torch::optim::AdamOptions(config.lr));
  VaeReport report;
  torch::Tensor usage = torch::zeros({v}, torch::kLong);
  const int restart_every = 100;
  const int restart_until = config.steps * 3 / 4;
  vae.train();
  for (int step = 1; step <= config.steps; ++step) {
    const auto index = torch::randint(n, {config.batch_size}, torch::kLong);
    const auto x = all.index_select(0, index);
    const auto out = vae.forward(x);
    const auto loss = vae.loss(x, out);
    if (!std::isfinite(loss.total.item<double>())) throw NumericError("VQ-VAE loss became non-finite at step " + std::to_string(step));
    opt.zero_grad();
    loss.total.backward();
    opt.step();
    report.final_loss = loss.total.item<double>();
    usage += torch::bincount(out.indices.reshape({-1}), {}, v);

    if (step % restart_every == 0) {
      if (step <= restart_until) {
        torch::NoGradGuard no_grad;
        const auto dead = usage.eq(0).nonzero().reshape({-1});
        const auto latents = out.latents.detach().reshape({-1, vae.config().code_dim});
        for (std::int64_t i = 0; i < dead.size(0); ++i) {
          const auto row = static_cast<std::int64_t>(rng() % static_cast<std::uint64_t>(latents.size(0)));
          vae.codebook()[dead[i].item<std::int64_t>()].copy_(latents[row]);
        }
        report.restarted_codes += static_cast<int>(dead.size(0));
      }
      say(log, "vae step " + std::to_string(step) + "/" + std::to_string(config.steps) +
                   " loss " + fmt(report.final_loss) + " recon " + fmt(loss.reconstruction.item<double>(), 5) +
                   " (" + fmt(seconds_since(start), 1) + "s)");
      usage.zero_();
    }
  }
  vae.eval();
  report.steps = config.steps;
  std::vector<const Image*> train_probe(train.begin(), train.begin() + static_cast<long>(std::min<size_t>(train.size(), 512)));
  report.train_mse = reconstruction_mse(vae, train_probe);
  if (!heldout.empty()) report.heldout_mse = reconstruction_mse(vae, heldout);
  {
    torch::NoGradGuard no_grad;
    const auto probe = stack_images(train_probe, 0, train_probe.size());
    report.codebook_usage = tokenizer::codebook_usage(vae.tokenize_batch(probe), v);
  }
  return report;
}

// ---- token data -------------------------------------------------------------

std::vector<const TokenizedStory*> TokenizedDataset::split(data::Split s) const {
  std::vector<const TokenizedStory*> out;
  for (const auto& story : stories)
    if (story.sample->split == s) out.push_back(&story);
  return out;
}

Vocabulary build_vocabulary(const data::Dataset& dataset, const std::vector<std::string>& extra) {
  auto captions = dataset.captions(data::Split::kTrain);
  captions.insert(captions.end(), extra.begin(), extra.end());
  return Vocabulary::build(captions);
}

torch::Tensor encode_captions(const Vocabulary& vocab, const std::vector<std::string>& captions,
                              int text_length) {
  auto out = torch::empty({static_cast<std::int64_t>(captions.size()), text_length}, torch::kLong);
  for (size_t i = 0; i < captions.size(); ++i) {
    const auto ids = vocab.encode(captions[i], text_length);
    std::copy(ids.begin(), ids.end(), out[static_cast<std::int64_t>(i)].data_ptr<std::int64_t>());
  }
  return out;
}

TokenizedDataset tokenize_dataset(const data::Dataset& dataset, tokenizer::VqVaeImpl& vae,
                                  const Vocabulary& vocab, int text_length) {
  TokenizedDataset out;
  out.vocab = vocab;
  out.stories.reserve(dataset.samples.size());
  for (const auto& sample : dataset.samples) {
    TokenizedStory story;
    story.sample = &sample;
    story.captions = encode_captions(vocab, sample.captions, text_length);
    std::vector<const Image*> frames;
    for (const auto& f : sample.frames) frames.push_back(f.get());
    story.frames = vae.tokenize_batch(images_to_batch(frames));
    out.stories.push_back(std::move(story));
  }
  return out;
}

std::vector<Row> target_rows(const std::vector<const TokenizedStory*>& stories) {
  std::vector<Row> rows;
  for (const auto* s : stories)
    for (int t = 1; t < s->sample->length(); ++t) rows.push_back({s, t});
  return rows;
}

model::TokenBatch make_batch(const std::vector<Row>& rows) {
  if (rows.empty()) throw ValidationError("make_batch: no rows");
  const auto b = static_cast<std::int64_t>(rows.size());
  std::int64_t t_max = 0;
  for (const auto& r : rows) t_max = std::max(t_max, r.story->captions.size(0));
  const auto n_text = rows.front().story->captions.size(1);
  model::TokenBatch batch;
  batch.story_captions = torch::zeros({b, t_max, n_text}, torch::kLong);
  batch.story_valid = torch::zeros({b, t_max}, torch::kBool);
  std::vector<torch::Tensor> captions, images, sources;
  std::vector<std::int64_t> frame_index;
  for (std::int64_t i = 0; i < b; ++i) {
    const auto& r = rows[static_cast<size_t>(i)];
    const auto t = r.story->captions.size(0);
    batch.story_captions[i].slice(0, 0, t).copy_(r.story->captions);
    batch.story_valid[i].slice(0, 0, t).fill_(true);
    captions.push_back(r.story->captions[r.frame]);
    images.push_back(r.story->frames[r.frame]);
    sources.push_back(r.story->frames[0]);
    frame_index.push_back(r.frame);
  }
  batch.captions = torch::stack(captions);
  batch.images = torch::stack(images);
  batch.source = torch::stack(sources);
  batch.frame_index = torch::tensor(frame_index, torch::kLong);
  return batch;
}

// ---- story model ------------------------------------------------------------

Json EpochRecord::to_json() const {
  Json j = {{"epoch", epoch}, {"steps", steps}, {"aborted", aborted},
            {"loss", loss}, {"text_loss", text_loss}, {"image_loss", image_loss},
            {"lr", lr}, {"seconds", seconds}};
  j["val_fid"] = val_fid ? Json(*val_fid) : Json(nullptr);
  return j;
}

Json StoryTrainResult::to_json() const {
  Json e = Json::array();
  for (const auto& r : epochs) e.push_back(r.to_json());
  return {{"epochs", e}, {"best_epoch", best_epoch}, {"trainable", trainable.to_json()},
          {"best_checkpoint", best_checkpoint.string()}};
}

std::vector<std::vector<Image>> generate_stories(model::StoryTransformerImpl& model,
                                                 tokenizer::VqVaeImpl& vae,
                                                 const std::vector<const TokenizedStory*>& stories,
                                                 const SamplerConfig& sampler) {
  torch::NoGradGuard no_grad;
  model.eval();
  vae.eval();
  const auto& config = model.config();
  const auto rows = target_rows(stories);
  std::vector<std::vector<Image>> out(stories.size());
  std::map<const TokenizedStory*, size_t> slot;
  for (size_t i = 0; i < stories.size(); ++i) slot[stories[i]] = i;

  constexpr size_t kChunk = 96;
  for (size_t start = 0; start < rows.size(); start += kChunk) {
    const std::vector<Row> chunk(rows.begin() + static_cast<long>(start),
                                 rows.begin() + static_cast<long>(std::min(rows.size(), start + kChunk)));
    const auto batch = make_batch(chunk);
    torch::Tensor c_img, story_vec;
    if (config.retro_block_count() > 0) c_img = model.embed_source(batch.source);
    if (config.story_encoder) {
      story_vec = model.story_context(batch.story_captions, batch.story_valid)
                      .index({torch::arange(batch.size()), batch.frame_index});
    }
    std::vector<std::uint64_t> seeds;
    for (const auto& r : chunk) seeds.push_back(mix_seed(sampler.seed, static_cast<std::uint64_t>(r.frame)));
    const auto tokens = model.sample_images(batch.captions, story_vec, c_img, sampler, seeds);
    const auto pixels = vae.decode(tokens);
    for (size_t i = 0; i < chunk.size(); ++i)
      out[slot[chunk[i].story]].push_back(Image::from_tensor(pixels[static_cast<std::int64_t>(i)]));
  }
  return out;
}

eval::EvalReport evaluate_stories(model::StoryTransformerImpl& model, tokenizer::VqVaeImpl& vae,
                                  eval::CharacterClassifierImpl& classifier,
                                  const std::vector<const TokenizedStory*>& stories,
                                  const std::set<int>& unseen, const SamplerConfig& sampler,
                                  double threshold) {
  auto report = score_stories(stories, generate_stories(model, vae, stories, sampler), classifier, unseen,
                              threshold);
  report.seeds = {sampler.seed};
  return report;
}

StoryTrainResult train_story_model(model::StoryTransformer model, tokenizer::VqVaeImpl& vae,
                                   const TokenizedDataset& tokens, eval::CharacterClassifierImpl* classifier,
                                   const RunConfig& config, const std::filesystem::path& out_dir,
                                   const Logger& log) {
  const auto& tc = config.train;
  const auto train_rows = target_rows(tokens.split(data::Split::kTrain));
  if (train_rows.empty()) throw ValidationError("training split has no target frames");
  const auto batch_size = static_cast<size_t>(std::max(1, tc.batch_size));
  const auto steps_per_epoch = static_cast<std::int64_t>((train_rows.size() + batch_size - 1) / batch_size);
  const auto total_steps = steps_per_epoch * tc.epochs;
  auto regime = training::TrainRegime::resolve(tc, total_steps);
  training::Trainer trainer(model, regime, tc);

  auto val_stories = tokens.split(data::Split::kVal);
  if (static_cast<int>(val_stories.size()) > tc.val_stories) val_stories.resize(static_cast<size_t>(std::max(0, tc.val_stories)));
  std::optional<eval::FeatureSet> val_real;
  if (classifier && !val_stories.empty()) {
    std::vector<const data::StorySample*> samples;
    for (const auto* s : val_stories) samples.push_back(s->sample);
    val_real = eval::extract_features(frame_pointers(samples, true), *classifier);
  }

  StoryTrainResult result;
  result.trainable = trainer.report();
  say(log, std::string("regime ") + training::to_string(regime.mode) + ", schedule " +
               training::to_string(regime.schedule) + ", " + std::to_string(total_steps) + " steps, " +
               std::to_string(result.trainable.trainable) + "/" + std::to_string(result.trainable.total) +
               " parameters trainable (" + fmt(100.0 * result.trainable.fraction(), 1) + "%)");
  if (!out_dir.empty()) std::filesystem::create_directories(out_dir);

  Snapshot best;
  double best_fid = std::numeric_limits<double>::infinity();
  std::vector<Row> order = train_rows;
  for (int epoch = 1; epoch <= tc.epochs; ++epoch) {
    const auto start = Clock::now();
    std::mt19937_64 rng(mix_seed(tc.seed, static_cast<std::uint64_t>(epoch)));
    std::shuffle(order.begin(), order.end(), rng);
    EpochRecord record;
    record.epoch = epoch;
    for (size_t i = 0; i < order.size(); i += batch_size) {
      const std::vector<Row> rows(order.begin() + static_cast<long>(i),
                                  order.begin() + static_cast<long>(std::min(order.size(), i + batch_size)));
      const auto m = trainer.step(make_batch(rows));
      if (m.aborted) {
        ++record.aborted;
        say(log, "step aborted: " + m.reason);
        continue;
      }
      ++record.steps;
      record.loss += m.total;
      record.text_loss += m.text_loss;
      record.image_loss += m.image_loss;
      record.lr = m.lr;
    }
    if (record.steps > 0) {
      record.loss /= record.steps;
      record.text_loss /= record.steps;
      record.image_loss /= record.steps;
    }
    if (val_real) {
      SamplerConfig sampler = config.sampler;
      const auto generated = generate_stories(*model, vae, val_stories, sampler);
      std::vector<const Image*> fake;
      for (const auto& story : generated)
        for (const auto& f : story) fake.push_back(&f);
      record.val_fid = eval::fid(*val_real, eval::extract_features(fake, *classifier)).value;
    }
    record.seconds = seconds_since(start);
    say(log, "epoch " + std::to_string(epoch) + "/" + std::to_string(tc.epochs) + " loss " + fmt(record.loss) +
                 " (text " + fmt(record.text_loss) + ", image " + fmt(record.image_loss) + ")" +
                 (record.val_fid ? " val_fid " + fmt(*record.val_fid) : std::string()) + " " +
                 fmt(record.seconds, 1) + "s");

    const double score = record.val_fid ? *record.val_fid : -static_cast<double>(epoch);
    const bool is_best = score < best_fid || best.empty();
    if (is_best) {
      best_fid = score;
      best = snapshot(*model);
      result.best_epoch = epoch;
    }
    if (!out_dir.empty()) {
      Json meta = {{"epoch", epoch}, {"record", record.to_json()}, {"build_id", build_id()}};
      const auto path = out_dir / ("epoch-" + std::to_string(epoch) + ".ckpt");
      training::save_story_checkpoint(path, *model, vae, tokens.vocab, meta);
      if (is_best) {
        std::filesystem::copy_file(path, out_dir / "best.ckpt", std::filesystem::copy_options::overwrite_existing);
        result.best_checkpoint = out_dir / "best.ckpt";
      }
    }
    result.epochs.push_back(record);
  }
  if (!best.empty()) restore(*model, best);
  for (auto& p : model->parameters(true)) p.set_requires_grad(true);
  model->eval();
  return result;
}

// ---- experiments ------------------------------------------------------------

TokenizerRun build_tokenizer(const data::Dataset& dataset, const RunConfig& config,
                             const SyntheticSpec* renders_from, const Logger& log) {
  const auto start = Clock::now();
  std::vector<data::LabeledFrame> renders;
  if (renders_from)
    renders = data::render_random_frames(*renders_from, config.vae.render_frames, mix_seed(renders_from->seed, 1));
  std::vector<const Image*> corpus;
  for (const auto& r : renders) corpus.push_back(&r.image);
  for (const auto* img : frame_pointers(dataset.split(data::Split::kTrain), false)) corpus.push_back(img);
  const auto heldout = frame_pointers(dataset.split(data::Split::kTest), false);
  torch::manual_seed(config.vae.seed);
  TokenizerRun run;
  run.vae = tokenizer::VqVae(config.model);
  run.report = train_vae(*run.vae, corpus, heldout, config.vae, log);
  say(log, "tokenizer: held-out MSE " + fmt(run.report.heldout_mse, 5) + ", usage " +
               fmt(run.report.codebook_usage, 3) + " (" + fmt(seconds_since(start), 1) + "s)");
  return run;
}

eval::CharMetrics classifier_quality(const data::Dataset& dataset, eval::CharacterClassifierImpl& classifier,
                                     double threshold) {
  std::vector<const Image*> real;
  std::vector<data::LabelSet> gt;
  for (const auto* s : dataset.split(data::Split::kTest))
    for (int t = 1; t < s->length(); ++t) {
      real.push_back(s->frames[static_cast<size_t>(t)].get());
      gt.push_back(s->char_labels[static_cast<size_t>(t)]);
    }
  return eval::char_metrics(eval::classify_characters(real, classifier, threshold), gt);
}

ClassifierRun build_classifier(const data::Dataset& dataset, const RunConfig& config,
                               const SyntheticSpec* renders_from, const Logger& log) {
  const auto start = Clock::now();
  std::vector<data::LabeledFrame> labeled;
  if (renders_from) {
    labeled = data::render_random_frames(*renders_from, std::max(config.vae.render_frames, 1000),
                                         mix_seed(renders_from->seed, 2));
  } else {
    for (const auto* s : dataset.split(data::Split::kTrain))
      for (int t = 0; t < s->length(); ++t)
        labeled.push_back({*s->frames[static_cast<size_t>(t)], s->char_labels[static_cast<size_t>(t)]});
  }
  torch::manual_seed(config.classifier.seed);
  ClassifierRun run;
  run.classifier = eval::CharacterClassifier(dataset.n_chars, config.model.image_size, config.classifier.feature_dim);
  eval::train_classifier(*run.classifier, labeled, config.classifier);
  run.real = classifier_quality(dataset, *run.classifier, config.classifier.threshold);
  say(log, "classifier: real-frame F1 " + fmt(run.real.char_f1) + " (" + fmt(seconds_since(start), 1) + "s)");
  return run;
}

ModelConfig backbone_config(ModelConfig config) {
  config.retro_density = config.n_blocks + 1;
  config.story_encoder = false;
  config.prompt_length = 0;
  return config;
}

PretrainCorpus render_pretrain_corpus(const SyntheticSpec& spec, const PretrainConfig& config,
                                      tokenizer::VqVaeImpl& vae) {
  PretrainCorpus corpus;
  const auto frames = data::render_random_frames(spec, config.frames, mix_seed(spec.seed, config.seed + 3));
  std::vector<torch::Tensor> chunks;
  constexpr size_t kChunk = 256;
  for (size_t i = 0; i < frames.size(); i += kChunk) {
    std::vector<const Image*> images;
    for (size_t j = i; j < std::min(frames.size(), i + kChunk); ++j) images.push_back(&frames[j].image);
    chunks.push_back(vae.tokenize_batch(images_to_batch(images)));
  }
  for (const auto& f : frames) corpus.captions.push_back(f.caption);
  corpus.images = chunks.empty() ? torch::empty({0, 0}, torch::kLong) : torch::cat(chunks);
  return corpus;
}

model::StoryTransformer pretrain_backbone(const ModelConfig& config, const PretrainCorpus& corpus,
                                          const Vocabulary& vocab, const PretrainConfig& pretrain,
                                          const Logger& log) {
  if (corpus.captions.empty()) throw ValidationError("pretraining corpus is empty");
  if (config.text_vocab != vocab.size()) throw ConfigError("model.text_vocab must equal the vocabulary size");
  const auto start = Clock::now();
  torch::manual_seed(pretrain.seed);
  model::StoryTransformer model(backbone_config(config));
  TrainConfig tc;
  tc.mode = "finetune";
  tc.lr_new = tc.lr_pretrained = pretrain.lr;
  tc.warmup_steps = pretrain.warmup_steps;
  tc.seed = pretrain.seed;
  training::Trainer trainer(model, training::TrainRegime::resolve(tc, pretrain.steps), tc);

  const auto captions = encode_captions(vocab, corpus.captions, config.text_length);
  const auto n = captions.size(0);
  const auto batch_size = std::min<std::int64_t>(std::max(1, pretrain.batch_size), n);
  std::mt19937_64 rng(mix_seed(pretrain.seed, 11));
  std::vector<std::int64_t> order(static_cast<size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  size_t cursor = order.size();
  double recent = 0.0;
  int recent_steps = 0;
  for (int step = 1; step <= pretrain.steps; ++step) {
    if (cursor + static_cast<size_t>(batch_size) > order.size()) {
      std::shuffle(order.begin(), order.end(), rng);
      cursor = 0;
    }
    const auto index = torch::tensor(std::vector<std::int64_t>(order.begin() + static_cast<long>(cursor),
                                                               order.begin() + static_cast<long>(cursor) + batch_size),
                                     torch::kLong);
    cursor += static_cast<size_t>(batch_size);
    model::TokenBatch batch;
    batch.captions = captions.index_select(0, index);
    batch.images = corpus.images.index_select(0, index);
    const auto m = trainer.step(batch);
    if (m.aborted) {
      say(log, "pretrain step aborted: " + m.reason);
      continue;
    }
    recent += m.total;
    ++recent_steps;
    if (step % 250 == 0 || step == pretrain.steps) {
      say(log, "pretrain step " + std::to_string(step) + ": loss " + fmt(recent / std::max(1, recent_steps)) +
                   " (" + fmt(seconds_since(start), 1) + "s)");
      recent = 0.0;
      recent_steps = 0;
    }
  }
  model->eval();
  return model;
}

Assets prepare_synthetic_assets(const RunConfig& config, const Logger& log) {
  Assets a;
  a.config = config;
  if (config.synthetic.image_size != config.model.image_size)
    throw ConfigError("synthetic.image_size (" + std::to_string(config.synthetic.image_size) +
                      ") must equal model.image_size (" + std::to_string(config.model.image_size) + ")");
  config.model.validate();
  const auto start = Clock::now();
  a.dataset = data::generate_synthetic_dataset(config.synthetic);
  a.unseen = data::unseen_characters(a.dataset);
  say(log, "synthetic dataset: " + std::to_string(a.dataset.samples.size()) + " stories (" +
               fmt(seconds_since(start), 1) + "s)");

  auto tok = build_tokenizer(a.dataset, config, &config.synthetic, log);
  a.vae = tok.vae;
  a.vae_report = tok.report;
  auto cls = build_classifier(a.dataset, config, &config.synthetic, log);
  a.classifier = cls.classifier;
  a.classifier_real = cls.real;

  PretrainCorpus corpus;
  if (config.pretrain.steps > 0) corpus = render_pretrain_corpus(config.synthetic, config.pretrain, *a.vae);
  const auto vocab = build_vocabulary(a.dataset, corpus.captions);
  a.config.model.text_vocab = vocab.size();
  a.tokens = tokenize_dataset(a.dataset, *a.vae, vocab, config.model.text_length);
  if (config.pretrain.steps > 0)
    a.backbone = pretrain_backbone(a.config.model, corpus, vocab, config.pretrain, log);
  return a;
}

Assets assemble_assets(const RunConfig& config, data::Dataset dataset, tokenizer::VqVae vae,
                       eval::CharacterClassifier classifier, model::StoryTransformer backbone,
                       const Vocabulary* backbone_vocab) {
  if (backbone && !backbone_vocab) throw ConfigError("a backbone needs its vocabulary");
  Assets a;
  a.config = config;
  a.dataset = std::move(dataset);
  a.unseen = data::unseen_characters(a.dataset);
  a.vae = vae;
  a.classifier = classifier;
  a.backbone = backbone;
  if (classifier) a.classifier_real = classifier_quality(a.dataset, *classifier, config.classifier.threshold);
  const auto vocab = backbone ? *backbone_vocab : build_vocabulary(a.dataset);
  a.config.model.text_vocab = vocab.size();
  a.tokens = tokenize_dataset(a.dataset, *a.vae, vocab, config.model.text_length);
  return a;
}

const char* to_string(Variant v) { return v == Variant::kRetro ? "retro" : "no-retro"; }

ModelConfig variant_config(ModelConfig config, Variant v) {
  if (v == Variant::kNoRetro) config.retro_density = config.n_blocks + 1;
  return config;
}

Json ExperimentResult::to_json() const {
  return {{"variant", to_string(variant)}, {"seed", seed}, {"train", train.to_json()},
          {"val", val.to_json()}, {"test", test.to_json()}, {"seconds", seconds}};
}

ExperimentResult run_experiment(Assets& assets, Variant variant, std::uint64_t seed,
                                const std::filesystem::path& out_dir, const Logger& log) {
  const auto start = Clock::now();
  RunConfig config = assets.config;
  config.train.seed = seed;
  config.sampler.seed = seed;
  // Both variants start from identical shared weights: the no-retro model
  // copies every tensor it has in common with the retro model, which itself
  // starts from the pretrained backbone when there is one.
  torch::manual_seed(seed);
  model::StoryTransformer reference(variant_config(config.model, Variant::kRetro));
  if (assets.backbone) model::copy_shared_parameters(*assets.backbone, *reference);
  model::StoryTransformer model = reference;
  if (variant == Variant::kNoRetro) {
    config.model = variant_config(config.model, variant);
    model = model::StoryTransformer(config.model);
    model::copy_shared_parameters(*reference, *model);
  }
  ExperimentResult r;
  r.variant = variant;
  r.seed = seed;
  r.train = train_story_model(model, *assets.vae, assets.tokens, assets.classifier.get(), config, out_dir, log);
  const double threshold = config.classifier.threshold;
  r.val = evaluate_stories(*model, *assets.vae, *assets.classifier, assets.tokens.split(data::Split::kVal),
                           assets.unseen, config.sampler, threshold);
  r.test = evaluate_stories(*model, *assets.vae, *assets.classifier, assets.tokens.split(data::Split::kTest),
                            assets.unseen, config.sampler, threshold);
  r.val.dataset = r.test.dataset = assets.dataset.name;
  r.val.checkpoint = r.test.checkpoint = r.train.best_checkpoint.string();
  r.seconds = seconds_since(start);
  say(log, std::string(to_string(variant)) + " seed " + std::to_string(seed) + ": test char_f1 " +
               fmt(r.test.chars.char_f1) + ", unseen char_f1 " + fmt(r.test.unseen_chars.char_f1) +
               ", val fid " + fmt(r.val.fid) + ", correlation " + fmt(r.test.correlation.mean) + " (" +
               fmt(r.seconds, 1) + "s)");
  return r;
}

void write_run_json(const std::filesystem::path& dir, const std::string& command, const RunConfig& config,
                    const Json& metrics) {
  std::filesystem::create_directories(dir);
  Json run = {{"command", command},
              {"build_id", build_id()},
              {"config", config.to_json()},
              {"seeds", {{"train", config.train.seed}, {"sampler", config.sampler.seed},
                         {"vae", config.vae.seed}, {"classifier", config.classifier.seed},
                         {"gan", config.gan.seed}, {"synthetic", config.synthetic.seed}}},
              {"metrics", metrics}};
  write_text(dir / "run.json", run.dump(2) + "\n");
}

void write_model_card(const std::filesystem::path& path, const ModelConfig& config, const Json& details) {
  Json card = {{"name", "retrostory"},
               {"build_id", build_id()},
               {"architecture", {{"d_model", config.d_model}, {"n_blocks", config.n_blocks},
                                 {"n_heads", config.n_heads}, {"retro_density", config.retro_density},
                                 {"retro_blocks", config.retro_block_count()},
                                 {"story_encoder", config.story_encoder},
                                 {"prompt_length", config.prompt_length}}},
               {"tokenizer", {{"image_size", config.image_size}, {"grid_size", config.grid_size},
                              {"codebook_size", config.codebook_size}}},
               {"max_frames", config.max_frames},
               {"config", to_json(config)}};
  card.merge_patch(details);
  write_text(path, card.dump(2) + "\n");
}

}  // namespace retrostory::pipeline

namespace retrostory::pipeline {

gan::GanBatch make_gan_batch(const std::vector<const TokenizedStory*>& stories) {
  if (stories.empty()) throw ValidationError("make_gan_batch: no stories");
  const auto t = stories.front()->captions.size(0);
  gan::GanBatch batch;
  std::vector<torch::Tensor> captions, frames;
  for (const auto* s : stories) {
    if (s->captions.size(0) != t) throw ValidationError("make_gan_batch: stories differ in length");
    captions.push_back(s->captions);
    std::vector<const Image*> images;
    for (const auto& f : s->sample->frames) images.push_back(f.get());
    frames.push_back(images_to_batch(images));
  }
  batch.captions = torch::stack(captions);
  batch.frames = torch::stack(frames);
  return batch;
}

std::vector<std::vector<Image>> generate_gan_stories(gan::StoryGanImpl& gan,
                                                    const std::vector<const TokenizedStory*>& stories,
                                                    std::uint64_t seed) {
  torch::NoGradGuard no_grad;
  gan.eval();
  std::vector<std::vector<Image>> out;
  for (size_t i = 0; i < stories.size(); ++i) {
    const auto batch = make_gan_batch({stories[i]});
    const auto frames = batch.frames.size(1);
    auto gen = at::detail::createCPUGenerator(mix_seed(seed, i));
    const auto noise = torch::randn({1, frames - 1, gan.config().noise_dim}, gen);
    const auto images = gan.generate(batch.captions, batch.frames.select(1, 0), noise).frames[0];
    std::vector<Image> story;
    for (std::int64_t t = 0; t < frames - 1; ++t) story.push_back(Image::from_tensor(images[t].permute({1, 2, 0})));
    out.push_back(std::move(story));
  }
  return out;
}

Json GanRunResult::to_json() const {
  Json fid = Json::array();
  for (const auto& [epoch, v] : val_fid) fid.push_back({{"epoch", epoch}, {"fid", v}});
  return {{"steps", steps}, {"finite", finite}, {"history", history}, {"val_fid", fid},
          {"test", test.to_json()}, {"seconds", seconds}};
}

eval::EvalReport score_stories(const std::vector<const TokenizedStory*>& stories,
                                 const std::vector<std::vector<Image>>& generated,
                                 eval::CharacterClassifierImpl& classifier, const std::set<int>& unseen,
                                 double threshold) {
  std::vector<const Image*> real, fake, sources;
  std::vector<data::LabelSet> gt, gt_unseen, pred_unseen;
  std::vector<size_t> unseen_rows;
  for (size_t i = 0; i < stories.size(); ++i) {
    const auto& sample = *stories[i]->sample;
    bool has_unseen = false;
    for (const auto& labels : sample.char_labels)
      for (int c : labels) has_unseen = has_unseen || unseen.count(c) > 0;
    for (int t = 1; t < sample.length(); ++t) {
      if (has_unseen) unseen_rows.push_back(fake.size());
      real.push_back(sample.frames[static_cast<size_t>(t)].get());
      fake.push_back(&generated[i][static_cast<size_t>(t - 1)]);
      sources.push_back(sample.frames[0].get());
      gt.push_back(sample.char_labels[static_cast<size_t>(t)]);
    }
  }
  eval::EvalReport report;
  report.target_frames = static_cast<std::int64_t>(fake.size());
  const auto pred = eval::classify_characters(fake, classifier, threshold);
  report.chars = eval::char_metrics(pred, gt);
  for (size_t r : unseen_rows) {
    pred_unseen.push_back(pred[r]);
    gt_unseen.push_back(gt[r]);
  }
  report.unseen_chars = eval::char_metrics(pred_unseen, gt_unseen);
  if (fake.size() >= 2) {
    const auto f = eval::fid(eval::extract_features(real, classifier), eval::extract_features(fake, classifier));
    report.fid = f.value;
    report.fid_clamped = f.clamped;
  }
  report.correlation = eval::source_correlation(sources, fake, classifier);
  return report;
}

GanRunResult run_gan(Assets& assets, std::uint64_t seed, const std::filesystem::path& out_dir,
                     const Logger& log) {
  const auto start = Clock::now();
  const auto& gc = assets.config.gan;
  torch::manual_seed(seed);
  gan::StoryGan model(gc, assets.tokens.vocab.size(), assets.config.model.text_length,
                      assets.config.model.max_frames, assets.config.model.image_size);
  gan::GanTrainer trainer(model, gc);
  auto train = assets.tokens.split(data::Split::kTrain);
  auto val = assets.tokens.split(data::Split::kVal);
  if (static_cast<int>(val.size()) > assets.config.train.val_stories)
    val.resize(static_cast<size_t>(assets.config.train.val_stories));
  const auto batch_size = static_cast<size_t>(std::max(1, gc.batch_size));
  const int steps_per_epoch = static_cast<int>((train.size() + batch_size - 1) / batch_size);
  const int total = gc.steps > 0 ? gc.steps : gc.epochs * steps_per_epoch;
  if (!out_dir.empty()) std::filesystem::create_directories(out_dir);

  std::vector<const Image*> val_real;
  for (const auto* s : val)
    for (int t = 1; t < s->sample->length(); ++t) val_real.push_back(s->sample->frames[static_cast<size_t>(t)].get());
  const auto val_features = eval::extract_features(val_real, *assets.classifier);

  GanRunResult r;
  std::mt19937_64 rng(seed);
  std::vector<const TokenizedStory*> order = train;
  size_t cursor = order.size();
  int epoch = 0;
  for (int step = 1; step <= total; ++step) {
    std::vector<const TokenizedStory*> chunk;
    while (chunk.size() < batch_size) {
      if (cursor == order.size()) {
        std::shuffle(order.begin(), order.end(), rng);
        cursor = 0;
      }
      chunk.push_back(order[cursor++]);
    }
    const auto losses = trainer.step(make_gan_batch(chunk));
    r.steps = step;
    if (!losses.finite()) {
      r.finite = false;
      say(log, "gan step " + std::to_string(step) + " produced non-finite losses; stopping");
      break;
    }
    if (step % 25 == 0 || step == total) {
      Json h = losses.to_json();
      h["step"] = step;
      r.history.push_back(h);
    }
    if (step % steps_per_epoch == 0 || step == total) {
      ++epoch;
      const auto generated = generate_gan_stories(*model, val, seed);
      std::vector<const Image*> fake;
      for (const auto& s : generated)
        for (const auto& f : s) fake.push_back(&f);
      const double v = eval::fid(val_features, eval::extract_features(fake, *assets.classifier)).value;
      r.val_fid.emplace_back(epoch, v);
      say(log, "gan epoch " + std::to_string(epoch) + " step " + std::to_string(step) + " g " +
                   fmt(losses.g_total) + " d " + fmt(losses.d_total) + " kl " + fmt(losses.kl) +
                   " val_fid " + fmt(v) + " (" + fmt(seconds_since(start), 1) + "s)");
      if (!out_dir.empty() && gc.checkpoint_every > 0 && (epoch % gc.checkpoint_every == 0 || step == total))
        gan::save_gan(out_dir / ("gan-epoch-" + std::to_string(epoch) + ".ckpt"), *model,
                      {{"epoch", epoch}, {"step", step}, {"vocab", assets.tokens.vocab.to_json()}});
    }
  }
  const auto test = assets.tokens.split(data::Split::kTest);
  r.test = score_stories(test, generate_gan_stories(*model, test, seed), *assets.classifier, assets.unseen,
                           assets.config.classifier.threshold);
  r.test.dataset = assets.dataset.name;
  r.test.seeds = {seed};
  r.seconds = seconds_since(start);
  if (!out_dir.empty()) {
    gan::save_gan(out_dir / "gan.ckpt", *model, {{"step", r.steps}, {"vocab", assets.tokens.vocab.to_json()}});
    write_text(out_dir / "eval-report.json", r.test.to_json().dump(2) + "\n");
  }
  return r;
}

}  // namespace retrostory::pipeline
