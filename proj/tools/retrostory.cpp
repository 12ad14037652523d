#include <csignal>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "retrostory/checkpoint.h"
#include "retrostory/errors.h"
#include "retrostory/pipeline.h"
#include "retrostory/service.h"

namespace fs = std::filesystem;
using namespace retrostory;

namespace {

struct Common {
  std::string preset = "toy";
  std::string config_file;
  std::vector<std::string> overrides;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::string data;
  std::string format = "synthetic";
  int threads = 0;
};

void log_line(const std::string& line) { std::cerr << line << std::endl; }

Json read_json(const fs::path& path) {
  const auto bytes = read_file(path);
  return Json::parse(bytes.begin(), bytes.end());
}

// Preset, then config file (a run.json is accepted too), then --set overrides.
RunConfig resolve_config(const Common& c) {
  if (c.preset != "toy" && c.preset != "default") throw ConfigError("unknown preset: " + c.preset);
  RunConfig config = c.preset == "toy" ? RunConfig::toy() : RunConfig{};
  if (!c.config_file.empty()) {
    Json file = read_json(c.config_file);
    if (file.contains("config") && file.contains("command")) file = file["config"];
    Json merged = config.to_json();
    merged.merge_patch(file);
    config = RunConfig::from_json(merged);
  }
  for (const auto& o : c.overrides) config.apply_override(o);
  return config;
}

fs::path data_root(const Common& c) {
  if (!c.data.empty()) return c.data;
  if (const char* env = std::getenv("RETROSTORY_DATA")) return env;
  throw ConfigError("no dataset: pass --data or set RETROSTORY_DATA");
}

fs::path out_dir(const Common& c) {
  if (c.out.empty()) throw ConfigError("--out is required");
  fs::create_directories(c.out);
  return c.out;
}

// The spec make-synthetic used, so tokenizer and classifier corpora can add
// random renders of the same world.
std::optional<SyntheticSpec> synthetic_spec(const fs::path& root) {
  const auto path = root / "synthetic.json";
  if (!fs::exists(path)) return std::nullopt;
  RunConfig c;
  c = RunConfig::from_json({{"synthetic", read_json(path)}});
  return c.synthetic;
}

data::Dataset load_data(const Common& c, RunConfig& config) {
  const auto root = data_root(c);
  auto dataset = data::load_dataset(root, c.format);
  if (auto spec = synthetic_spec(root)) config.synthetic = *spec;
  return dataset;
}

pipeline::Assets load_assets(const Common& c, RunConfig& config, const std::string& tokenizer_path,
                             const std::string& classifier_path, const std::string& init_path = {}) {
  auto dataset = load_data(c, config);
  if (tokenizer_path.empty()) throw ConfigError("--tokenizer is required");
  auto vae = training::load_tokenizer(tokenizer_path);
  const auto& tc = vae->config();
  for (const auto& key : config_differences(tc, config.model))
    if (key == "image_size" || key == "grid_size" || key == "code_dim" || key == "codebook_size" ||
        key == "vae_channels")
      throw ConfigError("tokenizer checkpoint disagrees with the config on model." + key);
  eval::CharacterClassifier classifier{nullptr};
  if (!classifier_path.empty()) classifier = eval::load_classifier(classifier_path);
  if (init_path.empty()) return pipeline::assemble_assets(config, std::move(dataset), vae, classifier);
  // The pretrained backbone; its vocabulary replaces the train-split one.
  auto init = training::load_story_checkpoint(init_path);
  return pipeline::assemble_assets(config, std::move(dataset), vae, classifier, init.model, &init.vocab);
}

std::uint64_t seed_or(const Common& c, std::uint64_t fallback) { return c.seed.value_or(fallback); }

// ---- commands ----------------------------------------------------------------

int cmd_make_synthetic(const Common& c) {
  auto config = resolve_config(c);
  if (c.seed) config.synthetic.seed = *c.seed;
  const auto out = out_dir(c);
  const auto dataset = data::generate_synthetic_dataset(config.synthetic);
  data::save_dataset(dataset, out);
  write_text(out / "synthetic.json", config.to_json()["synthetic"].dump(2) + "\n");
  pipeline::write_run_json(out, "make-synthetic", config,
                           {{"stories", dataset.samples.size()},
                            {"unseen_characters", data::unseen_characters(dataset).size()}});
  log_line("wrote " + std::to_string(dataset.samples.size()) + " stories to " + out.string());
  return 0;
}

int cmd_train_vae(const Common& c) {
  auto config = resolve_config(c);
  if (c.seed) config.vae.seed = *c.seed;
  auto dataset = load_data(c, config);
  const auto out = out_dir(c);
  const bool synthetic = c.format == "synthetic" && synthetic_spec(data_root(c));
  auto run = pipeline::build_tokenizer(dataset, config, synthetic ? &config.synthetic : nullptr, log_line);
  training::save_tokenizer(out / "tokenizer.ckpt", *run.vae);
  pipeline::write_run_json(out, "train-vae", config,
                           {{"steps", run.report.steps},
                            {"final_loss", run.report.final_loss},
                            {"train_mse", run.report.train_mse},
                            {"heldout_mse", run.report.heldout_mse},
                            {"codebook_usage", run.report.codebook_usage},
                            {"restarted_codes", run.report.restarted_codes}});
  return 0;
}

int cmd_train_classifier(const Common& c) {
  auto config = resolve_config(c);
  if (c.seed) config.classifier.seed = *c.seed;
  auto dataset = load_data(c, config);
  const auto out = out_dir(c);
  const bool synthetic = c.format == "synthetic" && synthetic_spec(data_root(c));
  auto run = pipeline::build_classifier(dataset, config, synthetic ? &config.synthetic : nullptr, log_line);
  eval::save_classifier(out / "classifier.ckpt", *run.classifier);
  pipeline::write_run_json(out, "train-classifier", config,
                           {{"real_char_f1", run.real.char_f1}, {"real_frame_acc", run.real.frame_acc}});
  return 0;
}

int cmd_pretrain(const Common& c, const std::string& tokenizer_path) {
  auto config = resolve_config(c);
  if (c.seed) config.pretrain.seed = *c.seed;
  const auto root = data_root(c);
  if (c.format != "synthetic" || !synthetic_spec(root))
    throw ConfigError("pretrain renders scenes of a synthetic dataset made by make-synthetic");
  auto dataset = load_data(c, config);
  if (tokenizer_path.empty()) throw ConfigError("--tokenizer is required");
  if (config.pretrain.steps <= 0) throw ConfigError("pretrain.steps must be positive");
  const auto out = out_dir(c);
  auto vae = training::load_tokenizer(tokenizer_path);
  const auto corpus = pipeline::render_pretrain_corpus(config.synthetic, config.pretrain, *vae);
  const auto vocab = pipeline::build_vocabulary(dataset, corpus.captions);
  config.model.text_vocab = vocab.size();
  auto model = pipeline::pretrain_backbone(config.model, corpus, vocab, config.pretrain, log_line);
  training::save_story_checkpoint(out / "backbone.ckpt", *model, *vae, vocab, {{"pretrain_steps", config.pretrain.steps}});
  pipeline::write_run_json(out, "pretrain", config, {{"frames", corpus.captions.size()}, {"vocab", vocab.size()}});
  return 0;
}

struct TrainArgs {
  std::string model = "retro";
  std::string mode = "finetune";
  std::string tokenizer;
  std::string classifier;
  std::string init;
};

int cmd_train(const Common& c, const TrainArgs& a) {
  auto config = resolve_config(c);
  config.train.mode = a.mode;
  (void)training::parse_mode(a.mode);
  const auto out = out_dir(c);
  auto assets = load_assets(c, config, a.tokenizer, a.classifier, a.init);

  if (a.model == "gan") {
    if (!assets.classifier) throw ConfigError("--model gan needs --classifier for validation FID");
    const auto seed = seed_or(c, assets.config.gan.seed);
    assets.config.gan.seed = seed;
    const auto r = pipeline::run_gan(assets, seed, out, log_line);
    pipeline::write_run_json(out, "train", assets.config, r.to_json());
    return r.finite ? 0 : 1;
  }
  if (a.model != "retro") throw ConfigError("--model must be retro or gan");

  auto& cfg = assets.config;
  cfg.train.seed = seed_or(c, cfg.train.seed);
  cfg.sampler.seed = cfg.train.seed;
  torch::manual_seed(cfg.train.seed);
  model::StoryTransformer model(cfg.model);
  if (assets.backbone) {
    const auto n = model::copy_shared_parameters(*assets.backbone, *model);
    log_line("initialized " + std::to_string(n) + " tensors from " + a.init);
  }
  const auto train = pipeline::train_story_model(model, *assets.vae, assets.tokens, assets.classifier.get(), cfg,
                                                 out, log_line);
  Json metrics = {{"train", train.to_json()}};
  Json card = {{"dataset", assets.dataset.name},
               {"seeds", {{"train", cfg.train.seed}, {"sampler", cfg.sampler.seed}}},
               {"training", {{"mode", cfg.train.mode}, {"epochs", cfg.train.epochs},
                             {"best_epoch", train.best_epoch},
                             {"trainable_fraction", train.trainable.fraction()}}},
               {"intended_use",
                "Research demo of story continuation on a synthetic toy dataset. Generates frames 2..T "
                "of a story from its captions and a source frame; not suitable for real imagery."}};
  if (assets.classifier) {
    auto report = pipeline::evaluate_stories(*model, *assets.vae, *assets.classifier,
                                             assets.tokens.split(data::Split::kTest), assets.unseen, cfg.sampler,
                                             cfg.classifier.threshold);
    report.dataset = assets.dataset.name;
    report.checkpoint = train.best_checkpoint.string();
    write_text(out / "eval-report.json", report.to_json().dump(2) + "\n");
    metrics["test"] = report.to_json();
    card["metrics"] = report.to_json();
  }
  pipeline::write_model_card(out / "model-card.json", cfg.model, card);
  pipeline::write_run_json(out, "train", cfg, metrics);
  log_line("best checkpoint: " + train.best_checkpoint.string());
  return 0;
}

std::string checkpoint_kind(const fs::path& path) {
  const auto kind = load_archive(path).kind;
  if (kind != "story" && kind != "gan")
    throw CheckpointError(path.string() + " holds a '" + kind + "' checkpoint, expected a story or gan model");
  return kind;
}

void write_frames(const fs::path& dir, const std::vector<Image>& frames) {
  fs::create_directories(dir);
  for (size_t i = 0; i < frames.size(); ++i) {
    const auto png = encode_png(frames[i]);
    std::ofstream f(dir / ("frame-" + std::to_string(i + 2) + ".png"), std::ios::binary);
    f.write(reinterpret_cast<const char*>(png.data()), static_cast<std::streamsize>(png.size()));
  }
}

int cmd_generate(const Common& c, const std::string& checkpoint, const std::string& story_id) {
  auto config = resolve_config(c);
  if (checkpoint.empty()) throw ConfigError("--checkpoint is required");
  if (c.seed) config.sampler.seed = *c.seed;
  const auto out = out_dir(c);
  auto dataset = load_data(c, config);
  const auto* sample = dataset.find(story_id);
  if (!sample) throw ConfigError("no story with id " + story_id);

  std::vector<Image> frames;
  if (checkpoint_kind(checkpoint) == "story") {
    auto bundle = training::load_story_checkpoint(checkpoint);
    const auto captions = pipeline::encode_captions(bundle.vocab, sample->captions, bundle.config.text_length);
    const auto grids =
        bundle.model->generate_story(captions, bundle.vae->tokenize(sample->source()).to_tensor(), config.sampler);
    for (const auto& g : grids) frames.push_back(bundle.vae->decode(g));
  } else {
    Json meta;
    auto model = gan::load_gan(checkpoint, &meta);
    pipeline::TokenizedStory story;
    story.sample = sample;
    const auto vocab = Vocabulary::from_json(meta.at("vocab"));
    story.captions = pipeline::encode_captions(vocab, sample->captions, config.model.text_length);
    frames = pipeline::generate_gan_stories(*model, {&story}, config.sampler.seed).front();
  }
  write_frames(out, frames);
  pipeline::write_run_json(out, "generate", config,
                           {{"checkpoint", checkpoint}, {"story", story_id}, {"frames", frames.size()}});
  log_line("wrote " + std::to_string(frames.size()) + " frames to " + out.string());
  return 0;
}

int cmd_evaluate(const Common& c, const std::string& checkpoint, const std::string& classifier_path,
                 const std::string& split_name) {
  auto config = resolve_config(c);
  if (checkpoint.empty()) throw ConfigError("--checkpoint is required");
  if (classifier_path.empty()) throw ConfigError("--classifier is required");
  if (c.seed) config.sampler.seed = *c.seed;
  const auto out = out_dir(c);
  const auto split = data::parse_split(split_name);
  auto dataset = load_data(c, config);
  auto classifier = eval::load_classifier(classifier_path);

  eval::EvalReport report;
  if (checkpoint_kind(checkpoint) == "story") {
    auto bundle = training::load_story_checkpoint(checkpoint);
    config.model = bundle.config;
    auto assets = pipeline::assemble_assets(config, std::move(dataset), bundle.vae, classifier);
    // Score with the checkpoint's own vocabulary.
    assets.tokens = pipeline::tokenize_dataset(assets.dataset, *bundle.vae, bundle.vocab, config.model.text_length);
    report = pipeline::evaluate_stories(*bundle.model, *bundle.vae, *classifier, assets.tokens.split(split),
                                        assets.unseen, config.sampler, config.classifier.threshold);
    report.dataset = assets.dataset.name;
  } else {
    Json meta;
    auto model = gan::load_gan(checkpoint, &meta);
    const auto vocab = Vocabulary::from_json(meta.at("vocab"));
    std::vector<pipeline::TokenizedStory> stories;
    for (const auto* s : dataset.split(split)) {
      pipeline::TokenizedStory t;
      t.sample = s;
      t.captions = pipeline::encode_captions(vocab, s->captions, config.model.text_length);
      stories.push_back(t);
    }
    std::vector<const pipeline::TokenizedStory*> ptrs;
    for (const auto& s : stories) ptrs.push_back(&s);
    report = pipeline::score_stories(ptrs, pipeline::generate_gan_stories(*model, ptrs, config.sampler.seed),
                                     *classifier, data::unseen_characters(dataset), config.classifier.threshold);
    report.seeds = {config.sampler.seed};
    report.dataset = dataset.name;
  }
  report.checkpoint = checkpoint;
  write_text(out / "eval-report.json", report.to_json().dump(2) + "\n");
  pipeline::write_run_json(out, "evaluate", config, report.to_json());
  log_line("char_f1 " + std::to_string(report.chars.char_f1) + ", fid " + std::to_string(report.fid));
  return 0;
}

int cmd_ablate(const Common& c, const TrainArgs& a) {
  auto config = resolve_config(c);
  const auto out = out_dir(c);
  if (a.classifier.empty()) throw ConfigError("--classifier is required");
  auto assets = load_assets(c, config, a.tokenizer, a.classifier, a.init);
  auto& cfg = assets.config;
  cfg.train.seed = seed_or(c, cfg.train.seed);
  cfg.sampler.seed = cfg.train.seed;

  struct Cell {
    const char* name;
    bool cross_attention;
    bool story_embeddings;
  };
  const Cell grid[] = {{"full", true, true},
                       {"-cross-attention", false, true},
                       {"-story-embeddings", true, false},
                       {"-both", false, false}};
  torch::manual_seed(cfg.train.seed);
  model::StoryTransformer reference(cfg.model);
  if (assets.backbone) model::copy_shared_parameters(*assets.backbone, *reference);
  Json results = Json::array();
  for (const auto& cell : grid) {
    RunConfig run = cfg;
    if (!cell.cross_attention) run.model = pipeline::variant_config(run.model, pipeline::Variant::kNoRetro);
    run.model.story_encoder = cell.story_embeddings;
    model::StoryTransformer model(run.model);
    model::copy_shared_parameters(*reference, *model);
    log_line(std::string("ablation cell ") + cell.name);
    const auto train = pipeline::train_story_model(model, *assets.vae, assets.tokens, assets.classifier.get(), run,
                                                   out / cell.name, log_line);
    auto report = pipeline::evaluate_stories(*model, *assets.vae, *assets.classifier,
                                             assets.tokens.split(data::Split::kTest), assets.unseen, run.sampler,
                                             run.classifier.threshold);
    report.dataset = assets.dataset.name;
    report.checkpoint = train.best_checkpoint.string();
    results.push_back({{"variant", cell.name}, {"train", train.to_json()}, {"test", report.to_json()}});
    log_line(std::string(cell.name) + ": char_f1 " + std::to_string(report.chars.char_f1) + ", fid " +
             std::to_string(report.fid));
  }
  write_text(out / "ablation.json", results.dump(2) + "\n");
  pipeline::write_run_json(out, "ablate", cfg, {{"ablation", results}});
  return 0;
}

service::StoryService* running_service = nullptr;

void handle_signal(int) {
  if (running_service) running_service->stop();
}

int cmd_serve(const Common& c, const std::string& checkpoint, int port, const std::string& host,
              const std::string& model_card) {
  if (checkpoint.empty()) throw ConfigError("--checkpoint is required");
  service::ServiceOptions options;
  options.checkpoint = checkpoint;
  options.model_card = model_card;
  options.port = port;
  options.host = host;
  options.data_format = c.format;
  if (!c.data.empty()) options.data_root = c.data;
  else if (const char* env = std::getenv("RETROSTORY_DATA")) options.data_root = env;
  service::StoryService svc(options);
  const int bound = svc.bind();
  running_service = &svc;
  std::signal(SIGINT, handle_signal);
  std::signal(SIGTERM, handle_signal);
  // Health answers 503 while the checkpoint loads.
  std::thread loader([&] {
    try {
      svc.load();
      log_line("model loaded; serving on http://" + host + ":" + std::to_string(bound));
    } catch (const std::exception& e) {
      log_line(std::string("error: could not load checkpoint: ") + e.what());
      svc.stop();
    }
  });
  svc.listen();
  loader.join();
  running_service = nullptr;
  return svc.ready() ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Story continuation with retro-fitted cross-attention"};
  app.require_subcommand(1);
  Common common;
  auto add_common = [&](CLI::App* sub, bool needs_data) {
    sub->add_option("--preset", common.preset, "Base configuration: toy or default")->capture_default_str();
    sub->add_option("--config", common.config_file, "JSON config (or a previous run.json)");
    sub->add_option("--set", common.overrides, "Override, e.g. --set train.epochs=3")->take_all();
    sub->add_option("--seed", common.seed, "Seed for the command's random process");
    sub->add_option("--out", common.out, "Output directory")->required();
    sub->add_option("--threads", common.threads, "Intra-op threads (0: library default)");
    if (needs_data) {
      sub->add_option("--data", common.data, "Dataset root (default: $RETROSTORY_DATA)");
      sub->add_option("--format", common.format, "synthetic, pororo, flintstones or didemo")
          ->capture_default_str();
    }
  };

  auto* make = app.add_subcommand("make-synthetic", "Generate the synthetic story dataset");
  add_common(make, false);
  auto* vae = app.add_subcommand("train-vae", "Train the image tokenizer");
  add_common(vae, true);
  auto* cls = app.add_subcommand("train-classifier", "Train the character classifier used for evaluation");
  add_common(cls, true);

  std::string pretrain_tokenizer;
  auto* pretrain = app.add_subcommand("pretrain", "Pretrain the transformer backbone on captioned random scenes");
  add_common(pretrain, true);
  pretrain->add_option("--tokenizer", pretrain_tokenizer, "Tokenizer checkpoint")->required();

  TrainArgs train_args;
  auto* train = app.add_subcommand("train", "Train a story model");
  add_common(train, true);
  train->add_option("--model", train_args.model, "retro or gan")
      ->check(CLI::IsMember({"retro", "gan"}))
      ->capture_default_str();
  train->add_option("--mode", train_args.mode, "finetune or prompt")
      ->check(CLI::IsMember({"finetune", "prompt"}))
      ->capture_default_str();
  train->add_option("--tokenizer", train_args.tokenizer, "Tokenizer checkpoint")->required();
  train->add_option("--classifier", train_args.classifier, "Classifier checkpoint for validation FID");
  train->add_option("--init", train_args.init,
                    "Backbone or story checkpoint to initialize shared weights and vocabulary from");

  std::string checkpoint, story_id, classifier_path, split = "test";
  auto* gen = app.add_subcommand("generate", "Generate frames 2..T of a dataset story");
  add_common(gen, true);
  gen->add_option("--checkpoint", checkpoint, "Story or GAN checkpoint")->required();
  gen->add_option("--story", story_id, "Story id")->required();

  auto* evaluate = app.add_subcommand("evaluate", "Score a checkpoint and write eval-report.json");
  add_common(evaluate, true);
  evaluate->add_option("--checkpoint", checkpoint, "Story or GAN checkpoint")->required();
  evaluate->add_option("--classifier", classifier_path, "Classifier checkpoint")->required();
  evaluate->add_option("--split", split, "train, val or test")->capture_default_str();

  TrainArgs ablate_args;
  auto* ablate = app.add_subcommand("ablate", "Train the cross-attention / story-embedding ablation grid");
  add_common(ablate, true);
  ablate->add_option("--tokenizer", ablate_args.tokenizer, "Tokenizer checkpoint")->required();
  ablate->add_option("--classifier", ablate_args.classifier, "Classifier checkpoint")->required();
  ablate->add_option("--init", ablate_args.init, "Backbone checkpoint to start every cell from");

  int port = 8080;
  std::string host = "127.0.0.1", model_card;
  auto* serve = app.add_subcommand("serve", "Serve a story checkpoint over HTTP");
  serve->add_option("--checkpoint", checkpoint, "Story checkpoint")->required();
  serve->add_option("--port", port, "Port (0 picks a free one)")->capture_default_str();
  serve->add_option("--host", host, "Bind address")->capture_default_str();
  serve->add_option("--model-card", model_card, "Model card JSON (default: next to the checkpoint)");
  serve->add_option("--data", common.data, "Dataset root so requests may use source_id");
  serve->add_option("--format", common.format, "Dataset format")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    std::cerr << "\n" << app.help();
    return 2;
  }

  try {
    if (common.threads > 0) torch::set_num_threads(common.threads);
    if (*make) return cmd_make_synthetic(common);
    if (*vae) return cmd_train_vae(common);
    if (*cls) return cmd_train_classifier(common);
    if (*pretrain) return cmd_pretrain(common, pretrain_tokenizer);
    if (*train) return cmd_train(common, train_args);
    if (*gen) return cmd_generate(common, checkpoint, story_id);
    if (*evaluate) return cmd_evaluate(common, checkpoint, classifier_path, split);
    if (*ablate) return cmd_ablate(common, ablate_args);
    if (*serve) return cmd_serve(common, checkpoint, port, host, model_card);
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
