#include "testing.h"
#include "fixtures.h"
#include "oracles.h"
#include "retrostory/attention.h"
#include "retrostory/errors.h"
#include "retrostory/image.h"
#include "retrostory/story_transformer.h"
#include "retrostory/training.h"

#include <filesystem>
#include <vector>

using namespace retrostory;
using namespace retrostory::model;

namespace {

StoryTransformer random_model(const ModelConfig& cfg, std::uint64_t seed) {
  torch::manual_seed(seed);
  StoryTransformer m(cfg);
  fixture::randomize(*m, 0.2, seed);
  m->eval();
  return m;
}

Vocabulary vocab_for(const ModelConfig& cfg) {
  std::vector<std::string> words;
  for (int i = 0; words.size() + 4 < static_cast<size_t>(cfg.text_vocab); ++i)
    words.push_back(std::string(1, static_cast<char>('a' + i)));
  std::string caption;
  for (const auto& w : words) caption += w + " ";
  return Vocabulary::build({caption});
}

std::filesystem::path temp_path(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / "retrostory-tests";
  std::filesystem::create_directories(dir);
  return dir / name;
}

}  // namespace

TEST_SUITE("story_transformer") {
  TEST_CASE("logits cover the full layout") {
    const auto cfg = fixture::tiny_config();
    auto m = random_model(cfg, 1);
    const auto batch = fixture::random_batch(cfg, 3, 5, 2);
    const auto logits = m->forward_logits(batch);
    CHECK(logits.size(0) == 3);
    CHECK(logits.size(1) == 2 + 1 + 6 + 5);
    CHECK(logits.size(2) == cfg.text_vocab + cfg.codebook_size);
  }

  TEST_CASE("outputs never depend on later tokens") {
    const auto cfg = fixture::tiny_config();
    auto m = random_model(cfg, 3);
    torch::NoGradGuard no_grad;
    const std::int64_t prefix = cfg.prompt_length + 1;
    const std::int64_t text = cfg.text_length, img = cfg.image_tokens();
    for (std::uint64_t trial = 0; trial < 10; ++trial) {
      auto batch = fixture::random_batch(cfg, 2, img, 100 + trial);
      const auto base = m->forward_logits(batch);
      const auto length = base.size(1);
      auto gen = at::detail::createCPUGenerator(trial);
      const auto j = torch::randint(prefix, length - 1, {1}, gen, torch::kLong).item<std::int64_t>();
      auto changed = batch;
      changed.captions = batch.captions.clone();
      changed.images = batch.images.clone();
      for (std::int64_t p = j + 1; p < length; ++p) {
        if (p < prefix + text) {
          changed.captions.select(1, p - prefix).fill_((batch.captions[0][p - prefix].item<std::int64_t>() + 5) %
                                                       cfg.text_vocab);
        } else {
          const auto k = p - prefix - text;
          changed.images.select(1, k).fill_((batch.images[0][k].item<std::int64_t>() + 7) % cfg.codebook_size);
        }
      }
      const auto after = m->forward_logits(changed);
      const auto diff = (after.slice(1, 0, j + 1) - base.slice(1, 0, j + 1)).abs().max().item<double>();
      CHECK(diff <= 1e-6);
      // The perturbation does reach later positions.
      CHECK((after.slice(1, j + 1) - base.slice(1, j + 1)).abs().max().item<double>() > 0.0);
    }
  }

  TEST_CASE("fresh retro model matches its no-retro counterpart exactly") {
    auto cfg = fixture::tiny_config();
    torch::manual_seed(11);
    StoryTransformer retro(cfg);
    auto plain_cfg = cfg;
    plain_cfg.retro_density = cfg.n_blocks + 1;
    StoryTransformer plain(plain_cfg);
    CHECK(copy_shared_parameters(*retro, *plain) > 0);
    retro->eval();
    plain->eval();
    torch::NoGradGuard no_grad;
    for (std::uint64_t seed = 0; seed < 3; ++seed) {
      const auto batch = fixture::random_batch(cfg, 2, cfg.image_tokens(), seed);
      CHECK(torch::equal(retro->forward_logits(batch), plain->forward_logits(batch)));
    }
  }

  TEST_CASE("no cross-attention when the density exceeds the depth") {
    auto cfg = fixture::tiny_config();
    cfg.retro_density = 4;
    StoryTransformer m(cfg);
    CHECK(m->census().count(ParamGroup::kRetro) <= cfg.image_tokens() * cfg.d_model);
    cfg.retro_density = 1;
    StoryTransformer all(cfg);
    int retro_blocks = 0;
    for (const auto& b : *all->blocks) retro_blocks += b->as<BlockImpl>()->retro() ? 1 : 0;
    CHECK(retro_blocks == 3);
  }

  TEST_CASE("cached decoding equals uncached decoding") {
    const auto cfg = fixture::tiny_config();
    auto m = random_model(cfg, 5);
    torch::NoGradGuard no_grad;
    const auto batch = fixture::random_batch(cfg, 3, 1, 6);
    const auto story = m->story_context(batch.story_captions, batch.story_valid);
    const auto story_vec = story.index({torch::arange(3), batch.frame_index});
    const auto c_img = m->embed_source(batch.source);
    const std::vector<std::uint64_t> seeds{1, 2, 3};
    for (const double temperature : {0.0, 1.0}) {
      SamplerConfig s;
      s.temperature = temperature;
      s.top_k = 0;
      const auto a = m->sample_images(batch.captions, story_vec, c_img, s, seeds);
      const auto b = m->sample_images_uncached(batch.captions, story_vec, c_img, s, seeds);
      CHECK(a.sizes() == torch::IntArrayRef({3, cfg.image_tokens()}));
      CHECK(torch::equal(a, b));
    }
  }

  TEST_CASE("generate_story is deterministic per seed") {
    const auto cfg = fixture::tiny_config();
    auto m = random_model(cfg, 7);
    torch::NoGradGuard no_grad;
    const auto batch = fixture::random_batch(cfg, 1, 1, 8);
    SamplerConfig s;
    s.temperature = 1.0;
    s.top_k = 0;
    s.seed = 42;
    const auto a = m->generate_story(batch.story_captions[0], batch.source[0], s);
    const auto b = m->generate_story(batch.story_captions[0], batch.source[0], s);
    REQUIRE(a.size() == static_cast<size_t>(cfg.max_frames - 1));
    for (size_t i = 0; i < a.size(); ++i) CHECK(torch::equal(a[i].to_tensor(), b[i].to_tensor()));
    s.seed = 43;
    const auto c = m->generate_story(batch.story_captions[0], batch.source[0], s);
    bool any_diff = false;
    for (size_t i = 0; i < a.size(); ++i) any_diff |= !torch::equal(a[i].to_tensor(), c[i].to_tensor());
    CHECK(any_diff);
  }

  TEST_CASE("lm loss ignores padded caption targets") {
    const auto cfg = fixture::tiny_config();
    auto m = random_model(cfg, 9);
    torch::NoGradGuard no_grad;
    const auto batch = fixture::random_batch(cfg, 2, 4, 10);
    const auto logits = m->forward_logits(batch);
    const auto loss = m->lm_loss(logits, batch);
    // Reference: text position i predicts caption token i + 1 unless it is
    // padding; the last caption position and image positions predict the
    // next image token. Each kind is normalized over its own vocabulary.
    const auto l64 = logits.to(torch::kFloat64);
    const auto text_lp = torch::log_softmax(l64.slice(2, 0, cfg.text_vocab), -1);
    const auto image_lp = torch::log_softmax(l64.slice(2, cfg.text_vocab), -1);
    const std::int64_t start = cfg.prompt_length + 1, n = cfg.text_length;
    double text_sum = 0.0, image_sum = 0.0;
    int text_count = 0, image_count = 0;
    for (std::int64_t r = 0; r < 2; ++r) {
      for (std::int64_t i = 0; i + 1 < n; ++i) {
        const auto target = batch.captions[r][i + 1].item<std::int64_t>();
        if (target == Vocabulary::kPad) continue;
        text_sum -= text_lp[r][start + i][target].item<double>();
        ++text_count;
      }
      for (std::int64_t k = 0; k < 4; ++k) {
        const auto target = batch.images[r][k].item<std::int64_t>();
        image_sum -= image_lp[r][start + n - 1 + k][target].item<double>();
        ++image_count;
      }
    }
    CHECK(loss.text.item<double>() == doctest::Approx(text_sum / text_count).epsilon(1e-5));
    CHECK(loss.image.item<double>() == doctest::Approx(image_sum / image_count).epsilon(1e-5));
  }

  TEST_CASE("parameter groups follow module names") {
    CHECK(group_of("prompt_network.fc1.weight") == ParamGroup::kPrompt);
    CHECK(group_of("story_encoder.bridge.weight") == ParamGroup::kStory);
    CHECK(group_of("sentence_encoder.embedding.weight") == ParamGroup::kStory);
    CHECK(group_of("blocks.0.cross_attn.q.weight") == ParamGroup::kRetro);
    CHECK(group_of("blocks.3.ln_cross.weight") == ParamGroup::kRetro);
    CHECK(group_of("source_position") == ParamGroup::kRetro);
    CHECK(group_of("text_embedding.weight") == ParamGroup::kEmbeddings);
    CHECK(group_of("blocks.1.self_attn.q.weight") == ParamGroup::kBackbone);
    CHECK(group_of("head.weight") == ParamGroup::kBackbone);
  }

  TEST_CASE("census adds up to the parameter count") {
    const auto cfg = fixture::tiny_config();
    StoryTransformer m(cfg);
    const auto c = m->census();
    std::int64_t total = 0;
    for (const auto& p : m->parameters()) total += p.numel();
    CHECK(c.total == total);
    std::int64_t by_group = 0;
    for (const auto& [name, n] : c.by_group) by_group += n;
    CHECK(by_group == total);
    const double want = static_cast<double>(c.count(ParamGroup::kRetro)) /
                        static_cast<double>(total - c.count(ParamGroup::kRetro));
    CHECK(c.retro_increase() == doctest::Approx(want));
    CHECK(c.retro_increase() > 0.0);
  }

  TEST_CASE("retro block gradients match finite differences") {
    auto cfg = fixture::tiny_config();
    torch::manual_seed(13);
    Block block(cfg, true);
    fixture::randomize(*block, 0.3, 13);
    block->to(torch::kFloat64);
    const auto opts = torch::TensorOptions().dtype(torch::kFloat64);
    auto x = torch::randn({2, 5, cfg.d_model}, opts).requires_grad_(true);
    auto c = torch::randn({2, cfg.image_tokens(), cfg.d_model}, opts).requires_grad_(true);
    const auto w = torch::randn({2, 5, cfg.d_model}, opts);
    const auto mask = attention::causal_mask(5);
    std::vector<torch::Tensor> inputs{x, c};
    for (const auto& item : block->named_parameters())
      if (item.key().find("cross") != std::string::npos) inputs.push_back(item.value());
    const auto r = oracle::check_gradients([&] { return (block->forward(x, c, mask) * w).sum(); }, inputs);
    CHECK(r.checked > 0);
    CHECK(r.max_rel_error < 1e-4);
  }

  TEST_CASE("story checkpoints round trip") {
    const auto cfg = fixture::tiny_config();
    auto m = random_model(cfg, 15);
    tokenizer::VqVae vae(cfg);
    const auto vocab = vocab_for(cfg);
    const auto path = temp_path("story.ckpt");
    training::save_story_checkpoint(path, *m, *vae, vocab, Json{{"step", 12}});
    auto bundle = training::load_story_checkpoint(path, &cfg);
    CHECK(bundle.meta.at("step") == 12);
    CHECK(bundle.vocab.size() == cfg.text_vocab);
    bundle.model->eval();
    torch::NoGradGuard no_grad;
    const auto batch = fixture::random_batch(cfg, 2, 3, 16);
    CHECK(torch::equal(m->forward_logits(batch), bundle.model->forward_logits(batch)));
  }

  TEST_CASE("damaged or mismatched checkpoints are rejected") {
    const auto cfg = fixture::tiny_config();
    StoryTransformer m(cfg);
    tokenizer::VqVae vae(cfg);
    const auto path = temp_path("story-bad.ckpt");
    training::save_story_checkpoint(path, *m, *vae, vocab_for(cfg));
    const auto good = read_file(path);

    SUBCASE("flipped byte") {
      auto bytes = good;
      bytes[bytes.size() / 2] ^= 0x5a;
      write_file(path, bytes);
      CHECK_THROWS_AS(training::load_story_checkpoint(path), CheckpointError);
    }
    SUBCASE("truncated") {
      auto bytes = good;
      bytes.resize(bytes.size() / 3);
      write_file(path, bytes);
      CHECK_THROWS_AS(training::load_story_checkpoint(path), CheckpointError);
    }
    SUBCASE("other version") {
      auto bytes = good;
      bytes[8] = static_cast<std::uint8_t>(bytes[8] + 1);
      write_file(path, bytes);
      CHECK_THROWS_WITH_AS(training::load_story_checkpoint(path), doctest::Contains("version"), CheckpointError);
    }
    SUBCASE("conflicting config") {
      auto other = cfg;
      other.d_model = 64;
      CHECK_THROWS_AS(training::load_story_checkpoint(path, &other), CheckpointError);
    }
    SUBCASE("missing file") {
      CHECK_THROWS_AS(training::load_story_checkpoint(temp_path("nope.ckpt")), CheckpointError);
    }
  }
}
