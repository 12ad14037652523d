#include "retrostory/story_transformer.h"

#include <random>
#include <sstream>

#include "retrostory/errors.h"
#include "retrostory/sampler.h"

namespace retrostory::model {

namespace nn = torch::nn;
using conditioning::LayoutSpec;
using conditioning::Segment;

const char* to_string(ParamGroup group) {
  switch (group) {
    case ParamGroup::kBackbone: return "backbone";
    case ParamGroup::kEmbeddings: return "embeddings";
    case ParamGroup::kRetro: return "retro";
    case ParamGroup::kStory: return "story";
    case ParamGroup::kPrompt: return "prompt";
  }
  return "?";
}

ParamGroup group_of(const std::string& name) {
  auto starts = [&](const char* prefix) { return name.rfind(prefix, 0) == 0; };
  if (starts("prompt_network.")) return ParamGroup::kPrompt;
  if (starts("sentence_encoder.") || starts("story_encoder.")) return ParamGroup::kStory;
  if (starts("source_position") || name.find(".cross_attn.") != std::string::npos ||
      name.find(".ln_cross.") != std::string::npos)
    return ParamGroup::kRetro;
  if (starts("text_embedding.") || starts("image_embedding.")) return ParamGroup::kEmbeddings;
  return ParamGroup::kBackbone;
}

std::int64_t ParameterCensus::count(ParamGroup g) const {
  auto it = by_group.find(to_string(g));
  return it == by_group.end() ? 0 : it->second;
}

double ParameterCensus::retro_increase() const {
  const auto retro = count(ParamGroup::kRetro);
  return total == retro ? 0.0 : static_cast<double>(retro) / static_cast<double>(total - retro);
}

BlockImpl::BlockImpl(const ModelConfig& config, bool retro) : retro_(retro) {
  const std::int64_t d = config.d_model;
  ln_self = register_module("ln_self", nn::LayerNorm(nn::LayerNormOptions({d})));
  self_attn = register_module("self_attn", attention::MultiHeadAttention(d, config.n_heads));
  if (retro_) {
    ln_cross = register_module("ln_cross", nn::LayerNorm(nn::LayerNormOptions({d})));
    cross_attn = register_module("cross_attn", attention::MultiHeadAttention(d, config.n_heads));
  }
  ln_ffn = register_module("ln_ffn", nn::LayerNorm(nn::LayerNormOptions({d})));
  fc1 = register_module("fc1", nn::Linear(d, config.ffn_mult * d));
  fc2 = register_module("fc2", nn::Linear(config.ffn_mult * d, d));
}

torch::Tensor BlockImpl::feed_forward(const torch::Tensor& x) {
  return fc2(torch::gelu(fc1(ln_ffn(x))));
}

torch::Tensor BlockImpl::forward(const torch::Tensor& x, const torch::Tensor& c_img,
                                 const torch::Tensor& mask) {
  auto h = ln_self(x);
  auto out = x + self_attn(h, h, mask);
  if (retro_) {
    if (!c_img.defined()) throw ShapeError("retro block requires source conditioning c_img");
    // Unmasked: every query sees the whole source frame.
    out = out + cross_attn(ln_cross(out), c_img);
  }
  return out + feed_forward(out);
}

torch::Tensor BlockImpl::forward_cached(const torch::Tensor& x_new, BlockCache& cache) {
  auto h = ln_self(x_new);
  auto kv = self_attn->project_kv(h);
  if (cache.self.defined()) {
    cache.self.key = torch::cat({cache.self.key, kv.key}, 2);
    cache.self.value = torch::cat({cache.self.value, kv.value}, 2);
  } else {
    cache.self = kv;
  }
  const auto total = cache.self.length();
  const auto n = x_new.size(1);
  auto mask = attention::causal_mask(total).slice(0, total - n, total);
  auto out = x_new + self_attn->forward_with(h, cache.self, mask);
  if (retro_) {
    if (!cache.cross.defined()) throw ShapeError("retro block requires source conditioning c_img");
    out = out + cross_attn->forward_with(ln_cross(out), cache.cross, {});
  }
  return out + feed_forward(out);
}

StoryTransformerImpl::StoryTransformerImpl(const ModelConfig& config) : config_(config) {
  config_.validate();
  if (config_.text_vocab < 5) throw ConfigError("text_vocab must be set from a vocabulary");
  const std::int64_t d = config_.d_model;
  text_embedding = register_module("text_embedding", nn::Embedding(config_.text_vocab, d));
  image_embedding = register_module("image_embedding", nn::Embedding(config_.codebook_size, d));
  text_position = register_parameter("text_position", torch::randn({config_.text_length, d}) * 0.02);
  image_position = register_parameter("image_position", torch::randn({config_.image_tokens(), d}) * 0.02);
  if (config_.retro_block_count() > 0)
    source_position = register_parameter("source_position", torch::randn({config_.image_tokens(), d}) * 0.02);
  if (config_.story_encoder) {
    sentence_encoder = register_module(
        "sentence_encoder", conditioning::SentenceEncoder(config_.text_vocab, config_.sentence_dim));
    story_encoder = register_module("story_encoder", conditioning::StoryEncoder(config_));
  }
  if (config_.prompt_length > 0)
    prompt_network = register_module("prompt_network",
                                      conditioning::PromptNetwork(config_.prompt_length, d));
  blocks = register_module("blocks", nn::ModuleList());
  for (int i = 0; i < config_.n_blocks; ++i) {
    Block block(config_, config_.has_retro(i));
    blocks->push_back(block);
    block_list_.push_back(block);
  }
  ln_final = register_module("ln_final", nn::LayerNorm(nn::LayerNormOptions({d})));
  head = register_module("head", nn::Linear(d, config_.vocab_size()));

  torch::NoGradGuard no_grad;
  for (auto& module : modules(/*include_self=*/false)) {
    if (auto* linear = module->as<nn::Linear>()) {
      nn::init::normal_(linear->weight, 0.0, 0.02);
      nn::init::zeros_(linear->bias);
    } else if (auto* embedding = module->as<nn::Embedding>()) {
      nn::init::normal_(embedding->weight, 0.0, 0.02);
    }
  }
  if (prompt_network) {
    prompt_network->fc2->weight.zero_();
    prompt_network->fc2->bias.zero_();
  }
  // Retro-fitting contract: new cross-attention layers start as a no-op.
  zero_cross_attention_outputs();
}

void StoryTransformerImpl::zero_cross_attention_outputs() {
  for (auto& block : block_list_)
    if (block->retro()) block->cross_attn->zero_output_projection();
}

torch::Tensor StoryTransformerImpl::embed_text(const torch::Tensor& captions) {
  if (captions.dim() != 2 || captions.size(1) != config_.text_length)
    throw ShapeError("captions must be [B, N_text]");
  return text_embedding(captions) + text_position.unsqueeze(0);
}

torch::Tensor StoryTransformerImpl::embed_images(const torch::Tensor& images, std::int64_t offset) {
  const auto n = images.size(1);
  if (offset + n > config_.image_tokens()) throw ShapeError("image segment overflows N_img");
  return image_embedding(images) + image_position.slice(0, offset, offset + n).unsqueeze(0);
}

torch::Tensor StoryTransformerImpl::embed_source(const torch::Tensor& source_tokens) {
  if (source_tokens.dim() != 2 || source_tokens.size(1) != config_.image_tokens())
    throw ShapeError("source frame must have N_img = " + std::to_string(config_.image_tokens()) +
                     " tokens");
  auto rows = image_embedding(source_tokens);
  if (source_position.defined()) rows = rows + source_position.unsqueeze(0);
  return rows;
}

torch::Tensor StoryTransformerImpl::story_context(const torch::Tensor& story_captions,
                                                  const torch::Tensor& valid) {
  if (!story_encoder) return {};
  if (story_captions.dim() != 3 || story_captions.size(2) != config_.text_length)
    throw ShapeError("story captions must be [B, T, N_text]");
  return story_encoder(sentence_encoder(story_captions), valid);
}

torch::Tensor StoryTransformerImpl::prompt() {
  if (!prompt_network) return {};
  return prompt_network();
}

std::pair<torch::Tensor, LayoutSpec> StoryTransformerImpl::layout_sequence(
    const torch::Tensor& captions, const torch::Tensor& story_vec,
    const torch::Tensor& image_prefix) {
  const auto spec = LayoutSpec::from_config(config_, static_cast<int>(image_prefix.size(1)));
  auto x = conditioning::assemble(prompt(), story_vec, embed_text(captions),
                                  embed_images(image_prefix, 0), spec);
  return {x, spec};
}

torch::Tensor StoryTransformerImpl::forward_embedded(const torch::Tensor& x,
                                                     const torch::Tensor& c_img) {
  const auto mask = attention::causal_mask(x.size(1));
  auto h = x;
  for (auto& block : block_list_) h = block->forward(h, block->retro() ? c_img : torch::Tensor(), mask);
  return head(ln_final(h));
}

torch::Tensor StoryTransformerImpl::forward_logits(const TokenBatch& batch) {
  const auto b = batch.size();
  torch::Tensor c_img;
  if (config_.retro_block_count() > 0) {
    if (!batch.source.defined()) throw ShapeError("retro model requires source frame tokens");
    c_img = embed_source(batch.source);
  }
  torch::Tensor story_vec;
  if (story_encoder) {
    auto context = story_context(batch.story_captions, batch.story_valid);
    story_vec = context.index({torch::arange(b), batch.frame_index});
  }
  auto [x, spec] = layout_sequence(batch.captions, story_vec, batch.images);
  auto logits = forward_embedded(x, c_img);
  if (!torch::isfinite(logits).all().item<bool>()) {
    const auto bad = torch::isfinite(logits).logical_not().sum().item<std::int64_t>();
    std::ostringstream msg;
    msg << "forward_logits produced " << bad << " non-finite values (batch " << b
        << ", length " << x.size(1) << ", input max |x| "
        << x.abs().max().item<double>() << ")";
    throw NumericError(msg.str());
  }
  return logits;
}

LmLoss StoryTransformerImpl::lm_loss(const torch::Tensor& logits, const TokenBatch& batch) const {
  const auto v_text = config_.text_vocab;
  const auto n_text = config_.text_length;
  const auto n_img = batch.images.size(1);
  const auto spec = LayoutSpec::from_config(config_, static_cast<int>(n_img));
  if (logits.size(1) != spec.length()) throw ShapeError("logits do not match the layout length");
  if (batch.captions.min().item<std::int64_t>() < 0 ||
      batch.captions.max().item<std::int64_t>() >= v_text)
    throw ShapeError("caption token outside the text vocabulary");
  if (n_img > 0 && (batch.images.min().item<std::int64_t>() < 0 ||
                    batch.images.max().item<std::int64_t>() >= config_.codebook_size))
    throw ShapeError("image token outside the codebook");

  const auto text_start = spec.start(Segment::kText);
  LmLoss loss;
  // Caption position i predicts caption token i + 1; padding is not scored.
  auto text_logits = logits.slice(1, text_start, text_start + n_text - 1).slice(2, 0, v_text);
  auto text_targets = batch.captions.slice(1, 1, n_text);
  auto text_mask = text_targets.ne(0).to(logits.dtype());
  auto text_nll = torch::nn::functional::cross_entropy(
      text_logits.reshape({-1, v_text}), text_targets.reshape({-1}),
      torch::nn::functional::CrossEntropyFuncOptions().reduction(torch::kNone));
  loss.text = (text_nll * text_mask.reshape({-1})).sum() / text_mask.sum().clamp_min(1.0);

  if (n_img > 0) {
    // The last caption position predicts image token 0, image position j
    // predicts token j + 1.
    const auto first = text_start + n_text - 1;
    auto image_logits = logits.slice(1, first, first + n_img).slice(2, v_text, v_text + config_.codebook_size);
    loss.image = torch::nn::functional::cross_entropy(
        image_logits.reshape({-1, config_.codebook_size}), batch.images.reshape({-1}));
  } else {
    loss.image = torch::zeros({}, logits.options());
  }
  loss.total = loss.text + loss.image;
  return loss;
}

DecodeState StoryTransformerImpl::start_decode(const torch::Tensor& c_img) {
  DecodeState state;
  state.blocks.resize(block_list_.size());
  for (size_t i = 0; i < block_list_.size(); ++i) {
    if (!block_list_[i]->retro()) continue;
    if (!c_img.defined()) throw ShapeError("retro block requires source conditioning c_img");
    state.blocks[i].cross = block_list_[i]->cross_attn->project_kv(c_img);
  }
  return state;
}

torch::Tensor StoryTransformerImpl::forward_cached(const torch::Tensor& x_new, DecodeState& state) {
  auto h = x_new;
  for (size_t i = 0; i < block_list_.size(); ++i) h = block_list_[i]->forward_cached(h, state.blocks[i]);
  state.length += x_new.size(1);
  return head(ln_final(h));
}

namespace {

torch::Tensor sample_rows(const torch::Tensor& image_logits, const SamplerConfig& sampler,
                          std::vector<std::mt19937_64>& rngs) {
  auto logits = image_logits.to(torch::kCPU, torch::kFloat32).contiguous();
  const auto b = logits.size(0);
  const auto v = logits.size(1);
  auto out = torch::empty({b, 1}, torch::kInt64);
  const float* data = logits.data_ptr<float>();
  for (std::int64_t r = 0; r < b; ++r)
    out[r][0] = sample_token(std::span<const float>(data + r * v, static_cast<size_t>(v)),
                             sampler.temperature, sampler.top_k, rngs[static_cast<size_t>(r)]);
  return out;
}

std::vector<std::mt19937_64> make_rngs(std::span<const std::uint64_t> seeds, std::int64_t rows) {
  if (static_cast<std::int64_t>(seeds.size()) != rows)
    throw ShapeError("one sampling seed per row is required");
  std::vector<std::mt19937_64> rngs;
  for (auto s : seeds) rngs.emplace_back(s);
  return rngs;
}

}  // namespace

torch::Tensor StoryTransformerImpl::sample_images(const torch::Tensor& captions,
                                                  const torch::Tensor& story_vec,
                                                  const torch::Tensor& c_img,
                                                  const SamplerConfig& sampler,
                                                  std::span<const std::uint64_t> row_seeds) {
  torch::NoGradGuard no_grad;
  const auto b = captions.size(0);
  const auto n_img = config_.image_tokens();
  const auto v_text = config_.text_vocab;
  auto rngs = make_rngs(row_seeds, b);
  auto state = start_decode(c_img);
  auto [prefix, spec] = layout_sequence(captions, story_vec, torch::empty({b, 0}, torch::kInt64));
  auto logits = forward_cached(prefix, state);
  auto tokens = torch::empty({b, n_img}, torch::kInt64);
  for (std::int64_t j = 0; j < n_img; ++j) {
    auto next = sample_rows(logits.select(1, logits.size(1) - 1).slice(1, v_text, v_text + config_.codebook_size),
                            sampler, rngs);
    tokens.slice(1, j, j + 1).copy_(next);
    if (j + 1 < n_img) logits = forward_cached(embed_images(next, j), state);
  }
  return tokens;
}

torch::Tensor StoryTransformerImpl::sample_images_uncached(const torch::Tensor& captions,
                                                           const torch::Tensor& story_vec,
                                                           const torch::Tensor& c_img,
                                                           const SamplerConfig& sampler,
                                                           std::span<const std::uint64_t> row_seeds) {
  torch::NoGradGuard no_grad;
  const auto b = captions.size(0);
  const auto n_img = config_.image_tokens();
  const auto v_text = config_.text_vocab;
  auto rngs = make_rngs(row_seeds, b);
  auto tokens = torch::empty({b, n_img}, torch::kInt64);
  for (std::int64_t j = 0; j < n_img; ++j) {
    auto [x, spec] = layout_sequence(captions, story_vec, tokens.slice(1, 0, j));
    auto logits = forward_embedded(x, c_img);
    auto next = sample_rows(logits.select(1, logits.size(1) - 1).slice(1, v_text, v_text + config_.codebook_size),
                            sampler, rngs);
    tokens.slice(1, j, j + 1).copy_(next);
  }
  return tokens;
}

tokenizer::ImageTokenGrid StoryTransformerImpl::sample_frame(const torch::Tensor& caption,
                                                             const torch::Tensor& story_vec,
                                                             const torch::Tensor& c_img,
                                                             const SamplerConfig& sampler) {
  const std::uint64_t seed = sampler.seed;
  auto tokens = sample_images(caption.unsqueeze(0), story_vec.defined() ? story_vec.unsqueeze(0) : story_vec,
                              c_img.defined() ? c_img.unsqueeze(0) : c_img, sampler,
                              std::span<const std::uint64_t>(&seed, 1));
  return tokenizer::ImageTokenGrid::from_tensor(tokens[0]);
}

std::vector<tokenizer::ImageTokenGrid> StoryTransformerImpl::generate_story(
    const torch::Tensor& story_captions, const torch::Tensor& source_tokens,
    const SamplerConfig& sampler) {
  torch::NoGradGuard no_grad;
  const auto frames = story_captions.size(0);
  if (frames < 2) throw ValidationError("a story needs at least two frames (source + target)");
  const auto targets = frames - 1;
  torch::Tensor c_img;
  if (config_.retro_block_count() > 0)
    c_img = embed_source(source_tokens.view({1, -1})).expand({targets, -1, -1});
  torch::Tensor story_vec;
  if (story_encoder) story_vec = story_context(story_captions.unsqueeze(0))[0].slice(0, 1, frames);
  std::vector<std::uint64_t> seeds;
  for (std::int64_t t = 1; t < frames; ++t) seeds.push_back(mix_seed(sampler.seed, static_cast<std::uint64_t>(t)));
  auto tokens = sample_images(story_captions.slice(0, 1, frames), story_vec, c_img, sampler, seeds);
  std::vector<tokenizer::ImageTokenGrid> grids;
  for (std::int64_t t = 0; t < targets; ++t) grids.push_back(tokenizer::ImageTokenGrid::from_tensor(tokens[t]));
  return grids;
}

ParameterCensus StoryTransformerImpl::census() const {
  ParameterCensus c;
  for (const auto& item : named_parameters(true)) {
    c.by_group[to_string(group_of(item.key()))] += item.value().numel();
    c.total += item.value().numel();
  }
  return c;
}

std::size_t copy_shared_parameters(const StoryTransformerImpl& from, StoryTransformerImpl& to) {
  auto source = from.named_parameters(true);
  std::size_t copied = 0;
  torch::NoGradGuard no_grad;
  for (auto& item : to.named_parameters(true)) {
    const auto* found = source.find(item.key());
    if (found && found->sizes() == item.value().sizes()) {
      item.value().copy_(*found);
      ++copied;
    }
  }
  return copied;
}

}  // namespace retrostory::model
