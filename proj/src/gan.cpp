#include "retrostory/gan.h"

#include <cmath>

#include "retrostory/checkpoint.h"
#include "retrostory/errors.h"

namespace retrostory::gan {

namespace nn = torch::nn;
namespace F = torch::nn::functional;

namespace {

void check_grids(const torch::Tensor& target, const torch::Tensor& source, int patch) {
  if (target.dim() != 4 || source.dim() != 4)
    throw ShapeError("contextual attention expects [B, C, H, W] grids");
  if (target.size(0) != source.size(0) || target.size(1) != source.size(1))
    throw ShapeError("contextual attention: target and source differ in batch or channels");
  if (patch < 1 || patch % 2 == 0) throw ShapeError("contextual attention: patch must be odd");
  for (auto d : {target.size(2), target.size(3), source.size(2), source.size(3)})
    if (d < patch) throw ShapeError("contextual attention: grid smaller than the patch");
}

// [B, C, H, W] -> [B, C*p*p, H*W] zero-padded patches centered on every location.
torch::Tensor patches(const torch::Tensor& x, int patch) {
  return F::unfold(x, F::UnfoldFuncOptions(patch).padding(patch / 2));
}

torch::Tensor normalize_columns(const torch::Tensor& p, double eps) {
  return p / (p.norm(2, 1, true) + eps);
}

}  // namespace

torch::Tensor patch_similarity(const torch::Tensor& target, const torch::Tensor& source, int patch,
                               double eps) {
  check_grids(target, source, patch);
  const auto t = normalize_columns(patches(target, patch), eps);
  const auto s = normalize_columns(patches(source, patch), eps);
  return torch::bmm(t.transpose(1, 2), s);
}

ContextualAttention contextual_attention(const torch::Tensor& target, const torch::Tensor& source,
                                         int patch, double softmax_scale) {
  ContextualAttention out;
  out.similarity = patch_similarity(target, source, patch);
  out.weights = torch::softmax(softmax_scale * out.similarity, -1);
  // Weighted source patches for every target location, folded back onto the
  // grid (the transposed convolution with source patches as filters).
  const auto copied = torch::bmm(patches(source, patch), out.weights.transpose(1, 2));
  const auto pasted = F::fold(copied, F::FoldFuncOptions({target.size(2), target.size(3)}, patch)
                                          .padding(patch / 2)) /
                      static_cast<double>(patch * patch);
  out.output = target + pasted;
  return out;
}

torch::Tensor kl_loss(const torch::Tensor& mu, const torch::Tensor& logvar) {
  if (mu.sizes() != logvar.sizes()) throw ShapeError("kl_loss: mu and logvar differ in shape");
  const auto per = 0.5 * (mu.pow(2) + logvar.exp() - 1.0 - logvar);
  if (per.dim() == 0) return per;
  return per.reshape({per.size(0), -1}).sum(1).mean();
}

// ---- caption encoder ------------------------------------------------------

CaptionEncoderImpl::CaptionEncoderImpl(int vocab, int text_length, int max_frames, int dim, int heads)
    : text_length_(text_length), max_frames_(max_frames) {
  token = register_module("token", nn::Embedding(vocab, dim));
  segment = register_module("segment", nn::Embedding(2, dim));
  position = register_parameter("position", torch::randn({1 + max_frames * text_length, dim}) * 0.02);
  summary = register_parameter("summary", torch::randn({dim}) * 0.02);
  ln_attn = register_module("ln_attn", nn::LayerNorm(nn::LayerNormOptions({dim})));
  ln_ffn = register_module("ln_ffn", nn::LayerNorm(nn::LayerNormOptions({dim})));
  ln_out = register_module("ln_out", nn::LayerNorm(nn::LayerNormOptions({dim})));
  attn = register_module("attn", attention::MultiHeadAttention(dim, heads));
  fc1 = register_module("fc1", nn::Linear(dim, 2 * dim));
  fc2 = register_module("fc2", nn::Linear(2 * dim, dim));
}

torch::Tensor CaptionEncoderImpl::forward(const torch::Tensor& captions, std::int64_t t) {
  if (captions.dim() != 3 || captions.size(2) != text_length_)
    throw ShapeError("caption encoder expects [B, T, N_text] captions");
  const auto b = captions.size(0), frames = captions.size(1);
  if (frames < 1) throw ValidationError("caption encoder: empty caption list");
  if (frames > max_frames_) throw ShapeError("caption encoder: more captions than max_frames");
  if (t < 0 || t >= frames) throw ShapeError("caption encoder: target index out of range");
  const auto flat = captions.reshape({b, frames * text_length_});
  auto seg = torch::zeros({frames, text_length_}, torch::kLong);
  seg[t].fill_(1);
  seg = seg.reshape({1, -1}).expand({b, -1});
  auto x = token(flat) + segment(seg);
  x = torch::cat({summary.view({1, 1, -1}).expand({b, 1, -1}), x}, 1);
  x = x + position.slice(0, 0, x.size(1)).unsqueeze(0);
  auto keep = torch::cat({torch::ones({b, 1}, torch::kBool), flat.ne(0)}, 1).view({b, 1, 1, -1});
  x = x + attn(ln_attn(x), ln_attn(x), keep);
  x = x + fc2(torch::gelu(fc1(ln_ffn(x))));
  return ln_out(x.select(1, 0));
}

torch::Tensor CaptionEncoderImpl::encode_all(const torch::Tensor& captions) {
  std::vector<torch::Tensor> out;
  for (std::int64_t t = 0; t < captions.size(1); ++t) out.push_back(forward(captions, t));
  return torch::stack(out, 1);
}

// ---- StoryGAN -----------------------------------------------------------------

StoryGanImpl::StoryGanImpl(const GanConfig& config, int vocab, int text_length, int max_frames,
                           int image_size)
    : config_(config), vocab_(vocab), text_length_(text_length), max_frames_(max_frames),
      image_size_(image_size) {
  const int c = config.channels, g = config.feature_grid, d = config.text_dim;
  if (image_size % g != 0 || ((image_size / g) & (image_size / g - 1)) != 0 || image_size / g < 2)
    throw ConfigError("gan: image_size / feature_grid must be a power of two >= 2");
  if (d % 4 != 0) throw ConfigError("gan: text_dim must be divisible by 4");
  if (max_frames < 3) throw ConfigError("gan: max_frames must be at least 3");
  encoder = register_module("encoder", CaptionEncoder(vocab, text_length, max_frames, d, 4));
  cond = register_module("cond", nn::Linear(d, 2 * d));
  init_hidden = register_module("init_hidden", nn::Linear(d, d));
  recurrence = register_module("recurrence", nn::GRUCell(d + config.noise_dim, d));
  to_grid = register_module("to_grid", nn::Linear(d, c * g * g));

  source_encoder = nn::Sequential();
  for (int size = image_size, in = 3; size > g; size /= 2, in = c) {
    source_encoder->push_back(nn::Conv2d(nn::Conv2dOptions(in, c, 4).stride(2).padding(1)));
    source_encoder->push_back(nn::LeakyReLU(nn::LeakyReLUOptions().negative_slope(0.2)));
  }
  register_module("source_encoder", source_encoder);

  decoder = nn::Sequential();
  decoder->push_back(nn::Conv2d(nn::Conv2dOptions(c, c, 3).padding(1)));
  decoder->push_back(nn::ReLU());
  for (int size = g; size < image_size; size *= 2) {
    decoder->push_back(nn::Upsample(nn::UpsampleOptions().scale_factor(std::vector<double>{2.0, 2.0})
                                        .mode(torch::kNearest)));
    decoder->push_back(nn::Conv2d(nn::Conv2dOptions(c, c, 3).padding(1)));
    decoder->push_back(nn::ReLU());
  }
  decoder->push_back(nn::Conv2d(nn::Conv2dOptions(c, 3, 3).padding(1)));
  register_module("decoder", decoder);

  image_features = nn::Sequential();
  for (int size = image_size, in = 3; size > 4; size /= 2, in = c) {
    image_features->push_back(nn::Conv2d(nn::Conv2dOptions(in, c, 4).stride(2).padding(1)));
    image_features->push_back(nn::LeakyReLU(nn::LeakyReLUOptions().negative_slope(0.2)));
  }
  register_module("image_features", image_features);
  image_text = register_module("image_text", nn::Linear(d, c));
  image_out = register_module("image_out", nn::Linear(c * 16 + c, 1));

  // Temporal kernel 2 with stride 1 over the frame axis, spatial stride 4.
  story_conv = register_module(
      "story_conv", nn::Conv3d(nn::Conv3dOptions(3, c, {2, 4, 4}).stride({1, 4, 4})));
  story_text = register_module("story_text", nn::Linear(d, c));
  const int s = image_size / 4;
  story_out = register_module("story_out", nn::Linear(c * (max_frames - 2) * s * s + c, 1));
}

GeneratorOutput StoryGanImpl::generate(const torch::Tensor& captions, const torch::Tensor& source,
                                       const torch::Tensor& noise) {
  const auto b = captions.size(0), frames = captions.size(1);
  if (frames < 2) throw ValidationError("gan: a story needs a source and at least one target");
  if (source.dim() != 4 || source.size(0) != b || source.size(2) != image_size_)
    throw ShapeError("gan: source must be [B, 3, H, W]");
  const int g = config_.feature_grid, c = config_.channels;
  GeneratorOutput out;
  out.encodings = encoder->encode_all(captions);
  const auto stats = cond(out.encodings.slice(1, 1, frames));
  out.mu = stats.slice(2, 0, config_.text_dim);
  out.logvar = stats.slice(2, config_.text_dim, 2 * config_.text_dim).clamp(-10.0, 10.0);
  // Training draws both noise sources; callers that pass `noise` get the
  // mean of the conditioning distribution.
  torch::Tensor eps, z_noise;
  if (noise.defined()) {
    if (noise.dim() != 3 || noise.size(0) != b || noise.size(1) != frames - 1 ||
        noise.size(2) != config_.noise_dim)
      throw ShapeError("gan: noise must be [B, T-1, noise_dim]");
    eps = torch::zeros_like(out.mu);
    z_noise = noise;
  } else {
    eps = torch::randn_like(out.mu);
    z_noise = torch::randn({b, frames - 1, config_.noise_dim});
  }
  const auto z = out.mu + eps * (0.5 * out.logvar).exp();

  const auto source_grid = source_encoder->forward(source - 0.5);
  auto h = torch::tanh(init_hidden(out.encodings.mean(1)));
  std::vector<torch::Tensor> images;
  for (std::int64_t t = 0; t < frames - 1; ++t) {
    h = recurrence(torch::cat({z.select(1, t), z_noise.select(1, t)}, 1), h);
    const auto target = to_grid(h).view({b, c, g, g});
    const auto fused = contextual_attention(target, source_grid, config_.patch).output;
    images.push_back(torch::sigmoid(decoder->forward(fused)));
  }
  out.frames = torch::stack(images, 1);
  return out;
}

torch::Tensor StoryGanImpl::image_scores(const torch::Tensor& frames, const torch::Tensor& encodings) {
  const auto b = frames.size(0), n = frames.size(1);
  auto f = image_features->forward(frames.reshape({b * n, 3, image_size_, image_size_}) - 0.5);
  f = F::adaptive_avg_pool2d(f, F::AdaptiveAvgPool2dFuncOptions(4)).flatten(1);
  const auto text = image_text(encodings.reshape({b * n, -1}));
  return image_out(torch::cat({f, text}, 1)).view({b, n});
}

torch::Tensor StoryGanImpl::story_scores(const torch::Tensor& frames, const torch::Tensor& encodings) {
  const auto b = frames.size(0), n = frames.size(1);
  if (n > max_frames_ - 1) throw ShapeError("gan: too many frames for the story discriminator");
  // Pad the frame axis to max_frames - 1 so the flattened width is fixed.
  auto x = frames - 0.5;
  if (n < max_frames_ - 1)
    x = torch::cat({x, torch::zeros({b, max_frames_ - 1 - n, 3, image_size_, image_size_})}, 1);
  const auto f = F::leaky_relu(story_conv(x.permute({0, 2, 1, 3, 4})), F::LeakyReLUFuncOptions().negative_slope(0.2));
  const auto text = story_text(encodings.mean(1));
  return story_out(torch::cat({f.flatten(1), text}, 1)).view({b});
}

namespace {

std::vector<torch::Tensor> collect(const std::vector<const torch::nn::Module*>& modules,
                                   const std::vector<torch::Tensor>& extra = {}) {
  std::vector<torch::Tensor> out(extra);
  for (const auto* m : modules)
    for (const auto& p : m->parameters(true)) out.push_back(p);
  return out;
}

}  // namespace

std::vector<torch::Tensor> StoryGanImpl::generator_parameters() const {
  return collect({encoder.get(), cond.get(), init_hidden.get(), recurrence.get(), to_grid.get(),
                  source_encoder.get(), decoder.get()});
}

std::vector<torch::Tensor> StoryGanImpl::image_discriminator_parameters() const {
  return collect({image_features.get(), image_text.get(), image_out.get()});
}

std::vector<torch::Tensor> StoryGanImpl::story_discriminator_parameters() const {
  return collect({story_conv.get(), story_text.get(), story_out.get()});
}

// ---- losses and training ------------------------------------------------------

bool GanLosses::finite() const {
  for (double v : {kl, d_image, d_story, g_image, g_story, g_total, d_total})
    if (!std::isfinite(v)) return false;
  return true;
}

Json GanLosses::to_json() const {
  return {{"kl", kl}, {"d_image", d_image}, {"d_story", d_story}, {"g_image", g_image},
          {"g_story", g_story}, {"g_total", g_total}, {"d_total", d_total}};
}

DiscriminatorLosses discriminator_losses(StoryGanImpl& gan, const torch::Tensor& real,
                                         const torch::Tensor& fake, const torch::Tensor& encodings) {
  auto bce = [](const torch::Tensor& logits, double label) {
    return F::binary_cross_entropy_with_logits(logits, torch::full_like(logits, label));
  };
  DiscriminatorLosses out;
  out.image = bce(gan.image_scores(real, encodings), 1.0) + bce(gan.image_scores(fake, encodings), 0.0);
  out.story = bce(gan.story_scores(real, encodings), 1.0) + bce(gan.story_scores(fake, encodings), 0.0);
  return out;
}

GanTrainer::GanTrainer(StoryGan gan, const GanConfig& config)
    : gan_(std::move(gan)),
      opt_g_(gan_->generator_parameters(),
             torch::optim::AdamOptions(config.lr_generator).betas({0.5, 0.999})),
      opt_d_([&] {
               auto p = gan_->image_discriminator_parameters();
               auto s = gan_->story_discriminator_parameters();
               p.insert(p.end(), s.begin(), s.end());
               return p;
             }(),
             torch::optim::AdamOptions(config.lr_discriminator).betas({0.5, 0.999})) {}

GanLosses GanTrainer::d_step(const GanBatch& batch) {
  gan_->train();
  const auto targets = batch.frames.slice(1, 1, batch.frames.size(1));
  GeneratorOutput gen;
  {
    torch::NoGradGuard no_grad;
    gen = gan_->generate(batch.captions, batch.frames.select(1, 0));
  }
  const auto enc = gen.encodings.slice(1, 1, batch.frames.size(1));
  opt_d_.zero_grad();
  opt_g_.zero_grad();
  const auto d = discriminator_losses(*gan_, targets, gen.frames, enc);
  const auto total = d.image + d.story;
  GanLosses l;
  l.d_image = d.image.item<double>();
  l.d_story = d.story.item<double>();
  l.d_total = total.item<double>();
  if (!std::isfinite(l.d_total)) return l;
  total.backward();
  opt_d_.step();
  return l;
}

GanLosses GanTrainer::g_step(const GanBatch& batch) {
  gan_->train();
  opt_d_.zero_grad();
  opt_g_.zero_grad();
  const auto gen = gan_->generate(batch.captions, batch.frames.select(1, 0));
  const auto enc = gen.encodings.slice(1, 1, batch.frames.size(1));
  auto bce_real = [](const torch::Tensor& logits) {
    return F::binary_cross_entropy_with_logits(logits, torch::ones_like(logits));
  };
  const auto g_image = bce_real(gan_->image_scores(gen.frames, enc));
  const auto g_story = bce_real(gan_->story_scores(gen.frames, enc));
  const auto kl = kl_loss(gen.mu, gen.logvar);
  const auto total = g_image + g_story + kl;
  GanLosses l;
  l.g_image = g_image.item<double>();
  l.g_story = g_story.item<double>();
  l.kl = kl.item<double>();
  l.g_total = total.item<double>();
  if (!std::isfinite(l.g_total)) return l;
  total.backward();
  opt_g_.step();
  opt_d_.zero_grad();
  return l;
}

GanLosses GanTrainer::step(const GanBatch& batch) {
  auto l = d_step(batch);
  const auto g = g_step(batch);
  l.g_image = g.g_image;
  l.g_story = g.g_story;
  l.kl = g.kl;
  l.g_total = g.g_total;
  return l;
}

void save_gan(const std::filesystem::path& path, const StoryGanImpl& gan, const Json& meta) {
  Archive archive;
  archive.kind = "gan";
  archive.config.image_size = gan.image_size();
  archive.config.text_length = gan.text_length();
  archive.config.max_frames = gan.max_frames();
  archive.config.text_vocab = gan.vocab();
  archive.meta = meta;
  Json gc = Json::object();
  GanConfig::fields(gan.config(), [&](const char* key, const auto& v) { gc[key] = v; });
  archive.meta["gan"] = gc;
  export_module(gan, "gan.", archive);
  save_archive(path, archive);
}

StoryGan load_gan(const std::filesystem::path& path, Json* meta) {
  const Archive archive = load_archive(path);
  if (archive.kind != "gan")
    throw CheckpointError(path.string() + ": expected a gan checkpoint, found '" + archive.kind + "'");
  RunConfig rc = RunConfig::from_json({{"gan", archive.meta.at("gan")}});
  StoryGan gan(rc.gan, archive.config.text_vocab, archive.config.text_length, archive.config.max_frames,
               archive.config.image_size);
  import_module(*gan, "gan.", archive, true);
  gan->eval();
  if (meta) *meta = archive.meta;
  return gan;
}

}  // namespace retrostory::gan
