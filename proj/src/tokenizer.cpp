#include "retrostory/tokenizer.h"

#include <random>

#include "retrostory/errors.h"

namespace retrostory::tokenizer {

namespace nn = torch::nn;

ImageTokenGrid::ImageTokenGrid(int size, std::vector<std::int64_t> ids)
    : size_(size), ids_(std::move(ids)) {
  if (static_cast<size_t>(size) * size != ids_.size())
    throw ShapeError("token grid needs size*size ids");
}

torch::Tensor ImageTokenGrid::to_tensor() const {
  return torch::tensor(ids_, torch::kInt64);
}

ImageTokenGrid ImageTokenGrid::from_tensor(const torch::Tensor& t) {
  auto flat = t.to(torch::kCPU, torch::kInt64).contiguous().view({-1});
  const auto n = flat.numel();
  const int g = static_cast<int>(std::lround(std::sqrt(static_cast<double>(n))));
  if (static_cast<std::int64_t>(g) * g != n) throw ShapeError("token tensor is not a square grid");
  std::vector<std::int64_t> ids(flat.data_ptr<std::int64_t>(), flat.data_ptr<std::int64_t>() + n);
  return ImageTokenGrid(g, std::move(ids));
}

torch::Tensor quantize(const torch::Tensor& latents, const torch::Tensor& codebook) {
  if (codebook.dim() != 2 || latents.size(-1) != codebook.size(1))
    throw ShapeError("latent width does not match codebook width");
  torch::NoGradGuard no_grad;
  const auto d = latents.size(-1);
  auto flat = latents.reshape({-1, d});
  auto out = torch::empty({flat.size(0)}, torch::kInt64);
  // Chunked so the [cells, V, d] difference tensor stays small.
  const std::int64_t chunk = std::max<std::int64_t>(1, (1 << 22) / (codebook.size(0) * d));
  for (std::int64_t start = 0; start < flat.size(0); start += chunk) {
    const auto end = std::min(flat.size(0), start + chunk);
    auto diff = flat.slice(0, start, end).unsqueeze(1) - codebook.unsqueeze(0);
    auto dist = diff.square().sum(-1);
    out.slice(0, start, end).copy_(std::get<1>(dist.min(1)));
  }
  auto shape = latents.sizes().vec();
  shape.pop_back();
  return out.view(shape);
}

torch::Tensor straight_through(const torch::Tensor& latents, const torch::Tensor& codes) {
  return latents + (codes - latents).detach();
}

LossParts vqvae_loss(const torch::Tensor& image, const torch::Tensor& reconstruction,
                     const torch::Tensor& latents, const torch::Tensor& codes, double beta) {
  if (image.sizes() != reconstruction.sizes() || latents.sizes() != codes.sizes())
    throw ShapeError("vqvae_loss: shapes disagree");
  for (const auto* t : {&image, &reconstruction, &latents, &codes})
    if (!torch::isfinite(*t).all().item<bool>())
      throw NumericError("vqvae_loss: non-finite input");
  LossParts parts;
  parts.reconstruction = (reconstruction - image).square().mean();
  parts.codebook = (latents.detach() - codes).square().mean();
  parts.commitment = (latents - codes.detach()).square().mean().mul(beta);
  parts.total = parts.reconstruction + parts.codebook + parts.commitment;
  return parts;
}

ResidualBlockImpl::ResidualBlockImpl(std::int64_t channels) {
  conv1_ = register_module("conv1", nn::Conv2d(nn::Conv2dOptions(channels, channels, 3).padding(1)));
  conv2_ = register_module("conv2", nn::Conv2d(nn::Conv2dOptions(channels, channels, 1)));
}

torch::Tensor ResidualBlockImpl::forward(const torch::Tensor& x) {
  return x + conv2_(torch::relu(conv1_(torch::relu(x))));
}

VqVaeImpl::VqVaeImpl(const ModelConfig& config) : config_(config) {
  config_.validate();
  const std::int64_t c = config.vae_channels;
  int downsamples = 0;
  for (int f = config.image_size / config.grid_size; f > 1; f /= 2) ++downsamples;

  encoder_ = nn::Sequential();
  std::int64_t in = 3;
  for (int i = 0; i < downsamples; ++i) {
    encoder_->push_back(nn::Conv2d(nn::Conv2dOptions(in, c, 4).stride(2).padding(1)));
    encoder_->push_back(nn::ReLU());
    in = c;
  }
  encoder_->push_back(nn::Conv2d(nn::Conv2dOptions(in, c, 3).padding(1)));
  encoder_->push_back(ResidualBlock(c));
  encoder_->push_back(nn::ReLU());
  register_module("encoder", encoder_);
  projection_ = register_module("projection", nn::Conv2d(nn::Conv2dOptions(c, config.code_dim, 1)));

  decoder_ = nn::Sequential();
  decoder_->push_back(nn::Conv2d(nn::Conv2dOptions(config.code_dim, c, 3).padding(1)));
  decoder_->push_back(ResidualBlock(c));
  decoder_->push_back(nn::ReLU());
  for (int i = 0; i < downsamples; ++i) {
    decoder_->push_back(nn::ConvTranspose2d(nn::ConvTranspose2dOptions(c, c, 4).stride(2).padding(1)));
    decoder_->push_back(nn::ReLU());
  }
  decoder_->push_back(nn::Conv2d(nn::Conv2dOptions(c, 3, 3).padding(1)));
  register_module("decoder", decoder_);

  const double bound = 1.0 / config.codebook_size;
  codebook_ = register_parameter(
      "codebook", torch::empty({config.codebook_size, config.code_dim}).uniform_(-bound, bound));
}

torch::Tensor VqVaeImpl::encode_bchw(const torch::Tensor& images_bchw) {
  if (images_bchw.dim() != 4 || images_bchw.size(1) != 3 ||
      images_bchw.size(2) != config_.image_size || images_bchw.size(3) != config_.image_size)
    throw ShapeError("expected images of " + std::to_string(config_.image_size) + "x" +
                     std::to_string(config_.image_size) + "x3");
  return projection_(encoder_->forward(images_bchw)).permute({0, 2, 3, 1});
}

torch::Tensor VqVaeImpl::encode(const torch::Tensor& images) {
  auto batch = images.dim() == 3 ? images.unsqueeze(0) : images;
  if (batch.dim() != 4 || batch.size(3) != 3)
    throw ShapeError("encode expects [H, W, 3] or [B, H, W, 3]");
  if (!torch::isfinite(batch).all().item<bool>()) throw NumericError("encode: non-finite pixels");
  return encode_bchw(batch.permute({0, 3, 1, 2}).contiguous());
}

torch::Tensor VqVaeImpl::decode_latents(const torch::Tensor& latents) {
  return decoder_->forward(latents.permute({0, 3, 1, 2}));
}

torch::Tensor VqVaeImpl::decode(const torch::Tensor& tokens) {
  torch::NoGradGuard no_grad;
  auto ids = tokens.dim() == 1 ? tokens.unsqueeze(0) : tokens;
  const int g = config_.grid_size;
  if (ids.dim() != 2 || ids.size(1) != static_cast<std::int64_t>(g) * g)
    throw ShapeError("decode expects [B, g*g] token ids");
  if (ids.min().item<std::int64_t>() < 0 || ids.max().item<std::int64_t>() >= config_.codebook_size)
    throw ShapeError("token id outside the codebook");
  auto codes = codebook_.index_select(0, ids.reshape({-1})).view({ids.size(0), g, g, -1});
  return decode_latents(codes).clamp(0.0, 1.0).permute({0, 2, 3, 1}).contiguous();
}

Image VqVaeImpl::decode(const ImageTokenGrid& grid) {
  if (grid.size() != config_.grid_size) throw ShapeError("token grid size mismatch");
  return Image::from_tensor(decode(grid.to_tensor())[0]);
}

torch::Tensor VqVaeImpl::tokenize_batch(const torch::Tensor& images_bchw) {
  torch::NoGradGuard no_grad;
  return quantize(encode_bchw(images_bchw), codebook_).view({images_bchw.size(0), -1});
}

ImageTokenGrid VqVaeImpl::tokenize(const Image& image) {
  auto t = image.to_tensor().permute({2, 0, 1}).unsqueeze(0).contiguous();
  return ImageTokenGrid::from_tensor(tokenize_batch(t)[0]);
}

VqForward VqVaeImpl::forward(const torch::Tensor& images_bchw) {
  VqForward out;
  out.latents = encode_bchw(images_bchw);
  out.indices = quantize(out.latents, codebook_);
  out.codes = codebook_.index_select(0, out.indices.reshape({-1})).view(out.latents.sizes());
  out.reconstruction = decode_latents(straight_through(out.latents, out.codes));
  return out;
}

LossParts VqVaeImpl::loss(const torch::Tensor& images_bchw, const VqForward& out) const {
  return vqvae_loss(images_bchw, out.reconstruction, out.latents, out.codes,
                    config_.commitment_beta);
}

void VqVaeImpl::init_codebook_from(const torch::Tensor& latents, std::uint64_t seed) {
  torch::NoGradGuard no_grad;
  auto flat = latents.reshape({-1, config_.code_dim});
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::int64_t> pick(0, flat.size(0) - 1);
  for (std::int64_t row = 0; row < codebook_.size(0); ++row) codebook_[row].copy_(flat[pick(rng)]);
}

void VqVaeImpl::zero_final_projection() {
  torch::NoGradGuard no_grad;
  projection_->weight.zero_();
  projection_->bias.zero_();
}

double codebook_usage(const torch::Tensor& indices, int codebook_size) {
  auto counts = torch::bincount(indices.reshape({-1}).to(torch::kCPU), {}, codebook_size);
  return counts.gt(0).sum().item<double>() / codebook_size;
}

}  // namespace retrostory::tokenizer
