#pragma once

#include <cstdint>
#include <vector>

#include <torch/torch.h>

#include "retrostory/config.h"
#include "retrostory/image.h"

namespace retrostory::tokenizer {

// g x g grid of codebook indices, stored row-major.
class ImageTokenGrid {
 public:
  ImageTokenGrid() = default;
  ImageTokenGrid(int size, std::vector<std::int64_t> ids);

  int size() const { return size_; }
  std::int64_t at(int row, int col) const { return ids_[static_cast<size_t>(row * size_ + col)]; }
  const std::vector<std::int64_t>& ids() const { return ids_; }

  // int64 [g * g]
  torch::Tensor to_tensor() const;
  // Accepts [g * g] or [g, g] integer tensors.
  static ImageTokenGrid from_tensor(const torch::Tensor& t);

  bool operator==(const ImageTokenGrid&) const = default;

 private:
  int size_ = 0;
  std::vector<std::int64_t> ids_;
};

// Nearest codebook row (Euclidean) for every latent vector; ties go to the
// lowest index. latents [..., d], codebook [V, d] -> int64 [...].
torch::Tensor quantize(const torch::Tensor& latents, const torch::Tensor& codebook);

// latents + sg(codes - latents): forward value is `codes`, gradient w.r.t.
// `latents` is the identity.
torch::Tensor straight_through(const torch::Tensor& latents, const torch::Tensor& codes);

struct LossParts {
  torch::Tensor total;
  torch::Tensor reconstruction;
  torch::Tensor codebook;
  torch::Tensor commitment;
};

// MSE(image, reconstruction) + MSE(sg(latents), codes) + beta * MSE(latents, sg(codes)).
LossParts vqvae_loss(const torch::Tensor& image, const torch::Tensor& reconstruction,
                     const torch::Tensor& latents, const torch::Tensor& codes, double beta);

struct VqForward {
  torch::Tensor reconstruction;  // [B, 3, H, W], unclamped
  torch::Tensor latents;         // [B, g, g, d]
  torch::Tensor codes;           // [B, g, g, d], selected codebook rows
  torch::Tensor indices;         // [B, g, g]
};

class ResidualBlockImpl : public torch::nn::Module {
 public:
  explicit ResidualBlockImpl(std::int64_t channels);
  torch::Tensor forward(const torch::Tensor& x);

 private:
  torch::nn::Conv2d conv1_{nullptr}, conv2_{nullptr};
};
TORCH_MODULE(ResidualBlock);

class VqVaeImpl : public torch::nn::Module {
 public:
  explicit VqVaeImpl(const ModelConfig& config);

  // [H, W, 3] or [B, H, W, 3] in [0, 1] -> [B, g, g, d_code].
  torch::Tensor encode(const torch::Tensor& images);
  // [B, g, g, d_code] -> [B, 3, H, W] raw decoder output.
  torch::Tensor decode_latents(const torch::Tensor& latents);

  // Token ids [B, g*g] -> RGB [B, H, W, 3] clamped to [0, 1].
  torch::Tensor decode(const torch::Tensor& tokens);
  Image decode(const ImageTokenGrid& grid);

  // Inference helpers (no grad). images [B, 3, H, W] -> [B, g*g].
  torch::Tensor tokenize_batch(const torch::Tensor& images_bchw);
  ImageTokenGrid tokenize(const Image& image);

  // Training pass; images are [B, 3, H, W].
  VqForward forward(const torch::Tensor& images_bchw);
  LossParts loss(const torch::Tensor& images_bchw, const VqForward& out) const;

  // Seeds codebook rows with latent vectors drawn from `latents` [N, d].
  void init_codebook_from(const torch::Tensor& latents, std::uint64_t seed);
  void zero_final_projection();

  torch::Tensor& codebook() { return codebook_; }
  const ModelConfig& config() const { return config_; }

 private:
  torch::Tensor encode_bchw(const torch::Tensor& images_bchw);

  ModelConfig config_;
  torch::nn::Sequential encoder_{nullptr};
  torch::nn::Conv2d projection_{nullptr};
  torch::nn::Sequential decoder_{nullptr};
  torch::Tensor codebook_;
};
TORCH_MODULE(VqVae);

// Fraction of codebook rows referenced by `indices`.
double codebook_usage(const torch::Tensor& indices, int codebook_size);

}  // namespace retrostory::tokenizer
