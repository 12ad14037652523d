#pragma once

#include <cstdint>

#include <torch/torch.h>

namespace retrostory::attention {

// Boolean [L, L]; entry (j, i) is true when position j may attend to i <= j.
torch::Tensor causal_mask(std::int64_t length);

// Scaled dot-product attention over [B, H, L, d_head] tensors. `mask` is a
// boolean tensor broadcastable to [B, H, Lq, Lk] (true = allowed) or
// undefined for unmasked attention. When `weights` is non-null it receives
// the softmax probabilities.
torch::Tensor attend(const torch::Tensor& q, const torch::Tensor& k, const torch::Tensor& v,
                     const torch::Tensor& mask, torch::Tensor* weights = nullptr);

// Projected keys/values in head layout [B, H, L, d_head].
struct KeyValue {
  torch::Tensor key;
  torch::Tensor value;
  bool defined() const { return key.defined(); }
  std::int64_t length() const { return key.defined() ? key.size(2) : 0; }
};

class MultiHeadAttentionImpl : public torch::nn::Module {
 public:
  MultiHeadAttentionImpl(std::int64_t dim, std::int64_t heads);

  // query_in [B, Lq, D], kv_in [B, Lk, D] -> [B, Lq, D].
  torch::Tensor forward(const torch::Tensor& query_in, const torch::Tensor& kv_in,
                        const torch::Tensor& mask = {});

  KeyValue project_kv(const torch::Tensor& kv_in);
  torch::Tensor forward_with(const torch::Tensor& query_in, const KeyValue& kv,
                             const torch::Tensor& mask, torch::Tensor* weights = nullptr);

  // Softmax weights [B, H, Lq, Lk] for inspection.
  torch::Tensor weights(const torch::Tensor& query_in, const torch::Tensor& kv_in,
                        const torch::Tensor& mask = {});

  void zero_output_projection();

  std::int64_t heads() const { return heads_; }

  torch::nn::Linear q_proj{nullptr}, k_proj{nullptr}, v_proj{nullptr}, out_proj{nullptr};

 private:
  torch::Tensor split_heads(const torch::Tensor& x) const;
  torch::Tensor merge_heads(const torch::Tensor& x) const;

  std::int64_t dim_;
  std::int64_t heads_;
};
TORCH_MODULE(MultiHeadAttention);

}  // namespace retrostory::attention
