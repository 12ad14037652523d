#include "retrostory/attention.h"

#include <cmath>
#include <limits>

#include "retrostory/errors.h"

namespace retrostory::attention {

torch::Tensor causal_mask(std::int64_t length) {
  if (length < 1) throw ShapeError("causal mask length must be positive");
  return torch::ones({length, length}, torch::kBool).tril();
}

torch::Tensor attend(const torch::Tensor& q, const torch::Tensor& k, const torch::Tensor& v,
                     const torch::Tensor& mask, torch::Tensor* weights) {
  const double scale = 1.0 / std::sqrt(static_cast<double>(q.size(-1)));
  auto scores = torch::matmul(q, k.transpose(-2, -1)).mul(scale);
  if (mask.defined())
    scores = scores.masked_fill(mask.logical_not(), -std::numeric_limits<float>::infinity());
  auto probs = torch::softmax(scores, -1);
  if (weights) *weights = probs;
  return torch::matmul(probs, v);
}

MultiHeadAttentionImpl::MultiHeadAttentionImpl(std::int64_t dim, std::int64_t heads)
    : dim_(dim), heads_(heads) {
  if (heads <= 0 || dim % heads != 0)
    throw ShapeError("attention dim must be divisible by the head count");
  q_proj = register_module("q_proj", torch::nn::Linear(dim, dim));
  k_proj = register_module("k_proj", torch::nn::Linear(dim, dim));
  v_proj = register_module("v_proj", torch::nn::Linear(dim, dim));
  out_proj = register_module("out_proj", torch::nn::Linear(dim, dim));
}

torch::Tensor MultiHeadAttentionImpl::split_heads(const torch::Tensor& x) const {
  return x.view({x.size(0), x.size(1), heads_, dim_ / heads_}).transpose(1, 2);
}

torch::Tensor MultiHeadAttentionImpl::merge_heads(const torch::Tensor& x) const {
  return x.transpose(1, 2).contiguous().view({x.size(0), x.size(2), dim_});
}

KeyValue MultiHeadAttentionImpl::project_kv(const torch::Tensor& kv_in) {
  return {split_heads(k_proj(kv_in)), split_heads(v_proj(kv_in))};
}

torch::Tensor MultiHeadAttentionImpl::forward_with(const torch::Tensor& query_in,
                                                   const KeyValue& kv, const torch::Tensor& mask,
                                                   torch::Tensor* weights) {
  auto q = split_heads(q_proj(query_in));
  return out_proj(merge_heads(attend(q, kv.key, kv.value, mask, weights)));
}

torch::Tensor MultiHeadAttentionImpl::forward(const torch::Tensor& query_in,
                                              const torch::Tensor& kv_in,
                                              const torch::Tensor& mask) {
  return forward_with(query_in, project_kv(kv_in), mask);
}

torch::Tensor MultiHeadAttentionImpl::weights(const torch::Tensor& query_in,
                                              const torch::Tensor& kv_in,
                                              const torch::Tensor& mask) {
  torch::Tensor w;
  forward_with(query_in, project_kv(kv_in), mask, &w);
  return w;
}

void MultiHeadAttentionImpl::zero_output_projection() {
  torch::NoGradGuard no_grad;
  out_proj->weight.zero_();
  out_proj->bias.zero_();
}

}  // namespace retrostory::attention
