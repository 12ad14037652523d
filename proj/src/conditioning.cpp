#include "retrostory/conditioning.h"

#include <cmath>
#include <stdexcept>

#include "retrostory/errors.h"

namespace retrostory::conditioning {

namespace nn = torch::nn;

torch::Tensor sinusoid_table(std::int64_t positions, std::int64_t dim) {
  auto table = torch::empty({positions, dim}, torch::kFloat32);
  auto acc = table.accessor<float, 2>();
  for (std::int64_t p = 0; p < positions; ++p) {
    for (std::int64_t i = 0; i < dim; ++i) {
      const double rate = std::pow(10000.0, -2.0 * static_cast<double>(i / 2) / static_cast<double>(dim));
      const double angle = static_cast<double>(p) * rate;
      acc[p][i] = static_cast<float>(i % 2 == 0 ? std::sin(angle) : std::cos(angle));
    }
  }
  return table;
}

LayoutSpec LayoutSpec::from_config(const ModelConfig& config, int image_rows) {
  if (image_rows < 0 || image_rows > config.image_tokens())
    throw ShapeError("image segment overflows N_img");
  return LayoutSpec{config.prompt_length, config.story_slots(), config.text_length, image_rows};
}

int LayoutSpec::start(Segment s) const {
  switch (s) {
    case Segment::kPrompt: return 0;
    case Segment::kStory: return prompt;
    case Segment::kText: return prompt + story;
    case Segment::kImage: return prompt + story + text;
  }
  return 0;
}

int LayoutSpec::size(Segment s) const {
  switch (s) {
    case Segment::kPrompt: return prompt;
    case Segment::kStory: return story;
    case Segment::kText: return text;
    case Segment::kImage: return image;
  }
  return 0;
}

LayoutSpec::Location LayoutSpec::locate(int position) const {
  if (position < 0 || position >= length()) throw std::out_of_range("position outside layout");
  for (auto s : {Segment::kPrompt, Segment::kStory, Segment::kText, Segment::kImage}) {
    const int begin = start(s);
    if (position < begin + size(s)) return {s, position - begin};
  }
  throw std::out_of_range("position outside layout");
}

SentenceEncoderImpl::SentenceEncoderImpl(std::int64_t vocab, std::int64_t dim) {
  embedding = register_module("embedding", nn::Embedding(vocab, dim));
  nn::init::normal_(embedding->weight, 0.0, 0.02);
}

torch::Tensor SentenceEncoderImpl::forward(const torch::Tensor& tokens) {
  auto mask = tokens.ne(0).unsqueeze(-1).to(embedding->weight.dtype());
  auto summed = (embedding(tokens) * mask).sum(-2);
  return summed / mask.sum(-2).clamp_min(1.0);
}

StoryEncoderImpl::StoryEncoderImpl(const ModelConfig& config) : max_frames_(config.max_frames) {
  const std::int64_t d = config.sentence_dim;
  ln_attn = register_module("ln_attn", nn::LayerNorm(nn::LayerNormOptions({d})));
  attn = register_module("attn", attention::MultiHeadAttention(d, config.story_heads));
  ln_ffn = register_module("ln_ffn", nn::LayerNorm(nn::LayerNormOptions({d})));
  fc1 = register_module("fc1", nn::Linear(d, 4 * d));
  fc2 = register_module("fc2", nn::Linear(4 * d, d));
  bridge = register_module("bridge", nn::Linear(d, config.d_model));
  positions_ = sinusoid_table(config.max_frames, d);
}

torch::Tensor StoryEncoderImpl::forward(const torch::Tensor& sentences, const torch::Tensor& valid) {
  const auto frames = sentences.size(1);
  if (frames < 1) throw ShapeError("story needs at least one caption");
  if (frames > max_frames_)
    throw ShapeError("story has " + std::to_string(frames) + " captions, T_max is " +
                     std::to_string(max_frames_));
  auto x = sentences + positions_.slice(0, 0, frames).to(sentences.dtype()).unsqueeze(0);
  torch::Tensor mask;
  if (valid.defined()) mask = valid.view({valid.size(0), 1, 1, frames});
  auto h = x + attn(ln_attn(x), ln_attn(x), mask);
  h = h + fc2(torch::gelu(fc1(ln_ffn(h))));
  return bridge(h);
}

void StoryEncoderImpl::zero_residual_branches() {
  torch::NoGradGuard no_grad;
  attn->zero_output_projection();
  fc2->weight.zero_();
  fc2->bias.zero_();
}

PromptNetworkImpl::PromptNetworkImpl(std::int64_t length, std::int64_t dim) : length_(length) {
  raw = register_parameter("raw", torch::randn({length, dim}) * 0.02);
  fc1 = register_module("fc1", nn::Linear(dim, 4 * dim));
  fc2 = register_module("fc2", nn::Linear(4 * dim, dim));
  torch::NoGradGuard no_grad;
  fc2->weight.zero_();
  fc2->bias.zero_();
}

torch::Tensor PromptNetworkImpl::forward() {
  return raw + fc2(torch::tanh(fc1(raw)));
}

torch::Tensor assemble(const torch::Tensor& prompt, const torch::Tensor& story,
                       const torch::Tensor& text, const torch::Tensor& image,
                       const LayoutSpec& spec) {
  const auto batch = text.size(0);
  const auto dim = text.size(2);
  if (text.size(1) != spec.text) throw ShapeError("caption segment must have N_text rows");
  if (image.size(1) != spec.image) throw ShapeError("image segment size disagrees with layout");
  std::vector<torch::Tensor> parts;
  if (spec.prompt > 0) {
    if (!prompt.defined() || prompt.size(0) != spec.prompt)
      throw ShapeError("prompt segment size disagrees with layout");
    parts.push_back(prompt.unsqueeze(0).expand({batch, spec.prompt, dim}));
  }
  if (spec.story > 0) {
    if (!story.defined() || story.size(0) != batch)
      throw ShapeError("story segment missing for a layout with a story slot");
    parts.push_back(story.unsqueeze(1));
  }
  parts.push_back(text);
  if (spec.image > 0) parts.push_back(image);
  return torch::cat(parts, 1);
}

}  // namespace retrostory::conditioning
