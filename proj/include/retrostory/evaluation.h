#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <torch/torch.h>

#include "retrostory/config.h"
#include "retrostory/data.h"
#include "retrostory/image.h"

namespace retrostory::eval {

// Multi-label character classifier on raw frames. Its penultimate layer is
// the feature extractor used for FID and source correlation.
class CharacterClassifierImpl : public torch::nn::Module {
 public:
  CharacterClassifierImpl(int n_chars, int image_size, int feature_dim);

  // [B, 3, H, W] in [0, 1] -> [B, feature_dim]
  torch::Tensor features(const torch::Tensor& images);
  // [B, 3, H, W] -> logits [B, n_chars]
  torch::Tensor forward(const torch::Tensor& images);

  bool trained() const { return trained_.item<bool>(); }
  void mark_trained() { trained_.fill_(true); }
  int n_chars() const { return n_chars_; }
  int image_size() const { return image_size_; }
  int feature_dim() const { return feature_dim_; }

 private:
  int n_chars_, image_size_, feature_dim_;
  torch::nn::Sequential trunk_{nullptr};
  torch::nn::Linear hidden_{nullptr}, out_{nullptr};
  torch::Tensor trained_;
};
TORCH_MODULE(CharacterClassifier);

// Trains with binary cross-entropy on exact labels; returns the loss per step.
std::vector<double> train_classifier(CharacterClassifierImpl& classifier,
                                     const std::vector<data::LabeledFrame>& frames,
                                     const ClassifierConfig& config,
                                     const std::function<void(int, double)>& progress = {});

void save_classifier(const std::filesystem::path& path, const CharacterClassifierImpl& classifier);
CharacterClassifier load_classifier(const std::filesystem::path& path);

struct FeatureSet {
  Eigen::MatrixXd features;  // [n, d_feat]
  std::string extractor;

  Eigen::Index size() const { return features.rows(); }
};

// Throws ValidationError for an untrained extractor.
FeatureSet extract_features(const std::vector<const Image*>& images, CharacterClassifierImpl& extractor);

struct FidResult {
  double value = 0.0;
  // True when negative eigenvalues of the product had to be clamped to 0.
  bool clamped = false;
};

// ||mu_r - mu_g||^2 + Tr(S_r + S_g - 2 (S_r S_g)^(1/2)). Both sets need the
// same width and at least 2 rows.
FidResult fid(const FeatureSet& real, const FeatureSet& generated);
FidResult fid_from_moments(const Eigen::VectorXd& mu_r, const Eigen::MatrixXd& sigma_r,
                           const Eigen::VectorXd& mu_g, const Eigen::MatrixXd& sigma_g);

struct CharMetrics {
  double char_f1 = 0.0;
  double frame_acc = 0.0;
  std::int64_t tp = 0, fp = 0, fn = 0;
  std::int64_t frames = 0;
};

// Micro-F1 over per-frame character presence and exact-set frame accuracy.
// When both label sets are empty everywhere, F1 is 1.
CharMetrics char_metrics(const std::vector<data::LabelSet>& pred,
                         const std::vector<data::LabelSet>& gt);

// Threshold on sigmoid scores. Throws ValidationError when untrained.
data::LabelSet classify_characters(const Image& frame, CharacterClassifierImpl& classifier,
                                   double threshold = 0.5);
std::vector<data::LabelSet> classify_characters(const std::vector<const Image*>& frames,
                                                CharacterClassifierImpl& classifier,
                                                double threshold = 0.5);

struct Correlation {
  double mean = 0.0;
  double std = 0.0;  // population standard deviation
  std::int64_t pairs = 0;
  std::int64_t skipped = 0;  // pairs with a zero-norm feature vector
};

// Cosine similarity between extractor features of paired frames.
Correlation source_correlation(const std::vector<const Image*>& sources,
                               const std::vector<const Image*>& generated,
                               CharacterClassifierImpl& extractor);
Correlation cosine_statistics(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b);

struct EvalReport {
  std::string dataset;
  std::string checkpoint;
  double fid = 0.0;
  bool fid_clamped = false;
  CharMetrics chars;
  CharMetrics unseen_chars;  // stories containing characters absent from train
  Correlation correlation;
  std::vector<std::uint64_t> seeds;
  std::int64_t target_frames = 0;

  Json to_json() const;
};

}  // namespace retrostory::eval
