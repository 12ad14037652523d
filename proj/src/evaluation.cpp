#include "retrostory/evaluation.h"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "retrostory/checkpoint.h"
#include "retrostory/errors.h"

namespace retrostory::eval {

namespace nn = torch::nn;

CharacterClassifierImpl::CharacterClassifierImpl(int n_chars, int image_size, int feature_dim)
    : n_chars_(n_chars), image_size_(image_size), feature_dim_(feature_dim) {
  if (n_chars < 1 || image_size < 8 || feature_dim < 1)
    throw ConfigError("classifier: n_chars, image_size and feature_dim must be positive");
  trunk_ = register_module(
      "trunk", nn::Sequential(nn::Conv2d(nn::Conv2dOptions(3, 32, 3).padding(1)), nn::ReLU(),
                              nn::MaxPool2d(2),
                              nn::Conv2d(nn::Conv2dOptions(32, 64, 3).padding(1)), nn::ReLU(),
                              nn::MaxPool2d(2),
                              nn::Conv2d(nn::Conv2dOptions(64, 64, 3).padding(1)), nn::ReLU(),
                              nn::AdaptiveAvgPool2d(4)));
  hidden_ = register_module("hidden", nn::Linear(64 * 16, feature_dim));
  out_ = register_module("out", nn::Linear(feature_dim, n_chars));
  trained_ = register_buffer("trained", torch::zeros({}, torch::kBool));
}

torch::Tensor CharacterClassifierImpl::features(const torch::Tensor& images) {
  if (images.dim() != 4 || images.size(1) != 3 || images.size(2) != image_size_ ||
      images.size(3) != image_size_)
    throw ShapeError("classifier expects [B, 3, " + std::to_string(image_size_) + ", " +
                     std::to_string(image_size_) + "] images");
  return torch::relu(hidden_(trunk_->forward(images - 0.5).flatten(1)));
}

torch::Tensor CharacterClassifierImpl::forward(const torch::Tensor& images) {
  return out_(features(images));
}

std::vector<double> train_classifier(CharacterClassifierImpl& classifier,
                                     const std::vector<data::LabeledFrame>& frames,
                                     const ClassifierConfig& config,
                                     const std::function<void(int, double)>& progress) {
  if (frames.empty()) throw ValidationError("train_classifier: no frames");
  torch::manual_seed(config.seed);
  std::mt19937_64 rng(config.seed);
  const auto n = static_cast<std::int64_t>(frames.size());
  const int c = classifier.n_chars();
  std::vector<torch::Tensor> images;
  images.reserve(frames.size());
  torch::Tensor targets = torch::zeros({n, c});
  for (std::int64_t i = 0; i < n; ++i) {
    images.push_back(frames[static_cast<size_t>(i)].image.to_tensor().permute({2, 0, 1}));
    for (int label : frames[static_cast<size_t>(i)].labels) {
      if (label < 0 || label >= c) throw ValidationError("train_classifier: label out of range");
      targets[i][label] = 1.0;
    }
  }
  const torch::Tensor all = torch::stack(images);

  torch::optim::Adam opt(classifier.parameters(), torch::optim::AdamOptions(config.lr));
  classifier.train();
  std::vector<double> history;
  std::vector<std::int64_t> order(static_cast<size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  size_t cursor = order.size();
  for (int step = 0; step < config.steps; ++step) {
    std::vector<std::int64_t> idx;
    for (int b = 0; b < config.batch_size; ++b) {
      if (cursor == order.size()) {
        std::shuffle(order.begin(), order.end(), rng);
        cursor = 0;
      }
      idx.push_back(order[cursor++]);
    }
    const auto index = torch::tensor(idx);
    auto x = all.index_select(0, index);
    // Mild pixel noise so decoded (slightly blurred) frames stay in-distribution.
    x = (x + 0.03 * torch::randn_like(x)).clamp(0.0, 1.0);
    const auto loss = torch::binary_cross_entropy_with_logits(classifier.forward(x),
                                                              targets.index_select(0, index));
    opt.zero_grad();
    loss.backward();
    opt.step();
    history.push_back(loss.item<double>());
    if (progress) progress(step, history.back());
  }
  classifier.eval();
  classifier.mark_trained();
  return history;
}

void save_classifier(const std::filesystem::path& path, const CharacterClassifierImpl& classifier) {
  Archive archive;
  archive.kind = "classifier";
  archive.config.image_size = classifier.image_size();
  archive.meta = {{"n_chars", classifier.n_chars()}, {"feature_dim", classifier.feature_dim()}};
  export_module(classifier, "classifier.", archive);
  save_archive(path, archive);
}

CharacterClassifier load_classifier(const std::filesystem::path& path) {
  const Archive archive = load_archive(path);
  if (archive.kind != "classifier")
    throw CheckpointError(path.string() + ": expected a classifier checkpoint, found '" + archive.kind + "'");
  CharacterClassifier classifier(archive.meta.at("n_chars").get<int>(), archive.config.image_size,
                                 archive.meta.at("feature_dim").get<int>());
  import_module(*classifier, "classifier.", archive, true);
  classifier->eval();
  return classifier;
}

namespace {

void require_trained(const CharacterClassifierImpl& classifier) {
  if (!classifier.trained()) throw ValidationError("the character classifier has not been trained");
}

template <class Fn>
void in_batches(const std::vector<const Image*>& images, Fn&& fn) {
  constexpr size_t kBatch = 64;
  for (size_t start = 0; start < images.size(); start += kBatch) {
    const size_t end = std::min(images.size(), start + kBatch);
    std::vector<const Image*> chunk(images.begin() + static_cast<long>(start),
                                    images.begin() + static_cast<long>(end));
    fn(start, images_to_batch(chunk));
  }
}

Eigen::MatrixXd covariance(const Eigen::MatrixXd& x, const Eigen::VectorXd& mu) {
  const Eigen::MatrixXd centered = x.rowwise() - mu.transpose();
  return centered.transpose() * centered / static_cast<double>(x.rows() - 1);
}

}  // namespace

FeatureSet extract_features(const std::vector<const Image*>& images, CharacterClassifierImpl& extractor) {
  require_trained(extractor);
  torch::NoGradGuard no_grad;
  extractor.eval();
  FeatureSet out;
  out.extractor = "classifier-penultimate-" + std::to_string(extractor.feature_dim());
  out.features.resize(static_cast<Eigen::Index>(images.size()), extractor.feature_dim());
  in_batches(images, [&](size_t start, const torch::Tensor& batch) {
    const auto f = extractor.features(batch).to(torch::kDouble).contiguous();
    const auto acc = f.accessor<double, 2>();
    for (std::int64_t r = 0; r < f.size(0); ++r)
      for (std::int64_t c = 0; c < f.size(1); ++c)
        out.features(static_cast<Eigen::Index>(start) + r, c) = acc[r][c];
  });
  if (!out.features.allFinite()) throw NumericError("extract_features produced non-finite values");
  return out;
}

FidResult fid_from_moments(const Eigen::VectorXd& mu_r, const Eigen::MatrixXd& sigma_r,
                           const Eigen::VectorXd& mu_g, const Eigen::MatrixXd& sigma_g) {
  if (mu_r.size() != mu_g.size() || sigma_r.rows() != mu_r.size() || sigma_g.rows() != mu_g.size())
    throw ShapeError("fid: feature dimensions differ");
  FidResult result;
  auto clamp = [&](double v) {
    if (v < 0.0) {
      if (v < -1e-10) result.clamped = true;
      return 0.0;
    }
    return v;
  };
  // Tr((S_r S_g)^(1/2)) = Tr((S_r^(1/2) S_g S_r^(1/2))^(1/2)); the inner
  // product is symmetric, so a self-adjoint solver applies.
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> er(0.5 * (sigma_r + sigma_r.transpose()));
  Eigen::VectorXd root = er.eigenvalues().unaryExpr(clamp).cwiseSqrt();
  const Eigen::MatrixXd sqrt_r = er.eigenvectors() * root.asDiagonal() * er.eigenvectors().transpose();
  Eigen::MatrixXd inner = sqrt_r * sigma_g * sqrt_r;
  inner = 0.5 * (inner + inner.transpose());
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> ei(inner, Eigen::EigenvaluesOnly);
  const double trace_sqrt = ei.eigenvalues().unaryExpr(clamp).cwiseSqrt().sum();
  const double value =
      (mu_r - mu_g).squaredNorm() + sigma_r.trace() + sigma_g.trace() - 2.0 * trace_sqrt;
  result.value = std::max(0.0, value);
  return result;
}

FidResult fid(const FeatureSet& real, const FeatureSet& generated) {
  if (real.features.cols() != generated.features.cols())
    throw ShapeError("fid: feature widths differ (" + std::to_string(real.features.cols()) + " vs " +
                     std::to_string(generated.features.cols()) + ")");
  if (real.size() < 2 || generated.size() < 2)
    throw ValidationError("fid: each feature set needs at least 2 rows");
  if (!real.features.allFinite() || !generated.features.allFinite())
    throw NumericError("fid: non-finite features");
  const Eigen::VectorXd mu_r = real.features.colwise().mean();
  const Eigen::VectorXd mu_g = generated.features.colwise().mean();
  return fid_from_moments(mu_r, covariance(real.features, mu_r), mu_g,
                          covariance(generated.features, mu_g));
}

CharMetrics char_metrics(const std::vector<data::LabelSet>& pred,
                         const std::vector<data::LabelSet>& gt) {
  if (pred.size() != gt.size())
    throw ValidationError("char_metrics: " + std::to_string(pred.size()) + " predictions for " +
                          std::to_string(gt.size()) + " frames");
  CharMetrics m;
  m.frames = static_cast<std::int64_t>(gt.size());
  std::int64_t exact = 0;
  for (size_t i = 0; i < gt.size(); ++i) {
    for (int c : pred[i]) (gt[i].count(c) ? m.tp : m.fp) += 1;
    for (int c : gt[i])
      if (!pred[i].count(c)) ++m.fn;
    if (pred[i] == gt[i]) ++exact;
  }
  const auto denom = 2 * m.tp + m.fp + m.fn;
  m.char_f1 = denom == 0 ? 1.0 : 2.0 * static_cast<double>(m.tp) / static_cast<double>(denom);
  m.frame_acc = gt.empty() ? 0.0 : static_cast<double>(exact) / static_cast<double>(gt.size());
  return m;
}

std::vector<data::LabelSet> classify_characters(const std::vector<const Image*>& frames,
                                                CharacterClassifierImpl& classifier,
                                                double threshold) {
  require_trained(classifier);
  torch::NoGradGuard no_grad;
  classifier.eval();
  std::vector<data::LabelSet> out(frames.size());
  in_batches(frames, [&](size_t start, const torch::Tensor& batch) {
    const auto p = torch::sigmoid(classifier.forward(batch)).to(torch::kDouble).contiguous();
    const auto acc = p.accessor<double, 2>();
    for (std::int64_t r = 0; r < p.size(0); ++r)
      for (std::int64_t c = 0; c < p.size(1); ++c)
        if (acc[r][c] > threshold) out[start + static_cast<size_t>(r)].insert(static_cast<int>(c));
  });
  return out;
}

data::LabelSet classify_characters(const Image& frame, CharacterClassifierImpl& classifier,
                                   double threshold) {
  return classify_characters(std::vector<const Image*>{&frame}, classifier, threshold).front();
}

Correlation cosine_statistics(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw ShapeError("source_correlation: paired feature sets differ in shape");
  Correlation c;
  std::vector<double> values;
  for (Eigen::Index i = 0; i < a.rows(); ++i) {
    const double na = a.row(i).norm(), nb = b.row(i).norm();
    if (na == 0.0 || nb == 0.0) {
      ++c.skipped;
      continue;
    }
    values.push_back(a.row(i).dot(b.row(i)) / (na * nb));
  }
  c.pairs = static_cast<std::int64_t>(values.size());
  if (values.empty()) return c;
  double sum = 0.0;
  for (double v : values) sum += v;
  c.mean = sum / static_cast<double>(values.size());
  double var = 0.0;
  for (double v : values) var += (v - c.mean) * (v - c.mean);
  c.std = std::sqrt(var / static_cast<double>(values.size()));
  return c;
}

Correlation source_correlation(const std::vector<const Image*>& sources,
                               const std::vector<const Image*>& generated,
                               CharacterClassifierImpl& extractor) {
  if (sources.size() != generated.size())
    throw ValidationError("source_correlation: " + std::to_string(sources.size()) + " sources for " +
                          std::to_string(generated.size()) + " generated frames");
  return cosine_statistics(extract_features(sources, extractor).features,
                           extract_features(generated, extractor).features);
}

Json EvalReport::to_json() const {
  auto metrics = [](const CharMetrics& m) {
    return Json{{"char_f1", m.char_f1}, {"frame_acc", m.frame_acc}, {"frames", m.frames},
                {"tp", m.tp}, {"fp", m.fp}, {"fn", m.fn}};
  };
  return {{"dataset", dataset},
          {"checkpoint", checkpoint},
          {"fid", fid},
          {"fid_clamped", fid_clamped},
          {"char_f1", chars.char_f1},
          {"frame_acc", chars.frame_acc},
          {"correlation", {{"mean", correlation.mean}, {"std", correlation.std},
                           {"pairs", correlation.pairs}, {"skipped", correlation.skipped}}},
          {"unseen", metrics(unseen_chars)},
          {"target_frames", target_frames},
          {"seeds", seeds}};
}

}  // namespace retrostory::eval
