#include "testing.h"
#include "oracles.h"
#include "retrostory/errors.h"
#include "retrostory/evaluation.h"

#include <cmath>
#include <random>

using namespace retrostory;
using namespace retrostory::eval;

namespace {

Eigen::MatrixXd random_features(int n, int d, std::uint64_t seed, double scale = 1.0) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  Eigen::MatrixXd mix(d, d);
  for (int i = 0; i < d; ++i)
    for (int j = 0; j < d; ++j) mix(i, j) = normal(rng) * scale;
  Eigen::MatrixXd x(n, d);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < d; ++j) x(i, j) = normal(rng);
  return x * mix;
}

FeatureSet as_set(const Eigen::MatrixXd& m) {
  FeatureSet s;
  s.features = m;
  s.extractor = "test";
  return s;
}

std::vector<data::LabelSet> random_labels(int frames, int n_chars, std::mt19937_64& rng) {
  std::vector<data::LabelSet> out(static_cast<size_t>(frames));
  std::bernoulli_distribution coin(0.3);
  for (auto& s : out)
    for (int k = 0; k < n_chars; ++k)
      if (coin(rng)) s.insert(k);
  return out;
}

}  // namespace

TEST_SUITE("evaluation") {
  TEST_CASE("fid agrees with the eigenvalue reference") {
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
      const auto a = random_features(60, 8, seed);
      const auto b = random_features(50, 8, seed + 100, 0.7);
      const double want = oracle::fid(a, b);
      const double got = fid(as_set(a), as_set(b)).value;
      CHECK(std::abs(got - want) <= 1e-6 * std::max(1.0, want));
    }
  }

  TEST_CASE("fid is symmetric and zero on identical sets") {
    const auto a = random_features(40, 6, 1);
    const auto b = random_features(40, 6, 2);
    CHECK(fid(as_set(a), as_set(b)).value == doctest::Approx(fid(as_set(b), as_set(a)).value).epsilon(1e-9));
    CHECK(std::abs(fid(as_set(a), as_set(a)).value) <= 1e-6);
  }

  TEST_CASE("a pure shift costs its squared length") {
    const auto a = random_features(30, 5, 3);
    Eigen::RowVectorXd shift(5);
    shift << 1.0, -2.0, 0.5, 0.0, 3.0;
    const Eigen::MatrixXd b = a.rowwise() + shift;
    CHECK(fid(as_set(a), as_set(b)).value == doctest::Approx(shift.squaredNorm()).epsilon(1e-6));
  }

  TEST_CASE("fid rejects unusable sets") {
    const auto a = random_features(10, 4, 4);
    CHECK_THROWS_AS(fid(as_set(a), as_set(random_features(10, 3, 5))), ShapeError);
    CHECK_THROWS_AS(fid(as_set(a), as_set(a.topRows(1))), ValidationError);
  }

  TEST_CASE("character metrics match the confusion count") {
    std::mt19937_64 rng(9);
    for (int trial = 0; trial < 20; ++trial) {
      const auto gt = random_labels(25, 6, rng);
      const auto pred = random_labels(25, 6, rng);
      const auto want = oracle::confusion(pred, gt, 6);
      const auto got = char_metrics(pred, gt);
      CHECK(got.tp == want.tp);
      CHECK(got.fp == want.fp);
      CHECK(got.fn == want.fn);
      CHECK(got.frames == want.frames);
      CHECK(got.char_f1 == doctest::Approx(want.f1()).epsilon(1e-12));
      CHECK(got.frame_acc == doctest::Approx(want.frame_acc()).epsilon(1e-12));
    }
  }

  TEST_CASE("character metrics edge cases") {
    const std::vector<data::LabelSet> empty(3);
    CHECK(char_metrics(empty, empty).char_f1 == 1.0);
    CHECK(char_metrics(empty, empty).frame_acc == 1.0);
    const std::vector<data::LabelSet> gt{{0}, {1, 2}, {}};
    CHECK(char_metrics(gt, gt).char_f1 == 1.0);
    CHECK(char_metrics(empty, gt).char_f1 == 0.0);
    CHECK(char_metrics(empty, gt).frame_acc == doctest::Approx(1.0 / 3));
    CHECK_THROWS_AS(char_metrics(empty, {{0}}), ValidationError);
  }

  TEST_CASE("cosine statistics") {
    Eigen::MatrixXd a(4, 2), b(4, 2);
    a << 1, 0, 0, 1, 1, 1, 0, 0;
    b << 1, 0, 1, 0, -1, -1, 2, 2;
    const auto c = cosine_statistics(a, b);
    CHECK(c.pairs == 3);
    CHECK(c.skipped == 1);
    // cosines 1, 0, -1
    CHECK(c.mean == doctest::Approx(0.0));
    CHECK(c.std == doctest::Approx(std::sqrt(2.0 / 3.0)));
  }

  TEST_CASE("untrained extractors are refused") {
    CharacterClassifier clf(4, 16, 8);
    Image img(16, 16);
    const std::vector<const Image*> frames{&img, &img};
    CHECK_FALSE(clf->trained());
    CHECK_THROWS_AS(extract_features(frames, *clf), ValidationError);
    CHECK_THROWS_AS(classify_characters(img, *clf), ValidationError);
    clf->mark_trained();
    const auto f = extract_features(frames, *clf);
    CHECK(f.size() == 2);
    CHECK(f.features.cols() == 8);
  }

  TEST_CASE("classifier learns a trivially separable task") {
    torch::manual_seed(41);
    CharacterClassifier clf(2, 16, 8);
    std::vector<data::LabeledFrame> frames;
    for (int i = 0; i < 32; ++i) {
      data::LabeledFrame f{Image(16, 16), {}};
      if (i % 2) {
        for (int y = 0; y < 8; ++y)
          for (int x = 0; x < 8; ++x) f.image.pixel(y, x)[0] = 255;
        f.labels.insert(0);
      } else {
        for (int y = 8; y < 16; ++y)
          for (int x = 8; x < 16; ++x) f.image.pixel(y, x)[2] = 255;
        f.labels.insert(1);
      }
      frames.push_back(f);
    }
    ClassifierConfig cc;
    cc.steps = 150;
    cc.batch_size = 16;
    const auto losses = train_classifier(*clf, frames, cc);
    CHECK(losses.back() < losses.front());
    CHECK(clf->trained());
    CHECK(classify_characters(frames[1].image, *clf) == data::LabelSet{0});
    CHECK(classify_characters(frames[0].image, *clf) == data::LabelSet{1});
  }
}
