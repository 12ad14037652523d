#include "testing.h"
#include "retrostory/data.h"
#include "retrostory/errors.h"

#include <filesystem>
#include <fstream>

using namespace retrostory;
using namespace retrostory::data;
namespace fs = std::filesystem;

namespace {

SyntheticSpec small_spec() {
  SyntheticSpec s;
  s.train = 12;
  s.val = 3;
  s.test = 8;
  s.image_size = 32;
  return s;
}

fs::path fresh_dir(const std::string& name) {
  auto dir = fs::temp_directory_path() / "retrostory-tests" / name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

void check_same(const Dataset& a, const Dataset& b) {
  REQUIRE(a.samples.size() == b.samples.size());
  CHECK(a.n_chars == b.n_chars);
  for (size_t i = 0; i < a.samples.size(); ++i) {
    const auto &x = a.samples[i], &y = b.samples[i];
    CHECK(x.id == y.id);
    CHECK(x.split == y.split);
    CHECK(x.captions == y.captions);
    CHECK(x.char_labels == y.char_labels);
    REQUIRE(x.frames.size() == y.frames.size());
    for (size_t t = 0; t < x.frames.size(); ++t) CHECK(*x.frames[t] == *y.frames[t]);
  }
}

std::shared_ptr<const Image> blank(int v) {
  auto img = std::make_shared<Image>(4, 4);
  std::fill(img->rgb.begin(), img->rgb.end(), static_cast<std::uint8_t>(v));
  return img;
}

}  // namespace

TEST_SUITE("data") {
  TEST_CASE("synthetic data is a pure function of the spec") {
    const auto spec = small_spec();
    check_same(generate_synthetic_dataset(spec), generate_synthetic_dataset(spec));
    auto other = spec;
    other.seed = spec.seed + 1;
    const auto a = generate_synthetic_dataset(spec), b = generate_synthetic_dataset(other);
    bool differs = false;
    for (size_t i = 0; i < a.samples.size(); ++i) differs |= a.samples[i].captions != b.samples[i].captions;
    CHECK(differs);
  }

  TEST_CASE("synthetic stories satisfy the sample invariants") {
    const auto spec = small_spec();
    const auto d = generate_synthetic_dataset(spec);
    CHECK(d.split(Split::kTrain).size() == 12);
    CHECK(d.split(Split::kVal).size() == 3);
    CHECK(d.split(Split::kTest).size() == 8);
    CHECK(d.n_chars == spec.n_chars + spec.n_unseen);
    for (const auto& s : d.samples) {
      CHECK(s.problems().empty());
      CHECK(s.length() == spec.frames_per_story);
      CHECK(s.target_indices() == std::vector<int>{1, 2, 3});
      CHECK(s.source().width == 32);
      for (const auto& labels : s.char_labels) CHECK_FALSE(labels.empty());
    }
    CHECK(leaked_videos(d).empty());
  }

  TEST_CASE("unseen characters stay out of training") {
    auto spec = small_spec();
    spec.train = 120;
    spec.test = 24;
    const auto d = generate_synthetic_dataset(spec);
    const auto unseen = unseen_characters(d);
    for (const int k : unseen) CHECK(k >= spec.n_chars);
    CHECK_FALSE(unseen.empty());
    for (const auto* s : d.split(Split::kTrain))
      for (const auto& labels : s->char_labels)
        for (const int k : labels) CHECK(k < spec.n_chars);
  }

  TEST_CASE("random frames are reproducible") {
    const auto spec = small_spec();
    const auto a = render_random_frames(spec, 5, 3);
    const auto b = render_random_frames(spec, 5, 3);
    REQUIRE(a.size() == 5);
    for (size_t i = 0; i < a.size(); ++i) {
      CHECK(a[i].image == b[i].image);
      CHECK(a[i].labels == b[i].labels);
      CHECK(a[i].caption == b[i].caption);
    }
  }

  TEST_CASE("random frames name every character with its color") {
    const auto spec = small_spec();
    for (const auto& f : render_random_frames(spec, 20, 4)) {
      size_t joins = 0;
      for (size_t at = f.caption.find(" and "); at != std::string::npos; at = f.caption.find(" and ", at + 1)) ++joins;
      CHECK(joins + 1 == f.labels.size());
      size_t verbs = 0;
      for (const char* verb : {" walks ", " jumps "})
        for (size_t at = f.caption.find(verb); at != std::string::npos; at = f.caption.find(verb, at + 1)) ++verbs;
      CHECK(verbs == f.labels.size());
    }
  }

  TEST_CASE("datasets survive a save and load") {
    const auto d = generate_synthetic_dataset(small_spec());
    const auto dir = fresh_dir("roundtrip");
    save_dataset(d, dir);
    check_same(d, load_dataset(dir, "synthetic"));
    CHECK_THROWS_AS(load_dataset(dir, "mystery"), ValidationError);
    // Stories have 4 frames; these formats need 5.
    CHECK_THROWS_WITH_AS(load_dataset(dir, "pororo"), doctest::Contains("5 frames"), ValidationError);
  }

  TEST_CASE("validation reports every broken sample") {
    const auto d = generate_synthetic_dataset(small_spec());
    const auto dir = fresh_dir("broken");
    save_dataset(d, dir);
    fs::remove(dir / "images" / (d.samples[0].id + "_1.png"));
    fs::remove(dir / "images" / (d.samples[1].id + "_2.png"));
    try {
      load_dataset(dir, "synthetic");
      FAIL("expected a validation error");
    } catch (const ValidationError& e) {
      const std::string msg = e.what();
      CHECK(msg.find(d.samples[0].id) != std::string::npos);
      CHECK(msg.find(d.samples[1].id) != std::string::npos);
      CHECK(msg.find("missing image") != std::string::npos);
      CHECK(msg.find("manifest declares") != std::string::npos);
    }
  }

  TEST_CASE("malformed lines are rejected") {
    const auto dir = fresh_dir("malformed");
    std::ofstream(dir / "stories.jsonl") << "{\"id\": \"x\", \"split\": \"train\"}\n";
    CHECK_THROWS_WITH_AS(load_dataset(dir, "synthetic"), doctest::Contains("malformed"), ValidationError);
    CHECK_THROWS_AS(load_dataset(fresh_dir("empty-root") / "nothing", "synthetic"), ValidationError);
  }

  TEST_CASE("sliding windows cover consecutive frames") {
    std::vector<std::string> captions{"a", "b", "c", "d", "e", "f", "g"};
    std::vector<std::shared_ptr<const Image>> frames;
    std::vector<LabelSet> labels;
    for (int i = 0; i < 7; ++i) {
      frames.push_back(blank(i));
      labels.push_back({i % 3});
    }
    const auto windows = sliding_window_split("vid", Split::kTrain, captions, frames, labels, 5);
    REQUIRE(windows.size() == 3);
    for (size_t w = 0; w < windows.size(); ++w) {
      CHECK(windows[w].video_id == "vid");
      CHECK(windows[w].length() == 5);
      CHECK(windows[w].captions.front() == captions[w]);
      CHECK(windows[w].frames.back() == frames[w + 4]);
      CHECK(windows[w].problems().empty());
    }
    CHECK(windows[0].id != windows[1].id);
    CHECK(sliding_window_split("vid", Split::kTrain, {"a", "b"}, {frames[0], frames[1]}, {{}, {}}, 5).empty());
    CHECK_THROWS_AS(sliding_window_split("vid", Split::kTrain, {"a"}, {}, {}, 1), ValidationError);
  }

  TEST_CASE("windows from one video never span splits") {
    Dataset d;
    std::vector<std::shared_ptr<const Image>> frames{blank(0), blank(1), blank(2)};
    for (auto& s : sliding_window_split("v1", Split::kTrain, {"a", "b", "c"}, frames, {{}, {}, {}}, 2))
      d.samples.push_back(s);
    CHECK(leaked_videos(d).empty());
    auto test = sliding_window_split("v1", Split::kTest, {"a", "b"}, {frames[0], frames[1]}, {{}, {}}, 2);
    d.samples.push_back(test[0]);
    CHECK(leaked_videos(d) == std::vector<std::string>{"v1"});
  }

  TEST_CASE("frame selection keeps the earliest best candidate") {
    std::vector<Image> candidates;
    for (const int v : {10, 30, 30, 20}) candidates.push_back(*blank(v));
    const FrameScorer brightness = [](const Image& img, const std::string&) { return img.rgb[0]; };
    CHECK(select_frame(candidates, "x", brightness) == 1);
    const FrameScorer flat = [](const Image&, const std::string&) { return 0.0; };
    CHECK(select_frame(candidates, "x", flat) == 0);
    CHECK_THROWS_AS(select_frame({}, "x", flat), ValidationError);
  }

  TEST_CASE("split names parse") {
    CHECK(parse_split("val") == Split::kVal);
    CHECK(std::string(to_string(Split::kTest)) == "test");
    CHECK_THROWS_AS(parse_split("dev"), ValidationError);
  }
}
