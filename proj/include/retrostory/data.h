#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "retrostory/config.h"
#include "retrostory/image.h"

namespace retrostory::data {

enum class Split { kTrain, kVal, kTest };
const char* to_string(Split split);
Split parse_split(const std::string& text);

using LabelSet = std::set<int>;

// One story: T captions, T frames and T character label sets. Frame 0 is the
// source frame; frames 1..T-1 are the targets.
struct StorySample {
  std::string id;
  Split split = Split::kTrain;
  std::vector<std::string> captions;
  std::vector<std::shared_ptr<const Image>> frames;
  std::vector<LabelSet> char_labels;
  // Source video the sample was cut from; equals id unless windowed.
  std::string video_id;

  int length() const { return static_cast<int>(captions.size()); }
  const Image& source() const { return *frames.front(); }
  // Indices of the frames that are generated and evaluated: 1..T-1.
  std::vector<int> target_indices() const;
  // Empty when the invariants hold, otherwise one message per violation.
  std::vector<std::string> problems() const;
};

struct Dataset {
  std::string name = "dataset";
  std::string format = "synthetic";
  int n_chars = 0;
  std::vector<std::string> char_names;
  std::vector<StorySample> samples;

  std::vector<const StorySample*> split(Split s) const;
  const StorySample* find(const std::string& id) const;
  std::vector<std::string> captions(Split s) const;
  bool has_char_labels() const;
};

// Generated continuation of one story: frames 2..T.
struct GeneratedStory {
  std::string sample_id;
  std::vector<Image> frames;
  SamplerConfig sampler;
};

// ---- synthetic renderer -------------------------------------------------

struct CharacterStyle {
  std::string color_name;
  std::array<std::uint8_t, 3> color;
  std::string shape;
};

// Character k has color k and shape k mod 4. Ids [0, n_chars) appear in the
// train split; ids [n_chars, n_chars + n_unseen) only in unseen test stories.
std::vector<CharacterStyle> character_styles(const SyntheticSpec& spec);

enum class Side { kLeft, kMiddle, kRight };
enum class Action { kWalk, kJump };

struct Placement {
  int character = 0;
  Side side = Side::kLeft;
  Action action = Action::kWalk;
};

struct Scene {
  int background = 0;
  std::vector<Placement> placements;
};

Image render_scene(const Scene& scene, const SyntheticSpec& spec);

// Same seed -> identical dataset (samples and pixels).
Dataset generate_synthetic_dataset(const SyntheticSpec& spec);

struct LabeledFrame {
  Image image;
  LabelSet labels;
  // Names every character with its color, left to right.
  std::string caption;
};

// Independent random scenes over every character (seen and unseen) and
// background; used as the tokenizer, classifier and backbone corpus.
std::vector<LabeledFrame> render_random_frames(const SyntheticSpec& spec, int count,
                                               std::uint64_t seed);

// Character ids that never occur in the train split.
std::set<int> unseen_characters(const Dataset& dataset);

// ---- on-disk format ------------------------------------------------------

// root/stories.jsonl: {"id","split","captions","frame_paths","char_labels"}
// per line, frames as PNG under root/images/, optional root/manifest.json.
void save_dataset(const Dataset& dataset, const std::filesystem::path& root);

// format: "synthetic" (any T >= 2), "pororo" / "flintstones" (T = 5),
// "didemo" (T = 3, empty label sets allowed). Throws ValidationError with an
// itemized report when any sample is invalid or declared split counts differ.
Dataset load_dataset(const std::filesystem::path& root, const std::string& format);

// ---- preprocessing -------------------------------------------------------

// Stride-1 windows of `window` consecutive frames from one source video.
// Returns an empty list when the sequence is shorter than the window.
std::vector<StorySample> sliding_window_split(const std::string& video_id, Split split,
                                              const std::vector<std::string>& captions,
                                              const std::vector<std::shared_ptr<const Image>>& frames,
                                              const std::vector<LabelSet>& labels, int window);

// Log-likelihood of `caption` given a frame.
using FrameScorer = std::function<double(const Image& frame, const std::string& caption)>;

// Highest scoring candidate; ties keep the earliest index.
std::size_t select_frame(std::span<const Image> candidates, const std::string& caption,
                         const FrameScorer& scorer);

// Video ids that occur in more than one split.
std::vector<std::string> leaked_videos(const Dataset& dataset);

}  // namespace retrostory::data
