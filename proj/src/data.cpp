#include "retrostory/data.h"

#include <algorithm>
#include <fstream>
#include <map>
#include <sstream>

#include "retrostory/errors.h"

namespace retrostory::data {

namespace fs = std::filesystem;

const char* to_string(Split split) {
  switch (split) {
    case Split::kTrain: return "train";
    case Split::kVal: return "val";
    case Split::kTest: return "test";
  }
  return "?";
}

Split parse_split(const std::string& text) {
  if (text == "train") return Split::kTrain;
  if (text == "val") return Split::kVal;
  if (text == "test") return Split::kTest;
  throw ValidationError("unknown split '" + text + "'");
}

std::vector<int> StorySample::target_indices() const {
  std::vector<int> out;
  for (int t = 1; t < length(); ++t) out.push_back(t);
  return out;
}

std::vector<std::string> StorySample::problems() const {
  std::vector<std::string> out;
  if (captions.size() != frames.size() || captions.size() != char_labels.size()) {
    std::ostringstream msg;
    msg << captions.size() << " captions, " << frames.size() << " frames, "
        << char_labels.size() << " label sets";
    out.push_back(msg.str());
  }
  if (captions.size() < 2) out.push_back("a story needs at least 2 frames");
  for (size_t t = 0; t < frames.size(); ++t)
    if (!frames[t]) out.push_back("frame " + std::to_string(t) + " is missing");
  return out;
}

std::vector<const StorySample*> Dataset::split(Split s) const {
  std::vector<const StorySample*> out;
  for (const auto& sample : samples)
    if (sample.split == s) out.push_back(&sample);
  return out;
}

const StorySample* Dataset::find(const std::string& id) const {
  for (const auto& sample : samples)
    if (sample.id == id) return &sample;
  return nullptr;
}

std::vector<std::string> Dataset::captions(Split s) const {
  std::vector<std::string> out;
  for (const auto* sample : split(s)) out.insert(out.end(), sample->captions.begin(), sample->captions.end());
  return out;
}

bool Dataset::has_char_labels() const {
  for (const auto& sample : samples)
    for (const auto& labels : sample.char_labels)
      if (!labels.empty()) return true;
  return false;
}

std::set<int> unseen_characters(const Dataset& dataset) {
  std::set<int> seen;
  for (const auto* sample : dataset.split(Split::kTrain))
    for (const auto& labels : sample->char_labels) seen.insert(labels.begin(), labels.end());
  std::set<int> unseen;
  for (const auto& sample : dataset.samples)
    for (const auto& labels : sample.char_labels)
      for (int c : labels)
        if (!seen.count(c)) unseen.insert(c);
  return unseen;
}

void save_dataset(const Dataset& dataset, const fs::path& root) {
  fs::create_directories(root / "images");
  std::ostringstream lines;
  std::map<std::string, int> counts;
  for (const auto& sample : dataset.samples) {
    nlohmann::ordered_json line;
    line["id"] = sample.id;
    line["split"] = to_string(sample.split);
    line["captions"] = sample.captions;
    std::vector<std::string> paths;
    for (size_t t = 0; t < sample.frames.size(); ++t) {
      const std::string rel = "images/" + sample.id + "_" + std::to_string(t) + ".png";
      write_png(root / rel, *sample.frames[t]);
      paths.push_back(rel);
    }
    line["frame_paths"] = paths;
    auto labels = nlohmann::ordered_json::array();
    for (const auto& set : sample.char_labels) labels.push_back(std::vector<int>(set.begin(), set.end()));
    line["char_labels"] = labels;
    lines << line.dump() << '\n';
    ++counts[to_string(sample.split)];
  }
  write_text(root / "stories.jsonl", lines.str());

  nlohmann::ordered_json manifest;
  manifest["name"] = dataset.name;
  manifest["format"] = dataset.format;
  manifest["n_chars"] = dataset.n_chars;
  manifest["char_names"] = dataset.char_names;
  manifest["splits"] = {{"train", counts["train"]}, {"val", counts["val"]}, {"test", counts["test"]}};
  write_text(root / "manifest.json", manifest.dump(2) + "\n");
}

namespace {

int required_length(const std::string& format) {
  if (format == "synthetic") return 0;
  if (format == "pororo" || format == "flintstones") return 5;
  if (format == "didemo") return 3;
  throw ValidationError("unknown dataset format '" + format + "'");
}

}  // namespace

Dataset load_dataset(const fs::path& root, const std::string& format) {
  const int expected_t = required_length(format);
  Dataset dataset;
  dataset.format = format;
  dataset.name = root.filename().string();
  Json manifest;
  if (fs::exists(root / "manifest.json")) {
    std::ifstream in(root / "manifest.json");
    try {
      manifest = Json::parse(in);
    } catch (const std::exception& e) {
      throw ValidationError(std::string("manifest.json is not valid JSON: ") + e.what());
    }
    dataset.name = manifest.value("name", dataset.name);
    dataset.n_chars = manifest.value("n_chars", 0);
    dataset.char_names = manifest.value("char_names", std::vector<std::string>{});
  }

  std::ifstream in(root / "stories.jsonl");
  if (!in) throw ValidationError("missing " + (root / "stories.jsonl").string());

  std::vector<std::string> report;
  std::map<std::string, std::shared_ptr<const Image>> image_cache;
  std::string text;
  int line_no = 0;
  int width = -1;
  while (std::getline(in, text)) {
    ++line_no;
    if (text.find_first_not_of(" \t\r") == std::string::npos) continue;
    std::vector<std::string> problems;
    StorySample sample;
    try {
      const Json line = Json::parse(text);
      sample.id = line.at("id").get<std::string>();
      sample.video_id = sample.id.substr(0, sample.id.find('#'));
      sample.split = parse_split(line.at("split").get<std::string>());
      sample.captions = line.at("captions").get<std::vector<std::string>>();
      const auto paths = line.at("frame_paths").get<std::vector<std::string>>();
      const auto labels = line.at("char_labels").get<std::vector<std::vector<int>>>();
      if (labels.empty() && format == "didemo") {
        sample.char_labels.assign(sample.captions.size(), {});
      } else {
        for (const auto& l : labels) {
          for (int id : l)
            if (id < 0 || (dataset.n_chars > 0 && id >= dataset.n_chars))
              problems.push_back("bad character label id " + std::to_string(id));
          sample.char_labels.emplace_back(l.begin(), l.end());
        }
      }
      for (const auto& rel : paths) {
        auto it = image_cache.find(rel);
        if (it == image_cache.end()) {
          const auto full = root / rel;
          if (!fs::exists(full)) {
            problems.push_back("missing image " + rel);
            sample.frames.push_back(nullptr);
            continue;
          }
          try {
            it = image_cache.emplace(rel, std::make_shared<const Image>(read_png(full))).first;
          } catch (const std::exception& e) {
            problems.push_back("unreadable image " + rel + ": " + e.what());
            sample.frames.push_back(nullptr);
            continue;
          }
        }
        const auto& image = *it->second;
        if (image.width != image.height) problems.push_back("frame " + rel + " is not square");
        if (width < 0) width = image.width;
        if (image.width != width) problems.push_back("frame " + rel + " has a different size");
        sample.frames.push_back(it->second);
      }
      auto invariant = sample.problems();
      problems.insert(problems.end(), invariant.begin(), invariant.end());
      if (expected_t > 0 && sample.length() != expected_t)
        problems.push_back(format + " samples must have " + std::to_string(expected_t) +
                           " frames, found " + std::to_string(sample.length()));
    } catch (const std::exception& e) {
      problems.push_back(std::string("malformed line: ") + e.what());
    }
    if (problems.empty()) {
      dataset.samples.push_back(std::move(sample));
    } else {
      for (const auto& p : problems)
        report.push_back("line " + std::to_string(line_no) + " (" +
                         (sample.id.empty() ? "?" : sample.id) + "): " + p);
    }
  }

  if (manifest.contains("splits")) {
    for (const auto& [name, count] : manifest["splits"].items()) {
      const auto actual = dataset.split(parse_split(name)).size();
      if (actual != count.get<size_t>())
        report.push_back("split " + name + ": manifest declares " + std::to_string(count.get<size_t>()) +
                         " samples, found " + std::to_string(actual));
    }
  }
  if (!report.empty()) {
    std::string msg = "dataset validation failed with " + std::to_string(report.size()) + " problem(s):";
    for (const auto& r : report) msg += "\n  " + r;
    throw ValidationError(msg);
  }
  return dataset;
}

std::vector<StorySample> sliding_window_split(const std::string& video_id, Split split,
                                              const std::vector<std::string>& captions,
                                              const std::vector<std::shared_ptr<const Image>>& frames,
                                              const std::vector<LabelSet>& labels, int window) {
  if (captions.size() != frames.size() || captions.size() != labels.size())
    throw ValidationError("sliding_window_split: captions, frames and labels differ in length");
  std::vector<StorySample> out;
  if (window < 1 || static_cast<int>(captions.size()) < window) return out;
  for (size_t start = 0; start + static_cast<size_t>(window) <= captions.size(); ++start) {
    StorySample s;
    s.id = video_id + "#" + std::to_string(start);
    s.video_id = video_id;
    s.split = split;
    s.captions.assign(captions.begin() + static_cast<long>(start), captions.begin() + static_cast<long>(start) + window);
    s.frames.assign(frames.begin() + static_cast<long>(start), frames.begin() + static_cast<long>(start) + window);
    s.char_labels.assign(labels.begin() + static_cast<long>(start), labels.begin() + static_cast<long>(start) + window);
    out.push_back(std::move(s));
  }
  return out;
}

std::size_t select_frame(std::span<const Image> candidates, const std::string& caption,
                         const FrameScorer& scorer) {
  if (candidates.empty()) throw ValidationError("select_frame needs at least one candidate");
  std::size_t best = 0;
  double best_score = scorer(candidates[0], caption);
  for (std::size_t i = 1; i < candidates.size(); ++i) {
    const double score = scorer(candidates[i], caption);
    if (score > best_score) {
      best = i;
      best_score = score;
    }
  }
  return best;
}

std::vector<std::string> leaked_videos(const Dataset& dataset) {
  std::map<std::string, std::set<Split>> splits;
  for (const auto& sample : dataset.samples)
    splits[sample.video_id.empty() ? sample.id : sample.video_id].insert(sample.split);
  std::vector<std::string> out;
  for (const auto& [video, s] : splits)
    if (s.size() > 1) out.push_back(video);
  return out;
}

}  // namespace retrostory::data
