#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "retrostory/config.h"

namespace retrostory {

// Word-level caption vocabulary. Ids 0..3 are reserved.
class Vocabulary {
 public:
  static constexpr std::int64_t kPad = 0;
  static constexpr std::int64_t kUnk = 1;
  static constexpr std::int64_t kBos = 2;
  static constexpr std::int64_t kEos = 3;

  Vocabulary();

  // Sorted, de-duplicated words of all captions after the reserved ids.
  static Vocabulary build(const std::vector<std::string>& captions);

  // Lower-cased alphanumeric runs.
  static std::vector<std::string> split(std::string_view caption);

  // [bos, words..., eos] padded with kPad (or truncated) to `length`.
  std::vector<std::int64_t> encode(std::string_view caption, int length) const;

  std::int64_t id(const std::string& word) const;
  const std::string& word(std::int64_t id) const { return words_.at(static_cast<size_t>(id)); }
  int size() const { return static_cast<int>(words_.size()); }

  Json to_json() const;
  static Vocabulary from_json(const Json& j);

 private:
  std::vector<std::string> words_;
  std::unordered_map<std::string, std::int64_t> index_;
};

}  // namespace retrostory
