#include "retrostory/text.h"

#include <algorithm>
#include <cctype>
#include <set>

#include "retrostory/errors.h"

namespace retrostory {

Vocabulary::Vocabulary() : words_{"<pad>", "<unk>", "<bos>", "<eos>"} {
  for (size_t i = 0; i < words_.size(); ++i) index_[words_[i]] = static_cast<std::int64_t>(i);
}

Vocabulary Vocabulary::build(const std::vector<std::string>& captions) {
  std::set<std::string> unique;
  for (const auto& caption : captions)
    for (auto& w : split(caption)) unique.insert(std::move(w));
  Vocabulary v;
  for (const auto& w : unique) {
    if (v.index_.count(w)) continue;
    v.index_[w] = static_cast<std::int64_t>(v.words_.size());
    v.words_.push_back(w);
  }
  return v;
}

std::vector<std::string> Vocabulary::split(std::string_view caption) {
  std::vector<std::string> words;
  std::string current;
  for (char c : caption) {
    if (std::isalnum(static_cast<unsigned char>(c))) {
      current.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
    } else if (!current.empty()) {
      words.push_back(std::move(current));
      current.clear();
    }
  }
  if (!current.empty()) words.push_back(std::move(current));
  return words;
}

std::int64_t Vocabulary::id(const std::string& word) const {
  auto it = index_.find(word);
  return it == index_.end() ? kUnk : it->second;
}

std::vector<std::int64_t> Vocabulary::encode(std::string_view caption, int length) const {
  std::vector<std::int64_t> ids;
  ids.reserve(static_cast<size_t>(length));
  ids.push_back(kBos);
  for (const auto& w : split(caption)) ids.push_back(id(w));
  ids.push_back(kEos);
  ids.resize(static_cast<size_t>(length), kPad);
  return ids;
}

Json Vocabulary::to_json() const { return Json(words_); }

Vocabulary Vocabulary::from_json(const Json& j) {
  const auto words = j.get<std::vector<std::string>>();
  Vocabulary v;
  if (words.size() < v.words_.size() ||
      !std::equal(v.words_.begin(), v.words_.end(), words.begin()))
    throw ValidationError("vocabulary does not start with the reserved tokens");
  for (size_t i = v.words_.size(); i < words.size(); ++i) {
    v.index_[words[i]] = static_cast<std::int64_t>(i);
    v.words_.push_back(words[i]);
  }
  return v;
}

}  // namespace retrostory
