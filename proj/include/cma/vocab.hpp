#pragma once

#include <cctype>
#include <fstream>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "cma/common.hpp"
#include "cma/errors.hpp"

namespace cma {

/// Lowercase, split on anything that is not a-z, 0-9, or a non-ASCII byte
/// (multi-byte UTF-8 sequences pass through unsplit).
inline std::vector<std::string> tokenize(const std::string& text) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : text) {
    const auto uc = static_cast<unsigned char>(ch);
    if (uc >= 0x80) {
      cur.push_back(ch);
    } else if (std::isalnum(uc)) {
      cur.push_back(static_cast<char>(std::tolower(uc)));
    } else {
      if (!cur.empty()) out.push_back(std::move(cur));
      cur.clear();
    }
  }
  if (!cur.empty()) out.push_back(std::move(cur));
  return out;
}

class Vocab {
 public:
  static constexpr int kPad = 0;
  static constexpr int kUnk = 1;

  Vocab() {
    add("<pad>");
    add("<unk>");
  }

  int add(const std::string& word) {
    auto it = ids_.find(word);
    if (it != ids_.end()) return it->second;
    const int id = static_cast<int>(words_.size());
    ids_[word] = id;
    words_.push_back(word);
    return id;
  }

  int id(const std::string& word) const {
    auto it = ids_.find(word);
    return it == ids_.end() ? kUnk : it->second;
  }

  bool contains(const std::string& word) const { return ids_.count(word); }
  int size() const { return static_cast<int>(words_.size()); }
  const std::string& word(int id) const { return words_.at(id); }
  const std::vector<std::string>& words() const { return words_; }

  std::vector<int> encode(const std::string& text) const {
    std::vector<int> out;
    for (const auto& tok : tokenize(text)) out.push_back(id(tok));
    return out;
  }

 private:
  std::unordered_map<std::string, int> ids_;
  std::vector<std::string> words_;
};

inline Vocab build_vocab(const std::vector<std::string>& texts) {
  Vocab v;
  for (const auto& text : texts)
    for (const auto& tok : tokenize(text)) v.add(tok);
  return v;
}

/// Pretrained word-vector file: one word per line, "word v1 v2 ... v<dim>".
/// Known words get their file vector; the rest keep their existing rows.
/// Returns the number of vocabulary words found in the file.
inline int load_pretrained_vectors(const std::string& path, const Vocab& vocab,
                                   Mat& table) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open word-vector file: " + path);
  if (table.cols() != vocab.size())
    throw ConfigError("embedding table width must match vocabulary size");
  const int dim = static_cast<int>(table.rows());
  std::string line;
  int line_no = 0, hits = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::istringstream ss(line);
    std::string word;
    ss >> word;
    if (word.empty())
      throw DataError(path + ":" + std::to_string(line_no) + ": missing word");
    Vec vec(dim);
    for (int i = 0; i < dim; ++i) {
      if (!(ss >> vec(i)))
        throw DataError(path + ":" + std::to_string(line_no) + ": expected " +
                        std::to_string(dim) + " components for '" + word +
                        "'");
    }
    double extra;
    if (ss >> extra)
      throw DataError(path + ":" + std::to_string(line_no) +
                      ": too many components for '" + word + "'");
    if (vocab.contains(word)) {
      table.col(vocab.id(word)) = vec;
      ++hits;
    }
  }
  return hits;
}

}  // namespace cma
