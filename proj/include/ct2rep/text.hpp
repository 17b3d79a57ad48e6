#pragma once

// Word-level tokenizer and vocabulary for findings text.

#include <cstddef>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

namespace ct2rep {

inline constexpr std::size_t kPad = 0;
inline constexpr std::size_t kBos = 1;
inline constexpr std::size_t kEos = 2;
inline constexpr std::size_t kUnk = 3;
inline constexpr std::size_t kMaxReportTokens = 300;

class VocabError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Lowercases, splits on whitespace and isolates . , ; : ( ) / as tokens.
std::vector<std::string> tokenize(const std::string& text);
// tokenize() joined with single spaces.
std::string canonical_text(const std::string& text);

class Vocabulary {
 public:
  Vocabulary();  // reserved tokens only

  // Tokens with count >= min_count; ids ordered by frequency desc, then
  // lexicographically.
  static Vocabulary build(const std::vector<std::string>& corpus, std::size_t min_count = 1);
  static Vocabulary from_tokens(const std::vector<std::string>& tokens);

  std::size_t size() const { return tokens_.size(); }
  std::size_t id(const std::string& token) const;  // kUnk when absent
  bool contains(const std::string& token) const { return ids_.count(token) != 0; }
  const std::string& token(std::size_t id) const;
  const std::vector<std::string>& tokens() const { return tokens_; }

  // JSON array of tokens in id order.
  std::string to_json() const;
  static Vocabulary from_json(const std::string& json);
  void save(const std::filesystem::path& path) const;
  static Vocabulary load(const std::filesystem::path& path);

  bool operator==(const Vocabulary& other) const { return tokens_ == other.tokens_; }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, std::size_t> ids_;
};

// BOS + ids + EOS.
std::vector<std::size_t> encode_report(const std::string& text, const Vocabulary& vocab);
// Joins tokens until EOS; PAD and BOS are skipped. Throws VocabError on an
// out-of-range id.
std::string decode_tokens(const std::vector<std::size_t>& ids, const Vocabulary& vocab);

}  // namespace ct2rep
