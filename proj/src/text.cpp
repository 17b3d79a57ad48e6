#include "ct2rep/text.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <map>
#include <sstream>

#include <json.hpp>

namespace ct2rep {

namespace {

constexpr std::string_view kSeparators = ".,;:()/";
const std::vector<std::string> kReserved = {"<pad>", "<bos>", "<eos>", "<unk>"};

}  // namespace

std::vector<std::string> tokenize(const std::string& text) {
  std::vector<std::string> out;
  std::string current;
  auto flush = [&] {
    if (!current.empty()) out.push_back(std::move(current));
    current.clear();
  };
  for (char ch : text) {
    const auto c = static_cast<unsigned char>(ch);
    if (std::isspace(c)) {
      flush();
    } else if (kSeparators.find(ch) != std::string_view::npos) {
      flush();
      out.emplace_back(1, ch);
    } else {
      current.push_back(static_cast<char>(std::tolower(c)));
    }
  }
  flush();
  return out;
}

std::string canonical_text(const std::string& text) {
  std::string out;
  for (const auto& tok : tokenize(text)) {
    if (!out.empty()) out.push_back(' ');
    out += tok;
  }
  return out;
}

Vocabulary::Vocabulary() : tokens_(kReserved) {
  for (std::size_t i = 0; i < tokens_.size(); ++i) ids_[tokens_[i]] = i;
}

Vocabulary Vocabulary::build(const std::vector<std::string>& corpus, std::size_t min_count) {
  if (corpus.empty()) throw VocabError("build_vocab: empty corpus");
  if (min_count < 1) throw VocabError("build_vocab: min_count must be >= 1");
  std::map<std::string, std::size_t> counts;
  for (const auto& report : corpus)
    for (auto& tok : tokenize(report)) ++counts[tok];
  std::vector<std::pair<std::string, std::size_t>> kept;
  for (const auto& [tok, n] : counts) {
    const bool reserved = std::find(kReserved.begin(), kReserved.end(), tok) != kReserved.end();
    if (n >= min_count && !reserved) kept.emplace_back(tok, n);
  }
  std::stable_sort(kept.begin(), kept.end(), [](const auto& a, const auto& b) {
    if (a.second != b.second) return a.second > b.second;
    return a.first < b.first;
  });
  Vocabulary v;
  for (const auto& [tok, n] : kept) {
    v.ids_[tok] = v.tokens_.size();
    v.tokens_.push_back(tok);
  }
  return v;
}

Vocabulary Vocabulary::from_tokens(const std::vector<std::string>& tokens) {
  if (tokens.size() < kReserved.size() || !std::equal(kReserved.begin(), kReserved.end(), tokens.begin())) {
    throw VocabError("vocabulary must start with the reserved tokens <pad> <bos> <eos> <unk>");
  }
  Vocabulary v;
  for (std::size_t i = kReserved.size(); i < tokens.size(); ++i) {
    if (!v.ids_.emplace(tokens[i], i).second) throw VocabError("duplicate vocabulary token '" + tokens[i] + "'");
    v.tokens_.push_back(tokens[i]);
  }
  return v;
}

std::size_t Vocabulary::id(const std::string& token) const {
  const auto it = ids_.find(token);
  return it == ids_.end() ? kUnk : it->second;
}

const std::string& Vocabulary::token(std::size_t id) const {
  if (id >= tokens_.size()) {
    throw VocabError("token id " + std::to_string(id) + " out of range (vocabulary size " +
                     std::to_string(tokens_.size()) + ")");
  }
  return tokens_[id];
}

std::string Vocabulary::to_json() const { return nlohmann::json(tokens_).dump(); }

Vocabulary Vocabulary::from_json(const std::string& json) {
  try {
    return from_tokens(nlohmann::json::parse(json).get<std::vector<std::string>>());
  } catch (const nlohmann::json::exception& ex) {
    throw VocabError(std::string("vocabulary file: ") + ex.what());
  }
}

void Vocabulary::save(const std::filesystem::path& path) const {
  std::ofstream out(path);
  if (!out) throw VocabError("cannot write vocabulary " + path.string());
  out << to_json() << '\n';
}

Vocabulary Vocabulary::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw VocabError("vocabulary not found: " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return from_json(ss.str());
}

std::vector<std::size_t> encode_report(const std::string& text, const Vocabulary& vocab) {
  std::vector<std::size_t> ids{kBos};
  for (const auto& tok : tokenize(text)) ids.push_back(vocab.id(tok));
  ids.push_back(kEos);
  return ids;
}

std::string decode_tokens(const std::vector<std::size_t>& ids, const Vocabulary& vocab) {
  std::string out;
  for (std::size_t id : ids) {
    const std::string& tok = vocab.token(id);
    if (id == kEos) break;
    if (id == kPad || id == kBos) continue;
    if (!out.empty()) out.push_back(' ');
    out += tok;
  }
  return out;
}

}  // namespace ct2rep
