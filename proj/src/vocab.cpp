#include "arcflow/vocab.hpp"

#include <istream>
#include <ostream>
#include <sstream>

namespace arcflow {

const std::vector<std::string>& grammar_words() {
  static const std::vector<std::string> words = {
      "a",      "the",    "and",     "at",     "on",    "is",     "then",  "make",  "move",
      "it",     "to",     "small",   "large",  "red",   "green",  "blue",  "yellow", "cyan",
      "magenta", "orange", "white",  "square", "circle", "diamond", "cross", "left",  "right",
      "top",    "bottom", "center",  "black",  "gray",  "background", "picture", "of", "with",
  };
  return words;
}

Vocabulary Vocabulary::standard(std::size_t padded_size) {
  std::vector<std::string> tokens = {"<pad>", "<bos>", "<eos>", "<boi>", "<eoi>", "<image_area>", "*"};
  for (int d = 0; d < 10; ++d) tokens.push_back(std::to_string(d));
  for (const auto& w : grammar_words()) tokens.push_back(w);
  if (padded_size != 0) {
    if (padded_size < tokens.size()) {
      throw VocabError("vocab size " + std::to_string(padded_size) + " is smaller than the grammar vocabulary (" +
                       std::to_string(tokens.size()) + ")");
    }
    for (std::size_t k = 0; tokens.size() < padded_size; ++k) tokens.push_back("<unused_" + std::to_string(k) + ">");
  }
  return from_tokens(std::move(tokens));
}

Vocabulary Vocabulary::from_tokens(std::vector<std::string> tokens) {
  if (tokens.size() < static_cast<std::size_t>(token::kDigit0 + 10)) throw VocabError("vocabulary too small");
  static const char* kFixed[] = {"<pad>", "<bos>", "<eos>", "<boi>", "<eoi>", "<image_area>", "*"};
  for (int i = 0; i < 7; ++i)
    if (tokens[i] != kFixed[i]) throw VocabError("vocabulary id " + std::to_string(i) + " must be " + kFixed[i]);
  for (int d = 0; d < 10; ++d)
    if (tokens[token::kDigit0 + d] != std::to_string(d)) throw VocabError("digit tokens out of place");
  Vocabulary v;
  v.tokens_ = std::move(tokens);
  for (std::size_t i = 0; i < v.tokens_.size(); ++i) {
    const auto& t = v.tokens_[i];
    if (t.empty() || t.find_first_of(" \t\r\n") != std::string::npos) throw VocabError("invalid token '" + t + "'");
    if (!v.ids_.emplace(t, static_cast<int>(i)).second) throw VocabError("duplicate token '" + t + "'");
  }
  return v;
}

const std::string& Vocabulary::token(int id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size()) throw VocabError("token id out of range: " + std::to_string(id));
  return tokens_[static_cast<std::size_t>(id)];
}

int Vocabulary::id(std::string_view tok) const {
  auto it = ids_.find(std::string(tok));
  if (it == ids_.end()) throw VocabError("unknown token '" + std::string(tok) + "'");
  return it->second;
}

bool Vocabulary::contains(std::string_view tok) const { return ids_.count(std::string(tok)) != 0; }

std::vector<int> Vocabulary::tokenize(std::string_view text) const {
  std::vector<int> ids;
  std::istringstream in{std::string(text)};
  std::string word;
  while (in >> word) {
    if (!contains(word)) throw VocabError("out-of-alphabet word '" + word + "'");
    ids.push_back(id(word));
  }
  return ids;
}

std::string Vocabulary::detokenize(const std::vector<int>& ids) const {
  std::string out;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (i) out += ' ';
    out += token(ids[i]);
  }
  return out;
}

void Vocabulary::write(std::ostream& out) const {
  out << "# arcflow vocabulary, one token per line; line k (0-based, comments excluded) is id k\n"
      << "# special ids: <pad>=0 <bos>=1 <eos>=2 <boi>=3 <eoi>=4 <image_area>=5\n"
      << "# area metadata: '*'=6, digits 0-9 = 7-16\n";
  for (const auto& t : tokens_) out << t << '\n';
}

Vocabulary Vocabulary::read(std::istream& in) {
  std::vector<std::string> tokens;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line[0] == '#') continue;
    tokens.push_back(line);
  }
  return from_tokens(std::move(tokens));
}

}  // namespace arcflow
