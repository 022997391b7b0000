#pragma once

#include <iosfwd>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace arcflow {

struct VocabError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

/// Fixed special ids. `*` and the decimal digits are ordinary text tokens
/// (ids kStar and kDigit0 + d) so that the image-area metadata is learned by
/// the language-modeling head like any other text.
namespace token {
inline constexpr int kPad = 0;
inline constexpr int kBos = 1;
inline constexpr int kEos = 2;
inline constexpr int kBoi = 3;
inline constexpr int kEoi = 4;
inline constexpr int kImageArea = 5;
inline constexpr int kNumSpecial = 6;
inline constexpr int kStar = 6;
inline constexpr int kDigit0 = 7;
}  // namespace token

/// Word-level vocabulary over the synthetic caption grammar.
class Vocabulary {
 public:
  /// The frozen vocabulary shared by the corpus generator and the model.
  /// When padded_size exceeds the natural size, `<unused_k>` entries fill
  /// the remainder.
  static Vocabulary standard(std::size_t padded_size = 0);
  static Vocabulary from_tokens(std::vector<std::string> tokens);

  std::size_t size() const { return tokens_.size(); }
  const std::string& token(int id) const;
  int id(std::string_view token) const;
  bool contains(std::string_view token) const;
  bool is_special(int id) const { return id >= 0 && id < token::kNumSpecial; }
  int digit(int d) const { return token::kDigit0 + d; }
  bool is_digit(int id) const { return id >= token::kDigit0 && id < token::kDigit0 + 10; }

  /// Whitespace-separated words to ids; an unknown word is an error.
  std::vector<int> tokenize(std::string_view text) const;
  /// Ids joined by single spaces. tokenize(detokenize(ids)) == ids.
  std::string detokenize(const std::vector<int>& ids) const;

  /// One token per line after a `#` comment header documenting special ids.
  void write(std::ostream& out) const;
  static Vocabulary read(std::istream& in);

  bool operator==(const Vocabulary& other) const { return tokens_ == other.tokens_; }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int> ids_;
};

/// Words used by the caption grammar, in vocabulary order.
const std::vector<std::string>& grammar_words();

}  // namespace arcflow
