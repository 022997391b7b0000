#pragma once

#include <stdexcept>
#include <variant>
#include <vector>

#include "arcflow/latent.hpp"
#include "arcflow/vocab.hpp"

namespace arcflow {

struct SequenceError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

struct TextToken {
  int id = 0;
  bool operator==(const TextToken&) const = default;
};
struct SpecialToken {
  int id = 0;
  bool operator==(const SpecialToken&) const = default;
};
struct ImageToken {
  std::vector<float> values;
  bool operator==(const ImageToken&) const = default;
};

using SequenceElement = std::variant<TextToken, ImageToken, SpecialToken>;

/// Token block of one embedded image: `start` is the index of its first image token.
struct ImageSpan {
  std::size_t start = 0;
  std::size_t rows = 0;
  std::size_t cols = 0;
  bool operator==(const ImageSpan&) const = default;
};

struct MultimodalSequence {
  std::vector<SequenceElement> elements;
  std::vector<ImageSpan> image_spans;
  std::size_t token_dim = 0;

  std::size_t size() const { return elements.size(); }
  bool operator==(const MultimodalSequence&) const = default;
};

/// Vocabulary id of a text/special element; -1 for image tokens.
int element_id(const SequenceElement& e);
bool is_image(const SequenceElement& e);

/// Appends ids, mapping special ids to SpecialToken and the rest to TextToken.
void append_ids(MultimodalSequence& seq, const Vocabulary& vocab, const std::vector<int>& ids);

/// Ids of `<image_area> rows * cols <boi>`.
std::vector<int> image_header_ids(const Vocabulary& vocab, std::size_t rows, std::size_t cols);

/// Appends `<image_area> rows * cols <boi> tokens... <eoi>`.
void append_image(MultimodalSequence& seq, const Vocabulary& vocab, const TokenGrid& tokens);

/// `{caption} <image_area>h*w <boi> {image} <eoi>`. Throws if the grid's
/// token_dim differs from expected_token_dim.
MultimodalSequence build_sequence(const Vocabulary& vocab, const std::vector<int>& caption_ids,
                                  const TokenGrid& image_tokens, std::size_t expected_token_dim);

/// Text runs and images in order of appearance; markers are consumed.
struct ParsedSequence {
  std::vector<std::vector<int>> texts;  // text before image k is texts[k]; trailing text is texts.back()
  std::vector<TokenGrid> images;
};

/// Validates the image framing (`<image_area>` digits `*` digits `<boi>`,
/// rows*cols image tokens, `<eoi>`) and splits the sequence.
ParsedSequence parse_sequence(const MultimodalSequence& seq, const Vocabulary& vocab);

}  // namespace arcflow
