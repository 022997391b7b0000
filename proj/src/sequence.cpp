#include "arcflow/sequence.hpp"

#include <string>

namespace arcflow {

int element_id(const SequenceElement& e) {
  if (const auto* t = std::get_if<TextToken>(&e)) return t->id;
  if (const auto* s = std::get_if<SpecialToken>(&e)) return s->id;
  return -1;
}

bool is_image(const SequenceElement& e) { return std::holds_alternative<ImageToken>(e); }

void append_ids(MultimodalSequence& seq, const Vocabulary& vocab, const std::vector<int>& ids) {
  for (int id : ids) {
    if (id < 0 || static_cast<std::size_t>(id) >= vocab.size()) throw SequenceError("token id out of range: " + std::to_string(id));
    if (vocab.is_special(id)) {
      seq.elements.emplace_back(SpecialToken{id});
    } else {
      seq.elements.emplace_back(TextToken{id});
    }
  }
}

namespace {

void append_number(std::vector<int>& ids, const Vocabulary& vocab, std::size_t n) {
  const std::string digits = std::to_string(n);
  for (char ch : digits) ids.push_back(vocab.digit(ch - '0'));
}

}  // namespace

std::vector<int> image_header_ids(const Vocabulary& vocab, std::size_t rows, std::size_t cols) {
  std::vector<int> ids{token::kImageArea};
  append_number(ids, vocab, rows);
  ids.push_back(token::kStar);
  append_number(ids, vocab, cols);
  ids.push_back(token::kBoi);
  return ids;
}

void append_image(MultimodalSequence& seq, const Vocabulary& vocab, const TokenGrid& tokens) {
  if (tokens.rows == 0 || tokens.cols == 0) throw SequenceError("append_image: empty token grid");
  if (seq.token_dim == 0) seq.token_dim = tokens.token_dim;
  if (tokens.token_dim != seq.token_dim) {
    throw SequenceError("append_image: token_dim " + std::to_string(tokens.token_dim) + " differs from sequence token_dim " +
                        std::to_string(seq.token_dim));
  }
  if (tokens.data.size() != tokens.rows * tokens.cols * tokens.token_dim) {
    throw SequenceError("append_image: token grid data does not match its declared shape");
  }
  append_ids(seq, vocab, image_header_ids(vocab, tokens.rows, tokens.cols));
  seq.image_spans.push_back({seq.elements.size(), tokens.rows, tokens.cols});
  for (std::size_t i = 0; i < tokens.rows * tokens.cols; ++i) {
    auto first = tokens.data.begin() + static_cast<std::ptrdiff_t>(i * tokens.token_dim);
    seq.elements.emplace_back(ImageToken{{first, first + static_cast<std::ptrdiff_t>(tokens.token_dim)}});
  }
  seq.elements.emplace_back(SpecialToken{token::kEoi});
}

MultimodalSequence build_sequence(const Vocabulary& vocab, const std::vector<int>& caption_ids,
                                  const TokenGrid& image_tokens, std::size_t expected_token_dim) {
  if (image_tokens.token_dim != expected_token_dim) {
    throw SequenceError("build_sequence: token_dim " + std::to_string(image_tokens.token_dim) +
                        " does not match model token_dim " + std::to_string(expected_token_dim));
  }
  MultimodalSequence seq;
  seq.token_dim = expected_token_dim;
  append_ids(seq, vocab, caption_ids);
  append_image(seq, vocab, image_tokens);
  return seq;
}

ParsedSequence parse_sequence(const MultimodalSequence& seq, const Vocabulary& vocab) {
  ParsedSequence out;
  out.texts.emplace_back();
  const auto& el = seq.elements;
  std::size_t i = 0;
  auto read_number = [&](std::size_t& pos) {
    std::size_t n = 0;
    std::size_t digits = 0;
    while (pos < el.size() && vocab.is_digit(element_id(el[pos]))) {
      n = n * 10 + static_cast<std::size_t>(element_id(el[pos]) - token::kDigit0);
      ++pos;
      ++digits;
    }
    if (digits == 0) throw SequenceError("parse_sequence: expected digits in image area at " + std::to_string(pos));
    return n;
  };
  while (i < el.size()) {
    const int id = element_id(el[i]);
    if (id == token::kImageArea) {
      ++i;
      const std::size_t rows = read_number(i);
      if (i >= el.size() || element_id(el[i]) != token::kStar) throw SequenceError("parse_sequence: expected '*' in image area");
      ++i;
      const std::size_t cols = read_number(i);
      if (i >= el.size() || element_id(el[i]) != token::kBoi) throw SequenceError("parse_sequence: expected <boi>");
      ++i;
      TokenGrid grid(rows, cols, seq.token_dim);
      for (std::size_t k = 0; k < rows * cols; ++k, ++i) {
        if (i >= el.size() || !is_image(el[i])) throw SequenceError("parse_sequence: image block shorter than its declared area");
        const auto& v = std::get<ImageToken>(el[i]).values;
        if (v.size() != seq.token_dim) throw SequenceError("parse_sequence: image token has wrong dimension");
        std::copy(v.begin(), v.end(), grid.data.begin() + static_cast<std::ptrdiff_t>(k * seq.token_dim));
      }
      if (i >= el.size() || element_id(el[i]) != token::kEoi) throw SequenceError("parse_sequence: expected <eoi> after image tokens");
      ++i;
      out.images.push_back(std::move(grid));
      out.texts.emplace_back();
    } else if (id < 0) {
      throw SequenceError("parse_sequence: image token outside an image block at " + std::to_string(i));
    } else if (id == token::kBoi || id == token::kEoi) {
      throw SequenceError("parse_sequence: unexpected image delimiter at " + std::to_string(i));
    } else {
      out.texts.back().push_back(id);
      ++i;
    }
  }
  return out;
}

}  // namespace arcflow
