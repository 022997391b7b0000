#include <random>
#include <sstream>

#include "arcflow/sequence.hpp"
#include "doctest.h"

using namespace arcflow;

namespace {

TokenGrid random_tokens(std::size_t rows, std::size_t cols, std::size_t dim, unsigned seed) {
  TokenGrid t(rows, cols, dim);
  std::mt19937_64 rng(seed);
  std::normal_distribution<float> d(0.0f, 1.0f);
  for (auto& v : t.data) v = d(rng);
  return t;
}

std::size_t count_images(const MultimodalSequence& s) {
  std::size_t n = 0;
  for (const auto& e : s.elements) n += is_image(e);
  return n;
}

}  // namespace

TEST_CASE("vocabulary") {
  const Vocabulary v = Vocabulary::standard();
  CHECK(v.tokenize("").empty());
  // Frozen table: 6 specials, '*', ten digits, then the grammar words in order.
  CHECK(v.tokenize("red circle") == std::vector<int>{30, 39});
  CHECK(v.token(token::kBoi) == "<boi>");
  CHECK(v.token(token::kEoi) == "<eoi>");
  CHECK(v.token(token::kImageArea) == "<image_area>");
  CHECK(v.token(token::kStar) == "*");
  CHECK(v.token(v.digit(7)) == "7");
  for (const auto& w : grammar_words()) CHECK_FALSE(v.is_special(v.id(w)));

  const std::string s = "a large red circle at the left on a black background";
  CHECK(v.detokenize(v.tokenize(s)) == s);
  CHECK_THROWS_AS(v.tokenize("a purple circle"), VocabError);
  CHECK_THROWS_AS(v.token(int(v.size())), VocabError);

  const Vocabulary padded = Vocabulary::standard(128);
  CHECK(padded.size() == 128);
  CHECK(padded.tokenize("red circle") == v.tokenize("red circle"));
  CHECK_THROWS_AS(Vocabulary::standard(10), VocabError);

  std::stringstream io;
  padded.write(io);
  CHECK(Vocabulary::read(io) == padded);
}

TEST_CASE("build sequence") {
  const Vocabulary v = Vocabulary::standard();
  const auto caption = v.tokenize("a red square");

  const MultimodalSequence s = build_sequence(v, caption, random_tokens(4, 4, 64, 1), 64);
  CHECK(count_images(s) == 16);
  REQUIRE(s.image_spans.size() == 1);
  CHECK(s.image_spans[0] == ImageSpan{caption.size() + 5, 4, 4});
  // caption, <image_area> 4 * 4 <boi>, 16 tokens, <eoi>
  CHECK(s.size() == caption.size() + 5 + 16 + 1);
  CHECK(element_id(s.elements[caption.size()]) == token::kImageArea);
  CHECK(element_id(s.elements[caption.size() + 4]) == token::kBoi);
  CHECK(element_id(s.elements.back()) == token::kEoi);
  CHECK(std::holds_alternative<SpecialToken>(s.elements.back()));
  CHECK(std::holds_alternative<TextToken>(s.elements[caption.size() + 1]));

  const MultimodalSequence big = build_sequence(v, caption, random_tokens(16, 16, 64, 2), 64);
  CHECK(count_images(big) == 256);
  // two-digit dimensions
  CHECK(big.size() == caption.size() + 7 + 256 + 1);

  CHECK_THROWS_AS(build_sequence(v, caption, random_tokens(4, 4, 32, 3), 64), SequenceError);
}

TEST_CASE("parse sequence inverts build sequence") {
  const Vocabulary v = Vocabulary::standard();
  const auto caption = v.tokenize("the blue diamond");
  const TokenGrid grid = random_tokens(3, 5, 8, 4);
  MultimodalSequence s = build_sequence(v, caption, grid, 8);
  append_ids(s, v, v.tokenize("then a circle"));
  append_image(s, v, random_tokens(2, 2, 8, 5));

  const ParsedSequence p = parse_sequence(s, v);
  REQUIRE(p.images.size() == 2);
  CHECK(p.images[0] == grid);
  CHECK(p.texts.front() == caption);
  CHECK(p.texts[1] == v.tokenize("then a circle"));

  SUBCASE("short image block") {
    MultimodalSequence bad = build_sequence(v, caption, grid, 8);
    bad.elements.erase(bad.elements.end() - 2);
    CHECK_THROWS_AS(parse_sequence(bad, v), SequenceError);
  }
  SUBCASE("stray image token") {
    MultimodalSequence bad;
    bad.token_dim = 8;
    bad.elements.emplace_back(ImageToken{std::vector<float>(8, 0.0f)});
    CHECK_THROWS_AS(parse_sequence(bad, v), SequenceError);
  }
  SUBCASE("mismatched token dims") {
    MultimodalSequence bad = build_sequence(v, caption, grid, 8);
    CHECK_THROWS_AS(append_image(bad, v, random_tokens(1, 1, 4, 6)), SequenceError);
  }
}
