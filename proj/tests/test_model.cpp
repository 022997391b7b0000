#include <cmath>
#include <random>

#include "arcflow/model.hpp"
#include "doctest.h"

using namespace arcflow;

namespace {

ModelConfig small_config() {
  ModelConfig c;
  c.layers = 2;
  c.model_dim = 32;
  c.heads = 2;
  c.ffn_dim = 64;
  c.vocab_size = Vocabulary::standard().size();
  c.max_seq_len = 64;
  c.token_dim = 8;
  c.init_std = 0.2;
  return c;
}

FMHeadConfig head_for(const ModelConfig& c) {
  FMHeadConfig h;
  h.layers = 1;
  h.hidden = 16;
  h.cond_dim = c.model_dim;
  h.token_dim = c.token_dim;
  h.time_dim = 8;
  return h;
}

// Random mix of text ids and image tokens.
MultimodalSequence random_sequence(std::size_t n, std::size_t token_dim, std::size_t vocab, unsigned seed) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> id(0, int(vocab) - 1);
  std::normal_distribution<float> d(0.0f, 1.0f);
  MultimodalSequence s;
  s.token_dim = token_dim;
  for (std::size_t i = 0; i < n; ++i) {
    if (rng() % 3 == 0) {
      ImageToken t;
      for (std::size_t j = 0; j < token_dim; ++j) t.values.push_back(d(rng));
      s.elements.emplace_back(t);
    } else {
      s.elements.emplace_back(TextToken{id(rng)});
    }
  }
  return s;
}

template <typename T>
double cache_gap(const Model<T>& m, const MultimodalSequence& seq) {
  const Matrix<T> full = forward(m.backbone, m.config, seq);
  KVCache<T> cache(m.config);
  double worst = 0.0;
  for (std::size_t i = 0; i < seq.size(); ++i) {
    const auto h = forward_step(m.backbone, m.config, seq.elements[i], cache);
    REQUIRE(cache.length == i + 1);
    for (std::size_t j = 0; j < h.size(); ++j) worst = std::max(worst, std::abs(double(h[j]) - double(full(i, j))));
  }
  return worst;
}

}  // namespace

TEST_CASE("rope") {
  std::mt19937_64 rng(1);
  std::normal_distribution<double> d(0.0, 1.0);
  std::vector<double> q(16), k(16);
  for (auto& v : q) v = d(rng);
  for (auto& v : k) v = d(rng);

  auto at = [](std::vector<double> v, std::size_t pos) {
    apply_rope<double>(v, pos, 10000.0);
    return v;
  };
  auto dot = [](const std::vector<double>& a, const std::vector<double>& b) {
    double s = 0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
  };

  CHECK(at(q, 0) == q);
  for (std::size_t pos : {1u, 7u, 100u, 4000u}) CHECK(std::sqrt(dot(at(q, pos), at(q, pos))) == doctest::Approx(std::sqrt(dot(q, q))).epsilon(1e-6));
  for (std::size_t m : {0u, 3u, 20u})
    for (std::size_t n : {0u, 5u, 31u})
      for (std::size_t s : {1u, 9u, 250u}) CHECK(std::abs(dot(at(q, m), at(k, n)) - dot(at(q, m + s), at(k, n + s))) < 1e-5);

  // First pair rotates by exactly `position` radians.
  std::vector<double> e{1, 0, 0, 0};
  const auto r = at(e, 2);
  CHECK(r[0] == doctest::Approx(std::cos(2.0)));
  CHECK(r[1] == doctest::Approx(std::sin(2.0)));

  std::vector<double> odd(5, 1.0);
  CHECK_THROWS_AS(apply_rope<double>(odd, 1, 10000.0), ModelError);
}

TEST_CASE("embed") {
  const ModelConfig c = small_config();
  const Model<double> m = make_model<double>(c, head_for(c), 3);
  const Vocabulary v = Vocabulary::standard();

  const MultimodalSequence empty;
  CHECK(embed(m.backbone, c, pack_sequences<double>(std::span(&empty, 1), c.token_dim)).rows == 0);

  MultimodalSequence s;
  s.token_dim = c.token_dim;
  s.elements.emplace_back(TextToken{v.id("red")});
  s.elements.emplace_back(ImageToken{std::vector<float>(c.token_dim, 0.0f)});
  const Matrix<double> x = embed(m.backbone, c, pack_sequences<double>(std::span(&s, 1), c.token_dim));
  REQUIRE(x.rows == 2);
  for (std::size_t j = 0; j < c.model_dim; ++j) {
    CHECK(x(0, j) == m.backbone.tok_emb.row(std::size_t(v.id("red")))[j]);
    CHECK(x(1, j) == m.backbone.img_b.data[j]);
  }

  MultimodalSequence bad;
  bad.elements.emplace_back(TextToken{int(c.vocab_size)});
  CHECK_THROWS_AS(embed(m.backbone, c, pack_sequences<double>(std::span(&bad, 1), c.token_dim)), ModelError);
}

TEST_CASE("parameters are finite and initialized as documented") {
  const ModelConfig c = small_config();
  const Model<float> m = make_model<float>(c, head_for(c), 4);
  m.for_each([](const Tensor<float>& t) {
    for (float v : t.data) REQUIRE(std::isfinite(v));
  });
  for (float g : m.backbone.final_norm.data) CHECK(g == 1.0f);
  for (float b : m.backbone.img_b.data) CHECK(b == 0.0f);
  CHECK(make_model<float>(c, head_for(c), 4).backbone.tok_emb.data == m.backbone.tok_emb.data);
}

TEST_CASE("causal masking is bit exact") {
  const ModelConfig c = small_config();
  const Model<float> m = make_model<float>(c, head_for(c), 5);
  const MultimodalSequence seq = random_sequence(40, c.token_dim, c.vocab_size, 6);
  const Matrix<float> base = forward(m.backbone, c, seq);
  for (std::size_t j : {0u, 1u, 17u, 39u}) {
    MultimodalSequence edited = seq;
    edited.elements[j] = is_image(seq.elements[j]) ? SequenceElement(TextToken{2})
                                                   : SequenceElement(ImageToken{std::vector<float>(c.token_dim, 0.5f)});
    const Matrix<float> h = forward(m.backbone, c, edited);
    for (std::size_t i = 0; i < j; ++i)
      for (std::size_t d = 0; d < c.model_dim; ++d) REQUIRE(h(i, d) == base(i, d));
    bool changed = false;
    for (std::size_t d = 0; d < c.model_dim; ++d) changed |= h(j, d) != base(j, d);
    CHECK(changed);
  }
}

TEST_CASE("forward on one element") {
  const ModelConfig c = small_config();
  const Model<float> m = make_model<float>(c, head_for(c), 7);
  const MultimodalSequence one = random_sequence(1, c.token_dim, c.vocab_size, 8);
  const Matrix<float> h = forward(m.backbone, c, one);
  REQUIRE(h.rows == 1);
  for (float v : h.data) CHECK(std::isfinite(v));
  KVCache<float> cache(c);
  CHECK(forward_step(m.backbone, c, one.elements[0], cache) == std::vector<float>(h.data.begin(), h.data.end()));
}

TEST_CASE("kv cache matches full forward") {
  const ModelConfig c = small_config();
  const Model<float> mf = make_model<float>(c, head_for(c), 9);
  const Model<double> md = cast_model<double>(mf);
  for (unsigned seed = 10; seed < 13; ++seed) {
    const MultimodalSequence seq = random_sequence(64, c.token_dim, c.vocab_size, seed);
    CHECK(cache_gap(mf, seq) < 1e-4);
    CHECK(cache_gap(md, seq) < 1e-8);
  }
}

TEST_CASE("packed sequences do not attend across boundaries") {
  const ModelConfig c = small_config();
  const Model<double> m = make_model<double>(c, head_for(c), 14);
  const std::vector<MultimodalSequence> seqs{random_sequence(10, c.token_dim, c.vocab_size, 15),
                                             random_sequence(23, c.token_dim, c.vocab_size, 16)};
  const auto packed = pack_sequences<double>(std::span<const MultimodalSequence>(seqs), c.token_dim);
  const Matrix<double> h = backbone_forward(m.backbone, c, packed);
  for (std::size_t k = 0; k < 2; ++k) {
    const Matrix<double> alone = forward(m.backbone, c, seqs[k]);
    for (std::size_t i = 0; i < seqs[k].size(); ++i)
      for (std::size_t d = 0; d < c.model_dim; ++d)
        CHECK(h(packed.seg_start[k] + i, d) == doctest::Approx(alone(i, d)).epsilon(1e-12));
  }
}

TEST_CASE("length limits") {
  const ModelConfig c = small_config();
  const Model<float> m = make_model<float>(c, head_for(c), 17);
  CHECK_THROWS_AS(forward(m.backbone, c, random_sequence(65, c.token_dim, c.vocab_size, 18)), ModelError);
  KVCache<float> cache(c);
  const auto seq = random_sequence(64, c.token_dim, c.vocab_size, 19);
  for (const auto& e : seq.elements) forward_step(m.backbone, c, e, cache);
  CHECK_THROWS_AS(forward_step(m.backbone, c, seq.elements[0], cache), ModelError);
}
