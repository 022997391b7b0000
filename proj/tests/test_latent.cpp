#include <cmath>
#include <random>
#include <vector>

#include "arcflow/latent.hpp"
#include "doctest.h"

using namespace arcflow;

namespace {

LatentGrid random_grid(std::size_t h, std::size_t w, std::size_t c, std::mt19937_64& rng, double mean = 0.0,
                       double sd = 1.0) {
  std::normal_distribution<double> d(mean, sd);
  LatentGrid g(h, w, c);
  for (auto& v : g.data) v = static_cast<float>(d(rng));
  return g;
}

// Per-channel pooled mean and population std, computed independently in double.
void measure(const std::vector<LatentGrid>& grids, std::size_t ch, double& mean, double& sd) {
  double s = 0, ss = 0, n = 0;
  for (const auto& g : grids)
    for (std::size_t i = ch; i < g.data.size(); i += g.channels) {
      s += g.data[i];
      n += 1;
    }
  mean = s / n;
  for (const auto& g : grids)
    for (std::size_t i = ch; i < g.data.size(); i += g.channels) ss += (g.data[i] - mean) * (g.data[i] - mean);
  sd = std::sqrt(ss / n);
}

}  // namespace

TEST_CASE("channel stats") {
  SUBCASE("constant channel is clamped to the floor") {
    LatentGrid g(1, 1, 2);
    g.data = {3.0f, 3.0f};
    const std::vector<LatentGrid> grids{g};
    const ChannelStats s = compute_channel_stats(grids);
    CHECK(s.means[0] == 3.0f);
    CHECK(s.stds[0] == kStdFloor);
    CHECK(s.degenerate == std::vector<std::size_t>{0, 1});
  }
  SUBCASE("symmetric values give mean 0 and std 1") {
    LatentGrid a(1, 2, 1), b(1, 2, 1);
    a.data = {-1.0f, 1.0f};
    b.data = {1.0f, -1.0f};
    const std::vector<LatentGrid> grids{a, b};
    const ChannelStats s = compute_channel_stats(grids);
    CHECK(s.means[0] == 0.0f);
    CHECK(s.stds[0] == doctest::Approx(1.0).epsilon(1e-7));
    CHECK(s.degenerate.empty());
  }
  SUBCASE("monte carlo normal(2, 9)") {
    std::mt19937_64 rng(7);
    std::vector<LatentGrid> grids;
    for (int i = 0; i < 1000; ++i) grids.push_back(random_grid(2, 2, 3, rng, 2.0, 3.0));
    const ChannelStats s = compute_channel_stats(grids);
    for (std::size_t c = 0; c < 3; ++c) {
      CHECK(std::abs(s.means[c] - 2.0) < 0.2);
      CHECK(std::abs(s.stds[c] - 3.0) < 0.2);
    }
  }
  SUBCASE("errors") {
    CHECK_THROWS_AS(compute_channel_stats(std::vector<LatentGrid>{}), LatentError);
    const std::vector<LatentGrid> mixed{LatentGrid(1, 1, 2), LatentGrid(1, 1, 3)};
    CHECK_THROWS_AS(compute_channel_stats(mixed), LatentError);
  }
}

TEST_CASE("normalize and denormalize") {
  ChannelStats unit{{0.0f, 0.0f}, {1.0f, 1.0f}, {}};
  std::mt19937_64 rng(3);
  const LatentGrid g = random_grid(3, 3, 2, rng);
  CHECK(normalize(g, unit) == g);

  ChannelStats s{{3.0f}, {2.0f}, {}};
  LatentGrid one(1, 1, 1);
  one.data = {5.0f};
  CHECK(normalize(one, s).data[0] == 1.0f);
  one.data = {1.0f};
  CHECK(denormalize(one, s).data[0] == 5.0f);

  CHECK_THROWS_AS(normalize(g, s), LatentError);
  CHECK_THROWS_AS(denormalize(g, s), LatentError);
}

TEST_CASE("normalize round trip over random stats") {
  std::mt19937_64 rng(11);
  std::uniform_real_distribution<double> mean(-5.0, 5.0), sd(1e-3, 10.0);
  double worst = 0.0;
  for (int trial = 0; trial < 1000; ++trial) {
    const LatentGrid g = random_grid(2, 2, 3, rng, 0.0, 4.0);
    ChannelStats s;
    for (int c = 0; c < 3; ++c) {
      s.means.push_back(static_cast<float>(mean(rng)));
      s.stds.push_back(static_cast<float>(sd(rng)));
    }
    const LatentGrid back = denormalize(normalize(g, s), s);
    for (std::size_t i = 0; i < g.data.size(); ++i) worst = std::max(worst, double(std::abs(back.data[i] - g.data[i])));
  }
  CHECK(worst < 1e-4);
}

TEST_CASE("normalizing a corpus by its own stats standardizes it") {
  std::mt19937_64 rng(5);
  std::vector<LatentGrid> grids;
  for (int i = 0; i < 200; ++i) grids.push_back(random_grid(4, 4, 4, rng, 1.5, 0.7));
  const ChannelStats s = compute_channel_stats(grids);
  std::vector<LatentGrid> normed;
  for (const auto& g : grids) normed.push_back(normalize(g, s));
  for (std::size_t c = 0; c < 4; ++c) {
    double m, sd;
    measure(normed, c, m, sd);
    CHECK(std::abs(m) < 1e-5);
    CHECK(std::abs(sd - 1.0) < 1e-4);
  }
}

TEST_CASE("perturb") {
  std::mt19937_64 rng(9);
  const LatentGrid g = random_grid(4, 4, 2, rng);
  CHECK(perturb(g, {0.0f, 1}) == g);
  CHECK(perturb(g, {0.5f, 1}) != g);
  CHECK(perturb(g, {0.5f, 1}) == perturb(g, {0.5f, 1}));
  CHECK_THROWS_AS(perturb(g, {-0.1f, 1}), LatentError);
}

TEST_CASE("perturb adds noise with variance gamma^2 / 3") {
  // One alpha per grid, so each grid contributes one alpha draw.
  std::mt19937_64 rng(21);
  const LatentGrid g = random_grid(1, 1, 4, rng);
  double s = 0, ss = 0, n = 0;
  for (std::uint64_t seed = 0; seed < 100000; ++seed) {
    const LatentGrid p = perturb(g, {0.5f, seed});
    for (std::size_t i = 0; i < g.data.size(); ++i) {
      const double d = double(p.data[i]) - double(g.data[i]);
      s += d;
      ss += d * d;
      n += 1;
    }
  }
  const double var = ss / n - (s / n) * (s / n);
  CHECK(std::abs(var - 0.25 / 3.0) < 0.005);
}

TEST_CASE("space to depth") {
  LatentGrid g(2, 2, 1);
  g.data = {1, 2, 3, 4};
  const TokenGrid t = space_to_depth(g);
  CHECK(t.rows == 1);
  CHECK(t.cols == 1);
  CHECK(t.token_dim == 4);
  CHECK(t.data == std::vector<float>{1, 2, 3, 4});
  CHECK(depth_to_space(t) == g);

  const TokenGrid big = space_to_depth(LatentGrid(32, 32, 16));
  CHECK(big.rows == 16);
  CHECK(big.cols == 16);
  CHECK(big.token_dim == 64);
  CHECK(depth_to_space(big) == LatentGrid(32, 32, 16));

  // Fixed order (2r,2c), (2r,2c+1), (2r+1,2c), (2r+1,2c+1), each full channel vector.
  LatentGrid two(2, 4, 2);
  for (std::size_t i = 0; i < two.data.size(); ++i) two.data[i] = float(i);
  const TokenGrid tt = space_to_depth(two);
  const auto tok = tt.token(0, 1);
  const std::vector<float> want{two.at(0, 2, 0), two.at(0, 2, 1), two.at(0, 3, 0), two.at(0, 3, 1),
                                two.at(1, 2, 0), two.at(1, 2, 1), two.at(1, 3, 0), two.at(1, 3, 1)};
  CHECK(std::vector<float>(tok.begin(), tok.end()) == want);

  CHECK_THROWS_AS(space_to_depth(LatentGrid(3, 2, 1)), LatentError);
  CHECK_THROWS_AS(space_to_depth(LatentGrid(2, 5, 1)), LatentError);
  CHECK_THROWS_AS(depth_to_space(TokenGrid(1, 1, 6)), LatentError);
}

TEST_CASE("shuffle round trips are bit exact") {
  std::mt19937_64 rng(17);
  for (int i = 0; i < 50; ++i) {
    const LatentGrid g = random_grid(8, 8, 4, rng);
    CHECK(depth_to_space(space_to_depth(g)) == g);
  }
  const LatentGrid big = random_grid(32, 32, 16, rng);
  const TokenGrid t = space_to_depth(big);
  CHECK(space_to_depth(depth_to_space(t)) == t);
  CHECK(depth_to_space(t) == big);
}

TEST_CASE("flatten tokens") {
  std::mt19937_64 rng(2);
  const TokenGrid t = space_to_depth(random_grid(32, 32, 16, rng));
  const auto flat = flatten_tokens(t);
  CHECK(flat.size() == 256);
  CHECK(flat[17] == std::vector<float>(t.token(1, 1).begin(), t.token(1, 1).end()));
  CHECK(unflatten_tokens(flat, 16, 16) == t);
  CHECK(flatten_tokens(TokenGrid(1, 1, 4)).size() == 1);
  CHECK_THROWS_AS(unflatten_tokens(flat, 4, 4), LatentError);
}

TEST_CASE("patchify") {
  Image img(256, 256);
  CHECK(patchify_image(img, 8) == LatentGrid(32, 32, 192));

  std::mt19937_64 rng(4);
  std::uniform_real_distribution<float> u(0.0f, 1.0f);
  for (auto& v : img.data) v = u(rng);
  const LatentGrid z = patchify_image(img, 8);
  CHECK(z.height == 32);
  CHECK(z.width == 32);
  CHECK(z.channels == 192);
  CHECK(unpatchify_image(z, 8) == img);
  CHECK_THROWS_AS(patchify_image(Image(30, 32), 8), LatentError);
}

TEST_CASE("patch tokenizer") {
  SUBCASE("projection rows are orthonormal") {
    const PatchTokenizer tok(TokenizerConfig{});
    const auto& p = tok.projection();
    const std::size_t dim = tok.patch_dim(), ch = tok.config().channels;
    REQUIRE(p.size() == ch * dim);
    for (std::size_t i = 0; i < ch; ++i)
      for (std::size_t j = 0; j < ch; ++j) {
        double dot = 0;
        for (std::size_t k = 0; k < dim; ++k) dot += p[i * dim + k] * p[j * dim + k];
        CHECK(dot == doctest::Approx(i == j ? 1.0 : 0.0).epsilon(1e-12).scale(1.0));
      }
  }
  SUBCASE("desk geometry: 32x32 image to 16 tokens of 64 channels") {
    const PatchTokenizer tok(TokenizerConfig{});
    const LatentGrid z = tok.encode(Image(32, 32));
    CHECK(z.height == 8);
    CHECK(z.channels == 16);
    const TokenGrid t = space_to_depth(z);
    CHECK(t.rows * t.cols == 16);
    CHECK(t.token_dim == 64);
  }
  SUBCASE("decode inverts encode on the projection's row space") {
    const PatchTokenizer tok(TokenizerConfig{});
    std::mt19937_64 rng(8);
    LatentGrid z = random_grid(8, 8, 16, rng);
    const LatentGrid again = tok.encode(tok.decode(z));
    for (std::size_t i = 0; i < z.data.size(); ++i) CHECK(again.data[i] == doctest::Approx(z.data[i]).epsilon(1e-5));
  }
  SUBCASE("identity projection is lossless") {
    TokenizerConfig cfg;
    cfg.projection = ProjectionKind::kIdentity;
    cfg.channels = 48;
    const PatchTokenizer tok(cfg);
    Image img(16, 16);
    std::mt19937_64 rng(6);
    std::uniform_real_distribution<float> u(0.0f, 1.0f);
    for (auto& v : img.data) v = u(rng);
    CHECK(tok.decode(tok.encode(img)) == img);
  }
  SUBCASE("bad configs") {
    TokenizerConfig cfg;
    cfg.channels = 49;
    CHECK_THROWS_AS(PatchTokenizer{cfg}, LatentError);
    cfg.channels = 16;
    cfg.projection = ProjectionKind::kIdentity;
    CHECK_THROWS_AS(PatchTokenizer{cfg}, LatentError);
  }
}

TEST_CASE("image to tokens and back") {
  const PatchTokenizer tok(TokenizerConfig{});
  std::mt19937_64 rng(12);
  std::uniform_real_distribution<float> u(0.0f, 1.0f);
  std::vector<Image> imgs(8, Image(32, 32));
  std::vector<LatentGrid> latents;
  for (auto& im : imgs) {
    for (auto& v : im.data) v = u(rng);
    latents.push_back(tok.encode(im));
  }
  const ChannelStats stats = compute_channel_stats(latents);
  const Image& im = imgs[0];
  const TokenGrid t = image_to_tokens(tok, stats, im);
  CHECK(t.data.size() == 16 * 64);
  // Round trip equals the projection of the image onto the tokenizer's row space.
  const Image back = tokens_to_image(tok, stats, t);
  const Image proj = tok.decode(tok.encode(im));
  for (std::size_t i = 0; i < im.data.size(); ++i) CHECK(back.data[i] == doctest::Approx(proj.data[i]).epsilon(1e-4));
}
