#pragma once

// Tokenizer-side latent math: channel statistics, normalization, noise
// perturbation, 2x2 space-to-depth shuffle, token flattening and the
// analytic patch tokenizer that stands in for a learned VAE.

#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace arcflow {

struct LatentError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

/// H x W x C grid of latents in (row, column, channel) order.
struct LatentGrid {
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t channels = 0;
  std::vector<float> data;

  LatentGrid() = default;
  LatentGrid(std::size_t h, std::size_t w, std::size_t c)
      : height(h), width(w), channels(c), data(h * w * c, 0.0f) {}

  float& at(std::size_t r, std::size_t col, std::size_t ch) {
    return data[(r * width + col) * channels + ch];
  }
  float at(std::size_t r, std::size_t col, std::size_t ch) const {
    return data[(r * width + col) * channels + ch];
  }
  bool operator==(const LatentGrid&) const = default;
};

struct ChannelStats {
  std::vector<float> means;
  std::vector<float> stds;
  /// Channels whose empirical std fell below the floor and were clamped.
  std::vector<std::size_t> degenerate;
};

inline constexpr float kStdFloor = 1e-6f;

struct PerturbationSpec {
  float gamma = 0.0f;
  std::uint64_t seed = 0;
};

/// rows x cols grid of token vectors, each token_dim wide.
struct TokenGrid {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::size_t token_dim = 0;
  std::vector<float> data;

  TokenGrid() = default;
  TokenGrid(std::size_t r, std::size_t c, std::size_t d)
      : rows(r), cols(c), token_dim(d), data(r * c * d, 0.0f) {}

  std::span<const float> token(std::size_t r, std::size_t c) const {
    return std::span<const float>(data).subspan((r * cols + c) * token_dim, token_dim);
  }
  bool operator==(const TokenGrid&) const = default;
};

/// Pooled per-channel mean/std over every position of every grid. Statistics
/// are accumulated in double. Channels with std below kStdFloor are clamped
/// to the floor and listed in ChannelStats::degenerate.
ChannelStats compute_channel_stats(std::span<const LatentGrid> grids);

LatentGrid normalize(const LatentGrid& grid, const ChannelStats& stats);
LatentGrid denormalize(const LatentGrid& grid, const ChannelStats& stats);

/// z + alpha * eps with one alpha ~ U[0, gamma] per grid and eps ~ N(0, I)
/// per element.
LatentGrid perturb(const LatentGrid& grid, const PerturbationSpec& spec);

TokenGrid space_to_depth(const LatentGrid& grid);
LatentGrid depth_to_space(const TokenGrid& tokens);

std::vector<std::vector<float>> flatten_tokens(const TokenGrid& tokens);
TokenGrid unflatten_tokens(std::span<const std::vector<float>> tokens, std::size_t rows,
                           std::size_t cols);

/// H x W x 3 image, values nominally in [0, 1].
struct Image {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<float> data;

  Image() = default;
  Image(std::size_t h, std::size_t w) : height(h), width(w), data(h * w * 3, 0.0f) {}

  float& at(std::size_t r, std::size_t c, std::size_t ch) { return data[(r * width + c) * 3 + ch]; }
  float at(std::size_t r, std::size_t c, std::size_t ch) const {
    return data[(r * width + c) * 3 + ch];
  }
  bool operator==(const Image&) const = default;
};

enum class ProjectionKind {
  /// Patch pixels flattened in (row, column, color) order; no arithmetic.
  kIdentity,
  /// Orthonormal rows: per-color quadrant means first, then seeded random
  /// rows completing the basis.
  kBlockMeanRandom,
};

struct TokenizerConfig {
  std::size_t patch = 4;
  std::size_t channels = 16;
  ProjectionKind projection = ProjectionKind::kBlockMeanRandom;
  std::uint64_t seed = 1234;
};

/// Lossless-when-identity linear patch tokenizer. Encoding is
/// z = P * patch_pixels, decoding is patch_pixels = P^T * z, where P has
/// orthonormal rows (so P^T is its pseudo-inverse).
class PatchTokenizer {
 public:
  explicit PatchTokenizer(TokenizerConfig config);

  const TokenizerConfig& config() const { return config_; }
  std::size_t patch_dim() const { return config_.patch * config_.patch * 3; }
  /// channels x patch_dim, row-major. Empty for the identity projection.
  const std::vector<double>& projection() const { return projection_; }

  LatentGrid encode(const Image& image) const;
  Image decode(const LatentGrid& latents) const;

 private:
  TokenizerConfig config_;
  std::vector<double> projection_;
};

/// Flattens each patch x patch x 3 block into one latent position with
/// patch*patch*3 channels.
LatentGrid patchify_image(const Image& image, std::size_t patch);
Image unpatchify_image(const LatentGrid& latents, std::size_t patch);

/// Full encode path used for training targets: encode, normalize, shuffle.
TokenGrid image_to_tokens(const PatchTokenizer& tokenizer, const ChannelStats& stats,
                          const Image& image);
/// Inverse path: depth_to_space, denormalize, decode.
Image tokens_to_image(const PatchTokenizer& tokenizer, const ChannelStats& stats,
                      const TokenGrid& tokens);

}  // namespace arcflow
