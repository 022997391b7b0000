#include "arcflow/latent.hpp"

#include <cmath>
#include <iostream>
#include <random>

namespace arcflow {

namespace {

void check_channels(const LatentGrid& grid, const ChannelStats& stats) {
  if (stats.means.size() != grid.channels || stats.stds.size() != grid.channels) {
    throw LatentError("channel count mismatch: grid has " + std::to_string(grid.channels) +
                      ", stats have " + std::to_string(stats.means.size()));
  }
}

}  // namespace

ChannelStats compute_channel_stats(std::span<const LatentGrid> grids) {
  if (grids.empty()) throw LatentError("compute_channel_stats: no grids");
  const std::size_t channels = grids.front().channels;
  std::vector<double> sum(channels, 0.0);
  std::size_t count = 0;
  for (const auto& g : grids) {
    if (g.channels != channels) throw LatentError("compute_channel_stats: mismatched channel counts");
    for (std::size_t i = 0; i < g.data.size(); i += channels)
      for (std::size_t c = 0; c < channels; ++c) sum[c] += g.data[i + c];
    count += g.height * g.width;
  }
  if (count == 0) throw LatentError("compute_channel_stats: grids have no positions");

  ChannelStats stats;
  stats.means.resize(channels);
  stats.stds.resize(channels);
  std::vector<double> mean(channels);
  for (std::size_t c = 0; c < channels; ++c) mean[c] = sum[c] / static_cast<double>(count);

  // Two-pass variance for accuracy.
  std::vector<double> sq(channels, 0.0);
  for (const auto& g : grids)
    for (std::size_t i = 0; i < g.data.size(); i += channels)
      for (std::size_t c = 0; c < channels; ++c) {
        const double d = g.data[i + c] - mean[c];
        sq[c] += d * d;
      }
  for (std::size_t c = 0; c < channels; ++c) {
    stats.means[c] = static_cast<float>(mean[c]);
    double sd = std::sqrt(sq[c] / static_cast<double>(count));
    if (!(sd >= kStdFloor)) {
      sd = kStdFloor;
      stats.degenerate.push_back(c);
    }
    stats.stds[c] = static_cast<float>(sd);
  }
  if (!stats.degenerate.empty()) {
    std::cerr << "warning: " << stats.degenerate.size()
              << " latent channel(s) have (near-)zero variance; std clamped to " << kStdFloor << '\n';
  }
  return stats;
}

LatentGrid normalize(const LatentGrid& grid, const ChannelStats& stats) {
  check_channels(grid, stats);
  LatentGrid out = grid;
  const std::size_t ch = grid.channels;
  for (std::size_t i = 0; i < out.data.size(); ++i) {
    const std::size_t c = i % ch;
    out.data[i] = (grid.data[i] - stats.means[c]) / stats.stds[c];
  }
  return out;
}

LatentGrid denormalize(const LatentGrid& grid, const ChannelStats& stats) {
  check_channels(grid, stats);
  LatentGrid out = grid;
  const std::size_t ch = grid.channels;
  for (std::size_t i = 0; i < out.data.size(); ++i) {
    const std::size_t c = i % ch;
    out.data[i] = grid.data[i] * stats.stds[c] + stats.means[c];
  }
  return out;
}

LatentGrid perturb(const LatentGrid& grid, const PerturbationSpec& spec) {
  if (!(spec.gamma >= 0.0f)) throw LatentError("perturb: gamma must be >= 0");
  if (spec.gamma == 0.0f) return grid;
  std::mt19937_64 rng(spec.seed);
  std::uniform_real_distribution<float> uniform(0.0f, spec.gamma);
  std::normal_distribution<float> normal(0.0f, 1.0f);
  const float alpha = uniform(rng);
  LatentGrid out = grid;
  for (auto& v : out.data) v += alpha * normal(rng);
  return out;
}

TokenGrid space_to_depth(const LatentGrid& grid) {
  if (grid.height % 2 != 0 || grid.width % 2 != 0) {
    throw LatentError("space_to_depth: height and width must be even, got " +
                      std::to_string(grid.height) + "x" + std::to_string(grid.width));
  }
  const std::size_t c = grid.channels;
  TokenGrid out(grid.height / 2, grid.width / 2, 4 * c);
  for (std::size_t r = 0; r < out.rows; ++r) {
    for (std::size_t col = 0; col < out.cols; ++col) {
      float* dst = out.data.data() + (r * out.cols + col) * out.token_dim;
      // (2r,2c), (2r,2c+1), (2r+1,2c), (2r+1,2c+1)
      for (std::size_t q = 0; q < 4; ++q) {
        const std::size_t sr = 2 * r + q / 2;
        const std::size_t sc = 2 * col + q % 2;
        const float* src = grid.data.data() + (sr * grid.width + sc) * c;
        std::copy(src, src + c, dst + q * c);
      }
    }
  }
  return out;
}

LatentGrid depth_to_space(const TokenGrid& tokens) {
  if (tokens.token_dim % 4 != 0) {
    throw LatentError("depth_to_space: token_dim " + std::to_string(tokens.token_dim) +
                      " is not divisible by 4");
  }
  const std::size_t c = tokens.token_dim / 4;
  LatentGrid out(tokens.rows * 2, tokens.cols * 2, c);
  for (std::size_t r = 0; r < tokens.rows; ++r) {
    for (std::size_t col = 0; col < tokens.cols; ++col) {
      const float* src = tokens.data.data() + (r * tokens.cols + col) * tokens.token_dim;
      for (std::size_t q = 0; q < 4; ++q) {
        const std::size_t dr = 2 * r + q / 2;
        const std::size_t dc = 2 * col + q % 2;
        std::copy(src + q * c, src + (q + 1) * c, out.data.data() + (dr * out.width + dc) * c);
      }
    }
  }
  return out;
}

std::vector<std::vector<float>> flatten_tokens(const TokenGrid& tokens) {
  std::vector<std::vector<float>> out;
  out.reserve(tokens.rows * tokens.cols);
  for (std::size_t i = 0; i < tokens.rows * tokens.cols; ++i) {
    auto first = tokens.data.begin() + static_cast<std::ptrdiff_t>(i * tokens.token_dim);
    out.emplace_back(first, first + static_cast<std::ptrdiff_t>(tokens.token_dim));
  }
  return out;
}

TokenGrid unflatten_tokens(std::span<const std::vector<float>> tokens, std::size_t rows,
                           std::size_t cols) {
  if (tokens.size() != rows * cols) {
    throw LatentError("unflatten_tokens: expected " + std::to_string(rows * cols) + " tokens, got " +
                      std::to_string(tokens.size()));
  }
  const std::size_t dim = tokens.empty() ? 0 : tokens.front().size();
  TokenGrid out(rows, cols, dim);
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (tokens[i].size() != dim) throw LatentError("unflatten_tokens: ragged token dims");
    std::copy(tokens[i].begin(), tokens[i].end(), out.data.begin() + static_cast<std::ptrdiff_t>(i * dim));
  }
  return out;
}

LatentGrid patchify_image(const Image& image, std::size_t patch) {
  if (patch == 0 || image.height % patch != 0 || image.width % patch != 0) {
    throw LatentError("patchify: image " + std::to_string(image.height) + "x" +
                      std::to_string(image.width) + " not divisible by patch " + std::to_string(patch));
  }
  LatentGrid out(image.height / patch, image.width / patch, patch * patch * 3);
  for (std::size_t r = 0; r < out.height; ++r)
    for (std::size_t c = 0; c < out.width; ++c) {
      float* dst = out.data.data() + (r * out.width + c) * out.channels;
      for (std::size_t py = 0; py < patch; ++py) {
        const float* src = image.data.data() + ((r * patch + py) * image.width + c * patch) * 3;
        std::copy(src, src + patch * 3, dst + py * patch * 3);
      }
    }
  return out;
}

Image unpatchify_image(const LatentGrid& latents, std::size_t patch) {
  if (patch == 0 || latents.channels != patch * patch * 3) {
    throw LatentError("unpatchify: channel count " + std::to_string(latents.channels) +
                      " does not match patch " + std::to_string(patch));
  }
  Image out(latents.height * patch, latents.width * patch);
  for (std::size_t r = 0; r < latents.height; ++r)
    for (std::size_t c = 0; c < latents.width; ++c) {
      const float* src = latents.data.data() + (r * latents.width + c) * latents.channels;
      for (std::size_t py = 0; py < patch; ++py) {
        float* dst = out.data.data() + ((r * patch + py) * out.width + c * patch) * 3;
        std::copy(src + py * patch * 3, src + (py + 1) * patch * 3, dst);
      }
    }
  return out;
}

PatchTokenizer::PatchTokenizer(TokenizerConfig config) : config_(config) {
  const std::size_t p = config_.patch;
  const std::size_t dim = patch_dim();
  if (p == 0) throw LatentError("tokenizer: patch must be positive");
  if (config_.channels == 0 || config_.channels > dim) {
    throw LatentError("tokenizer: channels must be in [1, " + std::to_string(dim) + "]");
  }
  if (config_.projection == ProjectionKind::kIdentity) {
    if (config_.channels != dim) throw LatentError("tokenizer: identity projection needs channels == patch*patch*3");
    return;
  }

  std::vector<std::vector<double>> rows;
  auto index = [&](std::size_t y, std::size_t x, std::size_t color) { return (y * p + x) * 3 + color; };
  // Quadrant means per color (or whole-patch means when there is no room for quadrants).
  const bool quadrants = (p % 2 == 0) && config_.channels >= 12;
  const std::size_t blocks = quadrants ? 4 : 1;
  const std::size_t block = quadrants ? p / 2 : p;
  if (config_.channels >= 3 * blocks) {
    for (std::size_t color = 0; color < 3; ++color)
      for (std::size_t q = 0; q < blocks; ++q) {
        std::vector<double> row(dim, 0.0);
        const std::size_t y0 = (q / 2) * block;
        const std::size_t x0 = (q % 2) * block;
        const double w = 1.0 / static_cast<double>(block);  // unit norm over block*block entries
        for (std::size_t y = 0; y < block; ++y)
          for (std::size_t x = 0; x < block; ++x) row[index(y0 + y, x0 + x, color)] = w;
        rows.push_back(std::move(row));
      }
  }

  // Seeded Gaussian rows, Gram-Schmidt against everything before them.
  std::mt19937_64 rng(config_.seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  while (rows.size() < config_.channels) {
    std::vector<double> v(dim);
    for (auto& x : v) x = normal(rng);
    for (int pass = 0; pass < 2; ++pass)
      for (const auto& r : rows) {
        double dot = 0.0;
        for (std::size_t i = 0; i < dim; ++i) dot += v[i] * r[i];
        for (std::size_t i = 0; i < dim; ++i) v[i] -= dot * r[i];
      }
    double norm = 0.0;
    for (double x : v) norm += x * x;
    norm = std::sqrt(norm);
    if (norm < 1e-8) continue;
    for (auto& x : v) x /= norm;
    rows.push_back(std::move(v));
  }
  projection_.reserve(config_.channels * dim);
  for (const auto& r : rows) projection_.insert(projection_.end(), r.begin(), r.end());
}

LatentGrid PatchTokenizer::encode(const Image& image) const {
  LatentGrid flat = patchify_image(image, config_.patch);
  if (config_.projection == ProjectionKind::kIdentity) return flat;
  const std::size_t dim = patch_dim();
  LatentGrid out(flat.height, flat.width, config_.channels);
  for (std::size_t pos = 0; pos < flat.height * flat.width; ++pos) {
    const float* src = flat.data.data() + pos * dim;
    float* dst = out.data.data() + pos * config_.channels;
    for (std::size_t c = 0; c < config_.channels; ++c) {
      const double* row = projection_.data() + c * dim;
      double acc = 0.0;
      for (std::size_t i = 0; i < dim; ++i) acc += row[i] * src[i];
      dst[c] = static_cast<float>(acc);
    }
  }
  return out;
}

Image PatchTokenizer::decode(const LatentGrid& latents) const {
  if (latents.channels != config_.channels) {
    throw LatentError("tokenizer decode: expected " + std::to_string(config_.channels) + " channels, got " +
                      std::to_string(latents.channels));
  }
  if (config_.projection == ProjectionKind::kIdentity) return unpatchify_image(latents, config_.patch);
  const std::size_t dim = patch_dim();
  LatentGrid flat(latents.height, latents.width, dim);
  for (std::size_t pos = 0; pos < latents.height * latents.width; ++pos) {
    const float* src = latents.data.data() + pos * config_.channels;
    float* dst = flat.data.data() + pos * dim;
    for (std::size_t i = 0; i < dim; ++i) {
      double acc = 0.0;
      for (std::size_t c = 0; c < config_.channels; ++c) acc += projection_[c * dim + i] * src[c];
      dst[i] = static_cast<float>(acc);
    }
  }
  return unpatchify_image(flat, config_.patch);
}

TokenGrid image_to_tokens(const PatchTokenizer& tokenizer, const ChannelStats& stats, const Image& image) {
  return space_to_depth(normalize(tokenizer.encode(image), stats));
}

Image tokens_to_image(const PatchTokenizer& tokenizer, const ChannelStats& stats, const TokenGrid& tokens) {
  return tokenizer.decode(denormalize(depth_to_space(tokens), stats));
}

}  // namespace arcflow
