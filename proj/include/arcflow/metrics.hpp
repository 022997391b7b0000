#pragma once

#include <filesystem>
#include <iosfwd>
#include <span>
#include <vector>

#include "arcflow/latent.hpp"

namespace arcflow {

/// Returned by psnr() for identical images.
inline constexpr double kPsnrCap = 100.0;

/// 10 log10(1 / MSE) over all pixels and colors, capped at kPsnrCap.
double psnr(const Image& a, const Image& b);

/// Mean SSIM over all valid 11x11 windows (Gaussian, sigma 1.5) of the
/// Rec. 601 luma, K1 = 0.01, K2 = 0.03, dynamic range 1.
double ssim(const Image& a, const Image& b);

/// Rec. 601 luma plane, row-major.
std::vector<double> to_luma(const Image& image);

struct HistogramBin {
  std::size_t channel = 0;
  double left = 0.0;
  double right = 0.0;
  std::size_t count = 0;
};

struct LatentHistogram {
  std::vector<HistogramBin> bins;  // channel-major, then left-to-right
  std::vector<std::size_t> out_of_range;  // per channel
};

/// Per-channel histogram over [-range, range) with `bins` equal bins.
/// Values outside the range are tallied in out_of_range, not clamped.
LatentHistogram latent_histogram(std::span<const LatentGrid> grids, std::size_t bins, double range = 4.0);

/// CSV with header `channel,bin_left,bin_right,count`.
void write_histogram_csv(std::ostream& out, const LatentHistogram& histogram);

/// Binary PPM (P6, maxval 255).
void write_ppm(const std::filesystem::path& path, const Image& image);
Image read_ppm(const std::filesystem::path& path);
/// Values are clamped to [0, 1] and rounded to 8 bits.
Image quantize_8bit(const Image& image);

}  // namespace arcflow
