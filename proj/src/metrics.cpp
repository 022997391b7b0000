#include "arcflow/metrics.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <ostream>
#include <sstream>
#include <stdexcept>

namespace arcflow {

namespace {

void check_same_shape(const Image& a, const Image& b, const char* what) {
  if (a.height != b.height || a.width != b.width || a.data.size() != b.data.size()) {
    throw LatentError(std::string(what) + ": image shapes differ");
  }
}

constexpr int kWindow = 11;
constexpr double kSigma = 1.5;

std::vector<double> gaussian_window() {
  std::vector<double> w(kWindow);
  double sum = 0.0;
  for (int i = 0; i < kWindow; ++i) {
    const double x = i - kWindow / 2;
    w[i] = std::exp(-x * x / (2.0 * kSigma * kSigma));
    sum += w[i];
  }
  for (auto& v : w) v /= sum;
  return w;
}

// Separable valid-mode filtering: (H - 10) x (W - 10) output.
std::vector<double> filter_valid(const std::vector<double>& img, std::size_t h, std::size_t w,
                                 const std::vector<double>& win) {
  const std::size_t oh = h - kWindow + 1;
  const std::size_t ow = w - kWindow + 1;
  std::vector<double> tmp(h * ow, 0.0);
  for (std::size_t r = 0; r < h; ++r)
    for (std::size_t c = 0; c < ow; ++c) {
      double acc = 0.0;
      for (int k = 0; k < kWindow; ++k) acc += win[k] * img[r * w + c + k];
      tmp[r * ow + c] = acc;
    }
  std::vector<double> out(oh * ow, 0.0);
  for (std::size_t r = 0; r < oh; ++r)
    for (std::size_t c = 0; c < ow; ++c) {
      double acc = 0.0;
      for (int k = 0; k < kWindow; ++k) acc += win[k] * tmp[(r + k) * ow + c];
      out[r * ow + c] = acc;
    }
  return out;
}

}  // namespace

double psnr(const Image& a, const Image& b) {
  check_same_shape(a, b, "psnr");
  if (a.data.empty()) throw LatentError("psnr: empty images");
  double se = 0.0;
  for (std::size_t i = 0; i < a.data.size(); ++i) {
    const double d = static_cast<double>(a.data[i]) - static_cast<double>(b.data[i]);
    se += d * d;
  }
  const double mse = se / static_cast<double>(a.data.size());
  if (mse == 0.0) return kPsnrCap;
  return std::min(kPsnrCap, 10.0 * std::log10(1.0 / mse));
}

std::vector<double> to_luma(const Image& image) {
  std::vector<double> y(image.height * image.width);
  for (std::size_t i = 0; i < y.size(); ++i) {
    y[i] = 0.299 * image.data[3 * i] + 0.587 * image.data[3 * i + 1] + 0.114 * image.data[3 * i + 2];
  }
  return y;
}

double ssim(const Image& a, const Image& b) {
  check_same_shape(a, b, "ssim");
  if (a.height < static_cast<std::size_t>(kWindow) || a.width < static_cast<std::size_t>(kWindow)) {
    throw LatentError("ssim: images smaller than the 11x11 window");
  }
  constexpr double kC1 = (0.01 * 1.0) * (0.01 * 1.0);
  constexpr double kC2 = (0.03 * 1.0) * (0.03 * 1.0);
  const auto win = gaussian_window();
  const auto x = to_luma(a);
  const auto y = to_luma(b);
  std::vector<double> xx(x.size()), yy(y.size()), xy(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    xx[i] = x[i] * x[i];
    yy[i] = y[i] * y[i];
    xy[i] = x[i] * y[i];
  }
  const std::size_t h = a.height, w = a.width;
  const auto mx = filter_valid(x, h, w, win);
  const auto my = filter_valid(y, h, w, win);
  const auto sxx = filter_valid(xx, h, w, win);
  const auto syy = filter_valid(yy, h, w, win);
  const auto sxy = filter_valid(xy, h, w, win);
  double total = 0.0;
  for (std::size_t i = 0; i < mx.size(); ++i) {
    const double vx = sxx[i] - mx[i] * mx[i];
    const double vy = syy[i] - my[i] * my[i];
    const double cxy = sxy[i] - mx[i] * my[i];
    const double num = (2.0 * mx[i] * my[i] + kC1) * (2.0 * cxy + kC2);
    const double den = (mx[i] * mx[i] + my[i] * my[i] + kC1) * (vx + vy + kC2);
    total += num / den;
  }
  return total / static_cast<double>(mx.size());
}

LatentHistogram latent_histogram(std::span<const LatentGrid> grids, std::size_t bins, double range) {
  if (grids.empty()) throw LatentError("latent_histogram: no grids");
  if (bins == 0) throw LatentError("latent_histogram: zero bins");
  if (!(range > 0.0)) throw LatentError("latent_histogram: empty value range");
  const std::size_t channels = grids.front().channels;
  LatentHistogram hist;
  hist.out_of_range.assign(channels, 0);
  std::vector<std::size_t> counts(channels * bins, 0);
  const double width = 2.0 * range / static_cast<double>(bins);
  for (const auto& g : grids) {
    if (g.channels != channels) throw LatentError("latent_histogram: mismatched channel counts");
    for (std::size_t i = 0; i < g.data.size(); ++i) {
      const std::size_t c = i % channels;
      const double v = g.data[i];
      if (!(v >= -range && v < range)) {
        ++hist.out_of_range[c];
        continue;
      }
      auto b = static_cast<std::size_t>((v + range) / width);
      b = std::min(b, bins - 1);
      ++counts[c * bins + b];
    }
  }
  hist.bins.reserve(channels * bins);
  for (std::size_t c = 0; c < channels; ++c)
    for (std::size_t b = 0; b < bins; ++b) {
      const double left = -range + width * static_cast<double>(b);
      hist.bins.push_back({c, left, left + width, counts[c * bins + b]});
    }
  return hist;
}

void write_histogram_csv(std::ostream& out, const LatentHistogram& histogram) {
  out << "channel,bin_left,bin_right,count\n";
  for (const auto& b : histogram.bins) {
    out << b.channel << ',' << b.left << ',' << b.right << ',' << b.count << '\n';
  }
}

Image quantize_8bit(const Image& image) {
  Image out = image;
  for (auto& v : out.data) v = std::round(std::clamp(v, 0.0f, 1.0f) * 255.0f) / 255.0f;
  return out;
}

void write_ppm(const std::filesystem::path& path, const Image& image) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open " + path.string() + " for writing");
  f << "P6\n" << image.width << ' ' << image.height << "\n255\n";
  std::vector<unsigned char> bytes(image.data.size());
  for (std::size_t i = 0; i < bytes.size(); ++i) {
    bytes[i] = static_cast<unsigned char>(std::lround(std::clamp(image.data[i], 0.0f, 1.0f) * 255.0f));
  }
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw std::runtime_error("failed writing " + path.string());
}

Image read_ppm(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open " + path.string());
  auto next_token = [&]() {
    std::string tok;
    while (f) {
      int ch = f.peek();
      if (ch == '#') {
        std::string line;
        std::getline(f, line);
      } else if (std::isspace(ch)) {
        f.get();
      } else {
        break;
      }
    }
    f >> tok;
    return tok;
  };
  if (next_token() != "P6") throw std::runtime_error(path.string() + ": not a binary PPM (P6)");
  const std::size_t w = std::stoul(next_token());
  const std::size_t h = std::stoul(next_token());
  if (next_token() != "255") throw std::runtime_error(path.string() + ": only maxval 255 is supported");
  f.get();  // single whitespace before the raster
  std::vector<unsigned char> bytes(w * h * 3);
  f.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (f.gcount() != static_cast<std::streamsize>(bytes.size())) throw std::runtime_error(path.string() + ": truncated raster");
  Image img(h, w);
  for (std::size_t i = 0; i < bytes.size(); ++i) img.data[i] = static_cast<float>(bytes[i]) / 255.0f;
  return img;
}

}  // namespace arcflow
