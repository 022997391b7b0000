#pragma once

// Autoregressive inference: text through the LM head, image tokens by Euler
// integration of the flow head with token-level classifier-free guidance,
// and the per-token statistics trace used for drift diagnostics.

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <optional>
#include <random>
#include <span>
#include <stdexcept>
#include <vector>

#include "arcflow/config.hpp"
#include "arcflow/model.hpp"
#include "arcflow/sequence.hpp"
#include "arcflow/vocab.hpp"

namespace arcflow {

struct SamplerError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct GuidanceSpec {
  double w = 1.0;
  /// Prefix of the unconditional context; the image-area markers follow it.
  std::vector<int> uncond_prefix{token::kBos};
  /// Skip the unconditional branch entirely (reference path for w = 1).
  bool conditional_only = false;
};

/// (1 - w) * v_uncond + w * v_cond, element-wise.
template <typename T>
std::vector<T> guided_velocity(std::span<const T> v_uncond, std::span<const T> v_cond, T w);

/// Batched velocity field: rows of x at a shared time t.
template <typename T>
using VelocityField = std::function<Matrix<T>(const Matrix<T>& x, T t)>;

/// x <- x + v/steps at t = k/steps for k = 0..steps-1. With `uncond` the
/// guided combination is used, otherwise `cond` alone.
template <typename T>
Matrix<T> euler_integrate(Matrix<T> x, std::size_t steps, const VelocityField<T>& cond,
                          const VelocityField<T>* uncond, T w);

/// Standard-normal draws of the given shape.
template <typename T>
Matrix<T> gaussian_noise(std::size_t rows, std::size_t cols, std::mt19937_64& rng);

/// One image token: noise -> Euler under the (guided) flow head.
template <typename T>
std::vector<T> sample_image_token(const FlowHead<T>& head, std::span<const T> cond_hidden,
                                  std::span<const T> uncond_hidden, const GuidanceSpec& spec, std::size_t steps,
                                  std::mt19937_64& rng);

/// Closed-form optimal rectified-flow velocity for N(0, I) -> N(mu, I):
/// v(x, t) = mu + (2t - 1) / ((1 - t)^2 + t^2) * (x - t mu).
template <typename T>
VelocityField<T> gaussian_transport_field(std::vector<T> mu);

struct TokenStat {
  std::size_t index = 0;
  double mean = 0.0;
  double variance = 0.0;  // population variance over channels
  bool operator==(const TokenStat&) const = default;
};

struct TokenStatsTrace {
  std::vector<TokenStat> records;

  void add(std::span<const float> token);
  std::size_t size() const { return records.size(); }
  bool operator==(const TokenStatsTrace&) const = default;
};

void write_trace_csv(std::ostream& out, const TokenStatsTrace& trace);
TokenStatsTrace read_trace_csv(std::istream& in);

/// Zero mean, unit variance over channels; std floored at 1e-6.
template <typename T>
std::vector<T> renormalize_token(std::span<const T> token);

struct DriftBands {
  double mean_lo = -0.5;
  double mean_hi = 0.5;
  double var_lo = 0.5;
  double var_hi = 2.0;
};

struct DriftReport {
  double max_abs_mean = 0.0;
  double max_var_deviation = 0.0;  // max |variance - 1|
  std::optional<std::size_t> first_exceed;
  std::size_t violations = 0;
};

DriftReport drift_report(const TokenStatsTrace& trace, const DriftBands& bands = {});
/// `metric,value` rows.
void write_drift_csv(std::ostream& out, const DriftReport& report);

struct GenerationResult {
  MultimodalSequence sequence;  // starts with <bos>
  TokenStatsTrace trace;
  std::vector<int> text_ids;    // sampled or forced ids before <boi>, excluding the prompt
  TokenGrid image;              // empty when no image was produced
};

/// Raised when the text budget runs out before an image completes.
struct GenerationError : SamplerError {
  GenerationError(const std::string& what, TokenStatsTrace partial)
      : SamplerError(what), trace(std::move(partial)) {}
  TokenStatsTrace trace;
};

/// Conditional context `<bos> prompt`, unconditional context
/// `uncond_prefix`; image-area markers go to both. With area_rows/cols set
/// the area is forced, otherwise text is sampled until `<boi>`.
template <typename T>
GenerationResult generate(const Model<T>& model, const Vocabulary& vocab, const std::vector<int>& prompt,
                          const GuidanceSpec& spec, const SamplerConfig& config);

}  // namespace arcflow
