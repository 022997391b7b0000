#pragma once

// Roofline latency model for batch-1 decoding: per-token component costs,
// a decoder cost model calibrated on measured anchors, and accumulation of
// per-token latencies over a generated sequence.

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <stdexcept>
#include <string>
#include <vector>

namespace arcflow {

struct PerfError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

struct HardwareSpec {
  double flops = 0.0;            // FLOP/s
  double bandwidth = 0.0;        // bytes/s
  double bytes_per_param = 1.0;  // weight dtype width

  void validate() const;
};

/// `[hardware]` section with keys flops, bandwidth, bytes_per_param.
HardwareSpec parse_hardware(const std::string& text, const std::string& origin = "<hardware>");
HardwareSpec load_hardware(const std::filesystem::path& path);

/// Per-token cost, affine in context length. Non-negative coefficients keep
/// it non-decreasing in context.
struct ComponentCost {
  std::string name;
  double params = 0.0;
  double flops_fixed = 0.0;
  double flops_per_context = 0.0;
  double bytes_fixed = 0.0;
  double bytes_per_context = 0.0;
  double multiplier = 1.0;  // invocations per emitted token

  double flops(std::size_t context_len) const;
  double bytes(std::size_t context_len) const;
};

/// max(FLOPs / throughput, bytes / bandwidth) * multiplier, in ms.
double per_token_latency(const ComponentCost& cost, const HardwareSpec& hw, std::size_t context_len);

/// Dense decoder: 2 FLOPs per weight plus attention over the context;
/// bytes = weights at the hardware dtype width plus K/V reads.
struct DecoderShape {
  double params = 14.7e9;
  std::size_t layers = 48;
  std::size_t hidden = 5120;
  std::size_t kv_heads = 8;
  std::size_t head_dim = 128;
  double kv_bytes = 2.0;  // per cached element
};

ComponentCost decoder_cost(const DecoderShape& shape, const HardwareSpec& hw);
/// Vocabulary projection: one weight read per token.
ComponentCost linear_head_cost(const std::string& name, double params, const HardwareSpec& hw, double multiplier = 1.0);

/// Measured last-token latencies at one context length.
struct LatencyAnchor {
  std::size_t context_len = 0;
  double llm_ms = 0.0;
  double lmhead_ms = 0.0;
  double fmhead_ms = 0.0;
};

/// CSV `context_len,llm_ms,lmhead_ms,fmhead_ms`.
std::vector<LatencyAnchor> read_anchors(std::istream& in);
std::vector<LatencyAnchor> load_anchors(const std::filesystem::path& path);

/// Least-squares fit of llm_ms = a + b * context to the anchors, expressed
/// as a memory-bound cost: bytes_fixed = a * bandwidth, bytes_per_context =
/// b * bandwidth.
struct DecoderFit {
  ComponentCost cost;
  double intercept_ms = 0.0;
  double slope_ms = 0.0;
  std::vector<double> residual_ms;  // fitted - anchor, per anchor
  double effective_bytes_per_param = 0.0;
};
DecoderFit fit_decoder_cost(const std::vector<LatencyAnchor>& anchors, const HardwareSpec& hw, double params);

/// Anchor components at `context_len`: linear between anchors, constant
/// beyond the ends.
LatencyAnchor interpolate(const std::vector<LatencyAnchor>& anchors, std::size_t context_len);

struct LatencyRow {
  std::size_t context_len = 0;
  double llm_ms = 0.0;
  double lmhead_ms = 0.0;
  double fmhead_ms = 0.0;
  double total_ms = 0.0;
  double accum_s = 0.0;        // sum over positions 1..context_len
  double accum_wo_fm_s = 0.0;  // same without the flow head
  bool operator==(const LatencyRow&) const = default;
};

struct LatencyProfile {
  std::vector<LatencyRow> rows;
  bool operator==(const LatencyProfile&) const = default;
};

/// Accumulates interpolated per-token totals. Anchors must be non-empty and
/// strictly increasing in context length; lengths must be >= 1.
LatencyProfile accumulate(const std::vector<LatencyAnchor>& anchors, const std::vector<std::size_t>& lengths);

/// CSV `context_len,llm_ms,lmhead_ms,fmhead_ms,total_ms,accum_s,accum_wo_fm_s`
/// with round-trip precision.
void write_latency_csv(std::ostream& out, const LatencyProfile& profile);
LatencyProfile read_latency_csv(std::istream& in);

/// Human-readable cost-model assumptions and fit residuals.
std::string describe_latency_model(const HardwareSpec& hw, const std::vector<LatencyAnchor>& anchors);

}  // namespace arcflow
