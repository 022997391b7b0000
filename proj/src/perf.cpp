#include "arcflow/perf.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>

#include "arcflow/config.hpp"

namespace arcflow {

void HardwareSpec::validate() const {
  if (!(flops > 0.0) || !(bandwidth > 0.0) || !(bytes_per_param > 0.0)) {
    throw PerfError("hardware: flops, bandwidth and bytes_per_param must be positive");
  }
}

HardwareSpec parse_hardware(const std::string& text, const std::string& origin) {
  const IniDocument doc = IniDocument::parse(text, origin);
  HardwareSpec hw;
  bool seen = false;
  for (const auto& sec : doc.sections()) {
    if (sec.name != "hardware") throw PerfError(origin + ": unknown section [" + sec.name + "]");
    SectionReader r(sec, origin);
    r.read("flops", hw.flops);
    r.read("bandwidth", hw.bandwidth);
    r.read("bytes_per_param", hw.bytes_per_param);
    r.finish();
    seen = true;
  }
  if (!seen) throw PerfError(origin + ": missing [hardware] section");
  hw.validate();
  return hw;
}

HardwareSpec load_hardware(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw PerfError("cannot open " + path.string());
  std::stringstream ss;
  ss << f.rdbuf();
  return parse_hardware(ss.str(), path.string());
}

double ComponentCost::flops(std::size_t context_len) const {
  return flops_fixed + flops_per_context * static_cast<double>(context_len);
}

double ComponentCost::bytes(std::size_t context_len) const {
  return bytes_fixed + bytes_per_context * static_cast<double>(context_len);
}

double per_token_latency(const ComponentCost& cost, const HardwareSpec& hw, std::size_t context_len) {
  hw.validate();
  if (context_len < 1) throw PerfError("per_token_latency: context_len must be >= 1");
  const double compute_s = cost.flops(context_len) / hw.flops;
  const double memory_s = cost.bytes(context_len) / hw.bandwidth;
  return std::max(compute_s, memory_s) * cost.multiplier * 1e3;
}

ComponentCost decoder_cost(const DecoderShape& s, const HardwareSpec& hw) {
  ComponentCost c;
  c.name = "llm";
  c.params = s.params;
  c.flops_fixed = 2.0 * s.params;
  // q.k and p.v per layer over every cached position.
  c.flops_per_context = 4.0 * static_cast<double>(s.layers * s.hidden);
  c.bytes_fixed = s.params * hw.bytes_per_param;
  c.bytes_per_context = static_cast<double>(s.layers * 2 * s.kv_heads * s.head_dim) * s.kv_bytes;
  return c;
}

ComponentCost linear_head_cost(const std::string& name, double params, const HardwareSpec& hw, double multiplier) {
  ComponentCost c;
  c.name = name;
  c.params = params;
  c.flops_fixed = 2.0 * params;
  c.bytes_fixed = params * hw.bytes_per_param;
  c.multiplier = multiplier;
  return c;
}

std::vector<LatencyAnchor> read_anchors(std::istream& in) {
  std::string line;
  if (!std::getline(in, line) || line != "context_len,llm_ms,lmhead_ms,fmhead_ms") {
    throw PerfError("anchors: expected header 'context_len,llm_ms,lmhead_ms,fmhead_ms'");
  }
  std::vector<LatencyAnchor> out;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    const auto v = parse_number_list(line);
    if (v.size() != 4 || v[0] < 1 || v[0] != std::floor(v[0])) throw PerfError("anchors: malformed row '" + line + "'");
    out.push_back({static_cast<std::size_t>(v[0]), v[1], v[2], v[3]});
  }
  return out;
}

std::vector<LatencyAnchor> load_anchors(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw PerfError("cannot open " + path.string());
  return read_anchors(f);
}

namespace {

void check_anchors(const std::vector<LatencyAnchor>& anchors) {
  if (anchors.empty()) throw PerfError("latency anchors: table is empty");
  for (std::size_t i = 1; i < anchors.size(); ++i)
    if (anchors[i].context_len <= anchors[i - 1].context_len) {
      throw PerfError("latency anchors: context lengths must be strictly increasing");
    }
}

}  // namespace

DecoderFit fit_decoder_cost(const std::vector<LatencyAnchor>& anchors, const HardwareSpec& hw, double params) {
  check_anchors(anchors);
  hw.validate();
  const double n = static_cast<double>(anchors.size());
  double sx = 0, sy = 0, sxx = 0, sxy = 0;
  for (const auto& a : anchors) {
    const double x = static_cast<double>(a.context_len);
    sx += x;
    sy += a.llm_ms;
    sxx += x * x;
    sxy += x * a.llm_ms;
  }
  DecoderFit fit;
  const double denom = n * sxx - sx * sx;
  fit.slope_ms = anchors.size() > 1 ? (n * sxy - sx * sy) / denom : 0.0;
  fit.intercept_ms = (sy - fit.slope_ms * sx) / n;
  if (fit.slope_ms < 0.0 || fit.intercept_ms < 0.0) throw PerfError("fit_decoder_cost: anchors imply a negative cost");
  fit.cost.name = "llm (calibrated)";
  fit.cost.params = params;
  fit.cost.flops_fixed = 2.0 * params;
  fit.cost.bytes_fixed = fit.intercept_ms * 1e-3 * hw.bandwidth;
  fit.cost.bytes_per_context = fit.slope_ms * 1e-3 * hw.bandwidth;
  fit.effective_bytes_per_param = fit.cost.bytes_fixed / params;
  for (const auto& a : anchors) fit.residual_ms.push_back(per_token_latency(fit.cost, hw, a.context_len) - a.llm_ms);
  return fit;
}

LatencyAnchor interpolate(const std::vector<LatencyAnchor>& anchors, std::size_t context_len) {
  check_anchors(anchors);
  if (context_len <= anchors.front().context_len) return {context_len, anchors.front().llm_ms, anchors.front().lmhead_ms, anchors.front().fmhead_ms};
  if (context_len >= anchors.back().context_len) return {context_len, anchors.back().llm_ms, anchors.back().lmhead_ms, anchors.back().fmhead_ms};
  std::size_t i = 1;
  while (anchors[i].context_len < context_len) ++i;
  const auto& lo = anchors[i - 1];
  const auto& hi = anchors[i];
  const double f = static_cast<double>(context_len - lo.context_len) / static_cast<double>(hi.context_len - lo.context_len);
  auto lerp = [f](double a, double b) { return a + (b - a) * f; };
  return {context_len, lerp(lo.llm_ms, hi.llm_ms), lerp(lo.lmhead_ms, hi.lmhead_ms), lerp(lo.fmhead_ms, hi.fmhead_ms)};
}

LatencyProfile accumulate(const std::vector<LatencyAnchor>& anchors, const std::vector<std::size_t>& lengths) {
  check_anchors(anchors);
  LatencyProfile p;
  for (std::size_t n : lengths) {
    if (n < 1) throw PerfError("accumulate: lengths must be >= 1");
    double wo_fm_ms = 0.0, fm_ms = 0.0;
    for (std::size_t i = 1; i <= n; ++i) {
      const LatencyAnchor a = interpolate(anchors, i);
      wo_fm_ms += a.llm_ms + a.lmhead_ms;
      fm_ms += a.fmhead_ms;
    }
    const LatencyAnchor last = interpolate(anchors, n);
    LatencyRow row;
    row.context_len = n;
    row.llm_ms = last.llm_ms;
    row.lmhead_ms = last.lmhead_ms;
    row.fmhead_ms = last.fmhead_ms;
    row.total_ms = last.llm_ms + last.lmhead_ms + last.fmhead_ms;
    row.accum_wo_fm_s = wo_fm_ms * 1e-3;
    row.accum_s = (wo_fm_ms + fm_ms) * 1e-3;
    p.rows.push_back(row);
  }
  return p;
}

void write_latency_csv(std::ostream& out, const LatencyProfile& profile) {
  out << "context_len,llm_ms,lmhead_ms,fmhead_ms,total_ms,accum_s,accum_wo_fm_s\n";
  char buf[256];
  for (const auto& r : profile.rows) {
    std::snprintf(buf, sizeof buf, "%zu,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g\n", r.context_len, r.llm_ms, r.lmhead_ms,
                  r.fmhead_ms, r.total_ms, r.accum_s, r.accum_wo_fm_s);
    out << buf;
  }
}

LatencyProfile read_latency_csv(std::istream& in) {
  std::string line;
  if (!std::getline(in, line) || line != "context_len,llm_ms,lmhead_ms,fmhead_ms,total_ms,accum_s,accum_wo_fm_s") {
    throw PerfError("latency csv: bad header");
  }
  LatencyProfile p;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto v = parse_number_list(line);
    if (v.size() != 7) throw PerfError("latency csv: malformed row '" + line + "'");
    p.rows.push_back({static_cast<std::size_t>(v[0]), v[1], v[2], v[3], v[4], v[5], v[6]});
  }
  return p;
}

std::string describe_latency_model(const HardwareSpec& hw, const std::vector<LatencyAnchor>& anchors) {
  std::ostringstream s;
  char buf[256];
  const DecoderShape shape;
  std::snprintf(buf, sizeof buf, "hardware: %.4g FLOP/s, %.4g B/s, %.3g bytes/param\n", hw.flops, hw.bandwidth,
                hw.bytes_per_param);
  s << buf;
  std::snprintf(buf, sizeof buf,
                "decoder (nominal): %.3g params, %zu layers, %zu kv heads x %zu dims, kv %.0f bytes/elem\n",
                shape.params, shape.layers, shape.kv_heads, shape.head_dim, shape.kv_bytes);
  s << buf;
  const ComponentCost nominal = decoder_cost(shape, hw);
  const DecoderFit fit = fit_decoder_cost(anchors, hw, shape.params);
  std::snprintf(buf, sizeof buf, "calibrated decoder: %.4f ms + %.3e ms/token of context (%.3f effective bytes/param)\n",
                fit.intercept_ms, fit.slope_ms, fit.effective_bytes_per_param);
  s << buf;
  const double weight_ms = shape.params * hw.bytes_per_param / hw.bandwidth * 1e3;
  std::snprintf(buf, sizeof buf, "weight reads alone: %.4f ms; calibrated fixed cost minus weight reads: %+.4f ms\n",
                weight_ms, fit.intercept_ms - weight_ms);
  s << buf;
  s << "context_len,anchor_llm_ms,nominal_ms,calibrated_ms,residual_ms\n";
  for (std::size_t i = 0; i < anchors.size(); ++i) {
    const auto& a = anchors[i];
    std::snprintf(buf, sizeof buf, "%zu,%.4f,%.4f,%.4f,%+.4f\n", a.context_len, a.llm_ms,
                  per_token_latency(nominal, hw, a.context_len), per_token_latency(fit.cost, hw, a.context_len),
                  fit.residual_ms[i]);
    s << buf;
  }
  s << "accumulation: per-token components interpolated linearly between anchors, constant outside\n";
  return s.str();
}

}  // namespace arcflow
