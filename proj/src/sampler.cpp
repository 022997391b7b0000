#include "arcflow/sampler.hpp"

#include <algorithm>
#include <cmath>
#include <istream>
#include <ostream>
#include <sstream>
#include <string>

#include "arcflow/heads.hpp"

namespace arcflow {

template <typename T>
std::vector<T> guided_velocity(std::span<const T> v_uncond, std::span<const T> v_cond, T w) {
  if (v_uncond.size() != v_cond.size()) throw SamplerError("guided_velocity: dimension mismatch");
  std::vector<T> out(v_cond.size());
  const T wu = T{1} - w;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = wu * v_uncond[i] + w * v_cond[i];
  return out;
}

template <typename T>
Matrix<T> euler_integrate(Matrix<T> x, std::size_t steps, const VelocityField<T>& cond,
                          const VelocityField<T>* uncond, T w) {
  if (steps == 0) throw SamplerError("euler_integrate: steps must be >= 1");
  const T dt = T{1} / static_cast<T>(steps);
  for (std::size_t k = 0; k < steps; ++k) {
    const T t = static_cast<T>(k) / static_cast<T>(steps);
    Matrix<T> vc = cond(x, t);
    if (uncond) {
      const Matrix<T> vu = (*uncond)(x, t);
      vc.data = guided_velocity<T>(vu.data, vc.data, w);
    }
    for (std::size_t i = 0; i < x.data.size(); ++i) x.data[i] += dt * vc.data[i];
  }
  return x;
}

template <typename T>
Matrix<T> gaussian_noise(std::size_t rows, std::size_t cols, std::mt19937_64& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  Matrix<T> x(rows, cols);
  for (auto& v : x.data) v = static_cast<T>(normal(rng));
  return x;
}

template <typename T>
std::vector<T> sample_image_token(const FlowHead<T>& head, std::span<const T> cond_hidden,
                                  std::span<const T> uncond_hidden, const GuidanceSpec& spec, std::size_t steps,
                                  std::mt19937_64& rng) {
  const auto& cfg = head.config;
  if (cond_hidden.size() != cfg.cond_dim) throw SamplerError("sample_image_token: condition width mismatch");
  if (!spec.conditional_only && uncond_hidden.size() != cfg.cond_dim) {
    throw SamplerError("sample_image_token: unconditional width mismatch");
  }
  auto field_for = [&head](std::span<const T> hidden) {
    Matrix<T> c(1, hidden.size());
    std::copy(hidden.begin(), hidden.end(), c.data.begin());
    return VelocityField<T>([&head, c](const Matrix<T>& x, T t) {
      const T ts[1] = {t};
      return fm_forward(head, x, std::span<const T>(ts, 1), c);
    });
  };
  const VelocityField<T> cond = field_for(cond_hidden);
  Matrix<T> x = gaussian_noise<T>(1, cfg.token_dim, rng);
  if (spec.conditional_only) return euler_integrate<T>(std::move(x), steps, cond, nullptr, T{1}).data;
  const VelocityField<T> uncond = field_for(uncond_hidden);
  return euler_integrate<T>(std::move(x), steps, cond, &uncond, static_cast<T>(spec.w)).data;
}

template <typename T>
VelocityField<T> gaussian_transport_field(std::vector<T> mu) {
  return [mu = std::move(mu)](const Matrix<T>& x, T t) {
    if (x.cols != mu.size()) throw SamplerError("gaussian_transport_field: dimension mismatch");
    const T coef = (T{2} * t - T{1}) / ((T{1} - t) * (T{1} - t) + t * t);
    Matrix<T> v(x.rows, x.cols);
    for (std::size_t r = 0; r < x.rows; ++r)
      for (std::size_t j = 0; j < x.cols; ++j) v(r, j) = mu[j] + coef * (x(r, j) - t * mu[j]);
    return v;
  };
}

void TokenStatsTrace::add(std::span<const float> token) {
  if (token.empty()) throw SamplerError("trace: empty token");
  double mean = 0.0;
  for (float v : token) mean += v;
  mean /= static_cast<double>(token.size());
  double var = 0.0;
  for (float v : token) var += (v - mean) * (v - mean);
  var /= static_cast<double>(token.size());
  records.push_back({records.size(), mean, var});
}

void write_trace_csv(std::ostream& out, const TokenStatsTrace& trace) {
  out << "token_index,mean,variance\n";
  char buf[96];
  for (const auto& r : trace.records) {
    std::snprintf(buf, sizeof buf, "%zu,%.17g,%.17g\n", r.index, r.mean, r.variance);
    out << buf;
  }
}

TokenStatsTrace read_trace_csv(std::istream& in) {
  std::string line;
  if (!std::getline(in, line) || line != "token_index,mean,variance") throw SamplerError("trace csv: bad header");
  TokenStatsTrace trace;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    TokenStat r;
    char c1 = 0, c2 = 0;
    std::istringstream ls(line);
    if (!(ls >> r.index >> c1 >> r.mean >> c2 >> r.variance) || c1 != ',' || c2 != ',') {
      throw SamplerError("trace csv: malformed row '" + line + "'");
    }
    trace.records.push_back(r);
  }
  return trace;
}

template <typename T>
std::vector<T> renormalize_token(std::span<const T> token) {
  if (token.size() < 2) throw SamplerError("renormalize_token: need at least 2 channels");
  double mean = 0.0;
  for (T v : token) mean += static_cast<double>(v);
  mean /= static_cast<double>(token.size());
  double var = 0.0;
  for (T v : token) var += (static_cast<double>(v) - mean) * (static_cast<double>(v) - mean);
  var /= static_cast<double>(token.size());
  const double sd = std::max(std::sqrt(var), static_cast<double>(kStdFloor));
  std::vector<T> out(token.size());
  for (std::size_t i = 0; i < token.size(); ++i) out[i] = static_cast<T>((static_cast<double>(token[i]) - mean) / sd);
  return out;
}

DriftReport drift_report(const TokenStatsTrace& trace, const DriftBands& bands) {
  if (trace.records.empty()) throw SamplerError("drift_report: empty trace");
  DriftReport rep;
  for (const auto& r : trace.records) {
    rep.max_abs_mean = std::max(rep.max_abs_mean, std::abs(r.mean));
    rep.max_var_deviation = std::max(rep.max_var_deviation, std::abs(r.variance - 1.0));
    const bool ok = r.mean >= bands.mean_lo && r.mean <= bands.mean_hi && r.variance >= bands.var_lo &&
                    r.variance <= bands.var_hi;
    if (!ok) {
      ++rep.violations;
      if (!rep.first_exceed) rep.first_exceed = r.index;
    }
  }
  return rep;
}

void write_drift_csv(std::ostream& out, const DriftReport& report) {
  char buf[128];
  out << "metric,value\n";
  std::snprintf(buf, sizeof buf, "max_abs_mean,%.17g\nmax_variance_deviation,%.17g\n", report.max_abs_mean,
                report.max_var_deviation);
  out << buf;
  out << "first_exceed_index," << (report.first_exceed ? std::to_string(*report.first_exceed) : "none") << "\n";
  out << "violations," << report.violations << "\n";
}

namespace {

template <typename T>
int sample_text(std::span<const T> logits, const SamplerConfig& cfg, std::mt19937_64& rng) {
  std::vector<double> scaled(logits.size());
  for (std::size_t i = 0; i < logits.size(); ++i) scaled[i] = static_cast<double>(logits[i]) / cfg.temperature;
  if (cfg.top_k > 0 && cfg.top_k < scaled.size()) {
    std::vector<double> sorted = scaled;
    std::nth_element(sorted.begin(), sorted.begin() + static_cast<std::ptrdiff_t>(cfg.top_k - 1), sorted.end(),
                     std::greater<>());
    const double cutoff = sorted[cfg.top_k - 1];
    for (auto& s : scaled)
      if (s < cutoff) s = -std::numeric_limits<double>::infinity();
  }
  const auto p = softmax<double>(scaled);
  std::uniform_real_distribution<double> uniform(0.0, 1.0);
  const double u = uniform(rng);
  double acc = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    acc += p[i];
    if (u < acc) return static_cast<int>(i);
  }
  // Rounding left u above the running sum: take the last token with mass.
  for (std::size_t i = p.size(); i-- > 0;)
    if (p[i] > 0.0) return static_cast<int>(i);
  return 0;
}

template <typename T>
struct Context {
  const Model<T>& model;
  KVCache<T> cache;
  std::vector<T> last;

  Context(const Model<T>& m) : model(m), cache(m.config) {}

  void push(int id) { last = forward_step<T>(model.backbone, model.config, id, std::span<const T>(), cache); }
  void push(std::span<const T> image) { last = forward_step<T>(model.backbone, model.config, -1, image, cache); }
};

// Reads `<image_area> digits * digits <boi>` from the tail of `ids`.
std::pair<std::size_t, std::size_t> parse_area(const std::vector<int>& ids, const Vocabulary& vocab) {
  auto start = std::find(ids.rbegin(), ids.rend(), token::kImageArea);
  if (start == ids.rend()) throw SamplerError("generate: <boi> without a preceding <image_area>");
  std::size_t i = static_cast<std::size_t>(ids.rend() - start);
  auto number = [&](std::size_t& pos) {
    std::size_t n = 0, digits = 0;
    while (pos < ids.size() && vocab.is_digit(ids[pos])) n = n * 10 + static_cast<std::size_t>(ids[pos++] - token::kDigit0), ++digits;
    if (digits == 0) throw SamplerError("generate: malformed image area");
    return n;
  };
  const std::size_t rows = number(i);
  if (i >= ids.size() || ids[i] != token::kStar) throw SamplerError("generate: malformed image area");
  ++i;
  const std::size_t cols = number(i);
  if (i + 1 != ids.size() || ids[i] != token::kBoi) throw SamplerError("generate: malformed image area");
  if (rows == 0 || cols == 0) throw SamplerError("generate: empty image area");
  return {rows, cols};
}

}  // namespace

template <typename T>
GenerationResult generate(const Model<T>& model, const Vocabulary& vocab, const std::vector<int>& prompt,
                          const GuidanceSpec& spec, const SamplerConfig& config) {
  config.validate();
  if (model.lm.w.shape[1] != vocab.size()) throw SamplerError("generate: model vocabulary size differs from vocab");
  for (int id : prompt)
    if (id < 0 || static_cast<std::size_t>(id) >= vocab.size()) throw SamplerError("generate: prompt id out of range");

  std::mt19937_64 rng(config.seed);
  GenerationResult out;
  out.sequence.token_dim = model.config.token_dim;
  const bool dual = !spec.conditional_only;

  Context<T> cond(model);
  std::optional<Context<T>> uncond;
  std::vector<int> all_ids{token::kBos};
  all_ids.insert(all_ids.end(), prompt.begin(), prompt.end());
  for (int id : all_ids) cond.push(id);
  if (dual) {
    uncond.emplace(model);
    for (int id : spec.uncond_prefix) uncond->push(id);
  }
  append_ids(out.sequence, vocab, all_ids);

  auto emit_text = [&](int id, bool both) {
    cond.push(id);
    if (dual && both) uncond->push(id);
    out.text_ids.push_back(id);
    append_ids(out.sequence, vocab, {id});
  };

  std::size_t rows = config.area_rows, cols = config.area_cols;
  if (rows > 0) {
    for (int id : image_header_ids(vocab, rows, cols)) emit_text(id, true);
  } else {
    bool in_area = false;
    for (;;) {
      if (out.text_ids.size() >= config.max_text_tokens) {
        throw GenerationError("generate: text budget exhausted before <boi>", out.trace);
      }
      const auto logits = lm_logits<T>(model.lm, std::span<const T>(cond.last));
      const int id = sample_text<T>(logits, config, rng);
      if (id == token::kImageArea) in_area = true;
      if (id == token::kEos || id == token::kEoi) {
        throw GenerationError("generate: model ended the sequence before an image", out.trace);
      }
      emit_text(id, in_area);
      if (id == token::kBoi) break;
    }
    std::tie(rows, cols) = parse_area(out.text_ids, vocab);
  }

  const std::size_t td = model.config.token_dim;
  out.sequence.image_spans.push_back({out.sequence.size(), rows, cols});
  out.image = TokenGrid(rows, cols, td);
  try {
    for (std::size_t i = 0; i < rows * cols; ++i) {
      std::vector<T> tok = sample_image_token<T>(model.fm, cond.last, dual ? uncond->last : std::vector<T>{}, spec,
                                                 config.euler_steps, rng);
      if (config.renormalize_tokens) tok = renormalize_token<T>(tok);
      std::vector<float> as_float(tok.begin(), tok.end());
      out.trace.add(as_float);
      std::copy(as_float.begin(), as_float.end(), out.image.data.begin() + static_cast<std::ptrdiff_t>(i * td));
      out.sequence.elements.emplace_back(ImageToken{as_float});
      cond.push(std::span<const T>(tok));
      if (dual) uncond->push(std::span<const T>(tok));
    }
    cond.push(token::kEoi);
  } catch (const ModelError& e) {
    throw GenerationError(std::string("generate: ") + e.what(), out.trace);
  }
  append_ids(out.sequence, vocab, {token::kEoi, token::kEos});
  return out;
}

#define ARCFLOW_INSTANTIATE(T)                                                                                \
  template std::vector<T> guided_velocity<T>(std::span<const T>, std::span<const T>, T);                     \
  template Matrix<T> euler_integrate<T>(Matrix<T>, std::size_t, const VelocityField<T>&,                     \
                                        const VelocityField<T>*, T);                                         \
  template Matrix<T> gaussian_noise<T>(std::size_t, std::size_t, std::mt19937_64&);                          \
  template std::vector<T> sample_image_token<T>(const FlowHead<T>&, std::span<const T>, std::span<const T>,  \
                                                const GuidanceSpec&, std::size_t, std::mt19937_64&);         \
  template VelocityField<T> gaussian_transport_field<T>(std::vector<T>);                                     \
  template std::vector<T> renormalize_token<T>(std::span<const T>);                                          \
  template GenerationResult generate<T>(const Model<T>&, const Vocabulary&, const std::vector<int>&,         \
                                        const GuidanceSpec&, const SamplerConfig&);

ARCFLOW_INSTANTIATE(float)
ARCFLOW_INSTANTIATE(double)
#undef ARCFLOW_INSTANTIATE

}  // namespace arcflow
