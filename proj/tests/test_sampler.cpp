#include <cmath>
#include <random>
#include <sstream>

#include "arcflow/heads.hpp"
#include "arcflow/sampler.hpp"
#include "arcflow/trainer.hpp"
#include "doctest.h"

using namespace arcflow;

namespace {

double norm(const std::vector<double>& v) {
  double s = 0;
  for (double x : v) s += x * x;
  return std::sqrt(s);
}

ModelConfig tiny_model() {
  ModelConfig c;
  c.layers = 2;
  c.model_dim = 32;
  c.heads = 2;
  c.ffn_dim = 64;
  c.vocab_size = Vocabulary::standard().size();
  c.max_seq_len = 64;
  c.token_dim = 64;
  c.init_std = 0.1;
  return c;
}

FMHeadConfig tiny_head(const ModelConfig& c) {
  FMHeadConfig h;
  h.layers = 1;
  h.hidden = 32;
  h.cond_dim = c.model_dim;
  h.token_dim = c.token_dim;
  h.time_dim = 8;
  return h;
}

struct Moments {
  std::vector<double> mean, var;
};

Moments moments(const Matrix<double>& x) {
  Moments m{std::vector<double>(x.cols, 0.0), std::vector<double>(x.cols, 0.0)};
  for (std::size_t r = 0; r < x.rows; ++r)
    for (std::size_t j = 0; j < x.cols; ++j) m.mean[j] += x(r, j) / double(x.rows);
  for (std::size_t r = 0; r < x.rows; ++r)
    for (std::size_t j = 0; j < x.cols; ++j) m.var[j] += (x(r, j) - m.mean[j]) * (x(r, j) - m.mean[j]) / double(x.rows);
  return m;
}

// W2 between per-dimension Gaussians fitted to the samples and N(mu, 1).
double moment_w2(const Moments& m, const std::vector<double>& mu) {
  double s = 0;
  for (std::size_t j = 0; j < mu.size(); ++j) {
    const double dm = m.mean[j] - mu[j], ds = std::sqrt(m.var[j]) - 1.0;
    s += dm * dm + ds * ds;
  }
  return std::sqrt(s);
}

}  // namespace

TEST_CASE("guided velocity algebra") {
  const std::vector<double> u{0.5, -1, 2}, c{1, 1, 1};
  CHECK(guided_velocity<double>(u, c, 1.0) == c);
  CHECK(guided_velocity<double>(u, c, 0.0) == u);
  CHECK(guided_velocity<double>(std::vector<double>(3, 0.0), c, 3.0) == std::vector<double>{3, 3, 3});

  std::mt19937_64 rng(1);
  std::normal_distribution<double> d(0, 1);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<double> vu(5), vc(5);
    for (auto& x : vu) x = d(rng);
    for (auto& x : vc) x = d(rng);
    const double w = 4 * d(rng);
    const auto g = guided_velocity<double>(vu, vc, w);
    std::vector<double> gap(5), diff(5);
    for (int i = 0; i < 5; ++i) {
      gap[i] = g[i] - vc[i];
      diff[i] = vc[i] - vu[i];
    }
    CHECK(norm(gap) == doctest::Approx(std::abs(w - 1) * norm(diff)).epsilon(1e-12));
  }
  CHECK_THROWS_AS(guided_velocity<double>(u, std::vector<double>{1.0}, 1.0), SamplerError);
}

TEST_CASE("zero-output head returns the noise draw") {
  const ModelConfig c = tiny_model();
  std::mt19937_64 init(2);
  FlowHead<double> head = make_flow_head<double>(tiny_head(c), 0.1, init);
  std::fill(head.out_w.data.begin(), head.out_w.data.end(), 0.0);
  const std::vector<double> cond(c.model_dim, 0.3);
  GuidanceSpec spec;
  spec.conditional_only = true;
  std::mt19937_64 a(3), b(3);
  const auto tok = sample_image_token<double>(head, cond, {}, spec, 1, a);
  const auto noise = gaussian_noise<double>(1, c.token_dim, b);
  CHECK(tok == noise.data);

  std::mt19937_64 e(4);
  CHECK_THROWS_AS(sample_image_token<double>(head, std::vector<double>(3, 0.0), {}, spec, 1, e), SamplerError);
  const auto zero = [](const Matrix<double>& x, double) { return Matrix<double>(x.rows, x.cols); };
  CHECK_THROWS_AS(euler_integrate<double>(Matrix<double>(1, 2), 0, zero, nullptr, 1.0), SamplerError);
}

TEST_CASE("gaussian transport field: exact mean and euler convergence") {
  const std::vector<double> mu{1.0, -0.5, 2.0, 0.25};
  const auto field = gaussian_transport_field<double>(mu);
  std::mt19937_64 rng(5);
  const Matrix<double> x0 = gaussian_noise<double>(10000, mu.size(), rng);

  double prev = 1e300;
  for (std::size_t steps : {8u, 16u, 32u, 64u}) {
    const Moments m = moments(euler_integrate<double>(x0, steps, field, nullptr, 1.0));
    const double w2 = moment_w2(m, mu);
    CAPTURE(steps);
    CHECK(w2 < prev);
    prev = w2;
    if (steps == 64)
      for (std::size_t j = 0; j < mu.size(); ++j) CHECK(std::abs(m.mean[j] - mu[j]) < 0.05);
  }
}

TEST_CASE("trained head transports N(0, I) to N(mu, I)") {
  const std::vector<float> mu{1.0f, -0.5f, 2.0f, 0.25f};
  FMHeadConfig hc;
  hc.layers = 2;
  hc.hidden = 64;
  hc.cond_dim = 2;
  hc.token_dim = mu.size();
  hc.time_dim = 16;
  std::mt19937_64 rng(6);
  FlowHead<float> head = make_flow_head<float>(hc, 0.05, rng);
  auto params = tensors_of<float>(head);
  AdamState<float> adam = make_adam_state<float>(params);
  StageConfig sched;
  sched.steps = 3000;
  sched.warmup = 100;
  sched.lr_max = 2e-3;
  sched.lr_min = 1e-5;
  sched.schedule = Schedule::kCosine;

  const std::size_t n = 256, td = mu.size();
  std::normal_distribution<float> normal(0.0f, 1.0f);
  std::uniform_real_distribution<float> uniform(0.0f, 1.0f);
  const Matrix<float> cond(n, hc.cond_dim);
  for (std::size_t step = 0; step < sched.steps; ++step) {
    Matrix<float> xt(n, td), target(n, td);
    std::vector<float> t(n);
    for (std::size_t i = 0; i < n; ++i) {
      t[i] = uniform(rng);
      for (std::size_t j = 0; j < td; ++j) {
        const float x0 = normal(rng), x1 = mu[j] + normal(rng);
        xt(i, j) = (1 - t[i]) * x0 + t[i] * x1;
        target(i, j) = x1 - x0;
      }
    }
    FlowActivations<float> acts;
    const auto pred = fm_forward(head, xt, std::span<const float>(t), cond, &acts);
    Matrix<float> d_pred;
    mse(pred, target, &d_pred);
    FlowHead<float> grads = zeros_like_params<float>(head);
    fm_backward<float>(head, xt, cond, acts, d_pred, grads, nullptr);
    auto gs = tensors_of<float>(grads);
    clip_grad_norm<float>(gs, 1.0);
    std::vector<const Tensor<float>*> cgs(gs.begin(), gs.end());
    adamw_step<float>(params, cgs, adam, lr_at(step, sched), 0.0);
  }

  GuidanceSpec spec;
  spec.conditional_only = true;
  const std::vector<float> zero(hc.cond_dim, 0.0f);
  std::mt19937_64 draw(7);
  std::vector<double> mean(td, 0.0);
  const std::size_t samples = 10000;
  for (std::size_t s = 0; s < samples; ++s) {
    const auto tok = sample_image_token<float>(head, zero, {}, spec, 64, draw);
    for (std::size_t j = 0; j < td; ++j) mean[j] += tok[j] / double(samples);
  }
  for (std::size_t j = 0; j < td; ++j) {
    CAPTURE(j);
    CHECK(std::abs(mean[j] - mu[j]) < 0.05);
  }
}

TEST_CASE("renormalize token") {
  const std::vector<double> unit{1, -1, 1, -1};
  const auto same = renormalize_token<double>(unit);
  for (std::size_t i = 0; i < unit.size(); ++i) CHECK(std::abs(same[i] - unit[i]) < 1e-6);
  CHECK(renormalize_token<double>(std::vector<double>(6, 3.5)) == std::vector<double>(6, 0.0));
  const auto r = renormalize_token<double>(std::vector<double>{2, 4, 9, -3});
  double m = 0, v = 0;
  for (double x : r) m += x / 4;
  for (double x : r) v += (x - m) * (x - m) / 4;
  CHECK(std::abs(m) < 1e-12);
  CHECK(v == doctest::Approx(1.0).epsilon(1e-12));
  CHECK_THROWS_AS(renormalize_token<double>(std::vector<double>{1.0}), SamplerError);
}

TEST_CASE("drift report") {
  TokenStatsTrace exact;
  for (std::size_t i = 0; i < 5; ++i) exact.records.push_back({i, 0.0, 1.0});
  const DriftReport z = drift_report(exact);
  CHECK(z.max_abs_mean == 0.0);
  CHECK(z.max_var_deviation == 0.0);
  CHECK_FALSE(z.first_exceed.has_value());
  CHECK(z.violations == 0);

  // Mean 0.1 i leaves the [-0.5, 0.5] band first at i = 6.
  TokenStatsTrace drift;
  for (std::size_t i = 0; i < 10; ++i) drift.records.push_back({i, 0.1 * double(i), 1.0});
  const DriftReport d = drift_report(drift);
  REQUIRE(d.first_exceed.has_value());
  CHECK(*d.first_exceed == 6);
  CHECK(d.violations == 4);
  CHECK(d.max_abs_mean == doctest::Approx(0.9));

  TokenStatsTrace var;
  var.records = {{0, 0.0, 1.0}, {1, 0.0, 1.9}, {2, 0.0, 2.1}, {3, 0.0, 0.4}};
  const DriftReport dv = drift_report(var);
  CHECK(*dv.first_exceed == 2);
  CHECK(dv.max_var_deviation == doctest::Approx(1.1));

  CHECK_THROWS_AS(drift_report(TokenStatsTrace{}), SamplerError);

  std::ostringstream csv;
  write_drift_csv(csv, d);
  CHECK(csv.str().find("first_exceed_index,6\n") != std::string::npos);
}

TEST_CASE("trace csv round trip") {
  TokenStatsTrace t;
  t.add(std::vector<float>{0.25f, -1.5f, 3.0f});
  t.add(std::vector<float>{1e-7f, 2.0f});
  CHECK(t.records[0].mean == doctest::Approx(0.5833333333));
  std::stringstream io;
  write_trace_csv(io, t);
  CHECK(io.str().rfind("token_index,mean,variance\n", 0) == 0);
  CHECK(read_trace_csv(io) == t);
  std::istringstream bad("index,mean\n");
  CHECK_THROWS_AS(read_trace_csv(bad), SamplerError);
}

TEST_CASE("generate") {
  const ModelConfig c = tiny_model();
  const Model<float> m = make_model<float>(c, tiny_head(c), 8);
  const Vocabulary v = Vocabulary::standard();
  const auto prompt = v.tokenize("a red square on black background");
  SamplerConfig sc;
  sc.euler_steps = 8;
  sc.seed = 9;

  GuidanceSpec cfg1;
  cfg1.w = 1.0;
  const GenerationResult a = generate(m, v, prompt, cfg1, sc);
  std::size_t images = 0;
  for (const auto& e : a.sequence.elements) images += is_image(e);
  CHECK(images == 16);
  CHECK(a.trace.size() == 16);
  CHECK(a.image.rows == 4);
  CHECK(a.image.cols == 4);
  CHECK(parse_sequence(a.sequence, v).images.front() == a.image);

  SUBCASE("w = 1 is bit-identical to conditional-only sampling") {
    GuidanceSpec only;
    only.conditional_only = true;
    const GenerationResult b = generate(m, v, prompt, only, sc);
    CHECK(b.image == a.image);
    CHECK(b.trace == a.trace);
  }
  SUBCASE("same seed, same bits; other guidance differs") {
    CHECK(generate(m, v, prompt, cfg1, sc).image == a.image);
    GuidanceSpec strong;
    strong.w = 3.0;
    CHECK(generate(m, v, prompt, strong, sc).image != a.image);
  }
  SUBCASE("renormalized tokens") {
    SamplerConfig rn = sc;
    rn.renormalize_tokens = true;
    const DriftReport d = drift_report(generate(m, v, prompt, cfg1, rn).trace);
    CHECK(d.max_abs_mean < 1e-5);
    CHECK(d.max_var_deviation < 1e-4);
  }
  SUBCASE("other declared areas") {
    SamplerConfig wide = sc;
    wide.area_rows = 2;
    wide.area_cols = 5;
    CHECK(generate(m, v, prompt, cfg1, wide).trace.size() == 10);
  }
  SUBCASE("text budget exhausted") {
    SamplerConfig free = sc;
    free.area_rows = free.area_cols = 0;
    free.max_text_tokens = 0;
    CHECK_THROWS_AS(generate(m, v, prompt, cfg1, free), GenerationError);
  }
  SUBCASE("cache overflow mid-image keeps the partial trace") {
    ModelConfig shortc = c;
    shortc.max_seq_len = 16;
    const Model<float> sm = make_model<float>(shortc, tiny_head(shortc), 8);
    try {
      generate(sm, v, v.tokenize("a red"), cfg1, sc);
      FAIL("expected GenerationError");
    } catch (const GenerationError& e) {
      CHECK(e.trace.size() > 0);
      CHECK(e.trace.size() < 16);
    }
  }
}
