#include <cmath>
#include <filesystem>
#include <sstream>

#include "arcflow/ablation.hpp"
#include "arcflow/perf.hpp"
#include "doctest.h"

using namespace arcflow;

namespace {

const std::filesystem::path kConfigs = ARCFLOW_CONFIG_DIR;

HardwareSpec h100() { return {983e12, 3.36e12, 1.0}; }

const std::vector<LatencyAnchor> kAnchors{{256, 7.20, 0.40, 3.40}, {1024, 7.23, 0.40, 3.40}, {4096, 7.39, 0.40, 3.40}};

// Piecewise-linear oracle written out per segment.
double oracle_llm(std::size_t n) {
  if (n <= 256) return 7.20;
  if (n >= 4096) return 7.39;
  if (n <= 1024) return 7.20 + 0.03 * double(n - 256) / 768.0;
  return 7.23 + 0.16 * double(n - 1024) / 3072.0;
}

}  // namespace

TEST_CASE("hardware config") {
  const HardwareSpec hw = load_hardware(kConfigs / "h100.ini");
  CHECK(hw.flops == 983e12);
  CHECK(hw.bandwidth == 3.36e12);
  CHECK(hw.bytes_per_param == 1.0);
  CHECK_THROWS_AS(parse_hardware("[hardware]\nflops = 0\nbandwidth = 1\n"), PerfError);
  CHECK_THROWS_AS(parse_hardware("[gpu]\nflops = 1\n"), PerfError);
  CHECK_THROWS_AS(parse_hardware("[hardware]\nflops = 1\nbandwidth = 1\nclock = 3\n"), ConfigError);
}

TEST_CASE("per-token latency") {
  const HardwareSpec hw = h100();
  CHECK(per_token_latency(ComponentCost{}, hw, 1) == 0.0);

  ComponentCost weights;
  weights.bytes_fixed = 14e9;
  CHECK(per_token_latency(weights, hw, 1) == doctest::Approx(4.167).epsilon(1e-3));

  ComponentCost compute;
  compute.flops_fixed = 983e12 * 2e-3;
  compute.multiplier = 3;
  CHECK(per_token_latency(compute, hw, 10) == doctest::Approx(6.0).epsilon(1e-12));
  CHECK_THROWS_AS(per_token_latency(weights, hw, 0), PerfError);
  CHECK_THROWS_AS(per_token_latency(weights, HardwareSpec{1, 0, 1}, 1), PerfError);

  const ComponentCost dec = decoder_cost(DecoderShape{}, hw);
  double prev = 0.0;
  for (std::size_t n : {1u, 16u, 256u, 1024u, 4096u, 65536u}) {
    const double ms = per_token_latency(dec, hw, n);
    CHECK(ms >= prev);
    prev = ms;
  }
  // Memory bound: doubling every byte doubles the latency.
  ComponentCost twice = dec;
  twice.bytes_fixed *= 2;
  twice.bytes_per_context *= 2;
  CHECK(per_token_latency(twice, hw, 512) == doctest::Approx(2 * per_token_latency(dec, hw, 512)).epsilon(1e-12));

  const ComponentCost head = linear_head_cost("fm", 157e6, hw, 100);
  CHECK(per_token_latency(head, hw, 1) == doctest::Approx(157e6 / 3.36e12 * 1e3 * 100).epsilon(1e-12));
}

TEST_CASE("calibrated decoder lands near the measured 7.20 ms") {
  const HardwareSpec hw = h100();
  const DecoderFit fit = fit_decoder_cost(kAnchors, hw, DecoderShape{}.params);
  const double ms = per_token_latency(fit.cost, hw, 256);
  CHECK(std::abs(ms - 7.20) <= 0.25 * 7.20);
  for (double r : fit.residual_ms) CHECK(std::abs(r) < 0.01);
  CHECK(fit.slope_ms > 0);
  // Pure weight reads at one byte per parameter sit far below the measurement.
  const double nominal = per_token_latency(decoder_cost(DecoderShape{}, hw), hw, 256);
  CHECK(nominal < 0.75 * 7.20);
  const std::string text = describe_latency_model(hw, kAnchors);
  CHECK(text.find("calibrated decoder") != std::string::npos);
}

TEST_CASE("anchors") {
  std::istringstream in("context_len,llm_ms,lmhead_ms,fmhead_ms\n# comment\n256,7.20,0.40,3.40\n1024,7.23,0.40,3.40\n");
  const auto a = read_anchors(in);
  REQUIRE(a.size() == 2);
  CHECK(a[1].context_len == 1024);
  CHECK(a[1].llm_ms == 7.23);
  std::istringstream bad("n,ms\n");
  CHECK_THROWS_AS(read_anchors(bad), PerfError);
  CHECK(load_anchors(kConfigs / "latency_anchors.csv").size() == 3);

  for (std::size_t n : {1u, 256u, 300u, 1024u, 2000u, 4096u, 9000u})
    CHECK(interpolate(kAnchors, n).llm_ms == doctest::Approx(oracle_llm(n)).epsilon(1e-12));

  CHECK_THROWS_AS(accumulate({}, {256}), PerfError);
  const std::vector<LatencyAnchor> unsorted{kAnchors[1], kAnchors[0]};
  CHECK_THROWS_AS(accumulate(unsorted, {256}), PerfError);
  const std::vector<LatencyAnchor> dup{kAnchors[0], kAnchors[0]};
  CHECK_THROWS_AS(interpolate(dup, 10), PerfError);
  CHECK_THROWS_AS(accumulate(kAnchors, {0}), PerfError);
}

TEST_CASE("accumulation") {
  const std::vector<LatencyAnchor> flat{{1, 11.0, 0.0, 0.0}};
  CHECK(accumulate(flat, {256}).rows[0].accum_s == doctest::Approx(2.816).epsilon(1e-12));

  const LatencyProfile p = accumulate(kAnchors, {256, 1024, 4096});
  REQUIRE(p.rows.size() == 3);
  const double want_total[] = {2.82, 11.31, 45.77};
  const double want_wo[] = {1.95, 7.83, 31.86};
  for (std::size_t i = 0; i < 3; ++i) {
    const auto& r = p.rows[i];
    CAPTURE(r.context_len);
    // Independent sum over positions.
    double wo = 0, fm = 0;
    for (std::size_t n = 1; n <= r.context_len; ++n) {
      wo += oracle_llm(n) + 0.40;
      fm += 3.40;
    }
    CHECK(r.accum_wo_fm_s == doctest::Approx(wo * 1e-3).epsilon(1e-12));
    CHECK(r.accum_s == doctest::Approx((wo + fm) * 1e-3).epsilon(1e-12));
    CHECK(r.accum_s == doctest::Approx(r.accum_wo_fm_s + fm * 1e-3).epsilon(1e-12));
    CHECK(std::abs(r.accum_s - want_total[i]) <= 0.02 * want_total[i]);
    CHECK(std::abs(r.accum_wo_fm_s - want_wo[i]) <= 0.02 * want_wo[i]);
    CHECK(r.total_ms == doctest::Approx(r.llm_ms + r.lmhead_ms + r.fmhead_ms));
  }
  CHECK(p.rows[0].total_ms == doctest::Approx(11.00));
  CHECK(p.rows[2].total_ms == doctest::Approx(11.19));
  CHECK(p.rows[0].accum_s < p.rows[1].accum_s);
}

TEST_CASE("latency csv round trip") {
  const LatencyProfile p = accumulate(kAnchors, {1, 256, 777, 4096});
  std::stringstream io;
  write_latency_csv(io, p);
  CHECK(io.str().rfind("context_len,llm_ms,lmhead_ms,fmhead_ms,total_ms,accum_s,accum_wo_fm_s\n", 0) == 0);
  CHECK(read_latency_csv(io) == p);
  std::istringstream bad("x\n");
  CHECK_THROWS_AS(read_latency_csv(bad), PerfError);
}

TEST_CASE("pairwise relative difference") {
  CHECK(max_pairwise_relative_difference({2.0}) == 0.0);
  CHECK(max_pairwise_relative_difference({1.0, 1.1, 1.05}) == doctest::Approx(0.1));
  CHECK(max_pairwise_relative_difference({0.5, 0.4}) == doctest::Approx(0.25));
  CHECK_THROWS_AS(max_pairwise_relative_difference({0.0, 1.0}), TrainingError);
}

TEST_CASE("head ablation harness") {
  ExperimentConfig cfg = load_experiment_config(kConfigs / "gradcheck.ini");
  cfg.corpus.weights = {0, 1, 0, 0};
  cfg.corpus.size = 6;
  const auto corpus = make_corpus(cfg.corpus);
  const PatchTokenizer tok(cfg.latent);
  const SequenceEncoder enc(Vocabulary::standard(), tok, SequenceEncoder::corpus_stats(tok, corpus), cfg.model.token_dim);
  const Model<float> model = make_model<float>(cfg.model, cfg.head, 1);

  const FlowDataset data = flow_dataset(model, enc, corpus);
  CHECK(data.sample.size() == 6 * 16);
  CHECK(data.cond.cols == cfg.model.model_dim);
  CHECK(data.x1.cols == cfg.model.token_dim);

  std::vector<FMHeadConfig> heads(2);
  heads[0].name = "narrow";
  heads[0].layers = 1;
  heads[0].hidden = 16;
  heads[1].name = "wide";
  heads[1].layers = 2;
  heads[1].hidden = 48;
  AblationConfig ac;
  ac.steps = 30;
  ac.batch_rows = 16;
  ac.warmup = 5;
  ac.psnr_samples = 1;
  ac.euler_steps = 4;
  std::size_t seen = 0;
  const AblationReport rep = ablate_heads(model, enc, corpus, heads, ac, [&](const AblationRow&) { ++seen; });
  CHECK(seen == 2);
  REQUIRE(rep.rows.size() == 2);
  for (std::size_t i = 0; i < 2; ++i) {
    FMHeadConfig full = heads[i];
    full.cond_dim = cfg.model.model_dim;
    full.token_dim = cfg.model.token_dim;
    CHECK(rep.rows[i].params == count_params(full));
    CHECK(std::isfinite(rep.rows[i].eval_loss));
    CHECK(rep.rows[i].psnr_db > 0.0);
  }
  CHECK(rep.max_pairwise_relative ==
        doctest::Approx(max_pairwise_relative_difference({rep.rows[0].eval_loss, rep.rows[1].eval_loss})));

  std::ostringstream csv;
  write_ablation_csv(csv, rep);
  CHECK(csv.str().rfind("name,layers,hidden,params,train_loss,eval_loss,psnr_db\nnarrow,1,16,", 0) == 0);

  CHECK_THROWS_AS(ablate_heads(model, enc, corpus, {}, ac), TrainingError);
}
