#include <cmath>
#include <filesystem>
#include <sstream>

#include "arcflow/trainer.hpp"
#include "doctest.h"

using namespace arcflow;

namespace {

const std::filesystem::path kConfigs = ARCFLOW_CONFIG_DIR;

StageConfig schedule(Schedule kind, std::size_t warmup, std::size_t steps, double lo, double hi) {
  StageConfig s;
  s.schedule = kind;
  s.warmup = warmup;
  s.steps = steps;
  s.lr_min = lo;
  s.lr_max = hi;
  return s;
}

Tensor<double> scalar(const std::string& name, double v) {
  Tensor<double> t(name, {1});
  t.data[0] = v;
  return t;
}

struct Run {
  ExperimentConfig cfg;
  StageConfig stage;
  std::vector<CorpusSample> corpus;
};

Run small_run() {
  Run r;
  r.cfg = load_experiment_config(kConfigs / "gradcheck.ini");
  r.stage = r.cfg.stage("check");
  r.stage.batch_size = 4;
  r.stage.lambda_text = 0.01;
  r.corpus = make_corpus(r.cfg.corpus);
  return r;
}

}  // namespace

TEST_CASE("learning rate schedule") {
  const StageConfig warm = schedule(Schedule::kConstant, 10, 100, 0.0, 3e-4);
  CHECK(lr_at(0, warm) == 0.0);
  CHECK(lr_at(5, warm) == doctest::Approx(1.5e-4).epsilon(1e-12));
  CHECK(lr_at(10, warm) == 3e-4);
  CHECK(lr_at(73, warm) == 3e-4);
  CHECK(lr_at(100, warm) == 3e-4);
  CHECK_THROWS_AS(lr_at(101, warm), TrainingError);

  const StageConfig cos = schedule(Schedule::kCosine, 20, 220, 1e-5, 1e-3);
  CHECK(std::abs(lr_at(120, cos) - (1e-3 + 1e-5) / 2) < 1e-9);
  CHECK(lr_at(220, cos) == doctest::Approx(1e-5).epsilon(1e-12));
  // cos decay at an arbitrary step: min + (max - min)(1 + cos(pi f)) / 2
  const double f = (170.0 - 20.0) / 200.0;
  CHECK(lr_at(170, cos) == doctest::Approx(1e-5 + (1e-3 - 1e-5) * 0.5 * (1 + std::cos(M_PI * f))).epsilon(1e-12));

  // Continuous at the warmup boundary.
  for (const auto& s : {warm, cos}) {
    CHECK(std::abs(lr_at(s.warmup, s) - lr_at(s.warmup - 1, s) * double(s.warmup) / double(s.warmup - 1)) < 1e-9 * s.lr_max);
    const double left = lr_at(s.warmup, s), right = lr_at(s.warmup + 1, s);
    CHECK(std::abs(left - right) < 1e-4 * s.lr_max);
  }
  const StageConfig none = schedule(Schedule::kCosine, 0, 10, 0.0, 1.0);
  CHECK(lr_at(0, none) == 1.0);
}

TEST_CASE("adamw") {
  SUBCASE("hand-computed two-step trajectory") {
    Tensor<double> p = scalar("p", 1.0);
    std::vector<Tensor<double>*> params{&p};
    AdamState<double> st = make_adam_state<double>(params);
    const double lr = 0.1, wd = 0.01, b1 = 0.9, b2 = 0.95, eps = 1e-8;
    double want = 1.0, m = 0, v = 0;
    int k = 0;
    for (double g : {0.5, -0.3}) {
      ++k;
      want -= lr * wd * want;
      m = b1 * m + (1 - b1) * g;
      v = b2 * v + (1 - b2) * g * g;
      want -= lr * (m / (1 - std::pow(b1, k))) / (std::sqrt(v / (1 - std::pow(b2, k))) + eps);
      Tensor<double> grad = scalar("p", g);
      std::vector<const Tensor<double>*> gs{&grad};
      adamw_step<double>(params, gs, st, lr, wd);
      CHECK(std::abs(p.data[0] - want) < 1e-12);
    }
    // Literal values: 0.999 - 0.1 * 0.5/(0.5 + 1e-8), then the second step.
    CHECK(std::abs(p.data[0] - want) < 1e-12);
    CHECK(st.step == 2);
    CHECK(st.m[0].name == "m:p");
    CHECK(st.v[0].name == "v:p");
  }
  SUBCASE("zero gradient, zero decay leaves parameters alone") {
    Tensor<double> p("w", {2, 3});
    for (std::size_t i = 0; i < 6; ++i) p.data[i] = double(i) - 2.5;
    const auto before = p.data;
    std::vector<Tensor<double>*> params{&p};
    AdamState<double> st = make_adam_state<double>(params);
    Tensor<double> g = zeros_like(p);
    std::vector<const Tensor<double>*> gs{&g};
    for (int i = 0; i < 3; ++i) adamw_step<double>(params, gs, st, 0.1, 0.0);
    CHECK(p.data == before);
  }
  SUBCASE("weight decay only") {
    Tensor<double> p = scalar("p", 2.0);
    std::vector<Tensor<double>*> params{&p};
    AdamState<double> st = make_adam_state<double>(params);
    Tensor<double> g = scalar("p", 0.0);
    std::vector<const Tensor<double>*> gs{&g};
    adamw_step<double>(params, gs, st, 0.01, 0.1);
    CHECK(p.data[0] == doctest::Approx(2.0 * (1 - 0.001)).epsilon(1e-15));
  }
  SUBCASE("errors") {
    Tensor<double> p("layer.w", {2});
    std::vector<Tensor<double>*> params{&p};
    AdamState<double> st = make_adam_state<double>(params);
    Tensor<double> wrong("layer.w", {3});
    std::vector<const Tensor<double>*> gw{&wrong};
    CHECK_THROWS_AS(adamw_step<double>(params, gw, st, 0.1, 0.0), TrainingError);
    Tensor<double> nan("layer.w", {2});
    nan.data[1] = std::nan("");
    std::vector<const Tensor<double>*> gn{&nan};
    try {
      adamw_step<double>(params, gn, st, 0.1, 0.0);
      FAIL("expected TrainingError");
    } catch (const TrainingError& e) {
      CHECK(std::string(e.what()).find("layer.w") != std::string::npos);
    }
  }
}

TEST_CASE("gradient clipping") {
  Tensor<double> a("a", {2}), b("b", {1});
  a.data = {3.0, 0.0};
  b.data = {4.0};
  std::vector<Tensor<double>*> gs{&a, &b};
  CHECK(clip_grad_norm<double>(gs, 1.0) == doctest::Approx(5.0));
  CHECK(a.data[0] == doctest::Approx(0.6));
  CHECK(b.data[0] == doctest::Approx(0.8));
  CHECK(clip_grad_norm<double>(gs, 10.0) == doctest::Approx(1.0));
  CHECK(b.data[0] == doctest::Approx(0.8));
}

TEST_CASE("batch mixing") {
  CorpusSpec spec;
  spec.size = 400;
  spec.seed = 2;
  const auto corpus = make_corpus(spec);
  const std::array<double, 4> ratios{0.2, 0.6, 0.0, 0.2};
  const std::size_t batches = 10000, batch = 8;
  const auto stream = mix_batches(corpus, ratios, batch, 9, batches);
  REQUIRE(stream.size() == batches);
  std::array<double, 4> freq{};
  for (const auto& b : stream) {
    REQUIRE(b.size() == batch);
    for (auto i : b) freq[static_cast<int>(corpus[i].category)] += 1.0 / double(batches * batch);
  }
  for (int c = 0; c < 4; ++c) {
    CAPTURE(c);
    CHECK(std::abs(freq[c] - ratios[c]) <= 0.02);
  }
  CHECK(mix_batches(corpus, ratios, batch, 9, 50) == std::vector(stream.begin(), stream.begin() + 50));

  const auto pairs = mix_batches(corpus, {0, 1, 0, 0}, 4, 1, 100);
  for (const auto& b : pairs)
    for (auto i : b) CHECK(corpus[i].category == Category::kImageText);

  CorpusSpec only;
  only.size = 20;
  only.weights = {0, 1, 0, 0};
  CHECK_THROWS_AS(mix_batches(make_corpus(only), ratios, 4, 1, 1), TrainingError);
  CHECK_THROWS_AS(mix_batches(corpus, {0.5, 0.6, 0, 0}, 4, 1, 1), TrainingError);
}

TEST_CASE("sequence encoder") {
  const Run r = small_run();
  const Vocabulary v = Vocabulary::standard();
  const PatchTokenizer tok(r.cfg.latent);
  const SequenceEncoder enc(v, tok, SequenceEncoder::corpus_stats(tok, r.corpus), r.cfg.model.token_dim);
  for (const auto& s : r.corpus) {
    if (s.category != Category::kImageText) continue;
    const auto full = enc.encode(s, false), dropped = enc.encode(s, true);
    CHECK(element_id(full.elements.front()) == token::kBos);
    CHECK(element_id(full.elements.back()) == token::kEos);
    CHECK(full.size() - dropped.size() == v.tokenize(s.segments[0].text).size());
    const ParsedSequence p = parse_sequence(dropped, v);
    CHECK(p.images.front() == enc.tokens(*s.segments[0].image));
    break;
  }
  CHECK_THROWS_AS(SequenceEncoder(v, tok, ChannelStats{}, 48), TrainingError);
}

TEST_CASE("loss assembly is exact") {
  const Run r = small_run();
  const PatchTokenizer tok(r.cfg.latent);
  const SequenceEncoder enc(Vocabulary::standard(), tok, SequenceEncoder::corpus_stats(tok, r.corpus),
                            r.cfg.model.token_dim);
  std::vector<MultimodalSequence> seqs;
  for (const auto& s : r.corpus) seqs.push_back(enc.encode(s, false));
  std::mt19937_64 rng(3);
  const auto batch = make_train_batch<float>(seqs, r.cfg.model.token_dim, 2, rng);
  const Model<float> m = make_model<float>(r.cfg.model, r.cfg.head, 4);
  for (auto [lt, lv] : {std::pair{0.01, 1.0}, {0.0, 1.0}, {1.0, 0.0}, {0.37, 2.5}}) {
    const LossBreakdown b = compute_loss(m, batch, lt, lv);
    CHECK(b.total == lt * b.text + lv * b.visual);
    CHECK(b.text_count > 0);
    CHECK(b.image_count == batch.image_pos.size());
  }
}

TEST_CASE("finite differences on a quadratic") {
  // loss = sum_i c_i x_i^2 / 2 with gradient c_i x_i.
  Tensor<double> x("x", {3, 4}), g("x", {3, 4});
  for (std::size_t i = 0; i < 12; ++i) x.data[i] = 0.3 * double(i) - 1.7;
  auto coef = [](std::size_t i) { return 1.0 + 0.5 * double(i); };
  for (std::size_t i = 0; i < 12; ++i) g.data[i] = coef(i) * x.data[i];
  std::vector<Tensor<double>*> ps{&x};
  std::vector<const Tensor<double>*> gs{&g};
  const auto loss = [&] {
    double s = 0;
    for (std::size_t i = 0; i < 12; ++i) s += 0.5 * coef(i) * x.data[i] * x.data[i];
    return s;
  };
  const auto rep = finite_difference_check(ps, gs, loss, 1e-4, 12, 1);
  CHECK(rep.max_rel_error < 1e-9);
  CHECK(rep.coordinates >= 12);
  CHECK(x.data[5] == doctest::Approx(0.3 * 5 - 1.7).epsilon(1e-15));
}

TEST_CASE("full model gradient check in double") {
  const Run r = small_run();
  const PatchTokenizer tok(r.cfg.latent);
  const SequenceEncoder enc(Vocabulary::standard(), tok, SequenceEncoder::corpus_stats(tok, r.corpus),
                            r.cfg.model.token_dim);
  std::vector<MultimodalSequence> seqs;
  for (Category want : {Category::kImageText, Category::kTextOnly})
    for (const auto& s : r.corpus)
      if (s.category == want) {
        seqs.push_back(enc.encode(s, false));
        break;
      }
  REQUIRE(seqs.size() == 2);
  std::mt19937_64 rng(1);
  const auto batch = make_train_batch<double>(seqs, r.cfg.model.token_dim, 1, rng);
  Model<double> model = make_model<double>(r.cfg.model, r.cfg.head, 1);
  const auto rep = gradient_check(model, batch, 1.0, 1.0, 1e-5, 256, 1);
  CHECK(rep.max_rel_error < 1e-4);
  CHECK(rep.tensors == tensors_of<double>(model).size());
}

TEST_CASE("trainer") {
  const Run r = small_run();
  const Model<float> init = make_model<float>(r.cfg.model, r.cfg.head, r.stage.seed);

  SUBCASE("zero steps leave parameters unchanged") {
    Trainer t(r.cfg, r.stage, r.corpus, init);
    CHECK(t.run(0).empty());
    CHECK(tensors_of<float>(t.model()).size() == tensors_of<float>(init).size());
    const auto a = tensors_of<float>(t.model());
    const auto b = tensors_of<float>(init);
    for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i]->data == b[i]->data);
  }
  SUBCASE("each step reports an exact weighted sum and is deterministic") {
    Trainer a(r.cfg, r.stage, r.corpus, init), b(r.cfg, r.stage, r.corpus, init);
    const auto ha = a.run(6), hb = b.run(6);
    REQUIRE(ha.size() == 6);
    for (std::size_t i = 0; i < ha.size(); ++i) {
      CHECK(ha[i].step == i);
      CHECK(ha[i].loss.total == ha[i].loss.lambda_text * ha[i].loss.text + ha[i].loss.lambda_visual * ha[i].loss.visual);
      CHECK(ha[i].loss.total == hb[i].loss.total);
    }
    CHECK(a.rng_state() == b.rng_state());
  }
  SUBCASE("restoring state reproduces the continuation") {
    Trainer full(r.cfg, r.stage, r.corpus, init);
    const auto ref = full.run(20);
    Trainer first(r.cfg, r.stage, r.corpus, init);
    first.run(10);
    Trainer second(r.cfg, r.stage, r.corpus, first.model());
    second.restore(first.current_step(), first.optimizer(), first.rng_state());
    const auto tail = second.run(10);
    REQUIRE(tail.size() == 10);
    for (std::size_t i = 0; i < 10; ++i) {
      CHECK(tail[i].step == ref[10 + i].step);
      CHECK(tail[i].loss.total == ref[10 + i].loss.total);
    }
  }
  SUBCASE("loss csv round trip") {
    Trainer t(r.cfg, r.stage, r.corpus, init);
    const auto h = t.run(3);
    std::stringstream io;
    write_loss_csv(io, h);
    CHECK(io.str().rfind("step,lr,L_text,L_visual,total\n", 0) == 0);
    const auto back = read_loss_csv(io);
    REQUIRE(back.size() == 3);
    for (std::size_t i = 0; i < 3; ++i) {
      CHECK(back[i].step == h[i].step);
      CHECK(back[i].lr == h[i].lr);
      CHECK(back[i].loss.total == h[i].loss.total);
      CHECK(back[i].loss.text == h[i].loss.text);
    }
  }
  SUBCASE("finished stage") {
    StageConfig shortst = r.stage;
    shortst.steps = 2;
    shortst.warmup = 0;
    Trainer t(r.cfg, shortst, r.corpus, init);
    CHECK(t.run(5).size() == 2);
    CHECK_THROWS_AS(t.step(), TrainingError);
  }
}

TEST_CASE("stage eligibility") {
  CorpusSpec spec;
  spec.size = 100;
  spec.image_sizes = {32, 48};
  spec.hq_fraction = 0.5;
  const auto corpus = make_corpus(spec);
  StageConfig st;
  st.image_sizes = {32};
  st.hq_only = true;
  const auto ok = stage_eligibility(corpus, st);
  for (std::size_t i = 0; i < corpus.size(); ++i) {
    bool want = corpus[i].hq;
    for (const auto& seg : corpus[i].segments)
      if (seg.image && seg.image->height != 32) want = false;
    CHECK(ok[i] == want);
  }
}
