// arcflow command-line driver.

#include <cstdio>
#include <exception>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "arcflow/ablation.hpp"
#include "arcflow/checkpoint.hpp"
#include "arcflow/config.hpp"
#include "arcflow/corpus.hpp"
#include "arcflow/heads.hpp"
#include "arcflow/metrics.hpp"
#include "arcflow/perf.hpp"
#include "arcflow/report.hpp"
#include "arcflow/sampler.hpp"
#include "arcflow/trainer.hpp"

namespace fs = std::filesystem;
using namespace arcflow;

namespace {

std::string read_text(const fs::path& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot open " + path.string());
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

std::ofstream open_out(const fs::path& path) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot write " + path.string());
  return f;
}

// A checkpoint argument may name the file or the run directory holding it.
fs::path checkpoint_path(const fs::path& p) {
  if (fs::is_directory(p)) return p / "checkpoint.bin";
  if (!fs::exists(p)) throw CheckpointError("checkpoint not found: " + p.string());
  return p;
}

// Everything needed to run a trained model.
struct Loaded {
  Checkpoint ckpt;
  ExperimentConfig config;
  Model<float> model;
  SequenceEncoder encoder;
};

Loaded load_run(const fs::path& arg) {
  Checkpoint ckpt = load_checkpoint(checkpoint_path(arg));
  ExperimentConfig cfg = parse_experiment_config(ckpt.config_text, "<checkpoint>");
  Model<float> model = checkpoint_model(ckpt);
  SequenceEncoder enc(Vocabulary::standard(cfg.model.vocab_size), PatchTokenizer(cfg.latent), checkpoint_stats(ckpt),
                      cfg.model.token_dim);
  return {std::move(ckpt), std::move(cfg), std::move(model), std::move(enc)};
}

std::vector<std::size_t> parse_lengths(const std::string& text) {
  std::vector<std::size_t> out;
  for (double v : parse_number_list(text)) {
    if (v < 1 || v != static_cast<double>(static_cast<std::size_t>(v))) {
      throw std::invalid_argument("--lengths: expected positive integers, got '" + text + "'");
    }
    out.push_back(static_cast<std::size_t>(v));
  }
  return out;
}

LatentHistogram corpus_histogram(const SequenceEncoder& enc, const std::vector<CorpusSample>& corpus) {
  std::vector<LatentGrid> grids;
  for (const auto& img : corpus_images(corpus)) grids.push_back(normalize(enc.tokenizer().encode(img), enc.stats()));
  if (grids.empty()) return {};
  return latent_histogram(grids, 32);
}

int cmd_corpus(const fs::path& spec, const fs::path& out) {
  const ExperimentConfig cfg = load_experiment_config(spec);
  const auto corpus = make_corpus(cfg.corpus);
  write_corpus(out, corpus);
  std::size_t counts[kNumCategories] = {};
  for (const auto& s : corpus) ++counts[static_cast<int>(s.category)];
  std::printf("wrote %zu samples to %s\n", corpus.size(), out.c_str());
  for (std::size_t c = 0; c < kNumCategories; ++c)
    std::printf("  %-14s %zu\n", category_name(static_cast<Category>(c)), counts[c]);
  return 0;
}

struct TrainArgs {
  fs::path config, out, init, resume;
  std::string stage;
  std::size_t steps = 0;  // 0: the full stage
};

int cmd_train(const TrainArgs& a) {
  const std::string text = read_text(a.config);
  const ExperimentConfig cfg = parse_experiment_config(text, a.config.string());
  const StageConfig& stage = cfg.stage(a.stage);
  auto corpus = make_corpus(cfg.corpus);

  Model<float> model = make_model<float>(cfg.model, cfg.head, stage.seed);
  if (!a.init.empty()) model = checkpoint_model(load_checkpoint(checkpoint_path(a.init)));
  Trainer trainer(cfg, stage, corpus, std::move(model));
  if (!a.resume.empty()) resume(trainer, load_checkpoint(checkpoint_path(a.resume)));

  fs::create_directories(a.out);
  const std::size_t remaining = stage.steps - trainer.current_step();
  const std::size_t count = a.steps ? std::min(a.steps, remaining) : remaining;
  std::printf("stage %s: %zu params, steps %zu..%zu\n", stage.name.c_str(), param_count<float>(trainer.model()),
              trainer.current_step(), trainer.current_step() + count);

  std::vector<LossRecord> history;
  auto on_step = [&](const Trainer& t) {
    if (stage.checkpoint_every && t.current_step() % stage.checkpoint_every == 0) {
      char name[48];
      std::snprintf(name, sizeof name, "ckpt_%06zu.bin", t.current_step());
      save_checkpoint(a.out / name, make_checkpoint(t, text));
    }
  };
  try {
    for (std::size_t i = 0; i < count; ++i) {
      history.push_back(trainer.step());
      on_step(trainer);
      const auto& r = history.back();
      if (r.step % 50 == 0 || i + 1 == count) {
        std::printf("step %5zu  lr %.3e  L_text %.4f  L_visual %.4f  total %.4f\n", r.step, r.lr, r.loss.text,
                    r.loss.visual, r.loss.total);
        std::fflush(stdout);
      }
    }
  } catch (const TrainingError& e) {
    // Keep the state that produced the failure for inspection.
    save_checkpoint(a.out / "diverged.bin", make_checkpoint(trainer, text));
    auto f = open_out(a.out / "loss.csv");
    write_loss_csv(f, history);
    std::fprintf(stderr, "error: %s (diagnostic checkpoint: %s)\n", e.what(), (a.out / "diverged.bin").c_str());
    return 2;
  }
  save_checkpoint(a.out / "checkpoint.bin", make_checkpoint(trainer, text));
  auto f = open_out(a.out / "loss.csv");
  write_loss_csv(f, history);
  std::printf("saved %s\n", (a.out / "checkpoint.bin").c_str());
  return 0;
}

struct SampleArgs {
  fs::path ckpt, out, trace;
  std::string prompt, area;
  double cfg_scale = 1.0;
  std::size_t steps = 0;
  std::uint64_t seed = 0;
  bool renormalize = false;
};

int cmd_sample(const SampleArgs& a) {
  const Loaded run = load_run(a.ckpt);
  SamplerConfig sc = run.config.sampler;
  if (a.steps) sc.euler_steps = a.steps;
  sc.seed = a.seed;
  sc.renormalize_tokens = a.renormalize;
  if (!a.area.empty()) {
    const auto x = a.area.find('x');
    if (x == std::string::npos) throw std::invalid_argument("--area: expected ROWSxCOLS");
    sc.area_rows = std::stoul(a.area.substr(0, x));
    sc.area_cols = std::stoul(a.area.substr(x + 1));
  }
  sc.validate();
  GuidanceSpec spec;
  spec.w = a.cfg_scale;
  const auto& vocab = run.encoder.vocab();
  GenerationResult result;
  try {
    result = generate(run.model, vocab, vocab.tokenize(a.prompt), spec, sc);
  } catch (const GenerationError& e) {
    if (!a.trace.empty()) {
      auto f = open_out(a.trace);
      write_trace_csv(f, e.trace);
    }
    throw;
  }
  if (!result.text_ids.empty()) std::printf("text: %s\n", vocab.detokenize(result.text_ids).c_str());
  write_ppm(a.out, run.encoder.decode(result.image));
  if (!a.trace.empty()) {
    auto f = open_out(a.trace);
    write_trace_csv(f, result.trace);
  }
  const DriftReport drift = drift_report(result.trace);
  std::printf("wrote %s (%zux%zu tokens); max |mean| %.4f, max |var-1| %.4f, band violations %zu\n", a.out.c_str(),
              result.image.rows, result.image.cols, drift.max_abs_mean, drift.max_var_deviation, drift.violations);
  return 0;
}

int cmd_gradcheck(const fs::path& config) {
  ExperimentConfig cfg = load_experiment_config(config);
  const StageConfig stage = cfg.stages.empty() ? StageConfig{} : cfg.stages.front();
  cfg.corpus.size = std::max<std::size_t>(cfg.corpus.size, 8);
  const auto corpus = make_corpus(cfg.corpus);
  const Vocabulary vocab = Vocabulary::standard(cfg.model.vocab_size);
  const PatchTokenizer tok(cfg.latent);
  const SequenceEncoder enc(vocab, tok, SequenceEncoder::corpus_stats(tok, corpus), cfg.model.token_dim);

  // One sequence with text and an image, one text-only.
  std::vector<MultimodalSequence> seqs;
  for (Category want : {Category::kImageText, Category::kTextOnly})
    for (const auto& s : corpus)
      if (s.category == want) {
        seqs.push_back(enc.encode(s, false));
        break;
      }
  std::mt19937_64 rng(stage.seed);
  const auto batch = make_train_batch<double>(seqs, cfg.model.token_dim, 1, rng);
  Model<double> model = make_model<double>(cfg.model, cfg.head, stage.seed);
  const double lt = stage.lambda_text > 0 ? stage.lambda_text : 1.0;
  const double lv = stage.lambda_visual > 0 ? stage.lambda_visual : 1.0;
  for (double eps : {1e-4, 1e-5, 1e-6}) {
    const auto rep = gradient_check(model, batch, lt, lv, eps, 256, stage.seed);
    std::printf("eps %.0e: max rel error %.3e over %zu coords in %zu tensors (worst %s)\n", eps, rep.max_rel_error,
                rep.coordinates, rep.tensors, rep.worst_tensor.c_str());
  }
  const auto rep = gradient_check(model, batch, lt, lv);
  std::printf("%s: max rel error %.3e at eps 1e-5\n", rep.max_rel_error < 1e-4 ? "PASS" : "FAIL", rep.max_rel_error);
  return rep.max_rel_error < 1e-4 ? 0 : 1;
}

int cmd_latency(const fs::path& hw_path, const fs::path& anchors_path, const std::string& lengths, const fs::path& out) {
  const HardwareSpec hw = load_hardware(hw_path);
  const auto anchors = load_anchors(anchors_path);
  const LatencyProfile profile = accumulate(anchors, parse_lengths(lengths));
  auto f = open_out(out);
  write_latency_csv(f, profile);
  std::cout << describe_latency_model(hw, anchors);
  for (const auto& r : profile.rows)
    std::printf("N=%zu  last-token %.2f ms  accumulated %.2f s  w/o FM %.2f s\n", r.context_len, r.total_ms, r.accum_s,
                r.accum_wo_fm_s);
  return 0;
}

struct AblateArgs {
  fs::path ckpt, configs, out;
  std::size_t steps = 10000;
  std::size_t batch = 64;
  std::uint64_t seed = 1;
};

int cmd_ablate(const AblateArgs& a) {
  const Loaded run = load_run(a.ckpt);
  const ExperimentConfig heads = load_experiment_config(a.configs);
  std::vector<FMHeadConfig> variants = heads.head_variants;
  if (variants.empty()) throw ConfigError(a.configs.string() + ": no [head.<name>] sections");
  AblationConfig ac;
  ac.steps = a.steps;
  ac.batch_rows = a.batch;
  ac.seed = a.seed;
  const auto corpus = make_corpus(run.config.corpus);
  const auto report = ablate_heads(run.model, run.encoder, corpus, variants, ac, [](const AblationRow& r) {
    std::printf("%-8s layers %zu hidden %zu params %llu: eval fm_loss %.5f, psnr %.2f dB\n", r.name.c_str(), r.layers,
                r.hidden, static_cast<unsigned long long>(r.params), r.eval_loss, r.psnr_db);
    std::fflush(stdout);
  });
  if (a.out.empty()) {
    write_ablation_csv(std::cout, report);
  } else {
    auto f = open_out(a.out);
    write_ablation_csv(f, report);
  }
  std::printf("max pairwise relative difference: %.4f\n", report.max_pairwise_relative);
  return 0;
}

int cmd_params(const fs::path& config) {
  const ExperimentConfig cfg = load_experiment_config(config);
  std::vector<FMHeadConfig> heads = cfg.head_variants;
  if (heads.empty()) heads.push_back(cfg.head);
  std::printf("name,layers,hidden,params\n");
  for (const auto& h : heads)
    std::printf("%s,%zu,%zu,%llu\n", h.name.c_str(), h.layers, h.hidden, static_cast<unsigned long long>(count_params(h)));
  return 0;
}

struct ReportArgs {
  fs::path ckpt, out, loss, hw, anchors;
  std::string lengths = "256,1024,4096";
  std::size_t samples = 4;
  double cfg_scale = 1.0;
};

int cmd_report(const ReportArgs& a) {
  RunArtifacts art;
  if (!a.loss.empty()) {
    std::ifstream f(a.loss);
    if (!f) throw std::runtime_error("cannot open " + a.loss.string());
    art.losses = read_loss_csv(f);
  }
  if (!a.hw.empty() && !a.anchors.empty()) {
    const HardwareSpec hw = load_hardware(a.hw);
    const auto anchors = load_anchors(a.anchors);
    art.latency = accumulate(anchors, parse_lengths(a.lengths));
    art.latency_model = describe_latency_model(hw, anchors);
  }
  if (!a.ckpt.empty()) {
    const Loaded run = load_run(a.ckpt);
    const auto corpus = make_corpus(run.config.corpus);
    art.histogram = corpus_histogram(run.encoder, corpus);
    GuidanceSpec spec;
    spec.w = a.cfg_scale;
    std::size_t made = 0;
    for (const auto& s : corpus) {
      if (made == a.samples) break;
      if (s.category != Category::kImageText) continue;
      const Segment& seg = s.segments.front();
      SamplerConfig sc = run.config.sampler;
      sc.seed = made;
      const TokenGrid truth = run.encoder.tokens(*seg.image);
      sc.area_rows = truth.rows;
      sc.area_cols = truth.cols;
      const auto result = generate(run.model, run.encoder.vocab(), run.encoder.vocab().tokenize(seg.text), spec, sc);
      for (const auto& r : result.trace.records) art.trace.records.push_back({art.trace.size(), r.mean, r.variance});
      art.samples.push_back(run.encoder.decode(result.image));
      art.captions.push_back(seg.text);
      ++made;
    }
  }
  write_report(a.out, art);
  std::printf("wrote report to %s\n", a.out.c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"arcflow: autoregressive text-to-image model with a flow-matching head"};
  app.require_subcommand(1);
  int status = 0;

  auto* corpus = app.add_subcommand("corpus", "Generate the synthetic corpus");
  fs::path corpus_spec, corpus_out;
  corpus->add_option("--spec", corpus_spec, "Config file with a [corpus] section")->required();
  corpus->add_option("--out", corpus_out, "Output directory")->required();
  corpus->callback([&] { status = cmd_corpus(corpus_spec, corpus_out); });

  auto* train = app.add_subcommand("train", "Run one training stage");
  TrainArgs ta;
  train->add_option("--config", ta.config)->required();
  train->add_option("--stage", ta.stage)->required();
  train->add_option("--out", ta.out, "Run directory")->required();
  train->add_option("--init", ta.init, "Initialize weights from a previous stage's checkpoint");
  train->add_option("--resume", ta.resume, "Resume this stage from a checkpoint");
  train->add_option("--steps", ta.steps, "Stop after this many steps (0 = to the end of the stage)");
  train->callback([&] { status = cmd_train(ta); });

  auto* sample = app.add_subcommand("sample", "Generate an image from a prompt");
  SampleArgs sa;
  sample->add_option("--ckpt", sa.ckpt, "Checkpoint file or run directory")->required();
  sample->add_option("--prompt", sa.prompt)->required();
  sample->add_option("--cfg-scale", sa.cfg_scale, "Guidance weight w");
  sample->add_option("--steps", sa.steps, "Euler steps (default from config)");
  sample->add_option("--seed", sa.seed);
  sample->add_option("--out", sa.out, "Output PPM")->required();
  sample->add_option("--trace", sa.trace, "Per-token mean/variance CSV");
  sample->add_option("--area", sa.area, "Force the image area, e.g. 4x4");
  sample->add_flag("--renormalize", sa.renormalize, "Renormalize each sampled token to zero mean, unit variance");
  sample->callback([&] { status = cmd_sample(sa); });

  auto* gradcheck = app.add_subcommand("gradcheck", "Compare analytic and finite-difference gradients");
  fs::path gc_config;
  gradcheck->add_option("--config", gc_config)->required();
  gradcheck->callback([&] { status = cmd_gradcheck(gc_config); });

  auto* latency = app.add_subcommand("latency", "Roofline latency table");
  fs::path hw, anchors, lat_out = "latency.csv";
  std::string lengths = "256,1024,4096";
  latency->add_option("--hw", hw)->required();
  latency->add_option("--anchors", anchors)->required();
  latency->add_option("--lengths", lengths);
  latency->add_option("--out", lat_out);
  latency->callback([&] { status = cmd_latency(hw, anchors, lengths, lat_out); });

  auto* ablate = app.add_subcommand("ablate", "Head-size ablation on a frozen backbone");
  AblateArgs aa;
  ablate->add_option("--ckpt", aa.ckpt, "Checkpoint file or run directory")->required();
  ablate->add_option("--configs", aa.configs, "Config with [head.<name>] sections")->required();
  ablate->add_option("--steps", aa.steps);
  ablate->add_option("--batch", aa.batch, "Flow samples per step");
  ablate->add_option("--seed", aa.seed);
  ablate->add_option("--out", aa.out, "CSV path (default stdout)");
  ablate->callback([&] { status = cmd_ablate(aa); });

  auto* params = app.add_subcommand("params", "Flow-head parameter counts");
  fs::path params_config;
  params->add_option("--config", params_config)->required();
  params->callback([&] { status = cmd_params(params_config); });

  auto* report = app.add_subcommand("report", "Write the consolidated report directory");
  ReportArgs ra;
  report->add_option("--out", ra.out)->required();
  report->add_option("--ckpt", ra.ckpt);
  report->add_option("--loss", ra.loss, "loss.csv from a training run");
  report->add_option("--hw", ra.hw);
  report->add_option("--anchors", ra.anchors);
  report->add_option("--lengths", ra.lengths);
  report->add_option("--samples", ra.samples);
  report->add_option("--cfg-scale", ra.cfg_scale);
  report->callback([&] { status = cmd_report(ra); });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return status;
}
