#include "arcflow/ablation.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <ostream>
#include <random>

#include "arcflow/heads.hpp"
#include "arcflow/metrics.hpp"
#include "arcflow/sampler.hpp"

namespace arcflow {

FlowDataset flow_dataset(const Model<float>& model, const SequenceEncoder& encoder,
                         const std::vector<CorpusSample>& corpus) {
  const std::size_t d = model.config.model_dim, td = model.config.token_dim;
  std::vector<float> cond, x1;
  FlowDataset out;
  constexpr std::size_t kChunk = 8;
  std::vector<MultimodalSequence> seqs;
  std::vector<std::size_t> owners;
  auto flush = [&] {
    if (seqs.empty()) return;
    const auto packed = pack_sequences<float>(std::span<const MultimodalSequence>(seqs), td);
    const Matrix<float> hidden = backbone_forward(model.backbone, model.config, packed);
    for (std::size_t k = 0; k < packed.num_sequences(); ++k)
      for (std::size_t p = packed.seg_start[k]; p < packed.seg_start[k + 1]; ++p) {
        if (packed.image_row[p] < 0) continue;
        cond.insert(cond.end(), hidden.row(p - 1), hidden.row(p - 1) + d);
        const float* x = packed.images.row(static_cast<std::size_t>(packed.image_row[p]));
        x1.insert(x1.end(), x, x + td);
        out.sample.push_back(owners[k]);
      }
    seqs.clear();
    owners.clear();
  };
  for (std::size_t i = 0; i < corpus.size(); ++i) {
    if (corpus[i].category != Category::kImageText) continue;
    seqs.push_back(encoder.encode(corpus[i], false));
    owners.push_back(i);
    if (seqs.size() == kChunk) flush();
  }
  flush();
  if (out.sample.empty()) throw TrainingError("flow_dataset: corpus has no image-text samples");
  out.cond.rows = out.x1.rows = out.sample.size();
  out.cond.cols = d;
  out.x1.cols = td;
  out.cond.data = std::move(cond);
  out.x1.data = std::move(x1);
  return out;
}

double max_pairwise_relative_difference(const std::vector<double>& values) {
  double worst = 0.0;
  for (std::size_t i = 0; i < values.size(); ++i)
    for (std::size_t j = i + 1; j < values.size(); ++j) {
      const double lo = std::min(values[i], values[j]);
      if (!(lo > 0.0)) throw TrainingError("max_pairwise_relative_difference: values must be positive");
      worst = std::max(worst, std::abs(values[i] - values[j]) / lo);
    }
  return worst;
}

namespace {

struct FlowBatch {
  Matrix<float> cond, xt, target;
  std::vector<float> t;
};

FlowBatch gather(const FlowDataset& data, const std::vector<std::size_t>& rows, std::mt19937_64& rng) {
  const std::size_t d = data.cond.cols, td = data.x1.cols, n = rows.size();
  FlowBatch b{Matrix<float>(n, d), Matrix<float>(n, td), Matrix<float>(n, td), std::vector<float>(n)};
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_real_distribution<double> uniform(0.0, 1.0);
  for (std::size_t i = 0; i < n; ++i) {
    std::copy(data.cond.row(rows[i]), data.cond.row(rows[i]) + d, b.cond.row(i));
    const float t = static_cast<float>(uniform(rng));
    b.t[i] = t;
    const float* x1 = data.x1.row(rows[i]);
    for (std::size_t j = 0; j < td; ++j) {
      const float x0 = static_cast<float>(normal(rng));
      b.xt(i, j) = (1.0f - t) * x0 + t * x1[j];
      b.target(i, j) = x1[j] - x0;
    }
  }
  return b;
}

double eval_loss(const FlowHead<float>& head, const FlowBatch& eval) {
  const Matrix<float> pred = fm_forward(head, eval.xt, std::span<const float>(eval.t), eval.cond);
  return mse(pred, eval.target);
}

double sampled_psnr(const Model<float>& model, const SequenceEncoder& encoder, const std::vector<CorpusSample>& corpus,
                    const FlowDataset& data, const AblationConfig& config) {
  const std::vector<Image> train = corpus_images(corpus);
  std::vector<std::size_t> picks;
  for (std::size_t s : data.sample)
    if (picks.empty() || picks.back() != s) picks.push_back(s);
  picks.resize(std::min(picks.size(), config.psnr_samples));
  if (picks.empty()) return 0.0;
  GuidanceSpec spec;
  spec.conditional_only = true;
  double sum = 0.0;
  for (std::size_t i = 0; i < picks.size(); ++i) {
    const Segment& seg = corpus[picks[i]].segments.front();
    const TokenGrid truth = encoder.tokens(*seg.image);
    SamplerConfig sc;
    sc.euler_steps = config.euler_steps;
    sc.seed = config.seed + i;
    sc.area_rows = truth.rows;
    sc.area_cols = truth.cols;
    const auto result = generate(model, encoder.vocab(), encoder.vocab().tokenize(seg.text), spec, sc);
    const Image img = encoder.decode(result.image);
    double best = 0.0;
    for (const auto& ref : train)
      if (ref.height == img.height && ref.width == img.width) best = std::max(best, psnr(img, ref));
    sum += best;
  }
  return sum / static_cast<double>(picks.size());
}

}  // namespace

AblationReport ablate_heads(const Model<float>& model, const SequenceEncoder& encoder,
                            const std::vector<CorpusSample>& corpus, const std::vector<FMHeadConfig>& heads,
                            const AblationConfig& config, const std::function<void(const AblationRow&)>& on_row) {
  if (heads.empty()) throw TrainingError("ablate_heads: no head configs");
  if (config.steps == 0 || config.batch_rows == 0) throw TrainingError("ablate_heads: steps and batch_rows must be positive");
  const FlowDataset data = flow_dataset(model, encoder, corpus);

  std::vector<std::size_t> eval_rows;
  for (std::size_t r = 0; r < config.eval_repeats; ++r)
    for (std::size_t i = 0; i < data.sample.size(); ++i) eval_rows.push_back(i);
  std::mt19937_64 eval_rng(config.seed ^ 0x9e3779b97f4a7c15ull);
  const FlowBatch eval = gather(data, eval_rows, eval_rng);

  StageConfig schedule;
  schedule.name = "ablation";
  schedule.steps = config.steps;
  schedule.warmup = std::min(config.warmup, config.steps);
  schedule.lr_max = config.lr;
  schedule.lr_min = config.lr_min;
  schedule.schedule = Schedule::kCosine;

  AblationReport report;
  for (FMHeadConfig hc : heads) {
    hc.cond_dim = model.config.model_dim;
    hc.token_dim = model.config.token_dim;
    hc.validate();
    std::mt19937_64 rng(config.seed);
    Model<float> variant = model;
    variant.fm = make_flow_head<float>(hc, model.config.init_std, rng);
    FlowHead<float>& head = variant.fm;
    auto params = tensors_of<float>(head);
    AdamState<float> adam = make_adam_state<float>(params);
    std::uniform_int_distribution<std::size_t> pick(0, data.sample.size() - 1);

    const std::size_t tail = std::max<std::size_t>(1, config.steps / 10);
    double tail_sum = 0.0;
    for (std::size_t step = 0; step < config.steps; ++step) {
      std::vector<std::size_t> rows(config.batch_rows);
      for (auto& r : rows) r = pick(rng);
      const FlowBatch b = gather(data, rows, rng);
      FlowActivations<float> acts;
      const Matrix<float> pred = fm_forward(head, b.xt, std::span<const float>(b.t), b.cond, &acts);
      Matrix<float> d_pred;
      const double loss = mse(pred, b.target, &d_pred);
      if (!std::isfinite(loss)) throw TrainingError("ablate_heads: non-finite loss for head '" + hc.name + "'");
      if (step + tail >= config.steps) tail_sum += loss;
      FlowHead<float> grads = zeros_like_params<float>(head);
      fm_backward<float>(head, b.xt, b.cond, acts, d_pred, grads, nullptr);
      auto gs = tensors_of<float>(grads);
      clip_grad_norm<float>(gs, config.grad_clip);
      std::vector<const Tensor<float>*> cgs(gs.begin(), gs.end());
      adamw_step<float>(params, cgs, adam, lr_at(step, schedule), config.weight_decay);
    }

    AblationRow row;
    row.name = hc.name;
    row.layers = hc.layers;
    row.hidden = hc.hidden;
    row.params = count_params(hc);
    row.train_loss = tail_sum / static_cast<double>(tail);
    row.eval_loss = eval_loss(head, eval);
    row.psnr_db = sampled_psnr(variant, encoder, corpus, data, config);
    if (on_row) on_row(row);
    report.rows.push_back(row);
  }
  std::vector<double> losses;
  for (const auto& r : report.rows) losses.push_back(r.eval_loss);
  report.max_pairwise_relative = max_pairwise_relative_difference(losses);
  return report;
}

void write_ablation_csv(std::ostream& out, const AblationReport& report) {
  out << "name,layers,hidden,params,train_loss,eval_loss,psnr_db\n";
  char buf[256];
  for (const auto& r : report.rows) {
    std::snprintf(buf, sizeof buf, "%s,%zu,%zu,%llu,%.17g,%.17g,%.17g\n", r.name.c_str(), r.layers, r.hidden,
                  static_cast<unsigned long long>(r.params), r.train_loss, r.eval_loss, r.psnr_db);
    out << buf;
  }
}

}  // namespace arcflow
