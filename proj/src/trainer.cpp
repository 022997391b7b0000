#include "arcflow/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numbers>
#include <ostream>
#include <sstream>

#include "arcflow/kernels.hpp"

namespace arcflow {

namespace k = kernels;

double lr_at(std::size_t step, const StageConfig& stage) {
  if (step > stage.steps) {
    throw TrainingError("lr_at: step " + std::to_string(step) + " outside [0, " + std::to_string(stage.steps) + "]");
  }
  if (step < stage.warmup) return stage.lr_max * static_cast<double>(step) / static_cast<double>(stage.warmup);
  if (stage.schedule == Schedule::kConstant) return stage.lr_max;
  const std::size_t decay = stage.steps - stage.warmup;
  if (decay == 0) return stage.lr_max;
  const double p = static_cast<double>(step - stage.warmup) / static_cast<double>(decay);
  return stage.lr_min + 0.5 * (stage.lr_max - stage.lr_min) * (1.0 + std::cos(std::numbers::pi * p));
}

template <typename T>
AdamState<T> make_adam_state(std::span<Tensor<T>* const> params) {
  AdamState<T> s;
  for (const auto* p : params) {
    s.m.emplace_back("m:" + p->name, p->shape);
    s.v.emplace_back("v:" + p->name, p->shape);
  }
  return s;
}

template <typename T>
void adamw_step(std::span<Tensor<T>* const> params, std::span<const Tensor<T>* const> grads, AdamState<T>& state,
                double lr, double weight_decay, const AdamConfig& hyper) {
  if (params.size() != grads.size() || params.size() != state.m.size() || params.size() != state.v.size()) {
    throw TrainingError("adamw_step: parameter, gradient and moment counts differ");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& p = *params[i];
    if (grads[i]->shape != p.shape || state.m[i].shape != p.shape || state.v[i].shape != p.shape) {
      throw TrainingError("adamw_step: shape mismatch for '" + p.name + "'");
    }
    for (T g : grads[i]->data)
      if (!std::isfinite(static_cast<double>(g))) throw TrainingError("adamw_step: non-finite gradient in '" + p.name + "'");
  }
  ++state.step;
  const double b1 = hyper.beta1, b2 = hyper.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(state.step));
  const double decay = 1.0 - lr * weight_decay;
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = params[i]->data;
    const auto& g = grads[i]->data;
    auto& m = state.m[i].data;
    auto& v = state.v[i].data;
    for (std::size_t j = 0; j < p.size(); ++j) {
      const double gj = static_cast<double>(g[j]);
      const double mj = b1 * static_cast<double>(m[j]) + (1.0 - b1) * gj;
      const double vj = b2 * static_cast<double>(v[j]) + (1.0 - b2) * gj * gj;
      m[j] = static_cast<T>(mj);
      v[j] = static_cast<T>(vj);
      const double update = (mj / c1) / (std::sqrt(vj / c2) + hyper.eps);
      p[j] = static_cast<T>(static_cast<double>(p[j]) * decay - lr * update);
    }
  }
}

template <typename T>
double clip_grad_norm(std::span<Tensor<T>* const> grads, double max_norm) {
  double sq = 0.0;
  for (const auto* g : grads)
    for (T x : g->data) sq += static_cast<double>(x) * static_cast<double>(x);
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const T scale = static_cast<T>(max_norm / norm);
    for (auto* g : grads)
      for (auto& x : g->data) x *= scale;
  }
  return norm;
}

BatchMixer::BatchMixer(const std::vector<CorpusSample>& dataset, const std::array<double, kNumCategories>& ratios,
                       std::size_t batch_size, const std::vector<bool>& eligible)
    : ratios_(ratios), batch_size_(batch_size) {
  if (batch_size == 0) throw TrainingError("BatchMixer: batch_size must be positive");
  if (!eligible.empty() && eligible.size() != dataset.size()) throw TrainingError("BatchMixer: eligibility size mismatch");
  double sum = 0.0;
  for (double r : ratios) {
    if (!(r >= 0.0)) throw TrainingError("BatchMixer: ratios must be non-negative");
    sum += r;
  }
  if (std::abs(sum - 1.0) > 1e-9) throw TrainingError("BatchMixer: ratios must sum to 1");
  for (std::size_t i = 0; i < dataset.size(); ++i)
    if (eligible.empty() || eligible[i]) pools_[static_cast<std::size_t>(dataset[i].category)].push_back(i);
  for (std::size_t c = 0; c < kNumCategories; ++c) {
    if (ratios_[c] > 0.0 && pools_[c].empty()) {
      throw TrainingError(std::string("BatchMixer: ratio > 0 for empty category '") +
                          category_name(static_cast<Category>(c)) + "'");
    }
  }
}

std::vector<std::size_t> BatchMixer::next(std::mt19937_64& rng) const {
  std::discrete_distribution<std::size_t> category(ratios_.begin(), ratios_.end());
  std::vector<std::size_t> out;
  out.reserve(batch_size_);
  for (std::size_t i = 0; i < batch_size_; ++i) {
    const auto& pool = pools_[category(rng)];
    std::uniform_int_distribution<std::size_t> pick(0, pool.size() - 1);
    out.push_back(pool[pick(rng)]);
  }
  return out;
}

std::vector<std::vector<std::size_t>> mix_batches(const std::vector<CorpusSample>& dataset,
                                                  const std::array<double, kNumCategories>& ratios,
                                                  std::size_t batch_size, std::uint64_t seed, std::size_t count) {
  BatchMixer mixer(dataset, ratios, batch_size);
  std::mt19937_64 rng(seed);
  std::vector<std::vector<std::size_t>> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) out.push_back(mixer.next(rng));
  return out;
}

SequenceEncoder::SequenceEncoder(Vocabulary vocab, PatchTokenizer tokenizer, ChannelStats stats, std::size_t token_dim)
    : vocab_(std::move(vocab)), tokenizer_(std::move(tokenizer)), stats_(std::move(stats)), token_dim_(token_dim) {
  if (token_dim_ != 4 * tokenizer_.config().channels) {
    throw TrainingError("SequenceEncoder: token_dim must be 4 x latent channels");
  }
}

ChannelStats SequenceEncoder::corpus_stats(const PatchTokenizer& tokenizer, const std::vector<CorpusSample>& corpus) {
  std::vector<LatentGrid> grids;
  for (const auto& img : corpus_images(corpus)) grids.push_back(tokenizer.encode(img));
  return compute_channel_stats(grids);
}

MultimodalSequence SequenceEncoder::encode(const CorpusSample& sample, bool drop_caption, double gamma,
                                           std::mt19937_64* rng) const {
  if (gamma > 0.0 && !rng) throw TrainingError("SequenceEncoder: latent noise needs an RNG");
  MultimodalSequence seq;
  seq.token_dim = token_dim_;
  append_ids(seq, vocab_, {token::kBos});
  for (const auto& seg : sample.segments) {
    const bool drop = drop_caption && sample.category == Category::kImageText;
    if (!drop) append_ids(seq, vocab_, vocab_.tokenize(seg.text));
    if (!seg.image) continue;
    LatentGrid z = normalize(tokenizer_.encode(*seg.image), stats_);
    if (gamma > 0.0) z = perturb(z, {static_cast<float>(gamma), (*rng)()});
    append_image(seq, vocab_, space_to_depth(z));
  }
  append_ids(seq, vocab_, {token::kEos});
  return seq;
}

template <typename T>
TrainBatch<T> make_train_batch(std::span<const MultimodalSequence> sequences, std::size_t token_dim,
                               std::size_t repeats, std::mt19937_64& rng) {
  if (repeats == 0) throw TrainingError("make_train_batch: repeats must be positive");
  TrainBatch<T> b;
  b.packed = pack_sequences<T>(sequences, token_dim);
  b.repeats = repeats;
  b.text_targets.assign(b.packed.size(), -1);
  std::size_t row = 0;
  for (const auto& seq : sequences) {
    for (std::size_t i = 0; i < seq.size(); ++i, ++row) {
      if (i + 1 < seq.size() && !is_image(seq.elements[i + 1])) b.text_targets[row] = element_id(seq.elements[i + 1]);
      if (is_image(seq.elements[i])) {
        if (i == 0) throw TrainingError("make_train_batch: a sequence may not start with an image token");
        b.image_pos.push_back(row);
      }
    }
  }
  const std::size_t n = b.image_pos.size() * repeats;
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_real_distribution<double> uniform(0.0, 1.0);
  b.x0.resize(n, token_dim);
  b.t.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < token_dim; ++j) b.x0(i, j) = static_cast<T>(normal(rng));
    b.t[i] = static_cast<T>(uniform(rng));
  }
  return b;
}

template <typename T>
LossBreakdown compute_loss(const Model<T>& model, const TrainBatch<T>& batch, double lambda_text,
                           double lambda_visual, Model<T>* grads) {
  const auto& cfg = model.config;
  const std::size_t d = cfg.model_dim, td = cfg.token_dim, v = model.lm.w.shape[1];
  BackboneActivations<T> acts;
  const Matrix<T> hidden = backbone_forward(model.backbone, cfg, batch.packed, grads ? &acts : nullptr);

  // Text positions.
  std::vector<std::size_t> text_rows;
  std::vector<int> targets;
  for (std::size_t i = 0; i < batch.text_targets.size(); ++i) {
    if (batch.text_targets[i] < 0) continue;
    text_rows.push_back(i);
    targets.push_back(batch.text_targets[i]);
  }
  Matrix<T> ht(text_rows.size(), d);
  for (std::size_t r = 0; r < text_rows.size(); ++r) std::copy(hidden.row(text_rows[r]), hidden.row(text_rows[r]) + d, ht.row(r));
  Matrix<T> d_logits;
  CrossEntropy ce;
  if (!text_rows.empty()) ce = ce_loss(lm_logits(model.lm, ht), std::span<const int>(targets), grads ? &d_logits : nullptr);

  // Image positions: condition on the hidden state of the previous element.
  const std::size_t reps = batch.repeats, m = batch.image_pos.size(), n = m * reps;
  Matrix<T> cond(n, d), xt(n, td), target(n, td);
  for (std::size_t i = 0; i < m; ++i) {
    const std::size_t p = batch.image_pos[i];
    const T* x1 = batch.packed.images.row(static_cast<std::size_t>(batch.packed.image_row[p]));
    for (std::size_t r = 0; r < reps; ++r) {
      const std::size_t row = i * reps + r;
      std::copy(hidden.row(p - 1), hidden.row(p - 1) + d, cond.row(row));
      const T t = batch.t[row];
      const T* x0 = batch.x0.row(row);
      for (std::size_t j = 0; j < td; ++j) {
        xt(row, j) = (T{1} - t) * x0[j] + t * x1[j];
        target(row, j) = x1[j] - x0[j];
      }
    }
  }
  FlowActivations<T> facts;
  Matrix<T> d_pred;
  double visual = 0.0;
  if (n > 0) {
    const Matrix<T> pred = fm_forward(model.fm, xt, std::span<const T>(batch.t), cond, grads ? &facts : nullptr);
    visual = mse(pred, target, grads ? &d_pred : nullptr);
  }
  const LossBreakdown out = make_breakdown(ce.loss, visual, lambda_text, lambda_visual, ce.count, m);
  if (!grads) return out;

  Matrix<T> d_hidden(hidden.rows, d);
  if (ce.count > 0) {
    for (auto& x : d_logits.data) x *= static_cast<T>(lambda_text);
    k::matmul_at_b(ht.data.data(), d_logits.data.data(), grads->lm.w.data.data(), ht.rows, d, v);
    k::sum_rows(d_logits.data.data(), grads->lm.b.data.data(), ht.rows, v);
    Matrix<T> d_ht(ht.rows, d);
    k::matmul_a_bt(d_logits.data.data(), model.lm.w.data.data(), d_ht.data.data(), ht.rows, v, d);
    for (std::size_t r = 0; r < text_rows.size(); ++r) {
      T* dst = d_hidden.row(text_rows[r]);
      const T* src = d_ht.row(r);
      for (std::size_t j = 0; j < d; ++j) dst[j] += src[j];
    }
  }
  if (n > 0) {
    for (auto& x : d_pred.data) x *= static_cast<T>(lambda_visual);
    Matrix<T> d_cond;
    fm_backward(model.fm, xt, cond, facts, d_pred, grads->fm, &d_cond);
    for (std::size_t i = 0; i < m; ++i) {
      T* dst = d_hidden.row(batch.image_pos[i] - 1);
      for (std::size_t r = 0; r < reps; ++r) {
        const T* src = d_cond.row(i * reps + r);
        for (std::size_t j = 0; j < d; ++j) dst[j] += src[j];
      }
    }
  }
  backbone_backward(model.backbone, cfg, batch.packed, acts, d_hidden, grads->backbone);
  return out;
}

GradCheckReport finite_difference_check(std::span<Tensor<double>* const> params,
                                        std::span<const Tensor<double>* const> analytic,
                                        const std::function<double()>& loss, double epsilon,
                                        std::size_t min_coords, std::uint64_t seed) {
  if (params.size() != analytic.size()) throw TrainingError("gradient check: parameter/gradient count mismatch");
  std::mt19937_64 rng(seed);
  std::vector<std::pair<std::size_t, std::size_t>> coords;
  const std::size_t per_tensor =
      std::max<std::size_t>(2, (min_coords + params.size() - 1) / std::max<std::size_t>(params.size(), 1));
  for (std::size_t i = 0; i < params.size(); ++i) {
    const std::size_t numel = params[i]->numel();
    if (numel == 0) continue;
    std::uniform_int_distribution<std::size_t> pick(0, numel - 1);
    for (std::size_t c = 0; c < std::min(per_tensor, numel); ++c) coords.emplace_back(i, pick(rng));
  }
  std::uniform_int_distribution<std::size_t> pick_tensor(0, params.empty() ? 0 : params.size() - 1);
  while (coords.size() < min_coords && !params.empty()) {
    const std::size_t i = pick_tensor(rng);
    if (params[i]->numel() == 0) continue;
    std::uniform_int_distribution<std::size_t> pick(0, params[i]->numel() - 1);
    coords.emplace_back(i, pick(rng));
  }

  GradCheckReport rep;
  rep.epsilon = epsilon;
  rep.tensors = params.size();
  rep.coordinates = coords.size();
  for (const auto& [i, j] : coords) {
    double& x = params[i]->data[j];
    const double saved = x;
    x = saved + epsilon;
    const double up = loss();
    x = saved - epsilon;
    const double down = loss();
    x = saved;
    const double numeric = (up - down) / (2.0 * epsilon);
    const double a = analytic[i]->data[j];
    const double rel = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), 1e-6});
    if (rep.worst_tensor.empty() || rel > rep.max_rel_error) {
      rep.max_rel_error = rel;
      rep.worst_tensor = params[i]->name;
    }
  }
  return rep;
}

GradCheckReport gradient_check(Model<double>& model, const TrainBatch<double>& batch, double lambda_text,
                               double lambda_visual, double epsilon, std::size_t min_coords, std::uint64_t seed) {
  Model<double> grads = zeros_like_params<double>(model);
  compute_loss(model, batch, lambda_text, lambda_visual, &grads);
  auto params = tensors_of<double>(model);
  auto analytic = tensors_of<double>(std::as_const(grads));
  return finite_difference_check(params, analytic,
                                 [&] { return compute_loss(model, batch, lambda_text, lambda_visual).total; },
                                 epsilon, min_coords, seed);
}

void write_loss_csv(std::ostream& out, std::span<const LossRecord> history) {
  out << "step,lr,L_text,L_visual,total\n";
  char buf[160];
  for (const auto& r : history) {
    std::snprintf(buf, sizeof buf, "%zu,%.17g,%.17g,%.17g,%.17g\n", r.step, r.lr, r.loss.text, r.loss.visual,
                  r.loss.total);
    out << buf;
  }
}

std::vector<LossRecord> read_loss_csv(std::istream& in) {
  std::string line;
  if (!std::getline(in, line) || line != "step,lr,L_text,L_visual,total") throw TrainingError("loss csv: bad header");
  std::vector<LossRecord> out;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto v = parse_number_list(line);
    if (v.size() != 5) throw TrainingError("loss csv: malformed row '" + line + "'");
    LossRecord r;
    r.step = static_cast<std::size_t>(v[0]);
    r.lr = v[1];
    r.loss.text = v[2];
    r.loss.visual = v[3];
    r.loss.total = v[4];
    out.push_back(r);
  }
  return out;
}

std::vector<bool> stage_eligibility(const std::vector<CorpusSample>& corpus, const StageConfig& stage) {
  std::vector<bool> out(corpus.size(), true);
  for (std::size_t i = 0; i < corpus.size(); ++i) {
    const auto& s = corpus[i];
    if (stage.hq_only && !s.hq) out[i] = false;
    for (const auto& seg : s.segments) {
      if (seg.image && std::find(stage.image_sizes.begin(), stage.image_sizes.end(), seg.image->height) ==
                           stage.image_sizes.end()) {
        out[i] = false;
      }
    }
  }
  return out;
}

namespace {

ChannelStats stats_for(const ExperimentConfig& config, const std::vector<CorpusSample>& corpus) {
  return SequenceEncoder::corpus_stats(PatchTokenizer(config.latent), corpus);
}

}  // namespace

Trainer::Trainer(const ExperimentConfig& config, const StageConfig& stage, std::vector<CorpusSample> corpus,
                 Model<float> model)
    : config_(config),
      stage_(stage),
      corpus_(std::move(corpus)),
      encoder_(Vocabulary::standard(config.model.vocab_size), PatchTokenizer(config.latent),
               stats_for(config, corpus_), config.model.token_dim),
      mixer_(corpus_, stage.ratios, stage.batch_size, stage_eligibility(corpus_, stage)),
      model_(std::move(model)),
      rng_(stage.seed) {
  stage_.validate();
  if (model_.lm.w.shape[1] != encoder_.vocab().size()) {
    throw TrainingError("Trainer: model vocabulary does not match the configured vocabulary");
  }
  auto params = tensors_of<float>(model_);
  adam_ = make_adam_state<float>(params);
}

LossRecord Trainer::step() {
  if (step_ >= stage_.steps) throw TrainingError("Trainer: stage '" + stage_.name + "' already finished");
  const auto picks = mixer_.next(rng_);
  std::bernoulli_distribution drop(stage_.caption_drop);
  std::vector<MultimodalSequence> seqs;
  seqs.reserve(picks.size());
  for (std::size_t idx : picks) {
    const bool d = drop(rng_);
    seqs.push_back(encoder_.encode(corpus_[idx], d, stage_.latent_gamma, &rng_));
  }
  const auto batch = make_train_batch<float>(seqs, config_.model.token_dim, stage_.fm_repeats, rng_);
  Model<float> grads = zeros_like_params<float>(model_);
  LossRecord rec;
  rec.step = step_;
  rec.lr = lr_at(step_, stage_);
  rec.loss = compute_loss(model_, batch, stage_.lambda_text, stage_.lambda_visual, &grads);
  if (!std::isfinite(rec.loss.total)) {
    throw TrainingError("Trainer: non-finite loss at step " + std::to_string(step_));
  }
  auto params = tensors_of<float>(model_);
  auto gs = tensors_of<float>(grads);
  clip_grad_norm<float>(gs, stage_.grad_clip);
  std::vector<const Tensor<float>*> cgs(gs.begin(), gs.end());
  adamw_step<float>(params, cgs, adam_, rec.lr, stage_.weight_decay);
  ++step_;
  return rec;
}

std::vector<LossRecord> Trainer::run(std::size_t count, const std::function<void(const Trainer&)>& on_step) {
  std::vector<LossRecord> out;
  for (std::size_t i = 0; i < count && step_ < stage_.steps; ++i) {
    out.push_back(step());
    if (on_step) on_step(*this);
  }
  return out;
}

std::string Trainer::rng_state() const {
  std::ostringstream s;
  s << rng_;
  return s.str();
}

void Trainer::restore(std::size_t step, AdamState<float> adam, const std::string& rng_state) {
  if (step > stage_.steps) throw TrainingError("Trainer: resume step beyond the stage length");
  if (adam.m.size() != adam_.m.size()) throw TrainingError("Trainer: optimizer state does not match the model");
  for (std::size_t i = 0; i < adam.m.size(); ++i) {
    if (adam.m[i].shape != adam_.m[i].shape || adam.v[i].shape != adam_.v[i].shape) {
      throw TrainingError("Trainer: optimizer state shape mismatch for '" + adam_.m[i].name + "'");
    }
  }
  std::istringstream s(rng_state);
  std::mt19937_64 rng;
  if (!(s >> rng)) throw TrainingError("Trainer: malformed RNG state");
  rng_ = rng;
  adam_ = std::move(adam);
  step_ = step;
}

#define ARCFLOW_INSTANTIATE(T)                                                                                    \
  template AdamState<T> make_adam_state<T>(std::span<Tensor<T>* const>);                                         \
  template void adamw_step<T>(std::span<Tensor<T>* const>, std::span<const Tensor<T>* const>, AdamState<T>&,     \
                              double, double, const AdamConfig&);                                                \
  template double clip_grad_norm<T>(std::span<Tensor<T>* const>, double);                                        \
  template TrainBatch<T> make_train_batch<T>(std::span<const MultimodalSequence>, std::size_t, std::size_t,      \
                                             std::mt19937_64&);                                                  \
  template LossBreakdown compute_loss<T>(const Model<T>&, const TrainBatch<T>&, double, double, Model<T>*);

ARCFLOW_INSTANTIATE(float)
ARCFLOW_INSTANTIATE(double)
#undef ARCFLOW_INSTANTIATE

}  // namespace arcflow
