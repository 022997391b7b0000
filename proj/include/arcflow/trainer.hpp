#pragma once

// Optimization and the staged recipe: learning-rate schedules, AdamW,
// category-mixed batching, sequence assembly, loss/gradient evaluation,
// finite-difference verification and the resumable training loop.

#include <array>
#include <cstdint>
#include <functional>
#include <iosfwd>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "arcflow/config.hpp"
#include "arcflow/corpus.hpp"
#include "arcflow/heads.hpp"
#include "arcflow/latent.hpp"
#include "arcflow/model.hpp"
#include "arcflow/vocab.hpp"

namespace arcflow {

struct TrainingError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Linear warmup 0 -> lr_max over `warmup` steps, then constant lr_max or
/// cosine decay lr_max -> lr_min over the remaining steps. step in [0, steps].
double lr_at(std::size_t step, const StageConfig& stage);

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.95;
  double eps = 1e-8;
};

template <typename T>
struct AdamState {
  std::vector<Tensor<T>> m, v;  // named "m:<param>" / "v:<param>"
  std::uint64_t step = 0;
};

template <typename T>
AdamState<T> make_adam_state(std::span<Tensor<T>* const> params);

/// Decoupled weight decay (p -= lr * wd * p) followed by the bias-corrected
/// Adam update. Throws on shape mismatch or a non-finite gradient.
template <typename T>
void adamw_step(std::span<Tensor<T>* const> params, std::span<const Tensor<T>* const> grads, AdamState<T>& state,
                double lr, double weight_decay, const AdamConfig& hyper = {});

/// Scales gradients in place so their global L2 norm is at most max_norm.
/// Returns the norm before clipping.
template <typename T>
double clip_grad_norm(std::span<Tensor<T>* const> grads, double max_norm);

/// Draws sample indices: category by `ratios`, then uniformly within it.
class BatchMixer {
 public:
  /// `eligible[i]` false removes sample i from every pool.
  BatchMixer(const std::vector<CorpusSample>& dataset, const std::array<double, kNumCategories>& ratios,
             std::size_t batch_size, const std::vector<bool>& eligible = {});

  std::vector<std::size_t> next(std::mt19937_64& rng) const;
  std::size_t batch_size() const { return batch_size_; }

 private:
  std::array<double, kNumCategories> ratios_;
  std::array<std::vector<std::size_t>, kNumCategories> pools_;
  std::size_t batch_size_;
};

/// `count` batches from a fresh stream seeded with `seed`.
std::vector<std::vector<std::size_t>> mix_batches(const std::vector<CorpusSample>& dataset,
                                                  const std::array<double, kNumCategories>& ratios,
                                                  std::size_t batch_size, std::uint64_t seed, std::size_t count);

/// Turns corpus samples into model sequences with frozen latent statistics.
class SequenceEncoder {
 public:
  SequenceEncoder(Vocabulary vocab, PatchTokenizer tokenizer, ChannelStats stats, std::size_t token_dim);

  /// Statistics pooled over every image of `corpus`.
  static ChannelStats corpus_stats(const PatchTokenizer& tokenizer, const std::vector<CorpusSample>& corpus);

  /// `<bos>` segments... `<eos>`. Each segment contributes its text then its
  /// image block. drop_caption empties the text of image-text samples.
  /// gamma > 0 perturbs normalized latents (one alpha per image).
  MultimodalSequence encode(const CorpusSample& sample, bool drop_caption, double gamma = 0.0,
                            std::mt19937_64* rng = nullptr) const;

  const Vocabulary& vocab() const { return vocab_; }
  const PatchTokenizer& tokenizer() const { return tokenizer_; }
  const ChannelStats& stats() const { return stats_; }
  TokenGrid tokens(const Image& image) const { return image_to_tokens(tokenizer_, stats_, image); }
  Image decode(const TokenGrid& tokens) const { return tokens_to_image(tokenizer_, stats_, tokens); }

 private:
  Vocabulary vocab_;
  PatchTokenizer tokenizer_;
  ChannelStats stats_;
  std::size_t token_dim_;
};

/// A packed batch plus everything the losses need, including the fixed
/// flow-matching noise so the loss is a deterministic function of params.
template <typename T>
struct TrainBatch {
  PackedBatch<T> packed;
  std::vector<int> text_targets;       // per packed row: next id, or -1
  std::vector<std::size_t> image_pos;  // packed rows holding image tokens
  std::size_t repeats = 1;             // flow samples per image token
  Matrix<T> x0;                        // [image_pos * repeats, token_dim]
  std::vector<T> t;                    // [image_pos * repeats]
};

template <typename T>
TrainBatch<T> make_train_batch(std::span<const MultimodalSequence> sequences, std::size_t token_dim,
                               std::size_t repeats, std::mt19937_64& rng);

/// L_text, L_visual and their weighted sum. If grads is non-null, gradients
/// of the total are accumulated into it.
template <typename T>
LossBreakdown compute_loss(const Model<T>& model, const TrainBatch<T>& batch, double lambda_text,
                           double lambda_visual, Model<T>* grads = nullptr);

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::size_t coordinates = 0;
  std::size_t tensors = 0;
  std::string worst_tensor;
  double epsilon = 0.0;
};

/// Central differences at sampled coordinates (at least one per tensor,
/// `min_coords` in total). rel = |a - n| / max(|a|, |n|, 1e-6).
GradCheckReport finite_difference_check(std::span<Tensor<double>* const> params,
                                        std::span<const Tensor<double>* const> analytic,
                                        const std::function<double()>& loss, double epsilon,
                                        std::size_t min_coords, std::uint64_t seed);

GradCheckReport gradient_check(Model<double>& model, const TrainBatch<double>& batch, double lambda_text,
                               double lambda_visual, double epsilon = 1e-5, std::size_t min_coords = 256,
                               std::uint64_t seed = 1);

struct LossRecord {
  std::size_t step = 0;
  double lr = 0.0;
  LossBreakdown loss;
};

void write_loss_csv(std::ostream& out, std::span<const LossRecord> history);
/// Inverse of write_loss_csv (loss weights and counts are not stored).
std::vector<LossRecord> read_loss_csv(std::istream& in);

/// Full resumable training state. One RNG drives batch selection, caption
/// drop, latent noise and flow-matching noise.
class Trainer {
 public:
  Trainer(const ExperimentConfig& config, const StageConfig& stage, std::vector<CorpusSample> corpus,
          Model<float> model);

  /// One optimizer step at the current step counter.
  LossRecord step();
  /// Runs `count` steps (bounded by the stage length). `on_step` runs after
  /// every step and may save checkpoints.
  std::vector<LossRecord> run(std::size_t count, const std::function<void(const Trainer&)>& on_step = {});

  const Model<float>& model() const { return model_; }
  Model<float>& model() { return model_; }
  const AdamState<float>& optimizer() const { return adam_; }
  const StageConfig& stage() const { return stage_; }
  const SequenceEncoder& encoder() const { return encoder_; }
  const std::vector<CorpusSample>& corpus() const { return corpus_; }
  std::size_t current_step() const { return step_; }

  std::string rng_state() const;
  void restore(std::size_t step, AdamState<float> adam, const std::string& rng_state);

 private:
  ExperimentConfig config_;
  StageConfig stage_;
  std::vector<CorpusSample> corpus_;
  SequenceEncoder encoder_;
  BatchMixer mixer_;
  Model<float> model_;
  AdamState<float> adam_;
  std::mt19937_64 rng_;
  std::size_t step_ = 0;
};

/// Samples a stage may draw: image sizes in stage.image_sizes, hq when hq_only.
std::vector<bool> stage_eligibility(const std::vector<CorpusSample>& corpus, const StageConfig& stage);

}  // namespace arcflow
