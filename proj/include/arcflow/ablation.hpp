#pragma once

// Head-size ablation: the backbone is frozen, a fresh flow head is trained
// on precomputed conditions for a fixed step budget, and every variant is
// scored on the same fixed-noise evaluation set.

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <string>
#include <vector>

#include "arcflow/config.hpp"
#include "arcflow/corpus.hpp"
#include "arcflow/model.hpp"
#include "arcflow/trainer.hpp"

namespace arcflow {

struct AblationConfig {
  std::size_t steps = 10000;
  std::size_t batch_rows = 64;  // flow samples per step
  double lr = 1e-3;
  double lr_min = 1e-4;
  std::size_t warmup = 100;
  double weight_decay = 0.0;
  double grad_clip = 1.0;
  std::uint64_t seed = 1;
  std::size_t eval_repeats = 4;  // fixed noise draws per (condition, token)
  std::size_t psnr_samples = 4;  // captions sampled for the PSNR column
  std::size_t euler_steps = 64;
};

/// Frozen-backbone training pairs: the hidden state preceding each image
/// token and that token's normalized latent.
struct FlowDataset {
  Matrix<float> cond;  // [N, model_dim]
  Matrix<float> x1;    // [N, token_dim]
  std::vector<std::size_t> sample;  // corpus index per row
};

/// Image-text samples of `corpus` encoded without caption drop.
FlowDataset flow_dataset(const Model<float>& model, const SequenceEncoder& encoder,
                         const std::vector<CorpusSample>& corpus);

struct AblationRow {
  std::string name;
  std::size_t layers = 0;
  std::size_t hidden = 0;
  std::uint64_t params = 0;
  double train_loss = 0.0;  // mean over the last tenth of steps
  double eval_loss = 0.0;   // fixed-noise flow loss after training
  double psnr_db = 0.0;     // mean PSNR of sampled images to their nearest training image
};

struct AblationReport {
  std::vector<AblationRow> rows;
  /// max |a - b| / min(a, b) over eval_loss pairs.
  double max_pairwise_relative = 0.0;
};

double max_pairwise_relative_difference(const std::vector<double>& values);

/// Trains one fresh head per entry of `heads` (cond_dim and token_dim are
/// taken from the model). Deterministic in config.seed.
AblationReport ablate_heads(const Model<float>& model, const SequenceEncoder& encoder,
                            const std::vector<CorpusSample>& corpus, const std::vector<FMHeadConfig>& heads,
                            const AblationConfig& config,
                            const std::function<void(const AblationRow&)>& on_row = {});

/// `name,layers,hidden,params,train_loss,eval_loss,psnr_db`.
void write_ablation_csv(std::ostream& out, const AblationReport& report);

}  // namespace arcflow
