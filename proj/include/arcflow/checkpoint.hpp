#pragma once

// Binary checkpoint:
//   "PFCK" | u32 version | u64 FNV-1a checksum of the payload | payload
// payload:
//   config text (u64 length + bytes) | stage name (same framing) | u64 step
//   tensor table: u64 count, then per tensor u32 name length, name bytes,
//                 u32 rank, rank x u64 dims, little-endian f32 data
//   optimizer block: u64 adam step, then a tensor table of m:/v: moments
//   rng block: u64 count, then per entry (name, state) as length-prefixed strings

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "arcflow/model.hpp"
#include "arcflow/trainer.hpp"

namespace arcflow {

struct CheckpointError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct CheckpointTruncated : CheckpointError {
  using CheckpointError::CheckpointError;
};
struct CheckpointVersionMismatch : CheckpointError {
  using CheckpointError::CheckpointError;
};
struct CheckpointChecksumMismatch : CheckpointError {
  using CheckpointError::CheckpointError;
};

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  std::string config_text;
  std::string stage;
  std::uint64_t step = 0;
  std::vector<Tensor<float>> tensors;
  std::uint64_t adam_step = 0;
  std::vector<Tensor<float>> adam_moments;  // m:... then v:...
  std::vector<std::pair<std::string, std::string>> rng_states;

  bool operator==(const Checkpoint&) const;
};

std::uint64_t fnv1a(const std::string& bytes);

std::string serialize_checkpoint(const Checkpoint& ckpt);
Checkpoint deserialize_checkpoint(const std::string& bytes);

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// Model tensors plus the frozen latent statistics ("latent.means", "latent.stds").
Checkpoint make_checkpoint(const Trainer& trainer, const std::string& config_text);

/// Rebuilds the model described by the stored config; every tensor must be
/// present with its allocated shape.
Model<float> checkpoint_model(const Checkpoint& ckpt);
ChannelStats checkpoint_stats(const Checkpoint& ckpt);
AdamState<float> checkpoint_optimizer(const Checkpoint& ckpt);
/// Restores optimizer, RNG and step into a trainer built for the same run.
void resume(Trainer& trainer, const Checkpoint& ckpt);

}  // namespace arcflow
