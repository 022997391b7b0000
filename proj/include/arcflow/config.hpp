#pragma once

// Structured text configuration: `[section]` headers followed by
// `key = value` lines; `#` starts a comment. Every key is documented in
// configs/desk.ini. Unknown sections or keys are errors.

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "arcflow/latent.hpp"

namespace arcflow {

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Parsed `[section] key = value` document preserving section order.
class IniDocument {
 public:
  struct Entry {
    std::string value;
    int line = 0;
  };
  struct Section {
    std::string name;
    std::map<std::string, Entry> entries;
  };

  static IniDocument parse(const std::string& text, const std::string& origin = "<config>");
  static IniDocument load(const std::filesystem::path& path);

  const std::vector<Section>& sections() const { return sections_; }
  const Section* find(const std::string& name) const;
  const std::string& origin() const { return origin_; }

 private:
  std::vector<Section> sections_;
  std::string origin_;
};

/// Reads typed values out of one section and rejects keys nobody asked for.
class SectionReader {
 public:
  SectionReader(const IniDocument::Section& section, std::string origin);

  void read(const std::string& key, std::size_t& out);
  void read(const std::string& key, int& out);
  void read(const std::string& key, double& out);
  void read(const std::string& key, float& out);
  void read(const std::string& key, bool& out);
  void read(const std::string& key, std::string& out);
  void read(const std::string& key, std::vector<double>& out);
  void read(const std::string& key, std::vector<std::size_t>& out);
  bool has(const std::string& key) const;
  /// Throws if any key was never read.
  void finish();

 private:
  const std::string* raw(const std::string& key);
  [[noreturn]] void fail(const std::string& key, const std::string& what) const;

  const IniDocument::Section& section_;
  std::string origin_;
  std::map<std::string, bool> used_;
};

struct ModelConfig {
  std::size_t layers = 4;
  std::size_t model_dim = 128;
  std::size_t heads = 4;
  std::size_t ffn_dim = 512;
  std::size_t vocab_size = 0;  // 0: size of the grammar vocabulary
  std::size_t max_seq_len = 192;
  std::size_t token_dim = 64;
  double rope_base = 10000.0;
  double init_std = 0.02;
  double norm_eps = 1e-6;

  std::size_t head_dim() const { return model_dim / heads; }
  void validate() const;
};

struct FMHeadConfig {
  std::string name = "base";
  std::size_t layers = 3;
  std::size_t hidden = 256;
  std::size_t cond_dim = 128;
  std::size_t token_dim = 64;
  std::size_t time_dim = 64;

  void validate() const;
};

enum class Category : int { kTextOnly = 0, kImageText = 1, kImageToImage = 2, kInterleaved = 3 };
inline constexpr std::size_t kNumCategories = 4;
const char* category_name(Category c);

enum class Schedule { kConstant, kCosine };

struct StageConfig {
  std::string name = "stage1";
  double lr_min = 3e-4;
  double lr_max = 3e-4;
  Schedule schedule = Schedule::kConstant;
  std::size_t warmup = 0;
  std::size_t steps = 2000;
  double lambda_text = 0.01;
  double lambda_visual = 1.0;
  std::array<double, kNumCategories> ratios{0.2, 0.6, 0.0, 0.2};
  std::vector<std::size_t> image_sizes{32};
  double caption_drop = 0.1;
  std::uint64_t seed = 1;
  std::size_t batch_size = 8;
  std::size_t fm_repeats = 2;
  double grad_clip = 1.0;
  double weight_decay = 0.1;
  std::size_t checkpoint_every = 0;  // 0: only at the end
  bool hq_only = false;
  double latent_gamma = 0.0;

  void validate() const;
};

struct CorpusSpec {
  std::size_t size = 256;
  std::uint64_t seed = 7;
  std::vector<std::size_t> image_sizes{32};
  std::array<double, kNumCategories> weights{0.25, 0.25, 0.25, 0.25};
  double hq_fraction = 0.9;
  std::size_t max_objects = 2;

  void validate() const;
};

struct SamplerConfig {
  std::size_t euler_steps = 50;
  double temperature = 1.0;
  std::size_t top_k = 0;
  std::size_t max_text_tokens = 32;
  std::uint64_t seed = 0;
  bool renormalize_tokens = false;
  /// Forced image area; 0 lets the model emit the `<image_area>` metadata.
  std::size_t area_rows = 4;
  std::size_t area_cols = 4;

  void validate() const;
};

struct ExperimentConfig {
  ModelConfig model;
  FMHeadConfig head;
  TokenizerConfig latent;
  CorpusSpec corpus;
  SamplerConfig sampler;
  std::vector<StageConfig> stages;
  std::vector<FMHeadConfig> head_variants;  // [head.<name>] sections
  std::string text;                          // source text, stored in checkpoints

  const StageConfig& stage(const std::string& name) const;
  const FMHeadConfig& head_variant(const std::string& name) const;
};

ExperimentConfig parse_experiment_config(const std::string& text, const std::string& origin = "<config>");
ExperimentConfig load_experiment_config(const std::filesystem::path& path);

/// Parses `a,b,c` into numbers.
std::vector<double> parse_number_list(const std::string& text);

}  // namespace arcflow
