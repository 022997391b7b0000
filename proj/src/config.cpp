#include "arcflow/config.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

namespace arcflow {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

}  // namespace

IniDocument IniDocument::parse(const std::string& text, const std::string& origin) {
  IniDocument doc;
  doc.origin_ = origin;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  Section* current = nullptr;
  while (std::getline(in, line)) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']') throw ConfigError(origin + ":" + std::to_string(lineno) + ": malformed section header");
      std::string name = trim(line.substr(1, line.size() - 2));
      if (name.empty()) throw ConfigError(origin + ":" + std::to_string(lineno) + ": empty section name");
      if (doc.find(name)) throw ConfigError(origin + ":" + std::to_string(lineno) + ": duplicate section [" + name + "]");
      doc.sections_.push_back({name, {}});
      current = &doc.sections_.back();
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError(origin + ":" + std::to_string(lineno) + ": expected key = value");
    if (!current) throw ConfigError(origin + ":" + std::to_string(lineno) + ": key outside of any section");
    std::string key = trim(line.substr(0, eq));
    std::string value = trim(line.substr(eq + 1));
    if (key.empty()) throw ConfigError(origin + ":" + std::to_string(lineno) + ": empty key");
    if (!current->entries.emplace(key, Entry{value, lineno}).second) {
      throw ConfigError(origin + ":" + std::to_string(lineno) + ": duplicate key '" + key + "'");
    }
  }
  return doc;
}

IniDocument IniDocument::load(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot open config " + path.string());
  std::stringstream ss;
  ss << f.rdbuf();
  return parse(ss.str(), path.string());
}

const IniDocument::Section* IniDocument::find(const std::string& name) const {
  for (const auto& s : sections_)
    if (s.name == name) return &s;
  return nullptr;
}

SectionReader::SectionReader(const IniDocument::Section& section, std::string origin)
    : section_(section), origin_(std::move(origin)) {
  for (const auto& [k, _] : section_.entries) used_[k] = false;
}

void SectionReader::fail(const std::string& key, const std::string& what) const {
  auto it = section_.entries.find(key);
  const int line = it == section_.entries.end() ? 0 : it->second.line;
  throw ConfigError(origin_ + ":" + std::to_string(line) + ": [" + section_.name + "] " + key + ": " + what);
}

const std::string* SectionReader::raw(const std::string& key) {
  auto it = section_.entries.find(key);
  if (it == section_.entries.end()) return nullptr;
  used_[key] = true;
  return &it->second.value;
}

bool SectionReader::has(const std::string& key) const { return section_.entries.count(key) != 0; }

void SectionReader::read(const std::string& key, std::size_t& out) {
  if (const auto* v = raw(key)) {
    std::size_t pos = 0;
    try {
      if (!v->empty() && v->front() == '-') throw std::invalid_argument("negative");
      out = std::stoull(*v, &pos);
    } catch (const std::exception&) {
      fail(key, "expected a non-negative integer, got '" + *v + "'");
    }
    if (pos != v->size()) fail(key, "trailing characters in '" + *v + "'");
  }
}

void SectionReader::read(const std::string& key, int& out) {
  if (const auto* v = raw(key)) {
    std::size_t pos = 0;
    try {
      out = std::stoi(*v, &pos);
    } catch (const std::exception&) {
      fail(key, "expected an integer, got '" + *v + "'");
    }
    if (pos != v->size()) fail(key, "trailing characters in '" + *v + "'");
  }
}

void SectionReader::read(const std::string& key, double& out) {
  if (const auto* v = raw(key)) {
    std::size_t pos = 0;
    try {
      out = std::stod(*v, &pos);
    } catch (const std::exception&) {
      fail(key, "expected a number, got '" + *v + "'");
    }
    if (pos != v->size()) fail(key, "trailing characters in '" + *v + "'");
  }
}

void SectionReader::read(const std::string& key, float& out) {
  double tmp = out;
  read(key, tmp);
  out = static_cast<float>(tmp);
}

void SectionReader::read(const std::string& key, bool& out) {
  if (const auto* v = raw(key)) {
    if (*v == "true" || *v == "1" || *v == "yes") {
      out = true;
    } else if (*v == "false" || *v == "0" || *v == "no") {
      out = false;
    } else {
      fail(key, "expected true/false, got '" + *v + "'");
    }
  }
}

void SectionReader::read(const std::string& key, std::string& out) {
  if (const auto* v = raw(key)) out = *v;
}

void SectionReader::read(const std::string& key, std::vector<double>& out) {
  if (const auto* v = raw(key)) {
    try {
      out = parse_number_list(*v);
    } catch (const std::exception& e) {
      fail(key, e.what());
    }
  }
}

void SectionReader::read(const std::string& key, std::vector<std::size_t>& out) {
  std::vector<double> tmp;
  if (!has(key)) return;
  read(key, tmp);
  out.clear();
  for (double d : tmp) {
    if (d < 0 || d != std::floor(d)) fail(key, "expected non-negative integers");
    out.push_back(static_cast<std::size_t>(d));
  }
}

void SectionReader::finish() {
  for (const auto& [k, used] : used_)
    if (!used) fail(k, "unknown key");
}

std::vector<double> parse_number_list(const std::string& text) {
  std::vector<double> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (item.empty()) throw ConfigError("empty item in list '" + text + "'");
    std::size_t pos = 0;
    double v = 0;
    try {
      v = std::stod(item, &pos);
    } catch (const std::exception&) {
      throw ConfigError("not a number: '" + item + "'");
    }
    if (pos != item.size()) throw ConfigError("not a number: '" + item + "'");
    out.push_back(v);
  }
  return out;
}

const char* category_name(Category c) {
  switch (c) {
    case Category::kTextOnly: return "text_only";
    case Category::kImageText: return "image_text";
    case Category::kImageToImage: return "image_to_image";
    case Category::kInterleaved: return "interleaved";
  }
  return "?";
}

void ModelConfig::validate() const {
  if (layers == 0 || model_dim == 0 || heads == 0 || ffn_dim == 0 || max_seq_len == 0 || token_dim == 0)
    throw ConfigError("model: dimensions must be positive");
  if (model_dim % heads != 0) throw ConfigError("model: model_dim must be divisible by heads");
  if (head_dim() % 2 != 0) throw ConfigError("model: head dim must be even for rotary embeddings");
  if (!(rope_base > 1.0)) throw ConfigError("model: rope_base must exceed 1");
  if (!(init_std > 0.0)) throw ConfigError("model: init_std must be positive");
}

void FMHeadConfig::validate() const {
  if (layers == 0 || hidden == 0 || cond_dim == 0 || token_dim == 0 || time_dim == 0)
    throw ConfigError("head '" + name + "': dimensions must be positive");
  if (time_dim % 2 != 0) throw ConfigError("head '" + name + "': time_dim must be even");
}

namespace {

void validate_ratios(const std::array<double, kNumCategories>& r, const std::string& what) {
  double sum = 0.0;
  for (double x : r) {
    if (!(x >= 0.0)) throw ConfigError(what + ": ratios must be non-negative");
    sum += x;
  }
  if (std::abs(sum - 1.0) > 1e-9) throw ConfigError(what + ": ratios must sum to 1");
}

}  // namespace

void StageConfig::validate() const {
  const std::string what = "stage '" + name + "'";
  validate_ratios(ratios, what);
  if (steps == 0) throw ConfigError(what + ": steps must be positive");
  if (warmup > steps) throw ConfigError(what + ": warmup exceeds steps");
  if (!(lr_min >= 0.0) || !(lr_max >= lr_min)) throw ConfigError(what + ": need 0 <= lr_min <= lr_max");
  if (!(lambda_text >= 0.0) || !(lambda_visual >= 0.0)) throw ConfigError(what + ": loss weights must be >= 0");
  if (!(caption_drop >= 0.0 && caption_drop <= 1.0)) throw ConfigError(what + ": caption_drop must be in [0, 1]");
  if (batch_size == 0 || fm_repeats == 0) throw ConfigError(what + ": batch_size and fm_repeats must be positive");
  if (image_sizes.empty()) throw ConfigError(what + ": image_sizes must not be empty");
  if (!(latent_gamma >= 0.0)) throw ConfigError(what + ": latent_gamma must be >= 0");
}

void CorpusSpec::validate() const {
  double sum = 0.0;
  for (double w : weights) {
    if (!(w >= 0.0)) throw ConfigError("corpus: weights must be non-negative");
    sum += w;
  }
  if (!(sum > 0.0)) throw ConfigError("corpus: weights must not all be zero");
  if (image_sizes.empty()) throw ConfigError("corpus: image_sizes must not be empty");
  for (auto s : image_sizes)
    if (s == 0 || s % 16 != 0) throw ConfigError("corpus: image sizes must be positive multiples of 16");
  if (!(hq_fraction >= 0.0 && hq_fraction <= 1.0)) throw ConfigError("corpus: hq_fraction must be in [0, 1]");
  if (max_objects < 1 || max_objects > 2) throw ConfigError("corpus: max_objects must be 1 or 2");
}

void SamplerConfig::validate() const {
  if (euler_steps == 0) throw ConfigError("sampler: euler_steps must be >= 1");
  if (!(temperature > 0.0)) throw ConfigError("sampler: temperature must be positive");
  if ((area_rows == 0) != (area_cols == 0)) throw ConfigError("sampler: set both area_rows and area_cols, or neither");
}

const StageConfig& ExperimentConfig::stage(const std::string& name) const {
  for (const auto& s : stages)
    if (s.name == name) return s;
  throw ConfigError("no stage named '" + name + "'");
}

const FMHeadConfig& ExperimentConfig::head_variant(const std::string& name) const {
  for (const auto& h : head_variants)
    if (h.name == name) return h;
  throw ConfigError("no head config named '" + name + "'");
}

namespace {

FMHeadConfig read_head(SectionReader& r, FMHeadConfig h) {
  r.read("name", h.name);
  r.read("layers", h.layers);
  r.read("hidden", h.hidden);
  r.read("time_dim", h.time_dim);
  r.read("cond_dim", h.cond_dim);
  r.read("token_dim", h.token_dim);
  return h;
}

}  // namespace

ExperimentConfig parse_experiment_config(const std::string& text, const std::string& origin) {
  const IniDocument doc = IniDocument::parse(text, origin);
  ExperimentConfig cfg;
  cfg.text = text;
  bool cond_dim_set = false;
  bool token_dim_set = false;

  // [latent] first: token_dim and the head's dims derive from it.
  if (const auto* s = doc.find("latent")) {
    SectionReader r(*s, origin);
    r.read("patch", cfg.latent.patch);
    r.read("channels", cfg.latent.channels);
    r.read("seed", cfg.latent.seed);
    std::string proj = "block_mean_random";
    r.read("projection", proj);
    if (proj == "identity") {
      cfg.latent.projection = ProjectionKind::kIdentity;
    } else if (proj == "block_mean_random") {
      cfg.latent.projection = ProjectionKind::kBlockMeanRandom;
    } else {
      throw ConfigError(origin + ": [latent] projection must be identity or block_mean_random");
    }
    r.finish();
  }
  cfg.model.token_dim = 4 * cfg.latent.channels;

  for (const auto& section : doc.sections()) {
    const std::string& name = section.name;
    SectionReader r(section, origin);
    if (name == "latent") {
      continue;
    } else if (name == "model") {
      auto& m = cfg.model;
      r.read("layers", m.layers);
      r.read("model_dim", m.model_dim);
      r.read("heads", m.heads);
      r.read("ffn_dim", m.ffn_dim);
      r.read("vocab_size", m.vocab_size);
      r.read("max_seq_len", m.max_seq_len);
      token_dim_set = r.has("token_dim");
      r.read("token_dim", m.token_dim);
      r.read("rope_base", m.rope_base);
      r.read("init_std", m.init_std);
      r.read("norm_eps", m.norm_eps);
    } else if (name == "head") {
      cond_dim_set = r.has("cond_dim");
      cfg.head = read_head(r, cfg.head);
    } else if (name.rfind("head.", 0) == 0) {
      FMHeadConfig h;
      h.name = name.substr(5);
      h.cond_dim = 0;
      h.token_dim = 0;
      h = read_head(r, h);
      cfg.head_variants.push_back(h);
    } else if (name == "corpus") {
      auto& c = cfg.corpus;
      r.read("size", c.size);
      r.read("seed", c.seed);
      r.read("image_sizes", c.image_sizes);
      r.read("hq_fraction", c.hq_fraction);
      r.read("max_objects", c.max_objects);
      std::vector<double> w;
      r.read("weights", w);
      if (!w.empty()) {
        if (w.size() != kNumCategories) throw ConfigError(origin + ": [corpus] weights needs 4 values");
        std::copy(w.begin(), w.end(), c.weights.begin());
      }
    } else if (name == "sampler") {
      auto& s = cfg.sampler;
      r.read("euler_steps", s.euler_steps);
      r.read("temperature", s.temperature);
      r.read("top_k", s.top_k);
      r.read("max_text_tokens", s.max_text_tokens);
      r.read("seed", s.seed);
      r.read("renormalize", s.renormalize_tokens);
      r.read("area_rows", s.area_rows);
      r.read("area_cols", s.area_cols);
    } else if (name.rfind("stage.", 0) == 0) {
      StageConfig st;
      st.name = name.substr(6);
      r.read("lr_min", st.lr_min);
      r.read("lr_max", st.lr_max);
      if (!r.has("lr_min")) st.lr_min = std::min(st.lr_min, st.lr_max);
      std::string sched = "constant";
      r.read("schedule", sched);
      if (sched == "constant") {
        st.schedule = Schedule::kConstant;
      } else if (sched == "cosine") {
        st.schedule = Schedule::kCosine;
      } else {
        throw ConfigError(origin + ": [" + name + "] schedule must be constant or cosine");
      }
      r.read("warmup", st.warmup);
      r.read("steps", st.steps);
      r.read("lambda_text", st.lambda_text);
      r.read("lambda_visual", st.lambda_visual);
      std::vector<double> ratios;
      r.read("ratios", ratios);
      if (!ratios.empty()) {
        if (ratios.size() != kNumCategories) throw ConfigError(origin + ": [" + name + "] ratios needs 4 values");
        std::copy(ratios.begin(), ratios.end(), st.ratios.begin());
      }
      r.read("image_sizes", st.image_sizes);
      r.read("caption_drop", st.caption_drop);
      r.read("seed", st.seed);
      r.read("batch_size", st.batch_size);
      r.read("fm_repeats", st.fm_repeats);
      r.read("grad_clip", st.grad_clip);
      r.read("weight_decay", st.weight_decay);
      r.read("checkpoint_every", st.checkpoint_every);
      r.read("hq_only", st.hq_only);
      r.read("latent_gamma", st.latent_gamma);
      st.validate();
      cfg.stages.push_back(st);
    } else {
      throw ConfigError(origin + ": unknown section [" + name + "]");
    }
    r.finish();
  }

  if (token_dim_set && cfg.model.token_dim != 4 * cfg.latent.channels) {
    throw ConfigError(origin + ": [model] token_dim must equal 4 x [latent] channels");
  }
  cfg.model.token_dim = 4 * cfg.latent.channels;
  if (!cond_dim_set) cfg.head.cond_dim = cfg.model.model_dim;
  cfg.head.token_dim = cfg.model.token_dim;
  for (auto& h : cfg.head_variants) {
    if (h.cond_dim == 0) h.cond_dim = cfg.model.model_dim;
    if (h.token_dim == 0) h.token_dim = cfg.model.token_dim;
    h.validate();
  }
  cfg.model.validate();
  cfg.head.validate();
  cfg.corpus.validate();
  cfg.sampler.validate();
  return cfg;
}

ExperimentConfig load_experiment_config(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot open config " + path.string());
  std::stringstream ss;
  ss << f.rdbuf();
  return parse_experiment_config(ss.str(), path.string());
}

}  // namespace arcflow
