#include "arcflow/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <map>
#include <sstream>

namespace arcflow {

namespace {

constexpr char kMagic[4] = {'P', 'F', 'C', 'K'};
constexpr std::size_t kHeaderSize = 4 + 4 + 8;

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

class Writer {
 public:
  void u32(std::uint32_t v) { raw(&v, sizeof v); }
  void u64(std::uint64_t v) { raw(&v, sizeof v); }
  void str(const std::string& s) {
    u64(s.size());
    out_.append(s);
  }
  void tensor(const Tensor<float>& t) {
    u32(static_cast<std::uint32_t>(t.name.size()));
    out_.append(t.name);
    u32(static_cast<std::uint32_t>(t.shape.size()));
    for (auto d : t.shape) u64(d);
    raw(t.data.data(), t.data.size() * sizeof(float));
  }
  void table(const std::vector<Tensor<float>>& ts) {
    u64(ts.size());
    for (const auto& t : ts) tensor(t);
  }
  std::string take() { return std::move(out_); }

 private:
  void raw(const void* p, std::size_t n) { out_.append(static_cast<const char*>(p), n); }
  std::string out_;
};

class Reader {
 public:
  explicit Reader(const std::string& bytes, std::size_t pos) : bytes_(bytes), pos_(pos) {}

  std::uint32_t u32() {
    std::uint32_t v;
    raw(&v, sizeof v);
    return v;
  }
  std::uint64_t u64() {
    std::uint64_t v;
    raw(&v, sizeof v);
    return v;
  }
  std::string str() {
    const std::uint64_t n = u64();
    need(n);
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  Tensor<float> tensor() {
    const std::uint32_t name_len = u32();
    need(name_len);
    Tensor<float> t;
    t.name = bytes_.substr(pos_, name_len);
    pos_ += name_len;
    const std::uint32_t rank = u32();
    if (rank > 8) throw CheckpointError("checkpoint: tensor '" + t.name + "' has implausible rank");
    std::uint64_t count = 1;
    for (std::uint32_t i = 0; i < rank; ++i) {
      t.shape.push_back(u64());
      count *= t.shape.back();
    }
    need(count * sizeof(float));
    t.data.resize(count);
    raw(t.data.data(), count * sizeof(float));
    return t;
  }
  std::vector<Tensor<float>> table() {
    const std::uint64_t n = u64();
    std::vector<Tensor<float>> out;
    for (std::uint64_t i = 0; i < n; ++i) out.push_back(tensor());
    return out;
  }
  bool done() const { return pos_ == bytes_.size(); }

 private:
  void need(std::uint64_t n) const {
    if (n > bytes_.size() - pos_) throw CheckpointTruncated("checkpoint: payload ends early");
  }
  void raw(void* p, std::size_t n) {
    need(n);
    std::memcpy(p, bytes_.data() + pos_, n);
    pos_ += n;
  }
  const std::string& bytes_;
  std::size_t pos_;
};

bool bit_equal(const Tensor<float>& a, const Tensor<float>& b) {
  return a.name == b.name && a.shape == b.shape && a.data.size() == b.data.size() &&
         std::memcmp(a.data.data(), b.data.data(), a.data.size() * sizeof(float)) == 0;
}

bool bit_equal(const std::vector<Tensor<float>>& a, const std::vector<Tensor<float>>& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i)
    if (!bit_equal(a[i], b[i])) return false;
  return true;
}

const Tensor<float>& find_tensor(const Checkpoint& ckpt, const std::string& name) {
  for (const auto& t : ckpt.tensors)
    if (t.name == name) return t;
  throw CheckpointError("checkpoint: missing tensor '" + name + "'");
}

}  // namespace

bool Checkpoint::operator==(const Checkpoint& o) const {
  return config_text == o.config_text && stage == o.stage && step == o.step && adam_step == o.adam_step &&
         rng_states == o.rng_states && bit_equal(tensors, o.tensors) && bit_equal(adam_moments, o.adam_moments);
}

std::uint64_t fnv1a(const std::string& bytes) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return h;
}

std::string serialize_checkpoint(const Checkpoint& ckpt) {
  Writer w;
  w.str(ckpt.config_text);
  w.str(ckpt.stage);
  w.u64(ckpt.step);
  w.table(ckpt.tensors);
  w.u64(ckpt.adam_step);
  w.table(ckpt.adam_moments);
  w.u64(ckpt.rng_states.size());
  for (const auto& [name, state] : ckpt.rng_states) {
    w.str(name);
    w.str(state);
  }
  const std::string payload = w.take();
  Writer header;
  header.u32(kCheckpointVersion);
  header.u64(fnv1a(payload));
  return std::string(kMagic, 4) + header.take() + payload;
}

Checkpoint deserialize_checkpoint(const std::string& bytes) {
  if (bytes.size() < kHeaderSize) throw CheckpointTruncated("checkpoint: file shorter than its header");
  if (std::memcmp(bytes.data(), kMagic, 4) != 0) throw CheckpointError("checkpoint: bad magic");
  Reader head(bytes, 4);
  const std::uint32_t version = head.u32();
  if (version != kCheckpointVersion) {
    throw CheckpointVersionMismatch("checkpoint: version " + std::to_string(version) + ", expected " +
                                    std::to_string(kCheckpointVersion));
  }
  const std::uint64_t checksum = head.u64();
  if (fnv1a(bytes.substr(kHeaderSize)) != checksum) throw CheckpointChecksumMismatch("checkpoint: checksum mismatch");
  Reader r(bytes, kHeaderSize);
  Checkpoint c;
  c.config_text = r.str();
  c.stage = r.str();
  c.step = r.u64();
  c.tensors = r.table();
  c.adam_step = r.u64();
  c.adam_moments = r.table();
  const std::uint64_t n = r.u64();
  for (std::uint64_t i = 0; i < n; ++i) {
    std::string name = r.str();
    c.rng_states.emplace_back(std::move(name), r.str());
  }
  if (!r.done()) throw CheckpointError("checkpoint: trailing bytes after payload");
  return c;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream f(path, std::ios::binary);
  if (!f) throw CheckpointError("checkpoint: cannot open " + path.string() + " for writing");
  const std::string bytes = serialize_checkpoint(ckpt);
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw CheckpointError("checkpoint: failed writing " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw CheckpointError("checkpoint: cannot open " + path.string());
  const std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return deserialize_checkpoint(bytes);
}

Checkpoint make_checkpoint(const Trainer& trainer, const std::string& config_text) {
  Checkpoint c;
  c.config_text = config_text;
  c.stage = trainer.stage().name;
  c.step = trainer.current_step();
  trainer.model().for_each([&](const Tensor<float>& t) { c.tensors.push_back(t); });
  const auto& stats = trainer.encoder().stats();
  Tensor<float> means("latent.means", {stats.means.size()}), stds("latent.stds", {stats.stds.size()});
  means.data = stats.means;
  stds.data = stats.stds;
  c.tensors.push_back(std::move(means));
  c.tensors.push_back(std::move(stds));
  const auto& adam = trainer.optimizer();
  c.adam_step = adam.step;
  c.adam_moments = adam.m;
  c.adam_moments.insert(c.adam_moments.end(), adam.v.begin(), adam.v.end());
  c.rng_states.emplace_back("trainer", trainer.rng_state());
  return c;
}

Model<float> checkpoint_model(const Checkpoint& ckpt) {
  const ExperimentConfig cfg = parse_experiment_config(ckpt.config_text, "<checkpoint>");
  Model<float> m = make_model<float>(cfg.model, cfg.head, 0);
  m.for_each([&](Tensor<float>& t) {
    const auto& src = find_tensor(ckpt, t.name);
    if (src.shape != t.shape) throw CheckpointError("checkpoint: shape mismatch for '" + t.name + "'");
    t.data = src.data;
  });
  return m;
}

ChannelStats checkpoint_stats(const Checkpoint& ckpt) {
  ChannelStats s;
  s.means = find_tensor(ckpt, "latent.means").data;
  s.stds = find_tensor(ckpt, "latent.stds").data;
  if (s.means.size() != s.stds.size()) throw CheckpointError("checkpoint: latent statistics disagree in length");
  return s;
}

AdamState<float> checkpoint_optimizer(const Checkpoint& ckpt) {
  AdamState<float> a;
  a.step = ckpt.adam_step;
  for (const auto& t : ckpt.adam_moments) {
    if (t.name.rfind("m:", 0) == 0) {
      a.m.push_back(t);
    } else if (t.name.rfind("v:", 0) == 0) {
      a.v.push_back(t);
    } else {
      throw CheckpointError("checkpoint: unexpected optimizer tensor '" + t.name + "'");
    }
  }
  if (a.m.size() != a.v.size()) throw CheckpointError("checkpoint: optimizer moments are unpaired");
  return a;
}

void resume(Trainer& trainer, const Checkpoint& ckpt) {
  if (ckpt.stage != trainer.stage().name) {
    throw CheckpointError("checkpoint: saved for stage '" + ckpt.stage + "', resuming '" + trainer.stage().name + "'");
  }
  std::string rng;
  for (const auto& [name, state] : ckpt.rng_states)
    if (name == "trainer") rng = state;
  if (rng.empty()) throw CheckpointError("checkpoint: no trainer RNG state");
  trainer.model() = checkpoint_model(ckpt);
  trainer.restore(ckpt.step, checkpoint_optimizer(ckpt), rng);
}

}  // namespace arcflow
