#pragma once

// Causal transformer backbone over packed multimodal sequences, plus the
// parameter containers for the two output heads. Everything is templated
// on the scalar type: float for training and inference, double for the
// gradient and cache-equivalence checks. Explicit instantiations for both
// live in model.cpp.

#include <cstdint>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "arcflow/config.hpp"
#include "arcflow/sequence.hpp"
#include "arcflow/tensor.hpp"

namespace arcflow {

struct ModelError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

template <typename T>
struct BlockParams {
  Tensor<T> attn_norm;  // [D] RMSNorm gain
  Tensor<T> wq, wk, wv, wo;  // [D, D], applied as x * W
  Tensor<T> ffn_norm;   // [D]
  Tensor<T> w_gate, w_up;  // [D, F]
  Tensor<T> w_down;     // [F, D]

  template <class F>
  void for_each(F&& f) {
    f(attn_norm), f(wq), f(wk), f(wv), f(wo), f(ffn_norm), f(w_gate), f(w_up), f(w_down);
  }
  template <class F>
  void for_each(F&& f) const {
    f(attn_norm), f(wq), f(wk), f(wv), f(wo), f(ffn_norm), f(w_gate), f(w_up), f(w_down);
  }
};

template <typename T>
struct Backbone {
  Tensor<T> tok_emb;  // [V, D]
  Tensor<T> img_w;    // [token_dim, D]
  Tensor<T> img_b;    // [D]
  std::vector<BlockParams<T>> blocks;
  Tensor<T> final_norm;  // [D]

  template <class F>
  void for_each(F&& f) {
    f(tok_emb), f(img_w), f(img_b);
    for (auto& b : blocks) b.for_each(f);
    f(final_norm);
  }
  template <class F>
  void for_each(F&& f) const {
    f(tok_emb), f(img_w), f(img_b);
    for (const auto& b : blocks) b.for_each(f);
    f(final_norm);
  }
};

template <typename T>
struct LMHead {
  Tensor<T> w;  // [D, V]
  Tensor<T> b;  // [V]

  template <class F>
  void for_each(F&& f) {
    f(w), f(b);
  }
  template <class F>
  void for_each(F&& f) const {
    f(w), f(b);
  }
};

/// One modulated residual block of the flow head:
/// x + gate * fc2(silu(fc1(LN(x) * (1 + scale) + shift))).
template <typename T>
struct FlowBlock {
  Tensor<T> ln_g, ln_b;    // [H]
  Tensor<T> mod_w, mod_b;  // [H, 3H], [3H] -> shift, scale, gate
  Tensor<T> fc1_w, fc1_b;  // [H, H], [H]
  Tensor<T> fc2_w, fc2_b;  // [H, H], [H]

  template <class F>
  void for_each(F&& f) {
    f(ln_g), f(ln_b), f(mod_w), f(mod_b), f(fc1_w), f(fc1_b), f(fc2_w), f(fc2_b);
  }
  template <class F>
  void for_each(F&& f) const {
    f(ln_g), f(ln_b), f(mod_w), f(mod_b), f(fc1_w), f(fc1_b), f(fc2_w), f(fc2_b);
  }
};

template <typename T>
struct FlowHead {
  FMHeadConfig config;
  Tensor<T> in_w, in_b;        // [token_dim, H], [H]
  Tensor<T> time_w1, time_b1;  // [time_dim, H], [H]
  Tensor<T> time_w2, time_b2;  // [H, H], [H]
  Tensor<T> cond_w, cond_b;    // [cond_dim, H], [H]
  std::vector<FlowBlock<T>> blocks;
  Tensor<T> final_mod_w, final_mod_b;  // [H, 2H], [2H] -> shift, scale
  Tensor<T> out_w, out_b;              // [H, token_dim], [token_dim]

  template <class F>
  void for_each(F&& f) {
    f(in_w), f(in_b), f(time_w1), f(time_b1), f(time_w2), f(time_b2), f(cond_w), f(cond_b);
    for (auto& b : blocks) b.for_each(f);
    f(final_mod_w), f(final_mod_b), f(out_w), f(out_b);
  }
  template <class F>
  void for_each(F&& f) const {
    f(in_w), f(in_b), f(time_w1), f(time_b1), f(time_w2), f(time_b2), f(cond_w), f(cond_b);
    for (const auto& b : blocks) b.for_each(f);
    f(final_mod_w), f(final_mod_b), f(out_w), f(out_b);
  }
};

template <typename T>
struct Model {
  ModelConfig config;
  Backbone<T> backbone;
  LMHead<T> lm;
  FlowHead<T> fm;

  template <class F>
  void for_each(F&& f) {
    backbone.for_each(f), lm.for_each(f), fm.for_each(f);
  }
  template <class F>
  void for_each(F&& f) const {
    backbone.for_each(f), lm.for_each(f), fm.for_each(f);
  }
};

/// Tensors of a parameter container in visiting order.
template <typename T, class P>
std::vector<Tensor<T>*> tensors_of(P& params) {
  std::vector<Tensor<T>*> out;
  params.for_each([&](Tensor<T>& t) { out.push_back(&t); });
  return out;
}

template <typename T, class P>
std::vector<const Tensor<T>*> tensors_of(const P& params) {
  std::vector<const Tensor<T>*> out;
  params.for_each([&](const Tensor<T>& t) { out.push_back(&t); });
  return out;
}

/// Copy of `params` with every tensor zeroed (gradient buffers).
template <typename T, class P>
P zeros_like_params(const P& params) {
  P out = params;
  out.for_each([](Tensor<T>& t) { std::fill(t.data.begin(), t.data.end(), T{0}); });
  return out;
}

template <typename T, class P>
std::size_t param_count(const P& params) {
  std::size_t n = 0;
  params.for_each([&](const Tensor<T>& t) { n += t.numel(); });
  return n;
}

/// Allocates parameters; weights ~ N(0, init_std^2), biases zero, norm gains one.
template <typename T>
Backbone<T> make_backbone(const ModelConfig& config, std::mt19937_64& rng);
template <typename T>
LMHead<T> make_lm_head(const ModelConfig& config, std::mt19937_64& rng);
template <typename T>
FlowHead<T> make_flow_head(const FMHeadConfig& config, double init_std, std::mt19937_64& rng);

enum class ParamInit { kNormal, kZero, kOne };

struct ParamSpec {
  std::string name;
  std::vector<std::size_t> shape;
  ParamInit init;
};

/// Tensor layout of a flow head in allocation order; make_flow_head builds from it.
std::vector<ParamSpec> flow_head_layout(const FMHeadConfig& config);
template <typename T>
Model<T> make_model(const ModelConfig& config, const FMHeadConfig& head, std::uint64_t seed);

/// Element-wise conversion between scalar types (float <-> double).
template <typename To, typename From>
Model<To> cast_model(const Model<From>& m);

/// Rotates consecutive pairs (2i, 2i+1) of `v` by position * base^(-2i/d).
template <typename T>
void apply_rope(std::span<T> v, std::size_t position, double base);

/// Numeric form of a batch of sequences laid end to end. Attention never
/// crosses sequence boundaries and positions restart at 0 in each sequence.
template <typename T>
struct PackedBatch {
  std::vector<int> ids;                 // vocabulary id, or -1 for image tokens
  std::vector<int> image_row;           // row in `images`, or -1
  Matrix<T> images;                     // [num image tokens, token_dim]
  std::vector<std::size_t> positions;   // position inside its own sequence
  std::vector<std::size_t> seg_start;   // sequence k spans [seg_start[k], seg_start[k+1])

  std::size_t size() const { return ids.size(); }
  std::size_t num_sequences() const { return seg_start.empty() ? 0 : seg_start.size() - 1; }
};

template <typename T>
PackedBatch<T> pack_sequences(std::span<const MultimodalSequence> sequences, std::size_t token_dim);

/// Input rows [N, D]: embedding-table rows for text, img_w * x + img_b for image tokens.
template <typename T>
Matrix<T> embed(const Backbone<T>& params, const ModelConfig& config, const PackedBatch<T>& batch);

template <typename T>
struct BlockActivations {
  Matrix<T> x_in, normed1, q, k, v, attn, x_mid, normed2, gate, up, act;
  std::vector<T> inv_rms1, inv_rms2;
  std::vector<T> probs;  // per sequence, per head, L x L (row i valid up to column i)
};

template <typename T>
struct BackboneActivations {
  std::vector<BlockActivations<T>> blocks;
  Matrix<T> x_final;
  std::vector<T> inv_rms_final;
  std::vector<std::size_t> prob_offset;  // per sequence, into probs
};

/// Hidden states [N, D] for a packed batch. When `acts` is non-null it is
/// filled with everything backbone_backward needs.
template <typename T>
Matrix<T> backbone_forward(const Backbone<T>& params, const ModelConfig& config, const PackedBatch<T>& batch,
                           BackboneActivations<T>* acts = nullptr);

/// Accumulates parameter gradients for d(loss)/d(hidden).
template <typename T>
void backbone_backward(const Backbone<T>& params, const ModelConfig& config, const PackedBatch<T>& batch,
                       const BackboneActivations<T>& acts, const Matrix<T>& d_hidden, Backbone<T>& grads);

/// Hidden states for one sequence (no activation capture).
template <typename T>
Matrix<T> forward(const Backbone<T>& params, const ModelConfig& config, const MultimodalSequence& seq);

/// Per-layer rotated keys and values of every position seen so far.
template <typename T>
struct KVCache {
  std::vector<Matrix<T>> keys;    // per layer, [capacity, D]
  std::vector<Matrix<T>> values;  // per layer, [capacity, D]
  std::size_t length = 0;

  KVCache() = default;
  explicit KVCache(const ModelConfig& config);
  std::size_t capacity() const { return keys.empty() ? 0 : keys.front().rows; }
};

/// Appends one element to the cache and returns its hidden state [D].
/// `image` is used when id < 0.
template <typename T>
std::vector<T> forward_step(const Backbone<T>& params, const ModelConfig& config, int id,
                            std::span<const T> image, KVCache<T>& cache);

template <typename T>
std::vector<T> forward_step(const Backbone<T>& params, const ModelConfig& config, const SequenceElement& element,
                            KVCache<T>& cache);

}  // namespace arcflow
