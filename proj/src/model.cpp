#include "arcflow/model.hpp"

#include <algorithm>
#include <cmath>

#include "arcflow/kernels.hpp"
#include "arcflow/vocab.hpp"

namespace arcflow {

namespace k = kernels;

namespace {

template <typename T>
void fill_normal(Tensor<T>& t, double std, std::mt19937_64& rng) {
  std::normal_distribution<double> normal(0.0, std);
  for (auto& v : t.data) v = static_cast<T>(normal(rng));
}

template <typename T>
Tensor<T> ones(std::string name, std::size_t n) {
  Tensor<T> t(std::move(name), {n});
  std::fill(t.data.begin(), t.data.end(), T{1});
  return t;
}

template <typename T>
Tensor<T> normal(std::string name, std::vector<std::size_t> shape, double std, std::mt19937_64& rng) {
  Tensor<T> t(std::move(name), std::move(shape));
  fill_normal(t, std, rng);
  return t;
}

std::size_t resolved_vocab(const ModelConfig& c) {
  return c.vocab_size == 0 ? Vocabulary::standard().size() : c.vocab_size;
}

/// cos/sin of position * base^(-2i/d), computed in double.
template <typename T>
struct RopeTable {
  std::size_t half = 0;
  std::vector<T> cos, sin;  // [positions, half]

  RopeTable(std::size_t positions, std::size_t head_dim, double base) : half(head_dim / 2) {
    cos.resize(positions * half);
    sin.resize(positions * half);
    for (std::size_t p = 0; p < positions; ++p)
      for (std::size_t i = 0; i < half; ++i) {
        const double freq = std::pow(base, -2.0 * static_cast<double>(i) / static_cast<double>(head_dim));
        const double angle = static_cast<double>(p) * freq;
        cos[p * half + i] = static_cast<T>(std::cos(angle));
        sin[p * half + i] = static_cast<T>(std::sin(angle));
      }
  }

  // sign = +1 rotates forward, -1 applies the transpose.
  void rotate(T* v, std::size_t position, std::size_t heads, T sign) const {
    const T* c = cos.data() + position * half;
    const T* s = sin.data() + position * half;
    for (std::size_t h = 0; h < heads; ++h) {
      T* hv = v + h * 2 * half;
      for (std::size_t i = 0; i < half; ++i) {
        const T a = hv[2 * i], b = hv[2 * i + 1];
        const T si = sign * s[i];
        hv[2 * i] = a * c[i] - b * si;
        hv[2 * i + 1] = a * si + b * c[i];
      }
    }
  }
};

template <typename T>
void rmsnorm_forward(const Matrix<T>& x, const Tensor<T>& gain, T eps, Matrix<T>& y, std::vector<T>& inv_rms) {
  const std::size_t n = x.rows, d = x.cols;
  y.resize(n, d);
  inv_rms.assign(n, T{0});
  for (std::size_t r = 0; r < n; ++r) {
    const T* xr = x.row(r);
    T ss = T{0};
    for (std::size_t j = 0; j < d; ++j) ss += xr[j] * xr[j];
    const T inv = T{1} / std::sqrt(ss / static_cast<T>(d) + eps);
    inv_rms[r] = inv;
    T* yr = y.row(r);
    for (std::size_t j = 0; j < d; ++j) yr[j] = xr[j] * inv * gain.data[j];
  }
}

// dx += d(rmsnorm)/dx * dy ; dgain += ...
template <typename T>
void rmsnorm_backward(const Matrix<T>& x, const Tensor<T>& gain, const std::vector<T>& inv_rms, const Matrix<T>& dy,
                      Matrix<T>& dx, Tensor<T>& dgain) {
  const std::size_t n = x.rows, d = x.cols;
  for (std::size_t r = 0; r < n; ++r) {
    const T* xr = x.row(r);
    const T* dyr = dy.row(r);
    T* dxr = dx.row(r);
    const T inv = inv_rms[r];
    T dot = T{0};
    for (std::size_t j = 0; j < d; ++j) {
      dgain.data[j] += dyr[j] * xr[j] * inv;
      dot += dyr[j] * gain.data[j] * xr[j];
    }
    const T coef = inv * inv * inv * dot / static_cast<T>(d);
    for (std::size_t j = 0; j < d; ++j) dxr[j] += inv * gain.data[j] * dyr[j] - coef * xr[j];
  }
}

template <typename T>
void linear(const Matrix<T>& x, const Tensor<T>& w, Matrix<T>& y) {
  const std::size_t in = w.shape[0], out = w.shape[1];
  y.resize(x.rows, out);
  k::matmul(x.data.data(), w.data.data(), y.data.data(), x.rows, in, out);
}

// dx (+)= dy * W^T ; dW += x^T dy
template <typename T>
void linear_backward(const Matrix<T>& x, const Tensor<T>& w, const Matrix<T>& dy, Matrix<T>* dx, bool accumulate,
                     Tensor<T>& dw) {
  const std::size_t in = w.shape[0], out = w.shape[1];
  k::matmul_at_b(x.data.data(), dy.data.data(), dw.data.data(), x.rows, in, out);
  if (dx) {
    if (!accumulate) dx->resize(x.rows, in);
    k::matmul_a_bt(dy.data.data(), w.data.data(), dx->data.data(), x.rows, out, in, accumulate);
  }
}

template <typename T>
void embed(const Backbone<T>& p, const ModelConfig& config, const PackedBatch<T>& batch, Matrix<T>& x) {
  const std::size_t d = config.model_dim;
  const std::size_t vocab = p.tok_emb.shape[0];
  x.resize(batch.size(), d);
  for (std::size_t i = 0; i < batch.size(); ++i) {
    T* xr = x.row(i);
    const int id = batch.ids[i];
    if (id >= 0) {
      if (static_cast<std::size_t>(id) >= vocab) throw ModelError("token id " + std::to_string(id) + " out of range");
      std::copy(p.tok_emb.row(static_cast<std::size_t>(id)), p.tok_emb.row(static_cast<std::size_t>(id)) + d, xr);
    } else {
      const T* img = batch.images.row(static_cast<std::size_t>(batch.image_row[i]));
      std::copy(p.img_b.data.begin(), p.img_b.data.end(), xr);
      k::matmul(img, p.img_w.data.data(), xr, 1, config.token_dim, d, /*accumulate=*/true);
    }
  }
}

}  // namespace

template <typename T>
Matrix<T> embed(const Backbone<T>& params, const ModelConfig& config, const PackedBatch<T>& batch) {
  Matrix<T> x;
  embed(params, config, batch, x);
  return x;
}

namespace {

template <typename T>
void causal_attention(const ModelConfig& config, const PackedBatch<T>& batch, const Matrix<T>& q, const Matrix<T>& kk,
                      const Matrix<T>& v, Matrix<T>& out, std::vector<T>* probs,
                      const std::vector<std::size_t>* prob_offset) {
  const std::size_t heads = config.heads, hd = config.head_dim(), d = config.model_dim;
  const T scale = T{1} / std::sqrt(static_cast<T>(hd));
  out.resize(q.rows, d);
  std::vector<T> row;
  for (std::size_t s = 0; s + 1 < batch.seg_start.size(); ++s) {
    const std::size_t s0 = batch.seg_start[s], len = batch.seg_start[s + 1] - s0;
    row.resize(len);
    for (std::size_t h = 0; h < heads; ++h) {
      const std::size_t off = h * hd;
      for (std::size_t i = 0; i < len; ++i) {
        const T* qi = q.row(s0 + i) + off;
        T mx = -std::numeric_limits<T>::infinity();
        for (std::size_t j = 0; j <= i; ++j) {
          const T* kj = kk.row(s0 + j) + off;
          T dot = T{0};
          for (std::size_t e = 0; e < hd; ++e) dot += qi[e] * kj[e];
          row[j] = dot * scale;
          mx = std::max(mx, row[j]);
        }
        T sum = T{0};
        for (std::size_t j = 0; j <= i; ++j) {
          row[j] = std::exp(row[j] - mx);
          sum += row[j];
        }
        const T inv = T{1} / sum;
        T* o = out.row(s0 + i) + off;
        for (std::size_t e = 0; e < hd; ++e) o[e] = T{0};
        for (std::size_t j = 0; j <= i; ++j) {
          const T pj = row[j] * inv;
          row[j] = pj;
          const T* vj = v.row(s0 + j) + off;
          for (std::size_t e = 0; e < hd; ++e) o[e] += pj * vj[e];
        }
        if (probs) {
          T* pr = probs->data() + (*prob_offset)[s] + (h * len + i) * len;
          std::copy(row.begin(), row.begin() + static_cast<std::ptrdiff_t>(i + 1), pr);
        }
      }
    }
  }
}

}  // namespace

template <typename T>
Backbone<T> make_backbone(const ModelConfig& config, std::mt19937_64& rng) {
  config.validate();
  const std::size_t d = config.model_dim, f = config.ffn_dim, v = resolved_vocab(config);
  const double sd = config.init_std;
  Backbone<T> p;
  p.tok_emb = normal<T>("backbone.tok_emb", {v, d}, sd, rng);
  p.img_w = normal<T>("backbone.img_w", {config.token_dim, d}, sd, rng);
  p.img_b = Tensor<T>("backbone.img_b", {d});
  for (std::size_t l = 0; l < config.layers; ++l) {
    const std::string pre = "backbone.block" + std::to_string(l) + ".";
    BlockParams<T> b;
    b.attn_norm = ones<T>(pre + "attn_norm", d);
    b.wq = normal<T>(pre + "wq", {d, d}, sd, rng);
    b.wk = normal<T>(pre + "wk", {d, d}, sd, rng);
    b.wv = normal<T>(pre + "wv", {d, d}, sd, rng);
    b.wo = normal<T>(pre + "wo", {d, d}, sd, rng);
    b.ffn_norm = ones<T>(pre + "ffn_norm", d);
    b.w_gate = normal<T>(pre + "w_gate", {d, f}, sd, rng);
    b.w_up = normal<T>(pre + "w_up", {d, f}, sd, rng);
    b.w_down = normal<T>(pre + "w_down", {f, d}, sd, rng);
    p.blocks.push_back(std::move(b));
  }
  p.final_norm = ones<T>("backbone.final_norm", d);
  return p;
}

template <typename T>
LMHead<T> make_lm_head(const ModelConfig& config, std::mt19937_64& rng) {
  LMHead<T> h;
  const std::size_t v = resolved_vocab(config);
  h.w = normal<T>("lm.w", {config.model_dim, v}, config.init_std, rng);
  h.b = Tensor<T>("lm.b", {v});
  return h;
}

std::vector<ParamSpec> flow_head_layout(const FMHeadConfig& config) {
  config.validate();
  const std::size_t h = config.hidden;
  std::vector<ParamSpec> out = {
      {"fm.in_w", {config.token_dim, h}, ParamInit::kNormal},
      {"fm.in_b", {h}, ParamInit::kZero},
      {"fm.time_w1", {config.time_dim, h}, ParamInit::kNormal},
      {"fm.time_b1", {h}, ParamInit::kZero},
      {"fm.time_w2", {h, h}, ParamInit::kNormal},
      {"fm.time_b2", {h}, ParamInit::kZero},
      {"fm.cond_w", {config.cond_dim, h}, ParamInit::kNormal},
      {"fm.cond_b", {h}, ParamInit::kZero},
  };
  for (std::size_t l = 0; l < config.layers; ++l) {
    const std::string pre = "fm.block" + std::to_string(l) + ".";
    out.push_back({pre + "ln_g", {h}, ParamInit::kOne});
    out.push_back({pre + "ln_b", {h}, ParamInit::kZero});
    out.push_back({pre + "mod_w", {h, 3 * h}, ParamInit::kNormal});
    out.push_back({pre + "mod_b", {3 * h}, ParamInit::kZero});
    out.push_back({pre + "fc1_w", {h, h}, ParamInit::kNormal});
    out.push_back({pre + "fc1_b", {h}, ParamInit::kZero});
    out.push_back({pre + "fc2_w", {h, h}, ParamInit::kNormal});
    out.push_back({pre + "fc2_b", {h}, ParamInit::kZero});
  }
  out.push_back({"fm.final_mod_w", {h, 2 * h}, ParamInit::kNormal});
  out.push_back({"fm.final_mod_b", {2 * h}, ParamInit::kZero});
  out.push_back({"fm.out_w", {h, config.token_dim}, ParamInit::kNormal});
  out.push_back({"fm.out_b", {config.token_dim}, ParamInit::kZero});
  return out;
}

template <typename T>
FlowHead<T> make_flow_head(const FMHeadConfig& config, double sd, std::mt19937_64& rng) {
  const auto layout = flow_head_layout(config);
  std::size_t k = 0;
  auto next = [&]() {
    const ParamSpec& s = layout.at(k++);
    if (s.init == ParamInit::kNormal) return normal<T>(s.name, s.shape, sd, rng);
    Tensor<T> t(s.name, s.shape);
    if (s.init == ParamInit::kOne) std::fill(t.data.begin(), t.data.end(), T{1});
    return t;
  };
  FlowHead<T> h;
  h.config = config;
  h.in_w = next();
  h.in_b = next();
  h.time_w1 = next();
  h.time_b1 = next();
  h.time_w2 = next();
  h.time_b2 = next();
  h.cond_w = next();
  h.cond_b = next();
  for (std::size_t l = 0; l < config.layers; ++l) {
    FlowBlock<T> b;
    b.ln_g = next();
    b.ln_b = next();
    b.mod_w = next();
    b.mod_b = next();
    b.fc1_w = next();
    b.fc1_b = next();
    b.fc2_w = next();
    b.fc2_b = next();
    h.blocks.push_back(std::move(b));
  }
  h.final_mod_w = next();
  h.final_mod_b = next();
  h.out_w = next();
  h.out_b = next();
  if (k != layout.size()) throw ModelError("make_flow_head: layout has unused entries");
  return h;
}

template <typename T>
Model<T> make_model(const ModelConfig& config, const FMHeadConfig& head, std::uint64_t seed) {
  if (head.cond_dim != config.model_dim) throw ModelError("flow head cond_dim must equal model_dim");
  if (head.token_dim != config.token_dim) throw ModelError("flow head token_dim must equal model token_dim");
  std::mt19937_64 rng(seed);
  Model<T> m;
  m.config = config;
  m.backbone = make_backbone<T>(config, rng);
  m.lm = make_lm_head<T>(config, rng);
  m.fm = make_flow_head<T>(head, config.init_std, rng);
  return m;
}

template <typename To, typename From>
Model<To> cast_model(const Model<From>& m) {
  Model<To> out = make_model<To>(m.config, m.fm.config, 0);
  auto src = tensors_of<From>(m);
  auto dst = tensors_of<To>(out);
  for (std::size_t i = 0; i < src.size(); ++i) {
    dst[i]->shape = src[i]->shape;
    dst[i]->data.assign(src[i]->data.begin(), src[i]->data.end());
  }
  return out;
}

template <typename T>
void apply_rope(std::span<T> v, std::size_t position, double base) {
  if (v.size() % 2 != 0) throw ModelError("apply_rope: odd dimension " + std::to_string(v.size()));
  RopeTable<T> table(position + 1, v.size(), base);
  table.rotate(v.data(), position, 1, T{1});
}

template <typename T>
PackedBatch<T> pack_sequences(std::span<const MultimodalSequence> sequences, std::size_t token_dim) {
  PackedBatch<T> b;
  std::size_t total = 0, images = 0;
  for (const auto& s : sequences) {
    total += s.size();
    for (const auto& e : s.elements) images += is_image(e) ? 1 : 0;
  }
  b.ids.reserve(total);
  b.image_row.reserve(total);
  b.positions.reserve(total);
  b.images.resize(images, token_dim);
  b.seg_start.push_back(0);
  std::size_t img = 0;
  for (const auto& s : sequences) {
    for (std::size_t i = 0; i < s.size(); ++i) {
      const auto& e = s.elements[i];
      b.positions.push_back(i);
      if (const auto* it = std::get_if<ImageToken>(&e)) {
        if (it->values.size() != token_dim) throw ModelError("image token dimension mismatch");
        std::copy(it->values.begin(), it->values.end(), b.images.row(img));
        b.ids.push_back(-1);
        b.image_row.push_back(static_cast<int>(img++));
      } else {
        b.ids.push_back(element_id(e));
        b.image_row.push_back(-1);
      }
    }
    b.seg_start.push_back(b.ids.size());
  }
  return b;
}

template <typename T>
Matrix<T> backbone_forward(const Backbone<T>& p, const ModelConfig& config, const PackedBatch<T>& batch,
                           BackboneActivations<T>* acts) {
  const std::size_t n = batch.size(), d = config.model_dim;
  std::size_t max_len = 0;
  for (std::size_t s = 0; s + 1 < batch.seg_start.size(); ++s)
    max_len = std::max(max_len, batch.seg_start[s + 1] - batch.seg_start[s]);
  if (max_len > config.max_seq_len) {
    throw ModelError("sequence length " + std::to_string(max_len) + " exceeds max_seq_len " +
                     std::to_string(config.max_seq_len));
  }
  const T eps = static_cast<T>(config.norm_eps);
  RopeTable<T> rope(std::max<std::size_t>(max_len, 1), config.head_dim(), config.rope_base);

  std::vector<std::size_t> prob_offset;
  std::size_t prob_total = 0;
  for (std::size_t s = 0; s + 1 < batch.seg_start.size(); ++s) {
    const std::size_t len = batch.seg_start[s + 1] - batch.seg_start[s];
    prob_offset.push_back(prob_total);
    prob_total += config.heads * len * len;
  }

  BlockActivations<T> scratch;
  Matrix<T> x;
  embed(p, config, batch, x);
  if (acts) {
    acts->blocks.assign(p.blocks.size(), {});
    acts->prob_offset = prob_offset;
  }
  Matrix<T> tmp;
  for (std::size_t l = 0; l < p.blocks.size(); ++l) {
    const auto& b = p.blocks[l];
    auto& a = acts ? acts->blocks[l] : scratch;
    a.x_in = x;
    rmsnorm_forward(a.x_in, b.attn_norm, eps, a.normed1, a.inv_rms1);
    linear(a.normed1, b.wq, a.q);
    linear(a.normed1, b.wk, a.k);
    linear(a.normed1, b.wv, a.v);
    for (std::size_t i = 0; i < n; ++i) {
      rope.rotate(a.q.row(i), batch.positions[i], config.heads, T{1});
      rope.rotate(a.k.row(i), batch.positions[i], config.heads, T{1});
    }
    if (acts) a.probs.assign(prob_total, T{0});
    causal_attention(config, batch, a.q, a.k, a.v, a.attn, acts ? &a.probs : nullptr, &prob_offset);
    linear(a.attn, b.wo, tmp);
    a.x_mid = a.x_in;
    for (std::size_t i = 0; i < n * d; ++i) a.x_mid.data[i] += tmp.data[i];

    rmsnorm_forward(a.x_mid, b.ffn_norm, eps, a.normed2, a.inv_rms2);
    linear(a.normed2, b.w_gate, a.gate);
    linear(a.normed2, b.w_up, a.up);
    a.act.resize(n, config.ffn_dim);
    for (std::size_t i = 0; i < a.act.data.size(); ++i) a.act.data[i] = k::silu(a.gate.data[i]) * a.up.data[i];
    linear(a.act, b.w_down, tmp);
    x = a.x_mid;
    for (std::size_t i = 0; i < n * d; ++i) x.data[i] += tmp.data[i];
  }
  Matrix<T> hidden;
  std::vector<T> inv_final;
  rmsnorm_forward(x, p.final_norm, eps, hidden, inv_final);
  if (acts) {
    acts->x_final = std::move(x);
    acts->inv_rms_final = std::move(inv_final);
  }
  return hidden;
}

template <typename T>
void backbone_backward(const Backbone<T>& p, const ModelConfig& config, const PackedBatch<T>& batch,
                       const BackboneActivations<T>& acts, const Matrix<T>& d_hidden, Backbone<T>& g) {
  const std::size_t n = batch.size(), d = config.model_dim, heads = config.heads, hd = config.head_dim();
  const T scale = T{1} / std::sqrt(static_cast<T>(hd));
  std::size_t max_len = 1;
  for (std::size_t s = 0; s + 1 < batch.seg_start.size(); ++s)
    max_len = std::max(max_len, batch.seg_start[s + 1] - batch.seg_start[s]);
  RopeTable<T> rope(max_len, hd, config.rope_base);

  Matrix<T> dx(n, d);
  rmsnorm_backward(acts.x_final, p.final_norm, acts.inv_rms_final, d_hidden, dx, g.final_norm);

  Matrix<T> d_act, d_gate(n, config.ffn_dim), d_up(n, config.ffn_dim), d_norm, d_attn, dq, dk, dv;
  std::vector<T> dp;
  for (std::size_t li = p.blocks.size(); li-- > 0;) {
    const auto& b = p.blocks[li];
    auto& gb = g.blocks[li];
    const auto& a = acts.blocks[li];

    // Feed-forward: x_out = x_mid + act * w_down
    linear_backward(a.act, b.w_down, dx, &d_act, false, gb.w_down);
    for (std::size_t i = 0; i < d_act.data.size(); ++i) {
      const T gt = a.gate.data[i];
      d_gate.data[i] = d_act.data[i] * a.up.data[i] * k::silu_grad(gt);
      d_up.data[i] = d_act.data[i] * k::silu(gt);
    }
    linear_backward(a.normed2, b.w_gate, d_gate, &d_norm, false, gb.w_gate);
    linear_backward(a.normed2, b.w_up, d_up, &d_norm, true, gb.w_up);
    rmsnorm_backward(a.x_mid, b.ffn_norm, a.inv_rms2, d_norm, dx, gb.ffn_norm);

    // Attention: x_mid = x_in + attn * wo
    linear_backward(a.attn, b.wo, dx, &d_attn, false, gb.wo);
    dq.resize(n, d);
    dk.resize(n, d);
    dv.resize(n, d);
    for (std::size_t s = 0; s + 1 < batch.seg_start.size(); ++s) {
      const std::size_t s0 = batch.seg_start[s], len = batch.seg_start[s + 1] - s0;
      dp.resize(len);
      for (std::size_t h = 0; h < heads; ++h) {
        const std::size_t off = h * hd;
        for (std::size_t i = 0; i < len; ++i) {
          const T* pr = a.probs.data() + acts.prob_offset[s] + (h * len + i) * len;
          const T* doi = d_attn.row(s0 + i) + off;
          T dot_sum = T{0};
          for (std::size_t j = 0; j <= i; ++j) {
            const T* vj = a.v.row(s0 + j) + off;
            T* dvj = dv.row(s0 + j) + off;
            T dpj = T{0};
            for (std::size_t e = 0; e < hd; ++e) {
              dpj += doi[e] * vj[e];
              dvj[e] += pr[j] * doi[e];
            }
            dp[j] = dpj;
            dot_sum += pr[j] * dpj;
          }
          const T* qi = a.q.row(s0 + i) + off;
          T* dqi = dq.row(s0 + i) + off;
          for (std::size_t j = 0; j <= i; ++j) {
            const T ds = pr[j] * (dp[j] - dot_sum) * scale;
            const T* kj = a.k.row(s0 + j) + off;
            T* dkj = dk.row(s0 + j) + off;
            for (std::size_t e = 0; e < hd; ++e) {
              dqi[e] += ds * kj[e];
              dkj[e] += ds * qi[e];
            }
          }
        }
      }
    }
    for (std::size_t i = 0; i < n; ++i) {
      rope.rotate(dq.row(i), batch.positions[i], heads, T{-1});
      rope.rotate(dk.row(i), batch.positions[i], heads, T{-1});
    }
    linear_backward(a.normed1, b.wq, dq, &d_norm, false, gb.wq);
    linear_backward(a.normed1, b.wk, dk, &d_norm, true, gb.wk);
    linear_backward(a.normed1, b.wv, dv, &d_norm, true, gb.wv);
    rmsnorm_backward(a.x_in, b.attn_norm, a.inv_rms1, d_norm, dx, gb.attn_norm);
  }

  // Embeddings.
  for (std::size_t i = 0; i < n; ++i) {
    const T* dr = dx.row(i);
    const int id = batch.ids[i];
    if (id >= 0) {
      T* ge = g.tok_emb.row(static_cast<std::size_t>(id));
      for (std::size_t j = 0; j < d; ++j) ge[j] += dr[j];
    } else {
      const T* img = batch.images.row(static_cast<std::size_t>(batch.image_row[i]));
      k::matmul_at_b(img, dr, g.img_w.data.data(), 1, config.token_dim, d);
      for (std::size_t j = 0; j < d; ++j) g.img_b.data[j] += dr[j];
    }
  }
}

template <typename T>
Matrix<T> forward(const Backbone<T>& params, const ModelConfig& config, const MultimodalSequence& seq) {
  auto batch = pack_sequences<T>(std::span<const MultimodalSequence>(&seq, 1), config.token_dim);
  return backbone_forward(params, config, batch, static_cast<BackboneActivations<T>*>(nullptr));
}

template <typename T>
KVCache<T>::KVCache(const ModelConfig& config) {
  keys.assign(config.layers, Matrix<T>(config.max_seq_len, config.model_dim));
  values.assign(config.layers, Matrix<T>(config.max_seq_len, config.model_dim));
}

template <typename T>
std::vector<T> forward_step(const Backbone<T>& p, const ModelConfig& config, int id, std::span<const T> image,
                            KVCache<T>& cache) {
  if (cache.keys.size() != p.blocks.size()) throw ModelError("forward_step: cache not sized for this model");
  if (cache.length >= cache.capacity()) throw ModelError("forward_step: KV cache is full");
  const std::size_t d = config.model_dim, heads = config.heads, hd = config.head_dim();
  const std::size_t pos = cache.length;
  const T eps = static_cast<T>(config.norm_eps);
  const T scale = T{1} / std::sqrt(static_cast<T>(hd));
  RopeTable<T> rope(pos + 1, hd, config.rope_base);

  PackedBatch<T> one;
  one.ids = {id};
  one.positions = {pos};
  one.seg_start = {0, 1};
  if (id < 0) {
    if (image.size() != config.token_dim) throw ModelError("forward_step: image token dimension mismatch");
    one.images.resize(1, config.token_dim);
    std::copy(image.begin(), image.end(), one.images.row(0));
    one.image_row = {0};
  } else {
    one.image_row = {-1};
  }
  Matrix<T> x;
  embed(p, config, one, x);

  Matrix<T> normed, q, kk, v, attn(1, d), tmp, gate, up, act;
  std::vector<T> inv, row(pos + 1);
  for (std::size_t l = 0; l < p.blocks.size(); ++l) {
    const auto& b = p.blocks[l];
    rmsnorm_forward(x, b.attn_norm, eps, normed, inv);
    linear(normed, b.wq, q);
    linear(normed, b.wk, kk);
    linear(normed, b.wv, v);
    rope.rotate(q.row(0), pos, heads, T{1});
    rope.rotate(kk.row(0), pos, heads, T{1});
    std::copy(kk.row(0), kk.row(0) + d, cache.keys[l].row(pos));
    std::copy(v.row(0), v.row(0) + d, cache.values[l].row(pos));
    for (std::size_t h = 0; h < heads; ++h) {
      const std::size_t off = h * hd;
      const T* qi = q.row(0) + off;
      T mx = -std::numeric_limits<T>::infinity();
      for (std::size_t j = 0; j <= pos; ++j) {
        const T* kj = cache.keys[l].row(j) + off;
        T dot = T{0};
        for (std::size_t e = 0; e < hd; ++e) dot += qi[e] * kj[e];
        row[j] = dot * scale;
        mx = std::max(mx, row[j]);
      }
      T sum = T{0};
      for (std::size_t j = 0; j <= pos; ++j) {
        row[j] = std::exp(row[j] - mx);
        sum += row[j];
      }
      const T inv_sum = T{1} / sum;
      T* o = attn.row(0) + off;
      for (std::size_t e = 0; e < hd; ++e) o[e] = T{0};
      for (std::size_t j = 0; j <= pos; ++j) {
        const T pj = row[j] * inv_sum;
        const T* vj = cache.values[l].row(j) + off;
        for (std::size_t e = 0; e < hd; ++e) o[e] += pj * vj[e];
      }
    }
    linear(attn, b.wo, tmp);
    for (std::size_t j = 0; j < d; ++j) x.data[j] += tmp.data[j];
    rmsnorm_forward(x, b.ffn_norm, eps, normed, inv);
    linear(normed, b.w_gate, gate);
    linear(normed, b.w_up, up);
    act.resize(1, config.ffn_dim);
    for (std::size_t i = 0; i < act.data.size(); ++i) act.data[i] = k::silu(gate.data[i]) * up.data[i];
    linear(act, b.w_down, tmp);
    for (std::size_t j = 0; j < d; ++j) x.data[j] += tmp.data[j];
  }
  Matrix<T> hidden;
  rmsnorm_forward(x, p.final_norm, eps, hidden, inv);
  ++cache.length;
  return hidden.data;
}

template <typename T>
std::vector<T> forward_step(const Backbone<T>& params, const ModelConfig& config, const SequenceElement& element,
                            KVCache<T>& cache) {
  if (const auto* img = std::get_if<ImageToken>(&element)) {
    std::vector<T> v(img->values.begin(), img->values.end());
    return forward_step<T>(params, config, -1, std::span<const T>(v), cache);
  }
  return forward_step<T>(params, config, element_id(element), std::span<const T>(), cache);
}

#define ARCFLOW_INSTANTIATE(T)                                                                                   \
  template Backbone<T> make_backbone<T>(const ModelConfig&, std::mt19937_64&);                                   \
  template LMHead<T> make_lm_head<T>(const ModelConfig&, std::mt19937_64&);                                      \
  template FlowHead<T> make_flow_head<T>(const FMHeadConfig&, double, std::mt19937_64&);                         \
  template Model<T> make_model<T>(const ModelConfig&, const FMHeadConfig&, std::uint64_t);                       \
  template void apply_rope<T>(std::span<T>, std::size_t, double);                                                \
  template Matrix<T> embed<T>(const Backbone<T>&, const ModelConfig&, const PackedBatch<T>&);                    \
  template PackedBatch<T> pack_sequences<T>(std::span<const MultimodalSequence>, std::size_t);                   \
  template Matrix<T> backbone_forward<T>(const Backbone<T>&, const ModelConfig&, const PackedBatch<T>&,          \
                                         BackboneActivations<T>*);                                               \
  template void backbone_backward<T>(const Backbone<T>&, const ModelConfig&, const PackedBatch<T>&,              \
                                     const BackboneActivations<T>&, const Matrix<T>&, Backbone<T>&);             \
  template Matrix<T> forward<T>(const Backbone<T>&, const ModelConfig&, const MultimodalSequence&);              \
  template struct KVCache<T>;                                                                                    \
  template std::vector<T> forward_step<T>(const Backbone<T>&, const ModelConfig&, int, std::span<const T>,       \
                                          KVCache<T>&);                                                          \
  template std::vector<T> forward_step<T>(const Backbone<T>&, const ModelConfig&, const SequenceElement&,        \
                                          KVCache<T>&);

ARCFLOW_INSTANTIATE(float)
ARCFLOW_INSTANTIATE(double)
#undef ARCFLOW_INSTANTIATE

template Model<double> cast_model<double, float>(const Model<float>&);
template Model<float> cast_model<float, double>(const Model<double>&);
template Model<float> cast_model<float, float>(const Model<float>&);
template Model<double> cast_model<double, double>(const Model<double>&);

}  // namespace arcflow
