#include "arcflow/heads.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "arcflow/kernels.hpp"

namespace arcflow {

namespace k = kernels;

namespace {

template <typename T>
void affine(const Matrix<T>& x, const Tensor<T>& w, const Tensor<T>& b, Matrix<T>& y) {
  const std::size_t in = w.shape[0], out = w.shape[1];
  if (x.cols != in) {
    throw HeadError(w.name + ": input width " + std::to_string(x.cols) + ", expected " + std::to_string(in));
  }
  y.resize(x.rows, out);
  k::matmul(x.data.data(), w.data.data(), y.data.data(), x.rows, in, out);
  k::add_bias(y.data.data(), b.data.data(), x.rows, out);
}

// dW += x^T dy, db += sum dy, dx (+)= dy W^T
template <typename T>
void affine_backward(const Matrix<T>& x, const Tensor<T>& w, const Matrix<T>& dy, Tensor<T>& dw, Tensor<T>& db,
                     Matrix<T>* dx, bool accumulate) {
  const std::size_t in = w.shape[0], out = w.shape[1];
  k::matmul_at_b(x.data.data(), dy.data.data(), dw.data.data(), x.rows, in, out);
  k::sum_rows(dy.data.data(), db.data.data(), x.rows, out);
  if (dx) {
    if (!accumulate) dx->resize(x.rows, in);
    k::matmul_a_bt(dy.data.data(), w.data.data(), dx->data.data(), x.rows, out, in, accumulate);
  }
}

constexpr double kLayerNormEps = 1e-6;

template <typename T>
void layernorm(const Matrix<T>& x, Matrix<T>& n, std::vector<T>& rstd) {
  const std::size_t rows = x.rows, d = x.cols;
  n.resize(rows, d);
  rstd.assign(rows, T{0});
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = x.row(r);
    T mean = T{0};
    for (std::size_t j = 0; j < d; ++j) mean += xr[j];
    mean /= static_cast<T>(d);
    T var = T{0};
    for (std::size_t j = 0; j < d; ++j) var += (xr[j] - mean) * (xr[j] - mean);
    var /= static_cast<T>(d);
    const T rs = T{1} / std::sqrt(var + static_cast<T>(kLayerNormEps));
    rstd[r] = rs;
    T* nr = n.row(r);
    for (std::size_t j = 0; j < d; ++j) nr[j] = (xr[j] - mean) * rs;
  }
}

// dx += rstd * (dn - mean(dn) - n * mean(dn * n))
template <typename T>
void layernorm_backward(const Matrix<T>& n, const std::vector<T>& rstd, const Matrix<T>& dn, Matrix<T>& dx) {
  const std::size_t rows = n.rows, d = n.cols;
  for (std::size_t r = 0; r < rows; ++r) {
    const T* nr = n.row(r);
    const T* dr = dn.row(r);
    T m1 = T{0}, m2 = T{0};
    for (std::size_t j = 0; j < d; ++j) {
      m1 += dr[j];
      m2 += dr[j] * nr[j];
    }
    m1 /= static_cast<T>(d);
    m2 /= static_cast<T>(d);
    T* xr = dx.row(r);
    for (std::size_t j = 0; j < d; ++j) xr[j] += rstd[r] * (dr[j] - m1 - nr[j] * m2);
  }
}

}  // namespace

template <typename T>
std::vector<T> lm_logits(const LMHead<T>& head, std::span<const T> hidden) {
  if (hidden.size() != head.w.shape[0]) {
    throw HeadError("lm_logits: hidden size " + std::to_string(hidden.size()) + ", expected " +
                    std::to_string(head.w.shape[0]));
  }
  const std::size_t v = head.w.shape[1];
  std::vector<T> out(head.b.data.begin(), head.b.data.end());
  k::matmul(hidden.data(), head.w.data.data(), out.data(), 1, hidden.size(), v, /*accumulate=*/true);
  return out;
}

template <typename T>
Matrix<T> lm_logits(const LMHead<T>& head, const Matrix<T>& hidden) {
  Matrix<T> out;
  affine(hidden, head.w, head.b, out);
  return out;
}

template <typename T>
std::vector<T> softmax(std::span<const T> logits) {
  std::vector<T> p(logits.begin(), logits.end());
  if (p.empty()) return p;
  const T mx = *std::max_element(p.begin(), p.end());
  T sum = T{0};
  for (auto& x : p) {
    x = std::exp(x - mx);
    sum += x;
  }
  for (auto& x : p) x /= sum;
  return p;
}

template <typename T>
CrossEntropy ce_loss(const Matrix<T>& logits, std::span<const int> targets, Matrix<T>* d_logits) {
  if (targets.size() != logits.rows) throw HeadError("ce_loss: one target per logits row required");
  const std::size_t v = logits.cols;
  CrossEntropy out;
  for (int t : targets) {
    if (t >= static_cast<int>(v)) throw HeadError("ce_loss: target id " + std::to_string(t) + " >= vocabulary size");
    if (t >= 0) ++out.count;
  }
  if (d_logits) d_logits->resize(logits.rows, v);
  if (out.count == 0) return out;
  const double inv = 1.0 / static_cast<double>(out.count);
  double total = 0.0;
  for (std::size_t r = 0; r < logits.rows; ++r) {
    if (targets[r] < 0) continue;
    const T* lr = logits.row(r);
    const T mx = *std::max_element(lr, lr + v);
    double sum = 0.0;
    for (std::size_t j = 0; j < v; ++j) sum += std::exp(static_cast<double>(lr[j] - mx));
    const double lse = static_cast<double>(mx) + std::log(sum);
    total += lse - static_cast<double>(lr[targets[r]]);
    if (d_logits) {
      T* dr = d_logits->row(r);
      for (std::size_t j = 0; j < v; ++j)
        dr[j] = static_cast<T>(std::exp(static_cast<double>(lr[j]) - lse) * inv);
      dr[targets[r]] -= static_cast<T>(inv);
    }
  }
  out.loss = total * inv;
  return out;
}

template <typename T>
FlowSample<T> make_flow_sample(std::span<const T> x0, std::span<const T> x1, T t) {
  if (x0.size() != x1.size()) throw HeadError("make_flow_sample: x0 and x1 differ in size");
  if (!(t >= T{0} && t <= T{1})) throw HeadError("make_flow_sample: t outside [0, 1]");
  FlowSample<T> s;
  s.t = t;
  s.x0.assign(x0.begin(), x0.end());
  s.x1.assign(x1.begin(), x1.end());
  s.xt.resize(x0.size());
  s.v_target.resize(x0.size());
  for (std::size_t i = 0; i < x0.size(); ++i) {
    s.xt[i] = (T{1} - t) * x0[i] + t * x1[i];
    s.v_target[i] = x1[i] - x0[i];
  }
  // Endpoints exactly, independent of rounding in the blend.
  if (t == T{0}) s.xt = s.x0;
  if (t == T{1}) s.xt = s.x1;
  return s;
}

template <typename T>
void timestep_embedding(T t, std::size_t dim, T* out) {
  const std::size_t half = dim / 2;
  const double ts = 1000.0 * static_cast<double>(t);
  for (std::size_t i = 0; i < half; ++i) {
    const double freq = std::exp(-std::log(10000.0) * static_cast<double>(i) / static_cast<double>(half));
    out[i] = static_cast<T>(std::cos(ts * freq));
    out[half + i] = static_cast<T>(std::sin(ts * freq));
  }
}

template <typename T>
Matrix<T> fm_forward(const FlowHead<T>& head, const Matrix<T>& xt, std::span<const T> t, const Matrix<T>& cond,
                     FlowActivations<T>* acts) {
  const auto& cfg = head.config;
  const std::size_t n = xt.rows, hd = cfg.hidden;
  if (xt.cols != cfg.token_dim) throw HeadError("fm_forward: token width does not match token_dim");
  if (cond.cols != cfg.cond_dim) throw HeadError("fm_forward: condition width does not match cond_dim");
  if (t.size() != n || cond.rows != n) throw HeadError("fm_forward: xt, t and cond must have the same count");
  for (T ti : t)
    if (!(ti >= T{0} && ti <= T{1})) throw HeadError("fm_forward: t outside [0, 1]");

  FlowActivations<T> local;
  FlowActivations<T>& a = acts ? *acts : local;
  a.temb.resize(n, cfg.time_dim);
  for (std::size_t i = 0; i < n; ++i) timestep_embedding(t[i], cfg.time_dim, a.temb.row(i));
  affine(a.temb, head.time_w1, head.time_b1, a.ta);
  a.ts = a.ta;
  for (auto& v : a.ts.data) v = k::silu(v);
  Matrix<T> tmp;
  affine(a.ts, head.time_w2, head.time_b2, a.y);
  affine(cond, head.cond_w, head.cond_b, tmp);
  for (std::size_t i = 0; i < a.y.data.size(); ++i) a.y.data[i] += tmp.data[i];
  a.sy = a.y;
  for (auto& v : a.sy.data) v = k::silu(v);

  Matrix<T> x;
  affine(xt, head.in_w, head.in_b, x);
  a.blocks.resize(head.blocks.size());
  for (std::size_t l = 0; l < head.blocks.size(); ++l) {
    const auto& b = head.blocks[l];
    auto& ba = a.blocks[l];
    ba.x_in = std::move(x);
    layernorm(ba.x_in, ba.n, ba.rstd);
    ba.ln.resize(n, hd);
    for (std::size_t r = 0; r < n; ++r)
      for (std::size_t j = 0; j < hd; ++j) ba.ln(r, j) = ba.n(r, j) * b.ln_g.data[j] + b.ln_b.data[j];
    affine(a.sy, b.mod_w, b.mod_b, ba.mod);
    ba.h.resize(n, hd);
    for (std::size_t r = 0; r < n; ++r) {
      const T* m = ba.mod.row(r);
      for (std::size_t j = 0; j < hd; ++j) ba.h(r, j) = ba.ln(r, j) * (T{1} + m[hd + j]) + m[j];
    }
    affine(ba.h, b.fc1_w, b.fc1_b, ba.a1);
    ba.s1 = ba.a1;
    for (auto& v : ba.s1.data) v = k::silu(v);
    affine(ba.s1, b.fc2_w, b.fc2_b, ba.a2);
    x = ba.x_in;
    for (std::size_t r = 0; r < n; ++r) {
      const T* gate = ba.mod.row(r) + 2 * hd;
      for (std::size_t j = 0; j < hd; ++j) x(r, j) += gate[j] * ba.a2(r, j);
    }
  }
  a.x_final = std::move(x);
  layernorm(a.x_final, a.n_final, a.rstd_final);
  affine(a.sy, head.final_mod_w, head.final_mod_b, a.fmod);
  a.h_final.resize(n, hd);
  for (std::size_t r = 0; r < n; ++r) {
    const T* m = a.fmod.row(r);
    for (std::size_t j = 0; j < hd; ++j) a.h_final(r, j) = a.n_final(r, j) * (T{1} + m[hd + j]) + m[j];
  }
  Matrix<T> out;
  affine(a.h_final, head.out_w, head.out_b, out);
  return out;
}

template <typename T>
std::vector<T> fm_forward(const FlowHead<T>& head, std::span<const T> xt, T t, std::span<const T> cond) {
  Matrix<T> x(1, xt.size()), c(1, cond.size());
  std::copy(xt.begin(), xt.end(), x.data.begin());
  std::copy(cond.begin(), cond.end(), c.data.begin());
  const T ts[1] = {t};
  return fm_forward(head, x, std::span<const T>(ts, 1), c).data;
}

template <typename T>
void fm_backward(const FlowHead<T>& head, const Matrix<T>& xt, const Matrix<T>& cond, const FlowActivations<T>& a,
                 const Matrix<T>& d_out, FlowHead<T>& g, Matrix<T>* d_cond) {
  const std::size_t n = xt.rows, hd = head.config.hidden;
  Matrix<T> d_sy(n, hd), d_h, d_mod, dx(n, hd), dn(n, hd);

  // Output layer and final modulation.
  affine_backward(a.h_final, head.out_w, d_out, g.out_w, g.out_b, &d_h, false);
  d_mod.resize(n, 2 * hd);
  for (std::size_t r = 0; r < n; ++r) {
    const T* m = a.fmod.row(r);
    for (std::size_t j = 0; j < hd; ++j) {
      const T dh = d_h(r, j);
      dn(r, j) = dh * (T{1} + m[hd + j]);
      d_mod(r, j) = dh;
      d_mod(r, hd + j) = dh * a.n_final(r, j);
    }
  }
  affine_backward(a.sy, head.final_mod_w, d_mod, g.final_mod_w, g.final_mod_b, &d_sy, true);
  layernorm_backward(a.n_final, a.rstd_final, dn, dx);

  Matrix<T> d_a2(n, hd), d_s1, d_ln(n, hd);
  for (std::size_t l = head.blocks.size(); l-- > 0;) {
    const auto& b = head.blocks[l];
    auto& gb = g.blocks[l];
    const auto& ba = a.blocks[l];
    d_mod.resize(n, 3 * hd);
    for (std::size_t r = 0; r < n; ++r) {
      const T* gate = ba.mod.row(r) + 2 * hd;
      for (std::size_t j = 0; j < hd; ++j) {
        d_mod(r, 2 * hd + j) = dx(r, j) * ba.a2(r, j);
        d_a2(r, j) = dx(r, j) * gate[j];
      }
    }
    affine_backward(ba.s1, b.fc2_w, d_a2, gb.fc2_w, gb.fc2_b, &d_s1, false);
    for (std::size_t i = 0; i < d_s1.data.size(); ++i) d_s1.data[i] *= k::silu_grad(ba.a1.data[i]);
    affine_backward(ba.h, b.fc1_w, d_s1, gb.fc1_w, gb.fc1_b, &d_h, false);
    for (std::size_t r = 0; r < n; ++r) {
      const T* m = ba.mod.row(r);
      for (std::size_t j = 0; j < hd; ++j) {
        const T dh = d_h(r, j);
        d_ln(r, j) = dh * (T{1} + m[hd + j]);
        d_mod(r, j) = dh;
        d_mod(r, hd + j) = dh * ba.ln(r, j);
        gb.ln_g.data[j] += d_ln(r, j) * ba.n(r, j);
        gb.ln_b.data[j] += d_ln(r, j);
        dn(r, j) = d_ln(r, j) * b.ln_g.data[j];
      }
    }
    affine_backward(a.sy, b.mod_w, d_mod, gb.mod_w, gb.mod_b, &d_sy, true);
    layernorm_backward(ba.n, ba.rstd, dn, dx);
  }
  affine_backward(xt, head.in_w, dx, g.in_w, g.in_b, static_cast<Matrix<T>*>(nullptr), false);

  // Conditioning path: y = time_mlp(temb) + cond_proj(cond), sy = silu(y).
  Matrix<T> dy = d_sy;
  for (std::size_t i = 0; i < dy.data.size(); ++i) dy.data[i] *= k::silu_grad(a.y.data[i]);
  affine_backward(cond, head.cond_w, dy, g.cond_w, g.cond_b, d_cond, false);
  Matrix<T> d_ts;
  affine_backward(a.ts, head.time_w2, dy, g.time_w2, g.time_b2, &d_ts, false);
  for (std::size_t i = 0; i < d_ts.data.size(); ++i) d_ts.data[i] *= k::silu_grad(a.ta.data[i]);
  affine_backward(a.temb, head.time_w1, d_ts, g.time_w1, g.time_b1, static_cast<Matrix<T>*>(nullptr), false);
}

template <typename T>
double mse(const Matrix<T>& pred, const Matrix<T>& target, Matrix<T>* d_pred) {
  if (pred.rows != target.rows || pred.cols != target.cols) throw HeadError("mse: shape mismatch");
  const std::size_t count = pred.data.size();
  if (d_pred) d_pred->resize(pred.rows, pred.cols);
  if (count == 0) return 0.0;
  const double inv = 1.0 / static_cast<double>(count);
  double total = 0.0;
  for (std::size_t i = 0; i < count; ++i) {
    const double diff = static_cast<double>(pred.data[i]) - static_cast<double>(target.data[i]);
    total += diff * diff;
    if (d_pred) d_pred->data[i] = static_cast<T>(2.0 * diff * inv);
  }
  return total * inv;
}

template <typename T>
double fm_loss(const FlowHead<T>& head, std::span<const FlowSample<T>> samples, const Matrix<T>& cond) {
  if (samples.size() != cond.rows) throw HeadError("fm_loss: one condition per sample required");
  if (samples.empty()) return 0.0;
  const std::size_t td = head.config.token_dim;
  Matrix<T> xt(samples.size(), td), target(samples.size(), td);
  std::vector<T> t(samples.size());
  for (std::size_t i = 0; i < samples.size(); ++i) {
    if (samples[i].xt.size() != td) throw HeadError("fm_loss: sample width does not match token_dim");
    std::copy(samples[i].xt.begin(), samples[i].xt.end(), xt.row(i));
    std::copy(samples[i].v_target.begin(), samples[i].v_target.end(), target.row(i));
    t[i] = samples[i].t;
  }
  return mse(fm_forward(head, xt, std::span<const T>(t), cond), target);
}

double total_loss(double text, double visual, double lambda_text, double lambda_visual) {
  if (!(lambda_text >= 0.0) || !(lambda_visual >= 0.0)) throw HeadError("total_loss: loss weights must be >= 0");
  return lambda_text * text + lambda_visual * visual;
}

LossBreakdown make_breakdown(double text, double visual, double lambda_text, double lambda_visual,
                             std::size_t text_count, std::size_t image_count) {
  LossBreakdown b;
  b.text = text;
  b.visual = visual;
  b.lambda_text = lambda_text;
  b.lambda_visual = lambda_visual;
  b.total = total_loss(text, visual, lambda_text, lambda_visual);
  b.text_count = text_count;
  b.image_count = image_count;
  return b;
}

std::uint64_t count_params(const FMHeadConfig& c) {
  const std::uint64_t h = c.hidden, td = c.token_dim, tdim = c.time_dim, cd = c.cond_dim, l = c.layers;
  const std::uint64_t input = td * h + h;
  const std::uint64_t time = tdim * h + h + h * h + h;
  const std::uint64_t condition = cd * h + h;
  const std::uint64_t block = 2 * h + (h * 3 * h + 3 * h) + 2 * (h * h + h);
  const std::uint64_t final_layer = h * 2 * h + 2 * h + h * td + td;
  return input + time + condition + l * block + final_layer;
}

#define ARCFLOW_INSTANTIATE(T)                                                                                  \
  template std::vector<T> lm_logits<T>(const LMHead<T>&, std::span<const T>);                                  \
  template Matrix<T> lm_logits<T>(const LMHead<T>&, const Matrix<T>&);                                         \
  template std::vector<T> softmax<T>(std::span<const T>);                                                      \
  template CrossEntropy ce_loss<T>(const Matrix<T>&, std::span<const int>, Matrix<T>*);                        \
  template FlowSample<T> make_flow_sample<T>(std::span<const T>, std::span<const T>, T);                       \
  template void timestep_embedding<T>(T, std::size_t, T*);                                                     \
  template Matrix<T> fm_forward<T>(const FlowHead<T>&, const Matrix<T>&, std::span<const T>, const Matrix<T>&, \
                                   FlowActivations<T>*);                                                       \
  template std::vector<T> fm_forward<T>(const FlowHead<T>&, std::span<const T>, T, std::span<const T>);        \
  template void fm_backward<T>(const FlowHead<T>&, const Matrix<T>&, const Matrix<T>&, const FlowActivations<T>&, \
                               const Matrix<T>&, FlowHead<T>&, Matrix<T>*);                                    \
  template double mse<T>(const Matrix<T>&, const Matrix<T>&, Matrix<T>*);                                      \
  template double fm_loss<T>(const FlowHead<T>&, std::span<const FlowSample<T>>, const Matrix<T>&);

ARCFLOW_INSTANTIATE(float)
ARCFLOW_INSTANTIATE(double)
#undef ARCFLOW_INSTANTIATE

}  // namespace arcflow
