#pragma once

// Output heads and losses: the language-modeling head with cross-entropy
// over text positions, and the flow-matching head with the velocity MSE.

#include <cstdint>
#include <span>
#include <stdexcept>
#include <vector>

#include "arcflow/config.hpp"
#include "arcflow/model.hpp"
#include "arcflow/tensor.hpp"

namespace arcflow {

struct HeadError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

/// hidden * W + b for one position.
template <typename T>
std::vector<T> lm_logits(const LMHead<T>& head, std::span<const T> hidden);

/// Batched logits [N, V].
template <typename T>
Matrix<T> lm_logits(const LMHead<T>& head, const Matrix<T>& hidden);

template <typename T>
std::vector<T> softmax(std::span<const T> logits);

struct CrossEntropy {
  double loss = 0.0;  // mean over supervised rows
  std::size_t count = 0;
};

/// Mean negative log-likelihood of `targets` (one per row; -1 marks an
/// unsupervised row). If d_logits is non-null it receives
/// d(mean loss)/d(logits).
template <typename T>
CrossEntropy ce_loss(const Matrix<T>& logits, std::span<const int> targets, Matrix<T>* d_logits = nullptr);

/// Rectified-flow training pair: xt = (1 - t) x0 + t x1, v = x1 - x0.
template <typename T>
struct FlowSample {
  std::vector<T> x0, x1, xt, v_target;
  T t = T{0};
};

template <typename T>
FlowSample<T> make_flow_sample(std::span<const T> x0, std::span<const T> x1, T t);

/// Sinusoidal embedding of 1000 t: [cos(args), sin(args)] with
/// args_i = 1000 t * 10000^(-i / half).
template <typename T>
void timestep_embedding(T t, std::size_t dim, T* out);

template <typename T>
struct FlowBlockActivations {
  Matrix<T> x_in, n, ln, mod, h, a1, s1, a2;
  std::vector<T> rstd;
};

template <typename T>
struct FlowActivations {
  Matrix<T> temb, ta, ts, y, sy;
  std::vector<FlowBlockActivations<T>> blocks;
  Matrix<T> x_final, n_final, fmod, h_final;
  std::vector<T> rstd_final;
};

/// Velocities [N, token_dim] for noisy tokens xt [N, token_dim] at times
/// t [N] under conditions [N, cond_dim]. Every t must lie in [0, 1].
template <typename T>
Matrix<T> fm_forward(const FlowHead<T>& head, const Matrix<T>& xt, std::span<const T> t, const Matrix<T>& cond,
                     FlowActivations<T>* acts = nullptr);

/// Single-token convenience form.
template <typename T>
std::vector<T> fm_forward(const FlowHead<T>& head, std::span<const T> xt, T t, std::span<const T> cond);

/// Accumulates head gradients for d(loss)/d(out); writes d(loss)/d(cond)
/// into d_cond when non-null.
template <typename T>
void fm_backward(const FlowHead<T>& head, const Matrix<T>& xt, const Matrix<T>& cond, const FlowActivations<T>& acts,
                 const Matrix<T>& d_out, FlowHead<T>& grads, Matrix<T>* d_cond);

/// mean over rows and dims of (pred - target)^2. d_pred (if non-null)
/// receives the gradient of that mean.
template <typename T>
double mse(const Matrix<T>& pred, const Matrix<T>& target, Matrix<T>* d_pred = nullptr);

/// Flow-matching loss for samples against per-sample conditions [N, cond_dim].
template <typename T>
double fm_loss(const FlowHead<T>& head, std::span<const FlowSample<T>> samples, const Matrix<T>& cond);

struct LossBreakdown {
  double text = 0.0;
  double visual = 0.0;
  double total = 0.0;
  double lambda_text = 0.0;
  double lambda_visual = 0.0;
  std::size_t text_count = 0;
  std::size_t image_count = 0;
};

double total_loss(double text, double visual, double lambda_text, double lambda_visual);
LossBreakdown make_breakdown(double text, double visual, double lambda_text, double lambda_visual,
                             std::size_t text_count, std::size_t image_count);

/// Closed-form parameter count of the flow head architecture.
std::uint64_t count_params(const FMHeadConfig& config);

}  // namespace arcflow
