#pragma once

#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

#include "probtf/nn.hpp"
#include "probtf/tensor.hpp"

// Constrained-optimization objective: reconstruction cross-entropy, the
// hierarchical diagonal-Gaussian divergence, the Lagrangian that couples
// them through a learned multiplier lambda, and the per-epoch annealing of
// the reconstruction target kappa.
//
// lambda = softplus(lambda_raw)^2 keeps the multiplier positive for any raw
// value. Its update is a dedicated ascent step on the Lagrangian driven by
// an exponential moving average of the reconstruction loss (decay 0.95,
// scaling 0.01); it never enters the main optimizer and carries no moment
// state. The EMA starts at the first observed value rather than zero to
// avoid a cold-start transient.
//
// kappa annealing: over an epoch the controller accumulates the constraint
// sum; the epoch-mean constraint L_c = mean(l_rec) - kappa is added to kappa
// only when L_c < 0 and lambda <= 1 (the multiplier itself, not its raw
// parameter), so kappa only ever tightens.

namespace probtf {

inline double softplus(double x) { return x > 30.0 ? x : std::log1p(std::exp(x)); }
inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

// Raw value whose squared softplus is 1.
inline double lambda_raw_for(double lambda) {
  if (lambda <= 0.0) {
    throw std::invalid_argument("lambda must be positive, got " + std::to_string(lambda));
  }
  return std::log(std::expm1(std::sqrt(lambda)));
}

struct GecoState {
  double lambda_raw = lambda_raw_for(1.0);
  double kappa = 0.1;
  double ema_rec = 0.0;
  bool ema_initialized = false;
  double sum_constraint = 0.0;  // running sum of (l_rec - kappa) this epoch
  std::size_t count = 0;

  double lambda() const {
    const double s = softplus(lambda_raw);
    return s * s;
  }

  void set_lambda(double value) { lambda_raw = lambda_raw_for(value); }

  // Registers one observed per-item reconstruction loss for the epoch
  // constraint accumulator.
  void observe(double l_rec) {
    sum_constraint += l_rec - kappa;
    count += 1;
  }

  double epoch_constraint() const {
    return count == 0 ? 0.0 : sum_constraint / static_cast<double>(count);
  }
};

template <typename T>
Tensor<T> reconstruction_loss(const Tensor<T>& logits, const std::vector<int>& targets) {
  return cross_entropy_mean(logits, targets);
}

// Closed-form KL(q || p) between matched diagonal Gaussians, summed over
// latent dimensions and averaged over sequence positions.
template <typename T>
Tensor<T> gaussian_kl(const GaussianLatent<T>& q, const GaussianLatent<T>& p) {
  if (q.mu.shape() != p.mu.shape() || q.log_var.shape() != p.log_var.shape() ||
      q.mu.shape() != q.log_var.shape()) {
    throw std::invalid_argument("gaussian_kl: latent shapes differ, q " +
                                shape_str(q.mu.shape()) + " vs p " +
                                shape_str(p.mu.shape()));
  }
  const std::size_t s = q.mu.shape()[0];
  Tensor<T> diff = sub(q.mu, p.mu);
  Tensor<T> inv_var_p = exp(affine(p.log_var, T(-1), T(0)));
  Tensor<T> quad = mul(add(exp(q.log_var), mul(diff, diff)), inv_var_p);
  Tensor<T> per_dim = add(sub(p.log_var, q.log_var), affine(quad, T(1), T(-1)));
  return affine(sum(per_dim), static_cast<T>(0.5 / static_cast<double>(s)), T(0));
}

// Hierarchical divergence: sum of per-block terms, aligned by position.
template <typename T>
Tensor<T> gaussian_kl(const std::vector<GaussianLatent<T>>& q,
                      const std::vector<GaussianLatent<T>>& p) {
  if (q.size() != p.size()) {
    throw std::invalid_argument("gaussian_kl: " + std::to_string(q.size()) +
                                " posterior vs " + std::to_string(p.size()) +
                                " prior blocks");
  }
  Tensor<T> total = Tensor<T>::scalar(T(0));
  for (std::size_t m = 0; m < q.size(); ++m) {
    Tensor<T> term = gaussian_kl(q[m], p[m]);
    total = m == 0 ? term : add(total, term);
  }
  return total;
}

// Lagrangian: lambda * (l_rec - kappa) + d_kl. lambda and kappa enter as
// constants of the graph; the multiplier's own motion comes from lambda_step.
template <typename T>
Tensor<T> geco_loss(const Tensor<T>& l_rec, const Tensor<T>& d_kl,
                    const GecoState& state) {
  const double lam = state.lambda();
  return add(affine(l_rec, static_cast<T>(lam), static_cast<T>(-lam * state.kappa)),
             d_kl);
}

template <typename T>
Tensor<T> elbo_loss(const Tensor<T>& l_rec, const Tensor<T>& d_kl) {
  return add(l_rec, d_kl);
}

inline double geco_loss_value(double l_rec, double d_kl, const GecoState& state) {
  return state.lambda() * (l_rec - state.kappa) + d_kl;
}

// One multiplier update per optimizer step: refresh the EMA of the
// reconstruction loss, then move lambda_raw along the Lagrangian's ascent
// direction d(loss)/d(lambda_raw) = (ema - kappa) * dlambda/draw with the
// 0.01 scaling.
inline void lambda_step(GecoState& state, double l_rec) {
  if (!state.ema_initialized) {
    state.ema_rec = l_rec;
    state.ema_initialized = true;
  } else {
    state.ema_rec = 0.95 * state.ema_rec + 0.05 * l_rec;
  }
  const double dlambda_draw =
      2.0 * softplus(state.lambda_raw) * sigmoid(state.lambda_raw);
  state.lambda_raw += 0.01 * (state.ema_rec - state.kappa) * dlambda_draw;
}

// Per-epoch annealing. Returns the epoch constraint L_c for logging and
// resets the accumulators either way.
inline double kappa_anneal(GecoState& state) {
  const double l_c = state.epoch_constraint();
  if (l_c < 0.0 && state.lambda() <= 1.0) {
    state.kappa += l_c;
  }
  state.sum_constraint = 0.0;
  state.count = 0;
  return l_c;
}

}  // namespace probtf
