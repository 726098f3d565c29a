#pragma once

#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "probtf/nn.hpp"
#include "probtf/tensor.hpp"

// Decoupled-weight-decay adaptive optimizer over a ParamBank, cosine
// learning-rate schedule with linear warmup, and global-norm gradient
// clipping. The Lagrange multiplier never passes through here; it has its
// own controller in the objective module.

namespace probtf {

struct OptimConfig {
  double beta1 = 0.9;
  double beta2 = 0.98;
  double eps = 1e-8;
  double weight_decay = 0.01;
  double clip_norm = 100.0;
  double lr_high = 1e-3;
  double lr_low = 1e-4;
  std::size_t warmup_epochs = 1;
  std::size_t epochs = 50;
  std::size_t steps_per_epoch = 2000;

  std::size_t warmup_steps() const { return warmup_epochs * steps_per_epoch; }
  std::size_t total_steps() const { return epochs * steps_per_epoch; }

  void validate() const {
    if (lr_low > lr_high || lr_high <= 0.0) {
      throw std::invalid_argument("optim: need 0 < lr_low <= lr_high, got " +
                                  std::to_string(lr_low) + ".." +
                                  std::to_string(lr_high));
    }
    if (beta1 < 0.0 || beta1 >= 1.0 || beta2 < 0.0 || beta2 >= 1.0) {
      throw std::invalid_argument("optim: betas must lie in [0,1)");
    }
    if (clip_norm <= 0.0) throw std::invalid_argument("optim: clip_norm must be positive");
    if (warmup_steps() >= total_steps()) {
      throw std::invalid_argument("optim: warmup covers the whole schedule");
    }
  }
};

// Linear ramp 0 -> lr_high over the warmup steps, then cosine decay from
// lr_high to lr_low at the final step.
inline double cosine_warmup_lr(std::size_t t, const OptimConfig& cfg) {
  const std::size_t warm = cfg.warmup_steps();
  const std::size_t total = cfg.total_steps();
  if (t <= warm) {
    return warm == 0 ? cfg.lr_high
                     : cfg.lr_high * static_cast<double>(t) / static_cast<double>(warm);
  }
  const double progress =
      static_cast<double>(t - warm) / static_cast<double>(total - warm);
  const double clamped = progress > 1.0 ? 1.0 : progress;
  return cfg.lr_low +
         0.5 * (cfg.lr_high - cfg.lr_low) * (1.0 + std::cos(clamped * 3.14159265358979323846));
}

// Scales all gradients so the global L2 norm across every bank does not
// exceed max_norm. Returns the pre-clip norm. Accumulates in double
// regardless of T. Predictive and posterior parameters train as one joint
// set, so the norm is taken over all of them together.
template <typename T>
double clip_global_norm(const std::vector<ParamBank<T>*>& banks, double max_norm) {
  double sq = 0.0;
  for (ParamBank<T>* bank : banks) {
    for (std::size_t i = 0; i < bank->size(); ++i) {
      for (T g : bank->tensor(i).node().grad) {
        sq += static_cast<double>(g) * static_cast<double>(g);
      }
    }
  }
  const double norm = std::sqrt(sq);
  if (norm > max_norm && norm > 0.0) {
    const T scale = static_cast<T>(max_norm / norm);
    for (ParamBank<T>* bank : banks) {
      for (std::size_t i = 0; i < bank->size(); ++i) {
        for (T& g : bank->tensor(i).node().grad) g *= scale;
      }
    }
  }
  return norm;
}

template <typename T>
double clip_global_norm(ParamBank<T>& bank, double max_norm) {
  return clip_global_norm(std::vector<ParamBank<T>*>{&bank}, max_norm);
}

template <typename T>
class AdamW {
 public:
  // Labels show up in diagnostics when several banks share the optimizer,
  // e.g. "post:block1.prob.mu.w".
  AdamW(std::vector<std::pair<std::string, ParamBank<T>*>> banks, OptimConfig cfg)
      : banks_(std::move(banks)), cfg_(std::move(cfg)) {
    cfg_.validate();
    for (auto& [label, bank] : banks_) {
      for (std::size_t i = 0; i < bank->size(); ++i) {
        m_.emplace_back(bank->tensor(i).size(), T(0));
        v_.emplace_back(bank->tensor(i).size(), T(0));
      }
    }
  }

  AdamW(ParamBank<T>& bank, OptimConfig cfg)
      : AdamW({{std::string(), &bank}}, std::move(cfg)) {}

  // One update from the gradients currently held in the banks. Clips to the
  // configured global norm, checks finiteness first, applies decoupled decay
  // and the bias-corrected adaptive step at the scheduled rate.
  double step() {
    ++t_;
    for (auto& [label, bank] : banks_) {
      for (std::size_t i = 0; i < bank->size(); ++i) {
        for (T g : bank->tensor(i).node().grad) {
          if (!std::isfinite(static_cast<double>(g))) {
            const std::string where =
                label.empty() ? bank->name(i) : label + ":" + bank->name(i);
            throw std::runtime_error("optimizer step " + std::to_string(t_) +
                                     ": non-finite gradient in parameter " + where);
          }
        }
      }
    }
    std::vector<ParamBank<T>*> raw;
    for (auto& [label, bank] : banks_) raw.push_back(bank);
    clip_global_norm(raw, cfg_.clip_norm);
    const double lr = cosine_warmup_lr(t_, cfg_);
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    const double decay = 1.0 - lr * cfg_.weight_decay;
    std::size_t slot = 0;
    for (auto& [label, bank] : banks_) {
      for (std::size_t i = 0; i < bank->size(); ++i, ++slot) {
        auto& p = bank->tensor(i).values_mut();
        const auto& grad = bank->tensor(i).node().grad;
        auto& m = m_[slot];
        auto& v = v_[slot];
        for (std::size_t j = 0; j < p.size(); ++j) {
          const double g = grad.empty() ? 0.0 : static_cast<double>(grad[j]);
          const double mj =
              cfg_.beta1 * static_cast<double>(m[j]) + (1.0 - cfg_.beta1) * g;
          const double vj =
              cfg_.beta2 * static_cast<double>(v[j]) + (1.0 - cfg_.beta2) * g * g;
          m[j] = static_cast<T>(mj);
          v[j] = static_cast<T>(vj);
          const double update = (mj / bc1) / (std::sqrt(vj / bc2) + cfg_.eps);
          p[j] = static_cast<T>(static_cast<double>(p[j]) * decay - lr * update);
        }
      }
    }
    return lr;
  }

  std::size_t steps_taken() const { return t_; }
  const OptimConfig& config() const { return cfg_; }
  std::vector<std::vector<T>>& moment1() { return m_; }
  std::vector<std::vector<T>>& moment2() { return v_; }
  void restore_step_count(std::size_t t) { t_ = t; }

 private:
  std::vector<std::pair<std::string, ParamBank<T>*>> banks_;
  OptimConfig cfg_;
  std::size_t t_ = 0;
  std::vector<std::vector<T>> m_;  // first moment, one slot per tensor across banks
  std::vector<std::vector<T>> v_;  // second moment, same layout
};

}  // namespace probtf
