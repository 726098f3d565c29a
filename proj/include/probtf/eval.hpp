#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "probtf/model.hpp"
#include "probtf/rng.hpp"
#include "probtf/synthdata.hpp"

// Distribution-recovery metrics over repeated model realizations.
//
// Every evaluated position carries its context's true sparse distribution,
// its R realized tokens, and is weighted equally regardless of sequence
// length. The divergence is KL(empirical || smoothed-true): the true
// distribution takes additive smoothing epsilon on every vocabulary entry
// and renormalizes, which keeps the reference positive and the metric
// finite for any ensemble.

namespace probtf {

struct EnsemblePosition {
  int phrase_id = 0;
  int pos = 0;
  std::vector<int> realizations;
  SparseDist truth;
};

struct PredictiveEnsemble {
  std::size_t vocab_out = 0;
  std::size_t realizations = 0;  // R, fixed per run
  std::vector<EnsemblePosition> positions;
};

struct MetricReport {
  double validity = 0.0;
  double kl_divergence = 0.0;
  double diversity = 0.0;
  double total_variation = 0.0;
};

namespace detail {

inline void check_ensemble(const PredictiveEnsemble& e) {
  if (e.positions.empty() || e.realizations == 0) {
    throw std::invalid_argument("metrics: empty ensemble");
  }
  if (e.vocab_out == 0) throw std::invalid_argument("metrics: vocab size unset");
}

inline std::map<int, std::size_t> realization_counts(const EnsemblePosition& p) {
  std::map<int, std::size_t> counts;
  for (int t : p.realizations) counts[t] += 1;
  return counts;
}

}  // namespace detail

// Fraction of realized tokens that the true distribution supports,
// averaged over positions.
inline double validity(const PredictiveEnsemble& e) {
  detail::check_ensemble(e);
  double acc = 0.0;
  for (const auto& p : e.positions) {
    std::size_t in_support = 0;
    for (int t : p.realizations) in_support += p.truth.contains(t) ? 1 : 0;
    acc += static_cast<double>(in_support) / static_cast<double>(p.realizations.size());
  }
  return acc / static_cast<double>(e.positions.size());
}

// Mean over positions of KL(empirical || smoothed-true).
inline double kl_divergence(const PredictiveEnsemble& e, double epsilon = 1e-4) {
  detail::check_ensemble(e);
  const double v = static_cast<double>(e.vocab_out);
  const double norm = 1.0 + v * epsilon;
  double acc = 0.0;
  for (const auto& p : e.positions) {
    const auto counts = detail::realization_counts(p);
    double kl = 0.0;
    for (const auto& [tok, count] : counts) {
      const double phat = static_cast<double>(count) / static_cast<double>(p.realizations.size());
      double q = 0.0;
      for (const auto& [t, prob] : p.truth.entries) {
        if (t == tok) {
          q = prob;
          break;
        }
      }
      const double q_smooth = (q + epsilon) / norm;
      kl += phat * std::log(phat / q_smooth);
    }
    acc += kl;
  }
  return acc / static_cast<double>(e.positions.size());
}

// Mean over positions of (#distinct realized tokens) / (true support size).
// Values above 1 signal over-dispersion.
inline double diversity(const PredictiveEnsemble& e) {
  detail::check_ensemble(e);
  double acc = 0.0;
  for (const auto& p : e.positions) {
    std::size_t support = 0;
    for (const auto& [t, prob] : p.truth.entries) support += prob > 0.0 ? 1 : 0;
    if (support == 0) throw std::invalid_argument("metrics: context with empty support");
    acc += static_cast<double>(detail::realization_counts(p).size()) /
           static_cast<double>(support);
  }
  return acc / static_cast<double>(e.positions.size());
}

// Mean over positions of (1/2) sum_v |empirical(v) - true(v)|, unsmoothed.
inline double total_variation(const PredictiveEnsemble& e) {
  detail::check_ensemble(e);
  double acc = 0.0;
  for (const auto& p : e.positions) {
    auto counts = detail::realization_counts(p);
    double tv = 0.0;
    for (const auto& [tok, prob] : p.truth.entries) {
      const auto it = counts.find(tok);
      const double phat =
          it == counts.end()
              ? 0.0
              : static_cast<double>(it->second) / static_cast<double>(p.realizations.size());
      tv += std::abs(phat - prob);
      if (it != counts.end()) counts.erase(it);
    }
    for (const auto& [tok, count] : counts) {
      tv += static_cast<double>(count) / static_cast<double>(p.realizations.size());
    }
    acc += 0.5 * tv;
  }
  return acc / static_cast<double>(e.positions.size());
}

inline MetricReport metrics(const PredictiveEnsemble& e, double epsilon = 1e-4) {
  return {validity(e), kl_divergence(e, epsilon), diversity(e), total_variation(e)};
}

// ---------------------------------------------------------------------------
// inference methods
// ---------------------------------------------------------------------------

enum class InferenceMethod { prob_sample, mc_dropout, softmax_sample };

inline InferenceMethod parse_inference_method(const std::string& name) {
  if (name == "prob_sample") return InferenceMethod::prob_sample;
  if (name == "mc_dropout") return InferenceMethod::mc_dropout;
  if (name == "softmax_sample") return InferenceMethod::softmax_sample;
  throw std::invalid_argument("unknown inference method '" + name + "'");
}

namespace detail {

template <typename T>
std::vector<int> argmax_rows(const Tensor<T>& logits) {
  const std::size_t rows = logits.shape()[0], cols = logits.shape()[1];
  std::vector<int> out(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* row = logits.values().data() + r * cols;
    std::size_t best = 0;
    for (std::size_t c = 1; c < cols; ++c) {
      if (row[c] > row[best]) best = c;
    }
    out[r] = static_cast<int>(best);
  }
  return out;
}

}  // namespace detail

// Runs R realizations per sample and collects them per position.
//   prob_sample    latent sampling, dropout off, argmax per pass (M >= 1)
//   mc_dropout     latent mean path, dropout active, argmax per pass
//   softmax_sample one deterministic pass, R categorical draws per position
template <typename T>
PredictiveEnsemble run_inference(const Encoder<T>& model, const SynthTask& task,
                                 const std::vector<Sample>& samples,
                                 InferenceMethod method, std::size_t r_count,
                                 std::uint64_t seed) {
  if (samples.empty() || r_count == 0) {
    throw std::invalid_argument("run_inference: need samples and R >= 1");
  }
  if (method == InferenceMethod::prob_sample && model.config().prob_count() == 0) {
    throw std::invalid_argument(
        "run_inference: latent sampling needs at least one prob block");
  }
  PredictiveEnsemble ensemble;
  ensemble.vocab_out = model.config().vocab_out;
  ensemble.realizations = r_count;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const Sample& sample = samples[i];
    const std::size_t s = sample.x.size();
    const std::size_t base = ensemble.positions.size();
    for (std::size_t posn = 0; posn < s; ++posn) {
      EnsemblePosition ep;
      ep.phrase_id = sample.contexts[posn].first;
      ep.pos = sample.contexts[posn].second;
      ep.realizations.reserve(r_count);
      ep.truth = task.dists[static_cast<std::size_t>(ep.phrase_id)]
                           [static_cast<std::size_t>(ep.pos)];
      ensemble.positions.push_back(std::move(ep));
    }
    const std::uint64_t sample_seed = mix_u64(seed, i);
    if (method == InferenceMethod::softmax_sample) {
      auto out = model.forward(sample.x, nullptr, LatentMode::mean);
      Rng draw(mix_u64(sample_seed, 0x50f7));
      const std::size_t v = model.config().vocab_out;
      for (std::size_t posn = 0; posn < s; ++posn) {
        const T* row = out.logits.values().data() + posn * v;
        double mx = static_cast<double>(row[0]);
        for (std::size_t c = 1; c < v; ++c) mx = std::max(mx, static_cast<double>(row[c]));
        std::vector<double> probs(v);
        double sum = 0.0;
        for (std::size_t c = 0; c < v; ++c) {
          probs[c] = std::exp(static_cast<double>(row[c]) - mx);
          sum += probs[c];
        }
        for (std::size_t r = 0; r < r_count; ++r) {
          const double u = draw.uniform() * sum;
          double acc = 0.0;
          std::size_t pick = v - 1;
          for (std::size_t c = 0; c < v; ++c) {
            acc += probs[c];
            if (u < acc) {
              pick = c;
              break;
            }
          }
          ensemble.positions[base + posn].realizations.push_back(static_cast<int>(pick));
        }
      }
      continue;
    }
    for (std::size_t r = 0; r < r_count; ++r) {
      const std::uint64_t pass_seed = mix_u64(sample_seed, r);
      std::vector<int> picks;
      if (method == InferenceMethod::prob_sample) {
        Rng noise = substream(pass_seed, "latent");
        auto out = model.forward(sample.x, nullptr, LatentMode::sample, nullptr, &noise);
        picks = detail::argmax_rows(out.logits);
      } else {
        Rng drop = substream(pass_seed, "dropout");
        auto out =
            model.forward(sample.x, nullptr, LatentMode::mean, nullptr, nullptr, &drop);
        picks = detail::argmax_rows(out.logits);
      }
      for (std::size_t posn = 0; posn < s; ++posn) {
        ensemble.positions[base + posn].realizations.push_back(picks[posn]);
      }
    }
  }
  return ensemble;
}

// Reference sampler: realizations drawn straight from the true distributions.
inline PredictiveEnsemble oracle_ensemble(const SynthTask& task,
                                          const std::vector<Sample>& samples,
                                          std::size_t r_count, std::uint64_t seed) {
  if (samples.empty() || r_count == 0) {
    throw std::invalid_argument("oracle_ensemble: need samples and R >= 1");
  }
  PredictiveEnsemble ensemble;
  ensemble.vocab_out = task.spec.vocab_out;
  ensemble.realizations = r_count;
  Rng rng = substream(seed, "oracle");
  for (const Sample& sample : samples) {
    for (std::size_t posn = 0; posn < sample.x.size(); ++posn) {
      EnsemblePosition ep;
      ep.phrase_id = sample.contexts[posn].first;
      ep.pos = sample.contexts[posn].second;
      ep.truth = task.dists[static_cast<std::size_t>(ep.phrase_id)]
                           [static_cast<std::size_t>(ep.pos)];
      ep.realizations.reserve(r_count);
      for (std::size_t r = 0; r < r_count; ++r) {
        ep.realizations.push_back(draw_from(ep.truth, rng));
      }
      ensemble.positions.push_back(std::move(ep));
    }
  }
  return ensemble;
}

}  // namespace probtf
