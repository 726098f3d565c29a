#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "probtf/nn.hpp"
#include "probtf/rng.hpp"
#include "probtf/tensor.hpp"

// Predictive and posterior encoders.
//
// Both share one backbone: token embedding (scaled by sqrt(D_model)),
// sinusoidal positional encoding, N post-layernorm blocks. The predictive
// encoder adds an output head; the posterior encoder instead adds a second
// embedding for the target sequence, summed into the input, and no head.
//
// Training runs the posterior first (sample mode), then the predictive
// encoder with the posterior's z realizations injected at each prob block.
// Both passes record onto the caller's tape, so the loss gradient reaches
// posterior parameters through the reparameterized z.

namespace probtf {

struct ModelConfig {
  std::size_t n_blocks = 4;
  std::vector<std::size_t> prob_blocks = {1, 2, 3, 4};  // 1-based block ids
  std::size_t d_model = 256;
  std::size_t d_ff = 1024;
  std::size_t d_z = 256;
  std::size_t n_heads = 4;
  std::size_t vocab_in = 500;
  std::size_t vocab_out = 500;
  double dropout = 0.1;

  void validate() const {
    if (n_blocks == 0) throw std::invalid_argument("config: need at least one block");
    if (n_heads == 0 || d_model % n_heads != 0) {
      throw std::invalid_argument("config: d_model " + std::to_string(d_model) +
                                  " not divisible by " + std::to_string(n_heads) +
                                  " heads");
    }
    std::vector<std::size_t> sorted = prob_blocks;
    std::sort(sorted.begin(), sorted.end());
    for (std::size_t i = 0; i < sorted.size(); ++i) {
      if (sorted[i] < 1 || sorted[i] > n_blocks) {
        throw std::invalid_argument("config: prob block " + std::to_string(sorted[i]) +
                                    " outside 1.." + std::to_string(n_blocks));
      }
      if (i > 0 && sorted[i] == sorted[i - 1]) {
        throw std::invalid_argument("config: duplicate prob block " +
                                    std::to_string(sorted[i]));
      }
    }
    if (dropout < 0.0 || dropout >= 1.0) {
      throw std::invalid_argument("config: dropout rate " + std::to_string(dropout) +
                                  " outside [0,1)");
    }
  }

  bool is_prob_block(std::size_t block_1based) const {
    return std::find(prob_blocks.begin(), prob_blocks.end(), block_1based) !=
           prob_blocks.end();
  }

  std::size_t prob_count() const { return prob_blocks.size(); }
};

inline bool latent_structure_matches(const ModelConfig& a, const ModelConfig& b) {
  return a.n_blocks == b.n_blocks && a.prob_blocks == b.prob_blocks && a.d_z == b.d_z;
}

template <typename T>
struct EncoderOutput {
  Tensor<T> hidden;  // [S, D_model]
  Tensor<T> logits;  // [S, vocab_out]; defined only for the predictive encoder
  std::vector<GaussianLatent<T>> latents;  // one per prob block, in block order
  std::vector<Tensor<T>> zs;
};

template <typename T>
class Encoder {
 public:
  Encoder(ModelConfig cfg, bool with_head, bool with_y_embedding, std::uint64_t init_seed)
      : cfg_(std::move(cfg)), has_head_(with_head), has_y_embed_(with_y_embedding) {
    cfg_.validate();
    Rng rng = substream(init_seed, "init");
    embed_x_ = bank_.add("embed.x", {cfg_.vocab_in, cfg_.d_model});
    const double embed_std = 1.0 / std::sqrt(static_cast<double>(cfg_.d_model));
    for (auto& v : embed_x_.values_mut()) v = static_cast<T>(embed_std * rng.normal());
    if (has_y_embed_) {
      embed_y_ = bank_.add("embed.y", {cfg_.vocab_out, cfg_.d_model});
      for (auto& v : embed_y_.values_mut()) v = static_cast<T>(embed_std * rng.normal());
    }
    for (std::size_t i = 1; i <= cfg_.n_blocks; ++i) {
      blocks_.push_back(make_block(bank_, "block" + std::to_string(i), cfg_.d_model,
                                   cfg_.d_ff, cfg_.d_z, cfg_.n_heads,
                                   cfg_.is_prob_block(i), rng));
    }
    if (has_head_) {
      head_ = make_linear(bank_, "head", cfg_.d_model, cfg_.vocab_out, rng);
    }
  }

  const ModelConfig& config() const { return cfg_; }
  bool has_head() const { return has_head_; }
  bool has_y_embedding() const { return has_y_embed_; }
  ParamBank<T>& params() { return bank_; }
  const ParamBank<T>& params() const { return bank_; }

  // One full pass. `y_ids` is consumed only when the encoder has a Y
  // embedding. `injected` must supply one [S, D_z] tensor per prob block
  // when mode is injected. Dropout fires only when `drop` is non-null.
  EncoderOutput<T> forward(const std::vector<int>& x_ids, const std::vector<int>* y_ids,
                           LatentMode mode,
                           const std::vector<Tensor<T>>* injected = nullptr,
                           Rng* noise = nullptr, Rng* drop = nullptr) const {
    if (x_ids.empty()) throw std::invalid_argument("forward: empty input sequence");
    if (mode == LatentMode::injected &&
        (injected == nullptr || injected->size() != cfg_.prob_count())) {
      throw std::invalid_argument(
          "forward: injected mode wants " + std::to_string(cfg_.prob_count()) +
          " latents, got " +
          std::to_string(injected == nullptr ? 0 : injected->size()));
    }
    const std::size_t s = x_ids.size();
    const T embed_scale = static_cast<T>(std::sqrt(static_cast<double>(cfg_.d_model)));
    Tensor<T> h = affine(embedding(embed_x_, x_ids), embed_scale, T(0));
    if (has_y_embed_) {
      if (y_ids == nullptr || y_ids->size() != s) {
        throw std::invalid_argument(
            "forward: target sequence must align with source, got " +
            std::to_string(y_ids == nullptr ? 0 : y_ids->size()) + " vs " +
            std::to_string(s));
      }
      h = add(h, affine(embedding(embed_y_, *y_ids), embed_scale, T(0)));
    }
    h = add(h, sinusoidal_encoding<T>(s, cfg_.d_model));
    h = maybe_dropout(h, cfg_.dropout, drop);

    EncoderOutput<T> out;
    std::size_t prob_idx = 0;
    for (std::size_t i = 0; i < blocks_.size(); ++i) {
      const Tensor<T>* inj = nullptr;
      if (blocks_[i].has_prob && mode == LatentMode::injected) {
        inj = &(*injected)[prob_idx];
      }
      BlockResult<T> r =
          block_forward(h, blocks_[i], mode, inj, cfg_.dropout, drop, noise);
      h = std::move(r.y);
      if (blocks_[i].has_prob) {
        out.latents.push_back(std::move(*r.latent));
        out.zs.push_back(std::move(*r.z));
        ++prob_idx;
      }
    }
    out.hidden = h;
    if (has_head_) out.logits = linear_forward(h, head_);
    return out;
  }

 private:
  ModelConfig cfg_;
  bool has_head_;
  bool has_y_embed_;
  ParamBank<T> bank_;
  Tensor<T> embed_x_;
  Tensor<T> embed_y_;
  std::vector<BlockParams<T>> blocks_;
  LinearParams<T> head_;
};

template <typename T>
class PredictiveModel : public Encoder<T> {
 public:
  PredictiveModel(ModelConfig cfg, std::uint64_t init_seed)
      : Encoder<T>(std::move(cfg), /*with_head=*/true, /*with_y_embedding=*/false,
                   init_seed) {}
};

template <typename T>
class PosteriorModel : public Encoder<T> {
 public:
  PosteriorModel(ModelConfig cfg, std::uint64_t init_seed)
      : Encoder<T>(std::move(cfg), /*with_head=*/false, /*with_y_embedding=*/true,
                   init_seed) {}
};

// Mean or sample inference. Latents come back aligned with prob blocks.
template <typename T>
EncoderOutput<T> predict(const Encoder<T>& model, const std::vector<int>& x_ids,
                         LatentMode mode, std::uint64_t noise_seed = 0,
                         Rng* drop = nullptr) {
  if (mode == LatentMode::injected) {
    throw std::invalid_argument("predict: mode must be mean or sample");
  }
  Rng noise = substream(noise_seed, "latent");
  return model.forward(x_ids, nullptr, mode, nullptr,
                       mode == LatentMode::sample ? &noise : nullptr, drop);
}

// Posterior pass: one reparameterized z per prob block per position.
template <typename T>
EncoderOutput<T> posterior_latents(const Encoder<T>& post_model,
                                   const std::vector<int>& x_ids,
                                   const std::vector<int>& y_ids,
                                   std::uint64_t noise_seed = 0, Rng* drop = nullptr) {
  if (!post_model.has_y_embedding()) {
    throw std::invalid_argument("posterior_latents: model lacks a target embedding");
  }
  if (x_ids.size() != y_ids.size()) {
    throw std::invalid_argument("posterior_latents: source length " +
                                std::to_string(x_ids.size()) + " != target length " +
                                std::to_string(y_ids.size()));
  }
  Rng noise = substream(noise_seed, "latent");
  return post_model.forward(x_ids, &y_ids, LatentMode::sample, nullptr, &noise, drop);
}

template <typename T>
struct TrainForward {
  Tensor<T> logits;
  std::vector<GaussianLatent<T>> prior_latents;
  std::vector<GaussianLatent<T>> post_latents;
  std::vector<Tensor<T>> z_post;
};

// Joint training pass (posterior sample, then predictive with z injected).
// The predictive prob layers still produce their own (mu, log_var) for the
// divergence term; only the realization z is substituted.
template <typename T>
TrainForward<T> train_forward(const Encoder<T>& pred_model, const Encoder<T>& post_model,
                              const std::vector<int>& x_ids,
                              const std::vector<int>& y_ids, std::uint64_t noise_seed = 0,
                              Rng* drop = nullptr) {
  if (!latent_structure_matches(pred_model.config(), post_model.config())) {
    throw std::invalid_argument(
        "train_forward: predictive and posterior latent structure differ");
  }
  EncoderOutput<T> post = posterior_latents(post_model, x_ids, y_ids, noise_seed, drop);
  EncoderOutput<T> pred = pred_model.forward(x_ids, nullptr, LatentMode::injected,
                                             &post.zs, nullptr, drop);
  TrainForward<T> r;
  r.logits = std::move(pred.logits);
  r.prior_latents = std::move(pred.latents);
  r.post_latents = std::move(post.latents);
  r.z_post = std::move(post.zs);
  return r;
}

}  // namespace probtf
