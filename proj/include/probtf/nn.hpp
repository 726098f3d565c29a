#pragma once

#include <cmath>
#include <cstddef>
#include <optional>
#include <stdexcept>
#include <string>
#include <type_traits>
#include <vector>

#include "probtf/rng.hpp"
#include "probtf/tensor.hpp"

// Transformer building blocks plus the probabilistic feed-forward layer.
//
// Parameters live in a ParamBank: persistent named tensors whose gradient
// buffers survive across tapes, so per-example backward passes accumulate
// into them directly and the optimizer reads them in registration order.
//
// Sublayer convention is post-layernorm: y = LayerNorm(x + Dropout(Sublayer(x))).
// Block order: attention, feed-forward, then (when configured) prob layer.
// The final linear of every sublayer starts at zero, so a freshly
// initialized block reduces to a chain of layernorms over its input.
//
// Dropout placement: attention weights, each sublayer output before the
// residual, and the embedding sum. The latent path of the prob layer
// (Linear_In through z) is kept dropout-free; only its output projection
// passes through the sublayer-output dropout.

namespace probtf {

template <typename T>
class ParamBank {
 public:
  Tensor<T> add(const std::string& name, Shape shape) {
    if (find(name) != nullptr) {
      throw std::invalid_argument("param bank: duplicate name " + name);
    }
    names_.push_back(name);
    tensors_.push_back(Tensor<T>::zeros(std::move(shape), true));
    return tensors_.back();
  }

  std::size_t size() const { return tensors_.size(); }
  const std::string& name(std::size_t i) const { return names_[i]; }
  Tensor<T>& tensor(std::size_t i) { return tensors_[i]; }
  const Tensor<T>& tensor(std::size_t i) const { return tensors_[i]; }

  Tensor<T>* find(const std::string& name) {
    for (std::size_t i = 0; i < names_.size(); ++i) {
      if (names_[i] == name) return &tensors_[i];
    }
    return nullptr;
  }

  void zero_grad() {
    for (auto& t : tensors_) t.zero_grad();
  }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& t : tensors_) n += t.size();
    return n;
  }

 private:
  std::vector<std::string> names_;
  std::vector<Tensor<T>> tensors_;
};

// ---------------------------------------------------------------------------
// parameter groups
// ---------------------------------------------------------------------------

template <typename T>
struct LinearParams {
  Tensor<T> w;  // [in, out]
  Tensor<T> b;  // [out]
};

// Weights draw from a Xavier normal unless zero_init; biases start at zero.
template <typename T>
LinearParams<T> make_linear(ParamBank<T>& bank, const std::string& name, std::size_t in,
                            std::size_t out, Rng& rng, bool zero_init = false) {
  LinearParams<T> p;
  p.w = bank.add(name + ".w", {in, out});
  p.b = bank.add(name + ".b", {out});
  if (!zero_init) {
    const double std = std::sqrt(2.0 / static_cast<double>(in + out));
    for (auto& v : p.w.values_mut()) v = static_cast<T>(std * rng.normal());
  }
  return p;
}

template <typename T>
Tensor<T> linear_forward(const Tensor<T>& x, const LinearParams<T>& p) {
  return add_rowvec(matmul(x, p.w), p.b);
}

template <typename T>
struct LayerNormParams {
  Tensor<T> gain;
  Tensor<T> bias;
};

template <typename T>
LayerNormParams<T> make_layer_norm(ParamBank<T>& bank, const std::string& name,
                                   std::size_t dim) {
  LayerNormParams<T> p;
  p.gain = bank.add(name + ".g", {dim});
  p.bias = bank.add(name + ".b", {dim});
  for (auto& v : p.gain.values_mut()) v = T(1);
  return p;
}

template <typename T>
Tensor<T> layer_norm_forward(const Tensor<T>& x, const LayerNormParams<T>& p) {
  return layer_norm(x, p.gain, p.bias);
}

// Applies inverted dropout when a stream is supplied; otherwise identity.
template <typename T>
Tensor<T> maybe_dropout(const Tensor<T>& x, double rate, Rng* drop) {
  if (drop == nullptr || rate == 0.0) return x;
  return dropout(x, rate, *drop);
}

// ---------------------------------------------------------------------------
// attention
// ---------------------------------------------------------------------------

template <typename T>
struct AttentionParams {
  LinearParams<T> q, k, v, out;
  std::size_t heads = 1;
};

template <typename T>
AttentionParams<T> make_attention(ParamBank<T>& bank, const std::string& name,
                                  std::size_t d_model, std::size_t heads, Rng& rng) {
  if (heads == 0 || d_model % heads != 0) {
    throw std::invalid_argument("attention: model dim " + std::to_string(d_model) +
                                " not divisible by " + std::to_string(heads) + " heads");
  }
  AttentionParams<T> p;
  p.q = make_linear(bank, name + ".q", d_model, d_model, rng);
  p.k = make_linear(bank, name + ".k", d_model, d_model, rng);
  p.v = make_linear(bank, name + ".v", d_model, d_model, rng);
  p.out = make_linear(bank, name + ".o", d_model, d_model, rng, /*zero_init=*/true);
  p.heads = heads;
  return p;
}

// Unmasked scaled dot-product multi-head self-attention over [S, D_model].
template <typename T>
Tensor<T> attention(const Tensor<T>& x, const AttentionParams<T>& p,
                    double drop_rate = 0.0, Rng* drop = nullptr) {
  const std::size_t d_model = x.shape()[1];
  const std::size_t dh = d_model / p.heads;
  Tensor<T> q = linear_forward(x, p.q);
  Tensor<T> k = linear_forward(x, p.k);
  Tensor<T> v = linear_forward(x, p.v);
  const T scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(dh)));
  std::vector<Tensor<T>> ctx;
  ctx.reserve(p.heads);
  for (std::size_t h = 0; h < p.heads; ++h) {
    Tensor<T> qh = slice_cols(q, h * dh, (h + 1) * dh);
    Tensor<T> kh = slice_cols(k, h * dh, (h + 1) * dh);
    Tensor<T> vh = slice_cols(v, h * dh, (h + 1) * dh);
    Tensor<T> scores = affine(matmul(qh, transpose(kh)), scale, T(0));
    Tensor<T> weights = softmax(scores, 1);
    weights = maybe_dropout(weights, drop_rate, drop);
    ctx.push_back(matmul(weights, vh));
  }
  return linear_forward(concat_cols(ctx), p.out);
}

// ---------------------------------------------------------------------------
// feed-forward
// ---------------------------------------------------------------------------

template <typename T>
struct FeedForwardParams {
  LinearParams<T> in, out;
};

template <typename T>
FeedForwardParams<T> make_feed_forward(ParamBank<T>& bank, const std::string& name,
                                       std::size_t d_model, std::size_t d_ff, Rng& rng) {
  FeedForwardParams<T> p;
  p.in = make_linear(bank, name + ".in", d_model, d_ff, rng);
  p.out = make_linear(bank, name + ".out", d_ff, d_model, rng, /*zero_init=*/true);
  return p;
}

template <typename T>
Tensor<T> feed_forward(const Tensor<T>& x, const FeedForwardParams<T>& p) {
  return linear_forward(silu(linear_forward(x, p.in)), p.out);
}

// ---------------------------------------------------------------------------
// probabilistic feed-forward layer
// ---------------------------------------------------------------------------

template <typename T>
struct GaussianLatent {
  Tensor<T> mu;       // [S, D_z]
  Tensor<T> log_var;  // [S, D_z]
};

enum class LatentMode { mean, sample, injected };

template <typename T>
struct ProbLayerParams {
  LinearParams<T> in;     // D_model -> D_z
  LinearParams<T> mu;     // D_z -> D_z
  LinearParams<T> sigma;  // D_z -> D_z
  LinearParams<T> out;    // D_z -> D_model, zero-initialized
};

template <typename T>
ProbLayerParams<T> make_prob_layer(ParamBank<T>& bank, const std::string& name,
                                   std::size_t d_model, std::size_t d_z, Rng& rng) {
  ProbLayerParams<T> p;
  p.in = make_linear(bank, name + ".in", d_model, d_z, rng);
  p.mu = make_linear(bank, name + ".mu", d_z, d_z, rng);
  p.sigma = make_linear(bank, name + ".sigma", d_z, d_z, rng);
  p.out = make_linear(bank, name + ".out", d_z, d_model, rng, /*zero_init=*/true);
  return p;
}

template <typename T>
struct ProbLayerResult {
  Tensor<T> y;  // [S, D_model]
  GaussianLatent<T> latent;
  Tensor<T> z;  // [S, D_z]
};

// mu = Linear_mu(SiLU(Linear_In(x))), log_var = Linear_sigma(SiLU(Linear_In(x))),
// z = mu | mu + sigma*eps | injected, y = Linear_Out(z). Residual + layernorm
// are the caller's job.
template <typename T>
ProbLayerResult<T> prob_layer_forward(const Tensor<T>& x, const ProbLayerParams<T>& p,
                                      LatentMode mode,
                                      std::type_identity_t<const Tensor<T>*> injected = nullptr,
                                      Rng* noise = nullptr) {
  const std::size_t s = x.shape()[0];
  const std::size_t d_z = p.mu.w.shape()[1];
  Tensor<T> h = silu(linear_forward(x, p.in));
  ProbLayerResult<T> r;
  r.latent.mu = linear_forward(h, p.mu);
  r.latent.log_var = linear_forward(h, p.sigma);
  switch (mode) {
    case LatentMode::mean:
      r.z = r.latent.mu;
      break;
    case LatentMode::sample: {
      if (noise == nullptr) {
        throw std::invalid_argument("prob layer: sample mode needs a noise stream");
      }
      std::vector<T> eps(s * d_z);
      for (auto& e : eps) e = static_cast<T>(noise->normal());
      Tensor<T> sigma = exp(affine(r.latent.log_var, T(0.5), T(0)));
      r.z = add(r.latent.mu, mul(sigma, Tensor<T>::from({s, d_z}, std::move(eps))));
      break;
    }
    case LatentMode::injected: {
      if (injected == nullptr || injected->shape() != Shape{s, d_z}) {
        throw std::invalid_argument(
            "prob layer: injected latent must be [" + std::to_string(s) + "," +
            std::to_string(d_z) + "], got " +
            (injected ? shape_str(injected->shape()) : std::string("none")));
      }
      r.z = *injected;
      break;
    }
  }
  r.y = linear_forward(r.z, p.out);
  return r;
}

// ---------------------------------------------------------------------------
// transformer block
// ---------------------------------------------------------------------------

template <typename T>
struct BlockParams {
  AttentionParams<T> attn;
  LayerNormParams<T> ln_attn;
  FeedForwardParams<T> ff;
  LayerNormParams<T> ln_ff;
  bool has_prob = false;
  ProbLayerParams<T> prob;
  LayerNormParams<T> ln_prob;
};

template <typename T>
BlockParams<T> make_block(ParamBank<T>& bank, const std::string& name, std::size_t d_model,
                          std::size_t d_ff, std::size_t d_z, std::size_t heads,
                          bool with_prob, Rng& rng) {
  BlockParams<T> p;
  p.attn = make_attention(bank, name + ".attn", d_model, heads, rng);
  p.ln_attn = make_layer_norm(bank, name + ".ln_attn", d_model);
  p.ff = make_feed_forward(bank, name + ".ff", d_model, d_ff, rng);
  p.ln_ff = make_layer_norm(bank, name + ".ln_ff", d_model);
  p.has_prob = with_prob;
  if (with_prob) {
    p.prob = make_prob_layer(bank, name + ".prob", d_model, d_z, rng);
    p.ln_prob = make_layer_norm(bank, name + ".ln_prob", d_model);
  }
  return p;
}

template <typename T>
struct BlockResult {
  Tensor<T> y;
  std::optional<GaussianLatent<T>> latent;
  std::optional<Tensor<T>> z;
};

template <typename T>
BlockResult<T> block_forward(const Tensor<T>& x, const BlockParams<T>& p, LatentMode mode,
                             std::type_identity_t<const Tensor<T>*> injected = nullptr,
                             double drop_rate = 0.0, Rng* drop = nullptr,
                             Rng* noise = nullptr) {
  Tensor<T> a = attention(x, p.attn, drop_rate, drop);
  Tensor<T> h = layer_norm_forward(add(x, maybe_dropout(a, drop_rate, drop)), p.ln_attn);
  Tensor<T> f = feed_forward(h, p.ff);
  h = layer_norm_forward(add(h, maybe_dropout(f, drop_rate, drop)), p.ln_ff);
  BlockResult<T> r;
  if (p.has_prob) {
    ProbLayerResult<T> pr = prob_layer_forward(h, p.prob, mode, injected, noise);
    h = layer_norm_forward(add(h, maybe_dropout(pr.y, drop_rate, drop)), p.ln_prob);
    r.latent = std::move(pr.latent);
    r.z = std::move(pr.z);
  }
  r.y = std::move(h);
  return r;
}

// ---------------------------------------------------------------------------
// positional encoding
// ---------------------------------------------------------------------------

// Fixed sinusoidal table: pe[pos, 2i] = sin(pos * w_i), pe[pos, 2i+1] = cos(pos * w_i)
// with w_i = 10000^(-2i/D). Parameter-free, shared by every encoder.
template <typename T>
Tensor<T> sinusoidal_encoding(std::size_t s, std::size_t d) {
  std::vector<T> pe(s * d);
  for (std::size_t pos = 0; pos < s; ++pos) {
    for (std::size_t i = 0; i < d; i += 2) {
      const double w = std::pow(10000.0, -static_cast<double>(i) / static_cast<double>(d));
      pe[pos * d + i] = static_cast<T>(std::sin(pos * w));
      if (i + 1 < d) pe[pos * d + i + 1] = static_cast<T>(std::cos(pos * w));
    }
  }
  return Tensor<T>::from({s, d}, std::move(pe));
}

}  // namespace probtf
