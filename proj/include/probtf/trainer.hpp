#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <functional>
#include <map>
#include <memory>
#include <numeric>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "probtf/checkpoint.hpp"
#include "probtf/config.hpp"
#include "probtf/eval.hpp"
#include "probtf/model.hpp"
#include "probtf/objective.hpp"
#include "probtf/optim.hpp"
#include "probtf/rng.hpp"
#include "probtf/synthdata.hpp"
#include "probtf/tensor.hpp"

// Training loops. The probabilistic run makes one posterior-injected forward
// per item, pays cross-entropy plus the latent divergence under the
// constrained objective, moves the multiplier every optimizer step and
// anneals the constraint target every epoch. The vanilla run is the same
// loop with no posterior model and plain cross-entropy. Every random choice
// (batch order, latent noise, dropout, validation draws) is derived from the
// run seed plus the epoch/step counters, so a checkpoint only has to persist
// those counters to resume bit-exactly.

namespace probtf {

struct LogRow {
  std::size_t epoch = 0;
  double l_rec_mean = 0.0;
  double d_kl_mean = 0.0;
  double lambda = 0.0;
  double kappa = 0.0;
  double constraint_lc = 0.0;
  double lr = 0.0;
  double val_metric = 0.0;
};

inline constexpr const char* kLogHeader =
    "epoch,l_rec_mean,d_kl_mean,lambda,kappa,constraint_Lc,lr,val_metric";

inline std::string format_log_row(const LogRow& r) {
  char buf[360];
  std::snprintf(buf, sizeof(buf), "%zu,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g",
                r.epoch, r.l_rec_mean, r.d_kl_mean, r.lambda, r.kappa, r.constraint_lc,
                r.lr, r.val_metric);
  return std::string(buf);
}

inline std::string log_to_string(const std::vector<LogRow>& rows) {
  std::string out = std::string(kLogHeader) + "\n";
  for (const auto& r : rows) out += format_log_row(r) + "\n";
  return out;
}

// Deterministic length-bucketed batches for one epoch: shuffle the sample
// indices, fill per-length buckets in shuffled order, emit a batch whenever a
// bucket fills, then flush leftovers by ascending length. Exact-length
// batches mean no padding or masking anywhere.
inline std::vector<std::vector<std::size_t>> epoch_batches(
    const std::vector<Sample>& samples, std::size_t batch_size, std::uint64_t seed,
    std::size_t epoch) {
  if (samples.empty()) throw std::invalid_argument("epoch_batches: no samples");
  if (batch_size == 0) throw std::invalid_argument("epoch_batches: batch size 0");
  std::vector<std::size_t> order(samples.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng shuffle_rng = substream(mix_u64(seed, epoch), "order");
  for (std::size_t i = order.size() - 1; i > 0; --i) {
    const std::size_t j = static_cast<std::size_t>(shuffle_rng.below(i + 1));
    std::swap(order[i], order[j]);
  }
  std::map<std::size_t, std::vector<std::size_t>> buckets;
  std::vector<std::vector<std::size_t>> batches;
  for (std::size_t idx : order) {
    auto& bucket = buckets[samples[idx].x.size()];
    bucket.push_back(idx);
    if (bucket.size() == batch_size) {
      batches.push_back(bucket);
      bucket.clear();
    }
  }
  for (auto& [len, bucket] : buckets) {
    if (!bucket.empty()) batches.push_back(std::move(bucket));
  }
  return batches;
}

template <typename T>
class Trainer {
 public:
  Trainer(RunConfig cfg, const SynthTask& task, std::vector<Sample> train_set,
          std::vector<Sample> val_set)
      : cfg_(std::move(cfg)),
        task_(task),
        train_(std::move(train_set)),
        val_(std::move(val_set)) {
    cfg_.validate();
    if (train_.empty()) throw std::invalid_argument("trainer: empty training set");
    if (val_.empty()) throw std::invalid_argument("trainer: empty validation set");
    prob_ = cfg_.train.model_kind == "prob";
    if (!prob_ && !cfg_.model.prob_blocks.empty()) {
      throw std::invalid_argument(
          "trainer: vanilla training requires a model without prob blocks");
    }
    pred_ = std::make_unique<PredictiveModel<T>>(cfg_.model, cfg_.train.seed);
    if (prob_) {
      post_ = std::make_unique<PosteriorModel<T>>(
          cfg_.model, substream_seed(cfg_.train.seed, "posterior"));
    }
    std::vector<std::pair<std::string, ParamBank<T>*>> banks{{"pred", &pred_->params()}};
    if (post_) banks.emplace_back("post", &post_->params());
    opt_ = std::make_unique<AdamW<T>>(std::move(banks), cfg_.optim);
    geco_.kappa = cfg_.train.kappa_init;
    const std::size_t n_val = std::min(cfg_.train.val_max_samples, val_.size());
    val_subset_.assign(val_.begin(),
                       val_.begin() + static_cast<std::ptrdiff_t>(n_val));
  }

  void run() { run_epochs(cfg_.train.epochs); }

  void run_epochs(std::size_t n) {
    const std::size_t target = std::min(cfg_.train.epochs, epochs_done_ + n);
    while (epochs_done_ < target) run_one_epoch();
  }

  // Full resumable state as checkpoint sections, in a fixed order so the
  // same state always produces the same bytes.
  std::vector<CheckpointSection> snapshot() {
    std::vector<CheckpointSection> s;
    s.push_back({"config", run_config_to_string(cfg_)});
    s.push_back({"params.pred", serialize_params(pred_->params())});
    if (post_) s.push_back({"params.post", serialize_params(post_->params())});
    s.push_back({"optim", serialize_optimizer(*opt_)});
    if (prob_) s.push_back({"geco", serialize_geco()});
    s.push_back({"progress", serialize_progress()});
    s.push_back({"log", serialize_log()});
    if (has_best_) {
      s.push_back({"best.pred", best_pred_});
      if (post_) s.push_back({"best.post", best_post_});
    }
    return s;
  }

  void save(const std::string& path) { save_checkpoint_file(path, snapshot()); }

  // Restores a checkpoint written by a trainer with the exact same run
  // configuration; anything else is a config mismatch.
  void load(const std::string& path) {
    const auto sections = load_checkpoint_file(path);
    const std::string& stored = require_section(sections, "config").payload;
    if (stored != run_config_to_string(cfg_)) {
      throw std::runtime_error(
          "checkpoint config mismatch: stored run configuration differs from the "
          "requested one");
    }
    deserialize_params(pred_->params(), require_section(sections, "params.pred").payload,
                       "params.pred");
    if (post_) {
      deserialize_params(post_->params(),
                         require_section(sections, "params.post").payload, "params.post");
    }
    deserialize_optimizer(*opt_, require_section(sections, "optim").payload);
    if (prob_) deserialize_geco(require_section(sections, "geco").payload);
    deserialize_progress(require_section(sections, "progress").payload);
    deserialize_log(require_section(sections, "log").payload);
    if (has_best_) {
      best_pred_ = require_section(sections, "best.pred").payload;
      if (post_) best_post_ = require_section(sections, "best.post").payload;
    }
  }

  // Best-validation model snapshot: config plus parameters only, loadable
  // for evaluation without any trainer state.
  void save_best(const std::string& path) {
    if (!has_best_) throw std::logic_error("trainer: no validated epoch yet");
    std::vector<CheckpointSection> s;
    s.push_back({"config", run_config_to_string(cfg_)});
    s.push_back({"params.pred", best_pred_});
    if (post_) s.push_back({"params.post", best_post_});
    save_checkpoint_file(path, s);
  }

  const RunConfig& config() const { return cfg_; }
  const std::vector<LogRow>& log() const { return log_; }
  GecoState& geco() { return geco_; }
  PredictiveModel<T>& pred() { return *pred_; }
  PosteriorModel<T>* post() { return post_.get(); }
  AdamW<T>& optimizer() { return *opt_; }
  std::size_t epochs_done() const { return epochs_done_; }
  std::size_t global_step() const { return global_step_; }
  bool has_best() const { return has_best_; }
  std::size_t best_epoch() const { return best_epoch_; }
  double best_val() const { return best_val_; }

  // Invoked after each completed epoch, once its log row exists.
  std::function<void(const LogRow&)> on_epoch;

 private:
  void run_one_epoch() {
    const std::size_t epoch = epochs_done_ + 1;
    const auto batches =
        epoch_batches(train_, cfg_.train.batch_size, cfg_.train.seed, epoch);
    double sum_rec = 0.0;
    double sum_kl = 0.0;
    std::size_t items = 0;
    double last_lr = 0.0;
    for (std::size_t s = 0; s < cfg_.train.steps_per_epoch; ++s) {
      last_lr = train_step(batches[s % batches.size()], epoch, sum_rec, sum_kl, items);
    }
    double l_c = 0.0;
    if (prob_) {
      if (cfg_.train.kappa_annealing) {
        l_c = kappa_anneal(geco_);
      } else {
        l_c = geco_.epoch_constraint();
        geco_.sum_constraint = 0.0;
        geco_.count = 0;
      }
    }
    const double val = validate(epoch);
    LogRow row;
    row.epoch = epoch;
    row.l_rec_mean = sum_rec / static_cast<double>(items);
    row.d_kl_mean = sum_kl / static_cast<double>(items);
    row.lambda = prob_ ? geco_.lambda() : 1.0;
    row.kappa = prob_ ? geco_.kappa : 0.0;
    row.constraint_lc = l_c;
    row.lr = last_lr;
    row.val_metric = val;
    log_.push_back(row);
    if (!has_best_ || val < best_val_) {
      has_best_ = true;
      best_val_ = val;
      best_epoch_ = epoch;
      best_pred_ = serialize_params(pred_->params());
      best_post_ = post_ ? serialize_params(post_->params()) : std::string();
    }
    epochs_done_ = epoch;
    flush_outputs();
    if (on_epoch) on_epoch(row);
  }

  double train_step(const std::vector<std::size_t>& batch, std::size_t epoch,
                    double& sum_rec, double& sum_kl, std::size_t& items) {
    pred_->params().zero_grad();
    if (post_) post_->params().zero_grad();
    const T inv = T(1) / static_cast<T>(batch.size());
    double batch_rec = 0.0;
    for (std::size_t i = 0; i < batch.size(); ++i) {
      const Sample& sample = train_[batch[i]];
      const std::uint64_t item_seed = mix_u64(mix_u64(cfg_.train.seed, global_step_), i);
      Tape<T> tape;
      TapeScope<T> scope(tape);
      Rng drop = substream(item_seed, "dropout");
      Rng* drop_ptr = cfg_.model.dropout > 0.0 ? &drop : nullptr;
      double rec_v = 0.0;
      double kl_v = 0.0;
      if (prob_) {
        auto fwd = train_forward(*pred_, *post_, sample.x, sample.y, item_seed, drop_ptr);
        Tensor<T> l_rec = reconstruction_loss(fwd.logits, sample.y);
        Tensor<T> d_kl = gaussian_kl(fwd.post_latents, fwd.prior_latents);
        rec_v = static_cast<double>(l_rec.values()[0]);
        kl_v = static_cast<double>(d_kl.values()[0]);
        check_finite(rec_v, kl_v, epoch);
        Tensor<T> scaled = affine(geco_loss(l_rec, d_kl, geco_), inv, T(0));
        scaled.backward();
        geco_.observe(rec_v);
      } else {
        auto out = predict(*pred_, sample.x, LatentMode::mean, 0, drop_ptr);
        Tensor<T> l_rec = reconstruction_loss(out.logits, sample.y);
        rec_v = static_cast<double>(l_rec.values()[0]);
        check_finite(rec_v, 0.0, epoch);
        Tensor<T> scaled = affine(l_rec, inv, T(0));
        scaled.backward();
      }
      batch_rec += rec_v;
      sum_rec += rec_v;
      sum_kl += kl_v;
      items += 1;
    }
    const double lr = opt_->step();
    if (prob_ && cfg_.train.lambda_updates) {
      lambda_step(geco_, batch_rec / static_cast<double>(batch.size()));
    }
    ++global_step_;
    return lr;
  }

  void check_finite(double rec, double kl, std::size_t epoch) {
    if (std::isfinite(rec) && std::isfinite(kl)) return;
    flush_outputs();
    const std::string last = log_.empty() ? "none" : format_log_row(log_.back());
    throw std::runtime_error("training aborted at epoch " + std::to_string(epoch) +
                             " step " + std::to_string(global_step_ + 1) +
                             ": non-finite loss (l_rec=" + std::to_string(rec) +
                             ", d_kl=" + std::to_string(kl) + "); last log row: " + last);
  }

  // Validation: empirical-distribution divergence on a fixed subset, fresh
  // draw seed per epoch. Latent sampling where the model has prob blocks,
  // softmax sampling otherwise.
  double validate(std::size_t epoch) {
    const std::uint64_t vseed = substream_seed(mix_u64(cfg_.train.seed, epoch), "val");
    const InferenceMethod method = cfg_.model.prob_count() > 0
                                       ? InferenceMethod::prob_sample
                                       : InferenceMethod::softmax_sample;
    PredictiveEnsemble e = run_inference(*pred_, task_, val_subset_, method,
                                         cfg_.train.val_realizations, vseed);
    return metrics(e).kl_divergence;
  }

  void flush_outputs() {
    if (!cfg_.train.log_path.empty()) {
      write_file(cfg_.train.log_path, log_to_string(log_));
    }
    if (!cfg_.train.checkpoint_path.empty()) save(cfg_.train.checkpoint_path);
    if (!cfg_.train.best_path.empty() && has_best_) save_best(cfg_.train.best_path);
  }

  std::string serialize_geco() const {
    std::string p;
    bytes::put_f64(p, geco_.lambda_raw);
    bytes::put_f64(p, geco_.kappa);
    bytes::put_f64(p, geco_.ema_rec);
    bytes::put_u8(p, geco_.ema_initialized ? 1 : 0);
    bytes::put_f64(p, geco_.sum_constraint);
    bytes::put_u64(p, geco_.count);
    return p;
  }

  void deserialize_geco(const std::string& payload) {
    bytes::Reader r(payload, "checkpoint section geco");
    geco_.lambda_raw = r.f64();
    geco_.kappa = r.f64();
    geco_.ema_rec = r.f64();
    geco_.ema_initialized = r.u8() != 0;
    geco_.sum_constraint = r.f64();
    geco_.count = static_cast<std::size_t>(r.u64());
    r.expect_end();
  }

  std::string serialize_progress() const {
    std::string p;
    bytes::put_u64(p, epochs_done_);
    bytes::put_u64(p, global_step_);
    bytes::put_u8(p, has_best_ ? 1 : 0);
    bytes::put_u64(p, best_epoch_);
    bytes::put_f64(p, best_val_);
    return p;
  }

  void deserialize_progress(const std::string& payload) {
    bytes::Reader r(payload, "checkpoint section progress");
    epochs_done_ = static_cast<std::size_t>(r.u64());
    global_step_ = static_cast<std::size_t>(r.u64());
    has_best_ = r.u8() != 0;
    best_epoch_ = static_cast<std::size_t>(r.u64());
    best_val_ = r.f64();
    r.expect_end();
  }

  std::string serialize_log() const {
    std::string p;
    bytes::put_u64(p, log_.size());
    for (const LogRow& row : log_) {
      bytes::put_u64(p, row.epoch);
      bytes::put_f64(p, row.l_rec_mean);
      bytes::put_f64(p, row.d_kl_mean);
      bytes::put_f64(p, row.lambda);
      bytes::put_f64(p, row.kappa);
      bytes::put_f64(p, row.constraint_lc);
      bytes::put_f64(p, row.lr);
      bytes::put_f64(p, row.val_metric);
    }
    return p;
  }

  void deserialize_log(const std::string& payload) {
    bytes::Reader r(payload, "checkpoint section log");
    const std::uint64_t n = r.u64();
    log_.clear();
    for (std::uint64_t i = 0; i < n; ++i) {
      LogRow row;
      row.epoch = static_cast<std::size_t>(r.u64());
      row.l_rec_mean = r.f64();
      row.d_kl_mean = r.f64();
      row.lambda = r.f64();
      row.kappa = r.f64();
      row.constraint_lc = r.f64();
      row.lr = r.f64();
      row.val_metric = r.f64();
      log_.push_back(row);
    }
    r.expect_end();
  }

  RunConfig cfg_;
  const SynthTask& task_;
  std::vector<Sample> train_;
  std::vector<Sample> val_;
  std::vector<Sample> val_subset_;
  bool prob_ = false;
  std::unique_ptr<PredictiveModel<T>> pred_;
  std::unique_ptr<PosteriorModel<T>> post_;
  std::unique_ptr<AdamW<T>> opt_;
  GecoState geco_;
  std::vector<LogRow> log_;
  std::size_t epochs_done_ = 0;
  std::size_t global_step_ = 0;
  bool has_best_ = false;
  std::size_t best_epoch_ = 0;
  double best_val_ = 0.0;
  std::string best_pred_;
  std::string best_post_;
};

}  // namespace probtf
