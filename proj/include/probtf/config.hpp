#pragma once

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <stdexcept>
#include <string>

#include <json.hpp>

#include "probtf/model.hpp"
#include "probtf/optim.hpp"
#include "probtf/synthdata.hpp"

// Canonical JSON round-trip for every configuration struct. nlohmann keeps
// object keys sorted and prints shortest round-trip decimals, so dumping the
// same config always yields the same bytes; that string doubles as the
// provenance echo and the checkpoint's stored config.
//
// Parsing is tolerant about missing fields (they keep their defaults) but
// rejects unknown keys, so a typo in a hand-written config file fails loudly
// instead of silently training with defaults.

namespace probtf {

struct TrainConfig {
  std::string model_kind = "prob";  // prob | vanilla
  std::size_t epochs = 50;
  std::size_t steps_per_epoch = 2000;
  std::size_t batch_size = 8;
  double kappa_init = 0.1;
  bool kappa_annealing = true;
  // Freezing the multiplier at its initial value turns the constrained
  // objective into a fixed-weight one; the architecture-reduction identity
  // (no prob blocks, lambda 1, kappa 0 == plain cross-entropy) needs it.
  bool lambda_updates = true;
  std::uint64_t seed = 0;
  std::size_t val_realizations = 10;
  std::size_t val_max_samples = 256;
  std::string log_path;
  std::string checkpoint_path;
  std::string best_path;

  void validate() const {
    if (model_kind != "prob" && model_kind != "vanilla") {
      throw std::invalid_argument("train: model kind must be prob or vanilla, got " +
                                  model_kind);
    }
    if (kappa_init < 0.0 || !std::isfinite(kappa_init)) {
      throw std::invalid_argument("train: kappa_init must be finite and >= 0, got " +
                                  std::to_string(kappa_init));
    }
    if (steps_per_epoch == 0 || epochs == 0 || batch_size == 0) {
      throw std::invalid_argument("train: epochs, steps and batch size must be >= 1");
    }
    if (val_realizations == 0) {
      throw std::invalid_argument("train: need at least one validation realization");
    }
  }
};

namespace detail {

inline void check_keys(const nlohmann::json& j, const char* section,
                       std::initializer_list<const char*> allowed) {
  if (!j.is_object()) {
    throw std::runtime_error(std::string("config: section ") + section +
                             " must be a JSON object");
  }
  for (auto it = j.begin(); it != j.end(); ++it) {
    bool known = false;
    for (const char* k : allowed) {
      if (it.key() == k) {
        known = true;
        break;
      }
    }
    if (!known) {
      throw std::runtime_error("config: unknown field '" + it.key() + "' in section " +
                               section);
    }
  }
}

template <typename T>
void get_if(const nlohmann::json& j, const char* key, T& out) {
  const auto it = j.find(key);
  if (it == j.end()) return;
  try {
    out = it->get<T>();
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error(std::string("config: field '") + key +
                             "' has the wrong type: " + e.what());
  }
}

}  // namespace detail

inline nlohmann::json model_config_to_json(const ModelConfig& c) {
  return nlohmann::json{{"n_blocks", c.n_blocks}, {"prob_blocks", c.prob_blocks},
                        {"d_model", c.d_model},   {"d_ff", c.d_ff},
                        {"d_z", c.d_z},           {"n_heads", c.n_heads},
                        {"vocab_in", c.vocab_in}, {"vocab_out", c.vocab_out},
                        {"dropout", c.dropout}};
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
  detail::check_keys(j, "model",
                     {"n_blocks", "prob_blocks", "d_model", "d_ff", "d_z", "n_heads",
                      "vocab_in", "vocab_out", "dropout"});
  ModelConfig c;
  detail::get_if(j, "n_blocks", c.n_blocks);
  detail::get_if(j, "prob_blocks", c.prob_blocks);
  detail::get_if(j, "d_model", c.d_model);
  detail::get_if(j, "d_ff", c.d_ff);
  detail::get_if(j, "d_z", c.d_z);
  detail::get_if(j, "n_heads", c.n_heads);
  detail::get_if(j, "vocab_in", c.vocab_in);
  detail::get_if(j, "vocab_out", c.vocab_out);
  detail::get_if(j, "dropout", c.dropout);
  return c;
}

inline nlohmann::json optim_config_to_json(const OptimConfig& c) {
  return nlohmann::json{{"beta1", c.beta1},
                        {"beta2", c.beta2},
                        {"eps", c.eps},
                        {"weight_decay", c.weight_decay},
                        {"clip_norm", c.clip_norm},
                        {"lr_high", c.lr_high},
                        {"lr_low", c.lr_low},
                        {"warmup_epochs", c.warmup_epochs},
                        {"epochs", c.epochs},
                        {"steps_per_epoch", c.steps_per_epoch}};
}

inline OptimConfig optim_config_from_json(const nlohmann::json& j) {
  detail::check_keys(j, "optim",
                     {"beta1", "beta2", "eps", "weight_decay", "clip_norm", "lr_high",
                      "lr_low", "warmup_epochs", "epochs", "steps_per_epoch"});
  OptimConfig c;
  detail::get_if(j, "beta1", c.beta1);
  detail::get_if(j, "beta2", c.beta2);
  detail::get_if(j, "eps", c.eps);
  detail::get_if(j, "weight_decay", c.weight_decay);
  detail::get_if(j, "clip_norm", c.clip_norm);
  detail::get_if(j, "lr_high", c.lr_high);
  detail::get_if(j, "lr_low", c.lr_low);
  detail::get_if(j, "warmup_epochs", c.warmup_epochs);
  detail::get_if(j, "epochs", c.epochs);
  detail::get_if(j, "steps_per_epoch", c.steps_per_epoch);
  return c;
}

inline nlohmann::json train_config_to_json(const TrainConfig& c) {
  return nlohmann::json{{"model_kind", c.model_kind},
                        {"epochs", c.epochs},
                        {"steps_per_epoch", c.steps_per_epoch},
                        {"batch_size", c.batch_size},
                        {"kappa_init", c.kappa_init},
                        {"kappa_annealing", c.kappa_annealing},
                        {"lambda_updates", c.lambda_updates},
                        {"seed", c.seed},
                        {"val_realizations", c.val_realizations},
                        {"val_max_samples", c.val_max_samples}};
}

inline TrainConfig train_config_from_json(const nlohmann::json& j) {
  detail::check_keys(j, "train",
                     {"model_kind", "epochs", "steps_per_epoch", "batch_size",
                      "kappa_init", "kappa_annealing", "lambda_updates", "seed",
                      "val_realizations", "val_max_samples"});
  TrainConfig c;
  detail::get_if(j, "model_kind", c.model_kind);
  detail::get_if(j, "epochs", c.epochs);
  detail::get_if(j, "steps_per_epoch", c.steps_per_epoch);
  detail::get_if(j, "batch_size", c.batch_size);
  detail::get_if(j, "kappa_init", c.kappa_init);
  detail::get_if(j, "kappa_annealing", c.kappa_annealing);
  detail::get_if(j, "lambda_updates", c.lambda_updates);
  detail::get_if(j, "seed", c.seed);
  detail::get_if(j, "val_realizations", c.val_realizations);
  detail::get_if(j, "val_max_samples", c.val_max_samples);
  return c;
}

inline TaskSpec task_spec_from_json_tolerant(const nlohmann::json& j) {
  detail::check_keys(j, "task",
                     {"vocab_in", "vocab_out", "n_phrases", "phrase_len", "max_nonzero",
                      "min_len", "max_len", "n_train", "n_val", "n_test", "seed"});
  TaskSpec s;
  detail::get_if(j, "vocab_in", s.vocab_in);
  detail::get_if(j, "vocab_out", s.vocab_out);
  detail::get_if(j, "n_phrases", s.n_phrases);
  detail::get_if(j, "phrase_len", s.phrase_len);
  detail::get_if(j, "max_nonzero", s.max_nonzero);
  detail::get_if(j, "min_len", s.min_len);
  detail::get_if(j, "max_len", s.max_len);
  detail::get_if(j, "n_train", s.n_train);
  detail::get_if(j, "n_val", s.n_val);
  detail::get_if(j, "n_test", s.n_test);
  detail::get_if(j, "seed", s.seed);
  return s;
}

// Everything one run needs; the paths in TrainConfig are call-site details
// and stay out of the canonical text.
struct RunConfig {
  ModelConfig model;
  OptimConfig optim;
  TrainConfig train;

  void validate() const {
    model.validate();
    optim.validate();
    train.validate();
  }
};

inline std::string run_config_to_string(const RunConfig& c) {
  nlohmann::json j{{"model", model_config_to_json(c.model)},
                   {"optim", optim_config_to_json(c.optim)},
                   {"train", train_config_to_json(c.train)}};
  return j.dump();
}

inline nlohmann::json parse_config_json(const std::string& text) {
  try {
    return nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw std::runtime_error("config: malformed JSON at byte " + std::to_string(e.byte) +
                             ": " + e.what());
  }
}

inline RunConfig run_config_from_string(const std::string& text) {
  const nlohmann::json j = parse_config_json(text);
  detail::check_keys(j, "(top level)", {"model", "optim", "train"});
  RunConfig c;
  if (j.contains("model")) c.model = model_config_from_json(j.at("model"));
  if (j.contains("optim")) c.optim = optim_config_from_json(j.at("optim"));
  if (j.contains("train")) c.train = train_config_from_json(j.at("train"));
  return c;
}

// The whole project config file: task generation plus the run sections.
struct FullConfig {
  TaskSpec task;
  RunConfig run;
};

inline std::string full_config_to_string(const FullConfig& c) {
  nlohmann::json j{{"task", task_spec_to_json(c.task)},
                   {"model", model_config_to_json(c.run.model)},
                   {"optim", optim_config_to_json(c.run.optim)},
                   {"train", train_config_to_json(c.run.train)}};
  return j.dump(2) + "\n";
}

inline FullConfig full_config_from_string(const std::string& text) {
  const nlohmann::json j = parse_config_json(text);
  detail::check_keys(j, "(top level)", {"task", "model", "optim", "train"});
  FullConfig c;
  if (j.contains("task")) c.task = task_spec_from_json_tolerant(j.at("task"));
  if (j.contains("model")) c.run.model = model_config_from_json(j.at("model"));
  if (j.contains("optim")) c.run.optim = optim_config_from_json(j.at("optim"));
  if (j.contains("train")) c.run.train = train_config_from_json(j.at("train"));
  return c;
}

}  // namespace probtf
