#include <CLI11.hpp>

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "probtf/checkpoint.hpp"
#include "probtf/config.hpp"
#include "probtf/eval.hpp"
#include "probtf/model.hpp"
#include "probtf/synthdata.hpp"
#include "probtf/trainer.hpp"

// Command-line surface: data generation, training, evaluation, ablation
// sweeps and log aggregation. Every command is a pure function of its config
// file, flag overrides and seed; outputs carry no timestamps, so rerunning a
// command writes byte-identical files. Diagnostics go to stderr; exit code 0
// means the command completed.

namespace fs = std::filesystem;
using namespace probtf;

namespace {

bool verbose_enabled() {
  const char* v = std::getenv("PROBTF_VERBOSE");
  return v != nullptr && *v != '\0' && std::string(v) != "0";
}

FullConfig load_full_config(const std::string& path) {
  if (path.empty()) return FullConfig{};
  return full_config_from_string(read_file(path));
}

std::string metric_csv_value(double v) {
  char buf[48];
  std::snprintf(buf, sizeof(buf), "%.9g", v);
  return std::string(buf);
}

// Block-set specs: "middle" (the centre block), "all", or a comma list of
// 1-based block indices like "2,3".
std::vector<std::size_t> parse_block_set(const std::string& spec, std::size_t n_blocks) {
  std::vector<std::size_t> blocks;
  if (spec == "middle") {
    blocks.push_back((n_blocks + 1) / 2);
    return blocks;
  }
  if (spec == "all") {
    for (std::size_t b = 1; b <= n_blocks; ++b) blocks.push_back(b);
    return blocks;
  }
  if (spec == "none" || spec.empty()) return blocks;
  std::stringstream ss(spec);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      const unsigned long v = std::stoul(item);
      blocks.push_back(static_cast<std::size_t>(v));
    } catch (const std::exception&) {
      throw std::runtime_error("cannot parse block list '" + spec + "': bad item '" +
                               item + "'");
    }
  }
  if (blocks.empty()) throw std::runtime_error("empty block list '" + spec + "'");
  return blocks;
}

std::vector<std::string> split(const std::string& text, char sep) {
  std::vector<std::string> parts;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, sep)) parts.push_back(item);
  return parts;
}

LoadedDataset load_dataset_for_task(const std::string& path, const SynthTask& task) {
  LoadedDataset ds = load_dataset(path);
  const std::string expected = hash_hex(task_hash(task));
  if (ds.task_hash_hex != expected) {
    throw std::runtime_error("dataset " + path + " was generated for task " +
                             ds.task_hash_hex + ", not for the given task " + expected);
  }
  return ds;
}

struct LoadedModel {
  RunConfig config;
  std::unique_ptr<PredictiveModel<float>> model;
};

LoadedModel load_model_checkpoint(const std::string& path) {
  const auto sections = load_checkpoint_file(path);
  LoadedModel lm;
  lm.config = run_config_from_string(require_section(sections, "config").payload);
  lm.model = std::make_unique<PredictiveModel<float>>(lm.config.model, 0);
  deserialize_params(lm.model->params(), require_section(sections, "params.pred").payload,
                     "params.pred");
  return lm;
}

// ---------------------------------------------------------------------------
// gen-data

struct GenDataOpts {
  std::string config_path;
  std::string out_dir;
  std::uint64_t seed = 0;
  bool seed_given = false;
};

void run_gen_data(const GenDataOpts& o) {
  FullConfig cfg = load_full_config(o.config_path);
  if (o.seed_given) cfg.task.seed = o.seed;
  const SynthTask task = build_task(cfg.task);
  const std::uint64_t h = task_hash(task);
  fs::create_directories(o.out_dir);
  save_task(task, o.out_dir + "/task.json");
  save_dataset(sample_dataset(task, cfg.task.n_train, mix_u64(cfg.task.seed, 1)), h,
               o.out_dir + "/train.tsv");
  save_dataset(sample_dataset(task, cfg.task.n_val, mix_u64(cfg.task.seed, 2)), h,
               o.out_dir + "/val.tsv");
  save_dataset(sample_dataset(task, cfg.task.n_test, mix_u64(cfg.task.seed, 3)), h,
               o.out_dir + "/test.tsv");
  write_file(o.out_dir + "/config.json", full_config_to_string(cfg));
  std::cout << hash_hex(h) << "\n";
}

// ---------------------------------------------------------------------------
// train

struct TrainOpts {
  std::string config_path;
  std::string data_dir;
  std::string out_dir;
  std::string model_kind;
  std::string prob_blocks;
  std::string resume_path;
  double kappa_init = 0.0;
  bool kappa_init_given = false;
  bool no_kappa_annealing = false;
  std::uint64_t seed = 0;
  bool seed_given = false;
  std::size_t epochs = 0;
  std::size_t steps = 0;
  std::size_t batch = 0;
};

void run_training(RunConfig run, const SynthTask& task, std::vector<Sample> train_set,
                  std::vector<Sample> val_set, const std::string& out_dir,
                  const std::string& resume_path) {
  fs::create_directories(out_dir);
  run.train.log_path = out_dir + "/log.csv";
  run.train.checkpoint_path = out_dir + "/last.ckpt";
  run.train.best_path = out_dir + "/best.ckpt";
  Trainer<float> trainer(run, task, std::move(train_set), std::move(val_set));
  if (!resume_path.empty()) trainer.load(resume_path);
  if (verbose_enabled()) {
    trainer.on_epoch = [](const LogRow& row) {
      std::cerr << "epoch " << row.epoch << " l_rec=" << row.l_rec_mean
                << " d_kl=" << row.d_kl_mean << " lambda=" << row.lambda
                << " kappa=" << row.kappa << " val_kl=" << row.val_metric << "\n";
    };
  }
  trainer.run();
  std::cout << "best_epoch=" << trainer.best_epoch() << " best_val_kl="
            << metric_csv_value(trainer.best_val()) << "\n";
}

void run_train(const TrainOpts& o) {
  const FullConfig file_cfg = load_full_config(o.config_path);
  FullConfig cfg = file_cfg;
  // Flag overrides.
  if (!o.model_kind.empty()) cfg.run.train.model_kind = o.model_kind;
  if (o.seed_given) cfg.run.train.seed = o.seed;
  if (o.epochs > 0) cfg.run.train.epochs = o.epochs;
  if (o.steps > 0) cfg.run.train.steps_per_epoch = o.steps;
  if (o.batch > 0) cfg.run.train.batch_size = o.batch;
  const bool vanilla = cfg.run.train.model_kind == "vanilla";
  if (vanilla) {
    if (o.kappa_init_given || o.no_kappa_annealing) {
      std::cerr << "warning: vanilla training has no constraint target; "
                   "ignoring kappa flags\n";
    }
    cfg.run.model.prob_blocks.clear();
  } else {
    if (!o.prob_blocks.empty()) {
      cfg.run.model.prob_blocks = parse_block_set(o.prob_blocks, cfg.run.model.n_blocks);
    }
    if (o.kappa_init_given) cfg.run.train.kappa_init = o.kappa_init;
    if (o.no_kappa_annealing) cfg.run.train.kappa_annealing = false;
  }
  if (vanilla && !o.prob_blocks.empty()) {
    std::cerr << "warning: vanilla training uses no prob blocks; ignoring "
                 "--prob-blocks\n";
  }
  // Keep the lr schedule horizon equal to the training horizon unless the
  // config file pinned it explicitly.
  nlohmann::json raw = o.config_path.empty()
                           ? nlohmann::json::object()
                           : parse_config_json(read_file(o.config_path));
  const nlohmann::json raw_optim =
      raw.contains("optim") ? raw.at("optim") : nlohmann::json::object();
  if (!raw_optim.contains("epochs")) cfg.run.optim.epochs = cfg.run.train.epochs;
  if (!raw_optim.contains("steps_per_epoch")) {
    cfg.run.optim.steps_per_epoch = cfg.run.train.steps_per_epoch;
  }

  const SynthTask task = load_task(o.data_dir + "/task.json");
  LoadedDataset train_ds = load_dataset_for_task(o.data_dir + "/train.tsv", task);
  LoadedDataset val_ds = load_dataset_for_task(o.data_dir + "/val.tsv", task);
  cfg.task = task.spec;

  fs::create_directories(o.out_dir);
  write_file(o.out_dir + "/config.json", full_config_to_string(cfg));
  run_training(cfg.run, task, std::move(train_ds.samples), std::move(val_ds.samples),
               o.out_dir, o.resume_path);
}

// ---------------------------------------------------------------------------
// eval

struct EvalOpts {
  std::string checkpoint_path;
  std::string data_path;
  std::string task_path;
  std::string method = "prob_sample";
  std::string out_path;
  std::size_t realizations = 50;
  std::size_t seeds = 5;
  std::uint64_t seed_base = 0;
};

std::string metrics_csv(const std::vector<std::pair<std::string, MetricReport>>& rows) {
  std::string out = "method,seed,validity,kl_divergence,diversity,total_variation\n";
  std::vector<double> v, k, d, t;
  std::string method;
  for (const auto& [label, r] : rows) {
    method = label;
    v.push_back(r.validity);
    k.push_back(r.kl_divergence);
    d.push_back(r.diversity);
    t.push_back(r.total_variation);
  }
  for (std::size_t i = 0; i < rows.size(); ++i) {
    out += rows[i].first + "," + std::to_string(i) + "," +
           metric_csv_value(v[i]) + "," + metric_csv_value(k[i]) + "," +
           metric_csv_value(d[i]) + "," + metric_csv_value(t[i]) + "\n";
  }
  auto mean = [](const std::vector<double>& xs) {
    double s = 0.0;
    for (double x : xs) s += x;
    return s / static_cast<double>(xs.size());
  };
  auto stdev = [&](const std::vector<double>& xs) {
    if (xs.size() < 2) return 0.0;
    const double m = mean(xs);
    double s = 0.0;
    for (double x : xs) s += (x - m) * (x - m);
    return std::sqrt(s / static_cast<double>(xs.size() - 1));
  };
  out += method + ",mean," + metric_csv_value(mean(v)) + "," + metric_csv_value(mean(k)) +
         "," + metric_csv_value(mean(d)) + "," + metric_csv_value(mean(t)) + "\n";
  out += method + ",std," + metric_csv_value(stdev(v)) + "," + metric_csv_value(stdev(k)) +
         "," + metric_csv_value(stdev(d)) + "," + metric_csv_value(stdev(t)) + "\n";
  return out;
}

std::string evaluate_to_csv(const EvalOpts& o) {
  std::string task_path = o.task_path;
  if (task_path.empty()) {
    task_path = (fs::path(o.data_path).parent_path() / "task.json").string();
  }
  const SynthTask task = load_task(task_path);
  LoadedDataset ds = load_dataset_for_task(o.data_path, task);
  if (o.seeds == 0) throw std::runtime_error("eval: need at least one seed");

  LoadedModel lm;
  const bool oracle = o.method == "oracle";
  if (!oracle) {
    if (o.checkpoint_path.empty()) {
      throw std::runtime_error("eval: --checkpoint is required unless --method oracle");
    }
    lm = load_model_checkpoint(o.checkpoint_path);
    if (o.method == "mc_dropout" && lm.config.model.dropout == 0.0) {
      std::cerr << "warning: model was built with dropout 0; mc_dropout passes "
                   "are all identical\n";
    }
  }
  std::vector<std::pair<std::string, MetricReport>> rows;
  for (std::size_t i = 0; i < o.seeds; ++i) {
    const std::uint64_t seed = mix_u64(o.seed_base, i);
    PredictiveEnsemble e =
        oracle ? oracle_ensemble(task, ds.samples, o.realizations, seed)
               : run_inference(*lm.model, task, ds.samples,
                               parse_inference_method(o.method), o.realizations, seed);
    rows.emplace_back(o.method, metrics(e));
  }
  return metrics_csv(rows);
}

void run_eval(const EvalOpts& o) {
  const std::string csv = evaluate_to_csv(o);
  if (o.out_path.empty()) {
    std::cout << csv;
  } else {
    write_file(o.out_path, csv);
  }
}

// ---------------------------------------------------------------------------
// ablate

struct AblateOpts {
  std::string config_path;
  std::string data_dir;
  std::string out_dir;
  std::string blocks_sets;
  std::string kappa_factors;
  std::size_t realizations = 50;
  std::size_t eval_seeds = 3;
  std::uint64_t seed = 0;
  bool seed_given = false;
};

std::string block_variant_name(const std::string& spec) {
  std::string name = "blocks_";
  for (char c : spec) name += c == ',' ? '-' : c;
  return name;
}

void run_ablate(const AblateOpts& o) {
  if (o.blocks_sets.empty() && o.kappa_factors.empty()) {
    throw std::runtime_error(
        "ablate: nothing to sweep; pass --blocks-sets and/or --kappa-factors");
  }
  FullConfig base = load_full_config(o.config_path);
  if (o.seed_given) base.run.train.seed = o.seed;
  base.run.train.model_kind = "prob";
  base.run.optim.epochs = base.run.train.epochs;
  base.run.optim.steps_per_epoch = base.run.train.steps_per_epoch;
  const SynthTask task = load_task(o.data_dir + "/task.json");
  LoadedDataset train_ds = load_dataset_for_task(o.data_dir + "/train.tsv", task);
  LoadedDataset val_ds = load_dataset_for_task(o.data_dir + "/val.tsv", task);
  base.task = task.spec;
  fs::create_directories(o.out_dir);

  if (!o.blocks_sets.empty()) {
    std::string summary;
    for (const std::string& spec : split(o.blocks_sets, ';')) {
      const std::string variant = block_variant_name(spec);
      FullConfig cfg = base;
      cfg.run.model.prob_blocks = parse_block_set(spec, cfg.run.model.n_blocks);
      const std::string dir = o.out_dir + "/" + variant;
      fs::create_directories(dir);
      write_file(dir + "/config.json", full_config_to_string(cfg));
      std::cerr << "ablate: training variant " << variant << "\n";
      run_training(cfg.run, task, train_ds.samples, val_ds.samples, dir, "");
      EvalOpts ev;
      ev.checkpoint_path = dir + "/best.ckpt";
      ev.data_path = o.data_dir + "/test.tsv";
      ev.task_path = o.data_dir + "/task.json";
      ev.method = "prob_sample";
      ev.realizations = o.realizations;
      ev.seeds = o.eval_seeds;
      const std::string csv = evaluate_to_csv(ev);
      write_file(dir + "/metrics.csv", csv);
      // Merge into the summary with a leading variant column.
      const auto lines = split(csv, '\n');
      if (summary.empty()) summary = "variant," + lines[0] + "\n";
      for (std::size_t i = 1; i < lines.size(); ++i) {
        if (!lines[i].empty()) summary += variant + "," + lines[i] + "\n";
      }
    }
    write_file(o.out_dir + "/blocks_summary.csv", summary);
  }

  if (!o.kappa_factors.empty()) {
    std::string summary = "variant,kappa_factor,kappa_annealing,final_val_kl,best_val_kl\n";
    for (const std::string& item : split(o.kappa_factors, ',')) {
      const double factor = std::stod(item);
      for (const bool annealing : {true, false}) {
        FullConfig cfg = base;
        cfg.run.train.kappa_init = base.run.train.kappa_init * factor;
        cfg.run.train.kappa_annealing = annealing;
        const std::string variant =
            "kappa" + item + (annealing ? "x_anneal" : "x_fixed");
        const std::string dir = o.out_dir + "/" + variant;
        fs::create_directories(dir);
        write_file(dir + "/config.json", full_config_to_string(cfg));
        cfg.run.train.log_path = dir + "/log.csv";
        cfg.run.train.checkpoint_path = dir + "/last.ckpt";
        cfg.run.train.best_path = dir + "/best.ckpt";
        std::cerr << "ablate: training variant " << variant << "\n";
        Trainer<float> trainer(cfg.run, task, train_ds.samples, val_ds.samples);
        trainer.run();
        summary += variant + "," + item + "," + (annealing ? "1" : "0") + "," +
                   metric_csv_value(trainer.log().back().val_metric) + "," +
                   metric_csv_value(trainer.best_val()) + "\n";
      }
    }
    write_file(o.out_dir + "/kappa_summary.csv", summary);
  }
}

// ---------------------------------------------------------------------------
// report

struct ReportOpts {
  std::vector<std::string> logs;
  std::string out_path;
};

void run_report(const ReportOpts& o) {
  if (o.logs.empty()) throw std::runtime_error("report: no log files given");
  const std::vector<std::string> series = {"l_rec_mean", "d_kl_mean", "lambda",
                                           "kappa",      "constraint_Lc", "lr",
                                           "val_metric"};
  const bool multi = o.logs.size() > 1;
  std::string out = multi ? "seed,epoch,series,value\n" : "epoch,series,value\n";
  for (std::size_t li = 0; li < o.logs.size(); ++li) {
    const std::string text = read_file(o.logs[li]);
    const auto lines = split(text, '\n');
    if (lines.empty() || lines[0] != kLogHeader) {
      throw std::runtime_error("report: " + o.logs[li] +
                               " does not have the training log columns");
    }
    for (std::size_t r = 1; r < lines.size(); ++r) {
      if (lines[r].empty()) continue;
      const auto fields = split(lines[r], ',');
      if (fields.size() != series.size() + 1) {
        throw std::runtime_error("report: " + o.logs[li] + " row " + std::to_string(r) +
                                 " has " + std::to_string(fields.size()) +
                                 " columns, expected " +
                                 std::to_string(series.size() + 1));
      }
      for (std::size_t c = 0; c < series.size(); ++c) {
        char* end = nullptr;
        std::strtod(fields[c + 1].c_str(), &end);
        if (end == fields[c + 1].c_str()) {
          throw std::runtime_error("report: " + o.logs[li] + " row " +
                                   std::to_string(r) + " has a non-numeric value '" +
                                   fields[c + 1] + "'");
        }
        if (multi) out += std::to_string(li) + ",";
        out += fields[0] + "," + series[c] + "," + fields[c + 1] + "\n";
      }
    }
  }
  if (o.out_path.empty()) {
    std::cout << out;
  } else {
    write_file(o.out_path, out);
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Probabilistic transformer workbench: synthetic-task data "
               "generation, constrained-objective training, ensemble "
               "evaluation, ablations and log reporting. Set PROBTF_VERBOSE=1 "
               "for per-epoch progress on stderr."};
  app.require_subcommand(1);

  GenDataOpts gen;
  auto* gen_cmd = app.add_subcommand(
      "gen-data", "Build a task and write task.json plus train/val/test datasets");
  gen_cmd->add_option("--config", gen.config_path, "Config JSON file (task section)")
      ->check(CLI::ExistingFile);
  gen_cmd->add_option("--out", gen.out_dir, "Output directory")->required();
  auto* gen_seed = gen_cmd->add_option("--seed", gen.seed, "Override the task seed");
  gen_cmd->callback([&] {
    gen.seed_given = gen_seed->count() > 0;
    run_gen_data(gen);
  });

  TrainOpts tr;
  auto* train_cmd =
      app.add_subcommand("train", "Train a model and write log + checkpoints");
  train_cmd->add_option("--config", tr.config_path, "Config JSON file")
      ->check(CLI::ExistingFile);
  train_cmd->add_option("--data", tr.data_dir, "Directory produced by gen-data")
      ->required();
  train_cmd->add_option("--out", tr.out_dir, "Output directory")->required();
  train_cmd->add_option("--model", tr.model_kind, "Model kind: prob or vanilla")
      ->check(CLI::IsMember({"prob", "vanilla"}));
  train_cmd->add_option("--prob-blocks", tr.prob_blocks,
                        "Blocks with a probabilistic sublayer: 'middle', 'all' or "
                        "a comma list like 2,3");
  auto* kap = train_cmd->add_option("--kappa-init", tr.kappa_init,
                                    "Initial reconstruction target");
  train_cmd->add_flag("--no-kappa-annealing", tr.no_kappa_annealing,
                      "Keep the reconstruction target fixed");
  auto* tr_seed = train_cmd->add_option("--seed", tr.seed, "Training seed");
  train_cmd->add_option("--epochs", tr.epochs, "Override epoch count");
  train_cmd->add_option("--steps", tr.steps, "Override steps per epoch");
  train_cmd->add_option("--batch", tr.batch, "Override batch size");
  train_cmd->add_option("--resume", tr.resume_path, "Resume from this checkpoint")
      ->check(CLI::ExistingFile);
  train_cmd->callback([&] {
    tr.kappa_init_given = kap->count() > 0;
    tr.seed_given = tr_seed->count() > 0;
    run_train(tr);
  });

  EvalOpts ev;
  auto* eval_cmd =
      app.add_subcommand("eval", "Evaluate a checkpoint (or the task oracle) on a "
                                 "dataset and print a metrics CSV");
  eval_cmd->add_option("--checkpoint", ev.checkpoint_path, "Model checkpoint");
  eval_cmd->add_option("--data", ev.data_path, "Dataset TSV file")->required();
  eval_cmd->add_option("--task", ev.task_path,
                       "Task JSON (default: task.json next to the dataset)");
  eval_cmd
      ->add_option("--method", ev.method,
                   "prob_sample | mc_dropout | softmax_sample | oracle")
      ->required();
  eval_cmd->add_option("--realizations", ev.realizations, "Realizations per position");
  eval_cmd->add_option("--seeds", ev.seeds, "Number of evaluation seeds");
  eval_cmd->add_option("--seed-base", ev.seed_base, "Base value the seeds derive from");
  eval_cmd->add_option("--out", ev.out_path, "Write the CSV here instead of stdout");
  eval_cmd->callback([&] { run_eval(ev); });

  AblateOpts ab;
  auto* ablate_cmd = app.add_subcommand(
      "ablate", "Sweep prob-block subsets and/or constraint-target factors");
  ablate_cmd->add_option("--config", ab.config_path, "Config JSON file")
      ->check(CLI::ExistingFile);
  ablate_cmd->add_option("--data", ab.data_dir, "Directory produced by gen-data")
      ->required();
  ablate_cmd->add_option("--out", ab.out_dir, "Output directory")->required();
  ablate_cmd->add_option("--blocks-sets", ab.blocks_sets,
                         "Semicolon-separated block sets, e.g. 'middle;2,3;all'");
  ablate_cmd->add_option("--kappa-factors", ab.kappa_factors,
                         "Comma list of kappa_init multipliers, each trained with "
                         "annealing on and off");
  ablate_cmd->add_option("--realizations", ab.realizations, "Eval realizations");
  ablate_cmd->add_option("--eval-seeds", ab.eval_seeds, "Eval seeds per variant");
  auto* ab_seed = ablate_cmd->add_option("--seed", ab.seed, "Training seed");
  ablate_cmd->callback([&] {
    ab.seed_given = ab_seed->count() > 0;
    run_ablate(ab);
  });

  ReportOpts rp;
  auto* report_cmd = app.add_subcommand(
      "report", "Merge training logs into a tidy long-format CSV");
  report_cmd->add_option("--logs", rp.logs, "Training log CSV files")
      ->required()
      ->check(CLI::ExistingFile);
  report_cmd->add_option("--out", rp.out_path, "Write the CSV here instead of stdout");
  report_cmd->callback([&] { run_report(rp); });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
