#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "probtf/rng.hpp"

// Synthetic sequential distribution task: a fixed bank of phrases (short
// source-token sequences) where every (phrase, position) context owns a
// sparse target distribution with at most k nonzero entries. Sequences are
// whole phrases chained together, so lengths are multiples of the phrase
// length. Ground-truth distributions are persisted alongside the data;
// metrics never re-derive them.

namespace probtf {

struct TaskSpec {
  std::size_t vocab_in = 500;
  std::size_t vocab_out = 500;
  std::size_t n_phrases = 1000;
  std::size_t phrase_len = 3;
  std::size_t max_nonzero = 10;
  std::size_t min_len = 15;
  std::size_t max_len = 90;
  std::size_t n_train = 100000;
  std::size_t n_val = 10000;
  std::size_t n_test = 10000;
  std::uint64_t seed = 0;

  void validate() const {
    if (max_nonzero == 0 || max_nonzero > vocab_out) {
      throw std::invalid_argument("task: support bound " + std::to_string(max_nonzero) +
                                  " outside 1.." + std::to_string(vocab_out));
    }
    if (phrase_len == 0) throw std::invalid_argument("task: phrase length must be >= 1");
    if (min_len > max_len || min_len == 0) {
      throw std::invalid_argument("task: bad length range " + std::to_string(min_len) +
                                  ".." + std::to_string(max_len));
    }
    if (max_len / phrase_len == 0) {
      throw std::invalid_argument("task: max length shorter than one phrase");
    }
    if (n_phrases == 0 || vocab_in == 0 || vocab_out == 0) {
      throw std::invalid_argument("task: counts must be positive");
    }
  }
};

// Sparse distribution over the target vocabulary, entries sorted by token.
struct SparseDist {
  std::vector<std::pair<int, double>> entries;

  bool contains(int token) const {
    for (const auto& [t, p] : entries) {
      if (t == token) return p > 0.0;
    }
    return false;
  }
};

struct SynthTask {
  TaskSpec spec;
  std::vector<std::vector<int>> phrases;            // [n_phrases][phrase_len]
  std::vector<std::vector<SparseDist>> dists;       // [phrase][position]
};

struct Sample {
  std::vector<int> x;
  std::vector<int> y;
  std::vector<std::pair<int, int>> contexts;  // (phrase_id, position) per token
};

inline SynthTask build_task(const TaskSpec& spec) {
  spec.validate();
  SynthTask task;
  task.spec = spec;
  Rng rng = substream(spec.seed, "task");
  task.phrases.resize(spec.n_phrases);
  task.dists.resize(spec.n_phrases);
  for (std::size_t pid = 0; pid < spec.n_phrases; ++pid) {
    auto& phrase = task.phrases[pid];
    phrase.resize(spec.phrase_len);
    for (auto& tok : phrase) tok = static_cast<int>(rng.below(spec.vocab_in));
    auto& per_pos = task.dists[pid];
    per_pos.resize(spec.phrase_len);
    for (std::size_t pos = 0; pos < spec.phrase_len; ++pos) {
      const std::size_t support = 1 + rng.below(spec.max_nonzero);
      std::set<int> chosen;
      while (chosen.size() < support) {
        chosen.insert(static_cast<int>(rng.below(spec.vocab_out)));
      }
      SparseDist dist;
      double sum = 0.0;
      for (int tok : chosen) {
        const double w = rng.uniform();
        dist.entries.emplace_back(tok, w);
        sum += w;
      }
      if (sum <= 0.0) {
        for (auto& [t, p] : dist.entries) p = 1.0 / static_cast<double>(support);
      } else {
        for (auto& [t, p] : dist.entries) p /= sum;
      }
      per_pos[pos] = std::move(dist);
    }
  }
  return task;
}

inline int draw_from(const SparseDist& dist, Rng& rng) {
  const double u = rng.uniform();
  double acc = 0.0;
  for (const auto& [tok, p] : dist.entries) {
    acc += p;
    if (u < acc) return tok;
  }
  return dist.entries.back().first;
}

inline std::vector<Sample> sample_dataset(const SynthTask& task, std::size_t n,
                                          std::uint64_t seed) {
  if (n == 0) throw std::invalid_argument("sample_dataset: need n >= 1");
  const TaskSpec& spec = task.spec;
  const std::size_t u_min = (spec.min_len + spec.phrase_len - 1) / spec.phrase_len;
  const std::size_t u_max = spec.max_len / spec.phrase_len;
  Rng rng = substream(seed, "data");
  std::vector<Sample> out(n);
  for (auto& sample : out) {
    const std::size_t units = u_min + rng.below(u_max - u_min + 1);
    sample.x.reserve(units * spec.phrase_len);
    sample.y.reserve(units * spec.phrase_len);
    sample.contexts.reserve(units * spec.phrase_len);
    for (std::size_t u = 0; u < units; ++u) {
      const std::size_t pid = rng.below(spec.n_phrases);
      for (std::size_t pos = 0; pos < spec.phrase_len; ++pos) {
        sample.x.push_back(task.phrases[pid][pos]);
        sample.y.push_back(draw_from(task.dists[pid][pos], rng));
        sample.contexts.emplace_back(static_cast<int>(pid), static_cast<int>(pos));
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// serialization
// ---------------------------------------------------------------------------

inline constexpr int kTaskFormatVersion = 1;
inline constexpr int kDatasetFormatVersion = 1;

inline nlohmann::json task_spec_to_json(const TaskSpec& s) {
  return nlohmann::json{
      {"vocab_in", s.vocab_in},     {"vocab_out", s.vocab_out},
      {"n_phrases", s.n_phrases},   {"phrase_len", s.phrase_len},
      {"max_nonzero", s.max_nonzero}, {"min_len", s.min_len},
      {"max_len", s.max_len},       {"n_train", s.n_train},
      {"n_val", s.n_val},           {"n_test", s.n_test},
      {"seed", s.seed}};
}

inline TaskSpec task_spec_from_json(const nlohmann::json& j) {
  TaskSpec s;
  s.vocab_in = j.at("vocab_in").get<std::size_t>();
  s.vocab_out = j.at("vocab_out").get<std::size_t>();
  s.n_phrases = j.at("n_phrases").get<std::size_t>();
  s.phrase_len = j.at("phrase_len").get<std::size_t>();
  s.max_nonzero = j.at("max_nonzero").get<std::size_t>();
  s.min_len = j.at("min_len").get<std::size_t>();
  s.max_len = j.at("max_len").get<std::size_t>();
  s.n_train = j.at("n_train").get<std::size_t>();
  s.n_val = j.at("n_val").get<std::size_t>();
  s.n_test = j.at("n_test").get<std::size_t>();
  s.seed = j.at("seed").get<std::uint64_t>();
  return s;
}

// Canonical text: nlohmann keeps object keys sorted, and doubles print as
// shortest round-trip decimals, so save -> load -> save is byte-stable.
inline std::string task_to_string(const SynthTask& task) {
  nlohmann::json j;
  j["version"] = kTaskFormatVersion;
  j["spec"] = task_spec_to_json(task.spec);
  j["phrases"] = task.phrases;
  nlohmann::json dists = nlohmann::json::object();
  for (std::size_t pid = 0; pid < task.dists.size(); ++pid) {
    for (std::size_t pos = 0; pos < task.dists[pid].size(); ++pos) {
      nlohmann::json entries = nlohmann::json::array();
      for (const auto& [tok, p] : task.dists[pid][pos].entries) {
        entries.push_back(nlohmann::json::array({tok, p}));
      }
      dists[std::to_string(pid) + ":" + std::to_string(pos)] = std::move(entries);
    }
  }
  j["dists"] = std::move(dists);
  return j.dump() + "\n";
}

inline SynthTask task_from_string(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw std::runtime_error("task file: malformed JSON at byte " +
                             std::to_string(e.byte) + ": " + e.what());
  }
  try {
    const int version = j.at("version").get<int>();
    if (version != kTaskFormatVersion) {
      throw std::runtime_error("task file: format version " + std::to_string(version) +
                               " unsupported (want " +
                               std::to_string(kTaskFormatVersion) + ")");
    }
    SynthTask task;
    task.spec = task_spec_from_json(j.at("spec"));
    task.phrases = j.at("phrases").get<std::vector<std::vector<int>>>();
    task.dists.assign(task.spec.n_phrases,
                      std::vector<SparseDist>(task.spec.phrase_len));
    for (const auto& [key, entries] : j.at("dists").items()) {
      const auto colon = key.find(':');
      if (colon == std::string::npos) {
        throw std::runtime_error("task file: bad context key " + key);
      }
      const std::size_t pid = std::stoul(key.substr(0, colon));
      const std::size_t pos = std::stoul(key.substr(colon + 1));
      if (pid >= task.spec.n_phrases || pos >= task.spec.phrase_len) {
        throw std::runtime_error("task file: context " + key + " out of range");
      }
      SparseDist dist;
      for (const auto& pair : entries) {
        dist.entries.emplace_back(pair.at(0).get<int>(), pair.at(1).get<double>());
      }
      task.dists[pid][pos] = std::move(dist);
    }
    return task;
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error(std::string("task file: missing or mistyped field: ") +
                             e.what());
  }
}

inline std::uint64_t task_hash(const SynthTask& task) {
  return fnv1a64(task_to_string(task));
}

inline void write_file(const std::string& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open for writing: " + path);
  out << content;
  if (!out) throw std::runtime_error("write failed: " + path);
}

inline std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open: " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void save_task(const SynthTask& task, const std::string& path) {
  write_file(path, task_to_string(task));
}

inline SynthTask load_task(const std::string& path) {
  return task_from_string(read_file(path));
}

inline std::string hash_hex(std::uint64_t h) {
  static const char* digits = "0123456789abcdef";
  std::string s(16, '0');
  for (int i = 15; i >= 0; --i) {
    s[static_cast<std::size_t>(i)] = digits[h & 0xF];
    h >>= 4;
  }
  return s;
}

// Dataset text format: one header, then one record per line,
// `x tokens<TAB>y tokens<TAB>contexts`, contexts as phrase:position pairs.
inline std::string dataset_to_string(const std::vector<Sample>& samples,
                                     std::uint64_t task_hash_value) {
  std::ostringstream out;
  out << "#dataset v" << kDatasetFormatVersion << " task=" << hash_hex(task_hash_value)
      << " n=" << samples.size() << "\n";
  for (const auto& s : samples) {
    for (std::size_t i = 0; i < s.x.size(); ++i) out << (i ? " " : "") << s.x[i];
    out << '\t';
    for (std::size_t i = 0; i < s.y.size(); ++i) out << (i ? " " : "") << s.y[i];
    out << '\t';
    for (std::size_t i = 0; i < s.contexts.size(); ++i) {
      out << (i ? " " : "") << s.contexts[i].first << ':' << s.contexts[i].second;
    }
    out << '\n';
  }
  return out.str();
}

struct LoadedDataset {
  int version = 0;
  std::string task_hash_hex;
  std::vector<Sample> samples;
};

inline LoadedDataset dataset_from_string(const std::string& text) {
  LoadedDataset out;
  std::size_t offset = 0;
  auto fail = [&](const std::string& why) {
    throw std::runtime_error("dataset file: " + why + " at byte " +
                             std::to_string(offset));
  };
  std::size_t line_end = text.find('\n');
  if (line_end == std::string::npos) fail("missing header line");
  const std::string header = text.substr(0, line_end);
  std::size_t expected = 0;
  {
    std::istringstream hs(header);
    std::string tag, task_field, n_field;
    char v = 0;
    hs >> tag;
    if (tag != "#dataset") fail("unrecognized header tag '" + tag + "'");
    hs >> v >> out.version >> task_field >> n_field;
    if (!hs || v != 'v') fail("unreadable header");
    if (out.version != kDatasetFormatVersion) {
      throw std::runtime_error("dataset file: format version " +
                               std::to_string(out.version) + " unsupported (want " +
                               std::to_string(kDatasetFormatVersion) + ")");
    }
    if (task_field.rfind("task=", 0) != 0 || n_field.rfind("n=", 0) != 0) {
      fail("header missing task hash or record count");
    }
    out.task_hash_hex = task_field.substr(5);
    expected = std::stoul(n_field.substr(2));
  }
  offset = line_end + 1;
  while (offset < text.size()) {
    line_end = text.find('\n', offset);
    if (line_end == std::string::npos) fail("record missing trailing newline");
    const std::string line = text.substr(offset, line_end - offset);
    const std::size_t tab1 = line.find('\t');
    const std::size_t tab2 = tab1 == std::string::npos ? tab1 : line.find('\t', tab1 + 1);
    if (tab1 == std::string::npos || tab2 == std::string::npos) {
      fail("record needs three tab-separated fields");
    }
    Sample s;
    auto parse_ints = [&](const std::string& field, std::vector<int>& dst) {
      std::istringstream fs(field);
      int v = 0;
      while (fs >> v) dst.push_back(v);
      if (!fs.eof()) fail("non-numeric token");
    };
    parse_ints(line.substr(0, tab1), s.x);
    parse_ints(line.substr(tab1 + 1, tab2 - tab1 - 1), s.y);
    {
      std::istringstream fs(line.substr(tab2 + 1));
      std::string pair;
      while (fs >> pair) {
        const auto colon = pair.find(':');
        if (colon == std::string::npos) fail("context missing ':' separator");
        try {
          s.contexts.emplace_back(std::stoi(pair.substr(0, colon)),
                                  std::stoi(pair.substr(colon + 1)));
        } catch (const std::exception&) {
          fail("unparsable context '" + pair + "'");
        }
      }
    }
    if (s.x.size() != s.y.size() || s.x.size() != s.contexts.size() || s.x.empty()) {
      fail("field lengths disagree");
    }
    out.samples.push_back(std::move(s));
    offset = line_end + 1;
  }
  if (out.samples.size() != expected) {
    throw std::runtime_error("dataset file: header promised " + std::to_string(expected) +
                             " records, found " + std::to_string(out.samples.size()));
  }
  return out;
}

inline void save_dataset(const std::vector<Sample>& samples, std::uint64_t task_hash_value,
                         const std::string& path) {
  write_file(path, dataset_to_string(samples, task_hash_value));
}

inline LoadedDataset load_dataset(const std::string& path) {
  return dataset_from_string(read_file(path));
}

}  // namespace probtf
