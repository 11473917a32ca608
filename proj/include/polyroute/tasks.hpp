// Copyright (c) 2026 The polyroute Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

// Task data: vocabulary, the synthetic compositional generator, JSONL
// ingestion/export and few-shot splits.
//
// A generator skill is a bijection over the symbol tokens that moves a
// small random cycle of symbols and fixes the rest. A task owns kappa
// skills and maps every input symbol through them in ascending skill order,
// so the target is a position-wise relabeling of the input.

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <map>
#include <numeric>
#include <optional>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "polyroute/backbone.hpp"
#include "polyroute/error.hpp"

namespace polyroute {

class Vocabulary {
 public:
  Vocabulary() : tokens_{"<pad>", "<bos>", "<eos>", "<unk>"} { reindex(); }

  /// Reserved tokens followed by the given symbols in order.
  explicit Vocabulary(const std::vector<std::string>& symbols) : Vocabulary() {
    for (const auto& s : symbols) add(s);
  }

  int add(const std::string& token) {
    if (auto it = ids_.find(token); it != ids_.end()) return it->second;
    tokens_.push_back(token);
    ids_[token] = static_cast<int>(tokens_.size() - 1);
    return ids_[token];
  }

  int id(const std::string& token) const {
    auto it = ids_.find(token);
    return it == ids_.end() ? kUnkId : it->second;
  }
  const std::string& token(int id) const { return tokens_.at(static_cast<std::size_t>(id)); }
  std::size_t size() const { return tokens_.size(); }
  const std::vector<std::string>& tokens() const { return tokens_; }

  std::vector<int> tokenize(const std::string& text) const {
    std::istringstream in(text);
    std::vector<int> ids;
    for (std::string tok; in >> tok;) ids.push_back(id(tok));
    return ids;
  }

  std::string detokenize(const std::vector<int>& ids) const {
    std::string out;
    for (int i : ids) {
      if (!out.empty()) out += ' ';
      out += token(i);
    }
    return out;
  }

  nlohmann::json to_json() const {
    nlohmann::json j = nlohmann::json::object();
    for (std::size_t i = 0; i < tokens_.size(); ++i) j[tokens_[i]] = i;
    return j;
  }

  static Vocabulary from_json(const nlohmann::json& j) {
    std::vector<std::string> tokens(j.size());
    for (auto it = j.begin(); it != j.end(); ++it) {
      const auto id = it.value().get<std::size_t>();
      if (id >= tokens.size()) throw DataError("vocabulary ids must be dense");
      tokens[id] = it.key();
    }
    if (tokens.size() < 4 || tokens[0] != "<pad>" || tokens[1] != "<bos>" || tokens[2] != "<eos>" ||
        tokens[3] != "<unk>") {
      throw DataError("vocabulary must reserve ids 0..3 for <pad> <bos> <eos> <unk>");
    }
    return Vocabulary(std::vector<std::string>(tokens.begin() + 4, tokens.end()));
  }

  bool operator==(const Vocabulary& other) const { return tokens_ == other.tokens_; }

 private:
  void reindex() {
    ids_.clear();
    for (std::size_t i = 0; i < tokens_.size(); ++i) ids_[tokens_[i]] = static_cast<int>(i);
  }

  std::vector<std::string> tokens_;
  std::map<std::string, int> ids_;
};

enum class Split { train_task, test_task };

inline std::string to_string(Split s) { return s == Split::train_task ? "train-task" : "test-task"; }

inline Split parse_split(const std::string& s) {
  if (s == "train-task") return Split::train_task;
  if (s == "test-task") return Split::test_task;
  throw DataError("unknown split '" + s + "' (expected train-task or test-task)");
}

struct TaskSpec {
  std::string name;
  Split split = Split::train_task;
  std::vector<Example> examples;
  std::optional<std::vector<std::uint8_t>> truth_allocation;
};

struct TaskSet {
  Vocabulary vocab;
  std::vector<TaskSpec> tasks;

  std::vector<const TaskSpec*> with_split(Split s) const {
    std::vector<const TaskSpec*> out;
    for (const auto& t : tasks)
      if (t.split == s) out.push_back(&t);
    return out;
  }
  std::vector<const TaskSpec*> train_tasks() const { return with_split(Split::train_task); }
  std::vector<const TaskSpec*> test_tasks() const { return with_split(Split::test_task); }

  std::vector<std::string> names(Split s) const {
    std::vector<std::string> out;
    for (const auto* t : with_split(s)) out.push_back(t->name);
    return out;
  }

  const TaskSpec& find(const std::string& name) const {
    for (const auto& t : tasks)
      if (t.name == name) return t;
    throw DataError("unknown task '" + name + "'");
  }

  /// Non-empty tasks, unique names, so train and test names are disjoint.
  void validate() const {
    if (tasks.empty()) throw DataError("no tasks");
    std::set<std::string> seen;
    for (const auto& t : tasks) {
      if (t.examples.empty()) throw DataError("task '" + t.name + "' has no examples");
      if (!seen.insert(t.name).second) throw DataError("task '" + t.name + "' appears in more than one split");
    }
  }

  bool operator==(const TaskSet& other) const {
    if (!(vocab == other.vocab) || tasks.size() != other.tasks.size()) return false;
    for (std::size_t i = 0; i < tasks.size(); ++i) {
      const auto &a = tasks[i], &b = other.tasks[i];
      if (a.name != b.name || a.split != b.split || a.examples != b.examples ||
          a.truth_allocation != b.truth_allocation) {
        return false;
      }
    }
    return true;
  }
};

struct GeneratorConfig {
  std::size_t num_skills = 8;  // G
  std::size_t num_symbols = 12;
  std::size_t num_train_tasks = 20;
  std::size_t num_test_tasks = 5;
  std::size_t skills_per_task = 3;  // kappa
  std::size_t examples_per_task = 256;
  std::size_t sequence_length = 8;
  std::size_t skill_support = 3;  // symbols moved by one skill
  std::uint64_t seed = 7;

  void validate() const {
    if (num_skills == 0 || skills_per_task == 0) throw ConfigError("generator needs G >= 1 and kappa >= 1");
    if (skills_per_task > num_skills) {
      throw ConfigError("skills_per_task (" + std::to_string(skills_per_task) + ") exceeds num_skills (" +
                        std::to_string(num_skills) + ")");
    }
    if (num_symbols < 2 || skill_support < 2 || skill_support > num_symbols) {
      throw ConfigError("generator needs 2 <= skill_support <= num_symbols");
    }
    if (num_train_tasks == 0 || examples_per_task == 0 || sequence_length == 0) {
      throw ConfigError("generator needs at least one train task, example and symbol per sequence");
    }
  }
};

/// A generator skill as a permutation of symbol indices.
using SymbolMap = std::vector<std::size_t>;

inline std::vector<SymbolMap> generator_skills(const GeneratorConfig& config) {
  std::mt19937_64 rng(config.seed);
  std::vector<SymbolMap> skills;
  for (std::size_t g = 0; g < config.num_skills; ++g) {
    SymbolMap map(config.num_symbols);
    std::iota(map.begin(), map.end(), 0);
    std::vector<std::size_t> symbols = map;
    std::shuffle(symbols.begin(), symbols.end(), rng);
    for (std::size_t i = 0; i < config.skill_support; ++i) {
      map[symbols[i]] = symbols[(i + 1) % config.skill_support];
    }
    skills.push_back(std::move(map));
  }
  return skills;
}

inline std::string symbol_name(std::size_t i) {
  std::string digits = std::to_string(i);
  if (digits.size() < 2) digits.insert(0, 2 - digits.size(), '0');
  return "s" + digits;
}

inline constexpr int kFirstSymbolId = 4;

/// Maps symbol ids through the allocated skills in ascending skill order.
inline std::vector<int> apply_skills(const std::vector<int>& input, const std::vector<std::uint8_t>& allocation,
                                     const std::vector<SymbolMap>& skills) {
  std::vector<int> out = input;
  for (std::size_t g = 0; g < skills.size(); ++g) {
    if (!allocation[g]) continue;
    for (auto& tok : out) tok = static_cast<int>(skills[g][static_cast<std::size_t>(tok - kFirstSymbolId)]) + kFirstSymbolId;
  }
  return out;
}

inline TaskSet generate_compositional_tasks(const GeneratorConfig& config) {
  config.validate();
  std::vector<std::string> symbols;
  for (std::size_t i = 0; i < config.num_symbols; ++i) symbols.push_back(symbol_name(i));
  TaskSet set{Vocabulary(symbols), {}};
  const auto skills = generator_skills(config);
  std::mt19937_64 rng(config.seed ^ 0xA5A5A5A5ULL);

  std::set<std::vector<std::uint8_t>> used;
  auto draw_allocation = [&]() {
    std::vector<std::uint8_t> alloc;
    for (int attempt = 0; attempt < 1000; ++attempt) {
      std::vector<std::size_t> order(config.num_skills);
      std::iota(order.begin(), order.end(), 0);
      std::shuffle(order.begin(), order.end(), rng);
      alloc.assign(config.num_skills, 0);
      for (std::size_t i = 0; i < config.skills_per_task; ++i) alloc[order[i]] = 1;
      if (used.insert(alloc).second) return alloc;
    }
    return alloc;  // every combination taken: reuse one
  };

  std::uniform_int_distribution<std::size_t> symbol(0, config.num_symbols - 1);
  auto make_task = [&](const std::string& name, Split split) {
    TaskSpec task{name, split, {}, draw_allocation()};
    for (std::size_t e = 0; e < config.examples_per_task; ++e) {
      Example ex;
      for (std::size_t i = 0; i < config.sequence_length; ++i) ex.input.push_back(static_cast<int>(symbol(rng)) + kFirstSymbolId);
      ex.target = apply_skills(ex.input, *task.truth_allocation, skills);
      task.examples.push_back(std::move(ex));
    }
    set.tasks.push_back(std::move(task));
  };
  for (std::size_t t = 0; t < config.num_train_tasks; ++t) make_task("train" + std::to_string(t), Split::train_task);
  for (std::size_t t = 0; t < config.num_test_tasks; ++t) make_task("test" + std::to_string(t), Split::test_task);
  return set;
}

/// Reads {task, split, input, target[, truth_allocation]} lines. Symbols
/// are whitespace tokens; the vocabulary holds them in sorted order after
/// the reserved ids.
inline TaskSet load_tasks(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open task file " + path);
  struct Row {
    std::string task, split, input, target;
    std::optional<std::vector<std::uint8_t>> truth;
  };
  std::vector<Row> rows;
  std::set<std::string> symbols;
  std::string line;
  for (std::size_t lineno = 1; std::getline(in, line); ++lineno) {
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    Row row;
    try {
      const auto j = nlohmann::json::parse(line);
      row.task = j.at("task").get<std::string>();
      row.split = j.at("split").get<std::string>();
      row.input = j.at("input").get<std::string>();
      row.target = j.at("target").get<std::string>();
      if (j.contains("truth_allocation")) row.truth = j["truth_allocation"].get<std::vector<std::uint8_t>>();
    } catch (const nlohmann::json::exception& e) {
      throw DataError(path + ":" + std::to_string(lineno) + ": malformed task line: " + e.what());
    }
    try {
      parse_split(row.split);
    } catch (const DataError& e) {
      throw DataError(path + ":" + std::to_string(lineno) + ": " + e.what());
    }
    for (const auto* text : {&row.input, &row.target}) {
      std::istringstream toks(*text);
      for (std::string tok; toks >> tok;) symbols.insert(tok);
    }
    rows.push_back(std::move(row));
  }
  if (rows.empty()) throw DataError("no tasks in " + path);
  TaskSet set;
  for (const auto& s : symbols) {
    if (s == "<pad>" || s == "<bos>" || s == "<eos>" || s == "<unk>") continue;
    set.vocab.add(s);
  }
  std::map<std::string, std::size_t> index;
  for (const auto& row : rows) {
    const Split split = parse_split(row.split);
    auto [it, inserted] = index.try_emplace(row.task, set.tasks.size());
    if (inserted) set.tasks.push_back(TaskSpec{row.task, split, {}, row.truth});
    auto& task = set.tasks[it->second];
    if (task.split != split) throw DataError("task '" + row.task + "' appears in more than one split");
    task.examples.push_back({set.vocab.tokenize(row.input), set.vocab.tokenize(row.target)});
  }
  set.validate();
  return set;
}

inline void export_tasks(const TaskSet& set, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write task file " + path);
  for (const auto& task : set.tasks) {
    for (const auto& ex : task.examples) {
      nlohmann::json j;
      j["task"] = task.name;
      j["split"] = to_string(task.split);
      j["input"] = set.vocab.detokenize(ex.input);
      j["target"] = set.vocab.detokenize(ex.target);
      if (task.truth_allocation) j["truth_allocation"] = *task.truth_allocation;
      out << j.dump() << '\n';
    }
  }
}

struct FewShotSplit {
  std::vector<Example> support;
  std::vector<Example> query;
};

inline FewShotSplit few_shot_split(const TaskSpec& task, std::size_t k_shots, std::uint64_t seed) {
  if (k_shots >= task.examples.size()) {
    throw DataError("k_shots " + std::to_string(k_shots) + " must be smaller than the " +
                    std::to_string(task.examples.size()) + " examples of task '" + task.name + "'");
  }
  std::vector<std::size_t> order(task.examples.size());
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  FewShotSplit split;
  for (std::size_t i = 0; i < order.size(); ++i) {
    (i < k_shots ? split.support : split.query).push_back(task.examples[order[i]]);
  }
  return split;
}

}  // namespace polyroute
