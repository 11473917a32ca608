// Copyright (c) 2026 The polyroute Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

// Experiment configuration: a sectioned `key = value` text file.
//
//   [backbone]  model_dim, num_layers, ff_dim, max_seq_len, seed
//   [strategy]  method, methods, parametrization, num_skills, heads, rank,
//               group_period, temperature_start, temperature_end, soup_k
//   [tasks]     source (generator | path to .jsonl) plus generator fields
//   [trainer]   optimization, adaptation and probe settings, seeds, threads
//   [output]    dir
//
// Unknown sections or keys are errors. `#` and `;` start comments.

#include <charconv>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "polyroute/backbone.hpp"
#include "polyroute/method.hpp"
#include "polyroute/strategies.hpp"
#include "polyroute/tasks.hpp"
#include "polyroute/trainer.hpp"

namespace polyroute {

inline constexpr const char* kOutputDirEnv = "POLYROUTE_OUTPUT_DIR";

struct ExperimentConfig {
  BackboneConfig backbone;  // vocab_size comes from the task data
  Method method = Method::poly_s;
  std::vector<Method> methods{Method::shared, Method::poly, Method::poly_s, Method::private_mu};
  Parametrization parametrization = Parametrization::lora;
  std::size_t num_skills = 8;
  std::size_t heads = 4;
  std::size_t rank = 8;
  std::size_t group_period = 1;
  TemperatureSchedule temperature;
  std::size_t soup_k = 3;
  std::string task_source = "generator";
  GeneratorConfig generator;
  TrainerConfig trainer;
  std::vector<std::uint64_t> seeds{0, 1, 2, 3, 4};
  std::size_t threads = 1;
  std::string output_dir = "runs/default";

  ExperimentConfig() {
    trainer.steps = 6000;
    trainer.eval_every = 250;
    trainer.patience = 4;
    trainer.routing_lr = 0.1;
    trainer.probe_every = 50;
  }

  /// num_skills sizes routed inventories; private-mu and adapter-soup always
  /// hold one skill per training task.
  StrategyDims dims(Method m, std::size_t num_train_tasks) const {
    StrategyDims d;
    d.num_skills = (m == Method::private_mu || m == Method::adapter_soup) ? 0 : num_skills;
    d.heads = heads;
    d.num_train_tasks = num_train_tasks;
    d.model_dim = backbone.model_dim;
    d.soup_k = soup_k;
    return d;
  }

  ModelOptions model_options(std::uint64_t seed) const {
    ModelOptions o;
    o.parametrization = parametrization;
    o.rank = rank;
    o.group_period = group_period;
    o.schedule = temperature;
    o.seed = seed;
    return o;
  }

  TrainerConfig trainer_for(std::uint64_t seed) const {
    TrainerConfig t = trainer;
    t.seed = seed;
    return t;
  }

  void validate() const {
    if (backbone.model_dim == 0 || backbone.num_layers == 0 || backbone.max_seq_len < 2) {
      throw ConfigError("backbone.model_dim and backbone.num_layers must be positive, max_seq_len at least 2");
    }
    if (backbone.attention_heads == 0 || backbone.model_dim % backbone.attention_heads != 0) {
      throw ConfigError("backbone.model_dim must be divisible by backbone.attention_heads");
    }
    if (methods.empty()) throw ConfigError("strategy.methods must name at least one method");
    for (Method m : methods) {
      if (m == Method::full_ft) throw ConfigError("full-ft cannot be trained; use the count command");
    }
    if (method == Method::full_ft) throw ConfigError("full-ft cannot be trained; use the count command");
    if (heads == 0 || backbone.model_dim % heads != 0) {
      throw ConfigError("strategy.heads " + std::to_string(heads) + " must divide backbone.model_dim " +
                        std::to_string(backbone.model_dim));
    }
    if (parametrization == Parametrization::lora && rank == 0) throw ConfigError("strategy.rank must be positive");
    if (group_period == 0) throw ConfigError("strategy.group_period must be positive");
    if (!(temperature.start > 0.0) || !(temperature.end > 0.0)) {
      throw ConfigError("temperatures must be positive");
    }
    if (soup_k == 0) throw ConfigError("strategy.soup_k must be positive");
    if (task_source == "generator") generator.validate();
    if (trainer.batch_size == 0 || trainer.adapt_batch_size == 0) throw ConfigError("batch sizes must be positive");
    if (!(trainer.lr > 0.0) || !(trainer.adapt_lr > 0.0)) throw ConfigError("learning rates must be positive");
    if (!(trainer.routing_lr >= 0.0)) throw ConfigError("trainer.routing_lr must be non-negative");
    if (trainer.val_fraction < 0.0 || trainer.val_fraction >= 1.0) {
      throw ConfigError("trainer.val_fraction must lie in [0, 1)");
    }
    if (trainer.probe_batch == 0) throw ConfigError("trainer.probe_batch must be positive");
    if (seeds.empty()) throw ConfigError("trainer.seeds must list at least one seed");
    if (threads == 0) throw ConfigError("trainer.threads must be positive");
    if (output_dir.empty()) throw ConfigError("output.dir must not be empty");
  }
};

namespace detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

inline std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream in(s);
  std::string item;
  while (std::getline(in, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

template <class T>
T parse_number(const std::string& key, const std::string& value) {
  std::istringstream in(value);
  T out{};
  if constexpr (std::is_unsigned_v<T>) {
    if (!value.empty() && value.front() == '-') throw ConfigError(key + " must be non-negative, got '" + value + "'");
  }
  in >> out;
  if (!in || !in.eof()) throw ConfigError(key + ": cannot parse '" + value + "'");
  return out;
}

inline bool parse_bool(const std::string& key, const std::string& value) {
  if (value == "true" || value == "1" || value == "yes") return true;
  if (value == "false" || value == "0" || value == "no") return false;
  throw ConfigError(key + ": expected true or false, got '" + value + "'");
}

/// Shortest text that parses back to the same double.
inline std::string format_double(double v) {
  char buf[32];
  const auto r = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, r.ptr);
}

}  // namespace detail

/// Applies one `section.key = value` assignment.
inline void apply_setting(ExperimentConfig& c, const std::string& qualified, const std::string& raw) {
  using detail::parse_bool;
  using detail::parse_number;
  const std::string value = detail::trim(raw);
  const std::string& k = qualified;
  auto size = [&](std::size_t& dst) { dst = parse_number<std::size_t>(k, value); };
  auto u64 = [&](std::uint64_t& dst) { dst = parse_number<std::uint64_t>(k, value); };
  auto real = [&](double& dst) { dst = parse_number<double>(k, value); };

  if (k == "backbone.model_dim") return size(c.backbone.model_dim);
  if (k == "backbone.num_layers") return size(c.backbone.num_layers);
  if (k == "backbone.ff_dim") return size(c.backbone.ff_dim);
  if (k == "backbone.max_seq_len") return size(c.backbone.max_seq_len);
  if (k == "backbone.attention_heads") return size(c.backbone.attention_heads);
  if (k == "backbone.seed") return u64(c.backbone.seed);

  if (k == "strategy.method") {
    c.method = parse_method(value);
    return;
  }
  if (k == "strategy.methods") {
    c.methods.clear();
    for (const auto& name : detail::split_list(value)) c.methods.push_back(parse_method(name));
    return;
  }
  if (k == "strategy.parametrization") {
    c.parametrization = parse_parametrization(value);
    return;
  }
  if (k == "strategy.num_skills") return size(c.num_skills);
  if (k == "strategy.heads") return size(c.heads);
  if (k == "strategy.rank") return size(c.rank);
  if (k == "strategy.group_period") return size(c.group_period);
  if (k == "strategy.temperature_start") return real(c.temperature.start);
  if (k == "strategy.temperature_end") return real(c.temperature.end);
  if (k == "strategy.soup_k") return size(c.soup_k);

  if (k == "tasks.source") {
    c.task_source = value;
    return;
  }
  if (k == "tasks.num_skills") return size(c.generator.num_skills);
  if (k == "tasks.num_symbols") return size(c.generator.num_symbols);
  if (k == "tasks.num_train_tasks") return size(c.generator.num_train_tasks);
  if (k == "tasks.num_test_tasks") return size(c.generator.num_test_tasks);
  if (k == "tasks.skills_per_task") return size(c.generator.skills_per_task);
  if (k == "tasks.examples_per_task") return size(c.generator.examples_per_task);
  if (k == "tasks.sequence_length") return size(c.generator.sequence_length);
  if (k == "tasks.skill_support") return size(c.generator.skill_support);
  if (k == "tasks.seed") return u64(c.generator.seed);

  auto& t = c.trainer;
  if (k == "trainer.steps") return size(t.steps);
  if (k == "trainer.batch_size") return size(t.batch_size);
  if (k == "trainer.lr") return real(t.lr);
  if (k == "trainer.eval_every") return size(t.eval_every);
  if (k == "trainer.patience") return size(t.patience);
  if (k == "trainer.val_fraction") return real(t.val_fraction);
  if (k == "trainer.probe_every") return size(t.probe_every);
  if (k == "trainer.probe_batch") return size(t.probe_batch);
  if (k == "trainer.adapt_steps") return size(t.adapt_steps);
  if (k == "trainer.adapt_batch_size") return size(t.adapt_batch_size);
  if (k == "trainer.adapt_lr") return real(t.adapt_lr);
  if (k == "trainer.routing_lr") return real(t.routing_lr);
  if (k == "trainer.adapt_early_stopping") {
    t.adapt_early_stopping = parse_bool(k, value);
    return;
  }
  if (k == "trainer.adapt_eval_every") return size(t.adapt_eval_every);
  if (k == "trainer.k_shots") return size(t.k_shots);
  if (k == "trainer.seeds") {
    c.seeds.clear();
    for (const auto& s : detail::split_list(value)) c.seeds.push_back(parse_number<std::uint64_t>(k, s));
    return;
  }
  if (k == "trainer.threads") return size(c.threads);

  if (k == "output.dir") {
    c.output_dir = value;
    return;
  }
  throw ConfigError("unknown configuration key '" + k + "'");
}

/// Applies a `--set section.key=value` override.
inline void apply_override(ExperimentConfig& c, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos) throw ConfigError("override '" + assignment + "' is not of the form section.key=value");
  apply_setting(c, detail::trim(assignment.substr(0, eq)), assignment.substr(eq + 1));
}

inline ExperimentConfig parse_config(std::istream& in, const std::string& origin = "<config>") {
  ExperimentConfig c;
  std::string line, section;
  for (std::size_t lineno = 1; std::getline(in, line); ++lineno) {
    const auto hash = line.find_first_of("#;");
    if (hash != std::string::npos) line.erase(hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    try {
      if (line.front() == '[') {
        if (line.back() != ']') throw ConfigError("unterminated section header");
        section = detail::trim(line.substr(1, line.size() - 2));
        if (section != "backbone" && section != "strategy" && section != "tasks" && section != "trainer" &&
            section != "output") {
          throw ConfigError("unknown section [" + section + "]");
        }
        continue;
      }
      const auto eq = line.find('=');
      if (eq == std::string::npos) throw ConfigError("expected key = value");
      if (section.empty()) throw ConfigError("setting outside of a section");
      apply_setting(c, section + "." + detail::trim(line.substr(0, eq)), line.substr(eq + 1));
    } catch (const ConfigError& e) {
      throw ConfigError(origin + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return c;
}

/// Reads a config file, applies overrides and the output-dir environment
/// variable, then validates.
inline ExperimentConfig load_config(const std::string& path, const std::vector<std::string>& overrides = {}) {
  ExperimentConfig c;
  if (!path.empty()) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file " + path);
    c = parse_config(in, path);
  }
  for (const auto& o : overrides) apply_override(c, o);
  if (const char* env = std::getenv(kOutputDirEnv); env && *env) c.output_dir = env;
  c.validate();
  return c;
}

/// Canonical text form: every key, fixed order. Parsing it yields an
/// identical config.
inline std::string to_config_text(const ExperimentConfig& c) {
  using detail::format_double;
  std::ostringstream out;
  auto list = [](const auto& items, auto fmt) {
    std::string s;
    for (std::size_t i = 0; i < items.size(); ++i) s += (i ? "," : "") + fmt(items[i]);
    return s;
  };
  out << "[backbone]\n"
      << "model_dim = " << c.backbone.model_dim << "\n"
      << "num_layers = " << c.backbone.num_layers << "\n"
      << "ff_dim = " << c.backbone.ff_dim << "\n"
      << "max_seq_len = " << c.backbone.max_seq_len << "\n"
      << "attention_heads = " << c.backbone.attention_heads << "\n"
      << "seed = " << c.backbone.seed << "\n\n";
  out << "[strategy]\n"
      << "method = " << method_name(c.method) << "\n"
      << "methods = " << list(c.methods, [](Method m) { return std::string(method_name(m)); }) << "\n"
      << "parametrization = " << to_string(c.parametrization) << "\n"
      << "num_skills = " << c.num_skills << "\n"
      << "heads = " << c.heads << "\n"
      << "rank = " << c.rank << "\n"
      << "group_period = " << c.group_period << "\n"
      << "temperature_start = " << format_double(c.temperature.start) << "\n"
      << "temperature_end = " << format_double(c.temperature.end) << "\n"
      << "soup_k = " << c.soup_k << "\n\n";
  const auto& g = c.generator;
  out << "[tasks]\n"
      << "source = " << c.task_source << "\n"
      << "num_skills = " << g.num_skills << "\n"
      << "num_symbols = " << g.num_symbols << "\n"
      << "num_train_tasks = " << g.num_train_tasks << "\n"
      << "num_test_tasks = " << g.num_test_tasks << "\n"
      << "skills_per_task = " << g.skills_per_task << "\n"
      << "examples_per_task = " << g.examples_per_task << "\n"
      << "sequence_length = " << g.sequence_length << "\n"
      << "skill_support = " << g.skill_support << "\n"
      << "seed = " << g.seed << "\n\n";
  const auto& t = c.trainer;
  out << "[trainer]\n"
      << "steps = " << t.steps << "\n"
      << "batch_size = " << t.batch_size << "\n"
      << "lr = " << format_double(t.lr) << "\n"
      << "eval_every = " << t.eval_every << "\n"
      << "patience = " << t.patience << "\n"
      << "val_fraction = " << format_double(t.val_fraction) << "\n"
      << "probe_every = " << t.probe_every << "\n"
      << "probe_batch = " << t.probe_batch << "\n"
      << "adapt_steps = " << t.adapt_steps << "\n"
      << "adapt_batch_size = " << t.adapt_batch_size << "\n"
      << "adapt_lr = " << format_double(t.adapt_lr) << "\n"
      << "routing_lr = " << format_double(t.routing_lr) << "\n"
      << "adapt_early_stopping = " << (t.adapt_early_stopping ? "true" : "false") << "\n"
      << "adapt_eval_every = " << t.adapt_eval_every << "\n"
      << "k_shots = " << t.k_shots << "\n"
      << "seeds = " << list(c.seeds, [](std::uint64_t s) { return std::to_string(s); }) << "\n"
      << "threads = " << c.threads << "\n\n";
  out << "[output]\n"
      << "dir = " << c.output_dir << "\n";
  return out.str();
}

/// Task data named by the config: the generator or a JSONL file.
inline TaskSet load_task_source(const ExperimentConfig& c) {
  if (c.task_source == "generator") return generate_compositional_tasks(c.generator);
  return load_tasks(c.task_source);
}

}  // namespace polyroute
