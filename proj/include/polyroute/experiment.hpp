// Copyright (c) 2026 The polyroute Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

// Command implementations shared by the CLI and the acceptance suite:
// pretrain, adapt-eval, align, suite, plus the results table.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <exception>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "polyroute/checkpoint.hpp"
#include "polyroute/config.hpp"
#include "polyroute/trainer.hpp"

namespace polyroute {

struct ResultRow {
  std::string strategy;
  std::uint64_t seed = 0;
  std::string task;
  std::size_t k_shots = 0;
  Metrics metrics;
};

/// Per-strategy summary: metrics averaged over test tasks within a seed,
/// then mean and sample standard deviation across seeds.
struct Aggregate {
  std::string strategy;
  std::size_t seeds = 0;
  double exact_match_mean = 0.0, exact_match_std = 0.0;
  double token_accuracy_mean = 0.0, token_accuracy_std = 0.0;
  double perplexity_mean = 0.0, perplexity_std = 0.0;
};

inline std::pair<double, double> mean_std(const std::vector<double>& xs) {
  if (xs.empty()) return {0.0, 0.0};
  double mean = 0.0;
  for (double x : xs) mean += x;
  mean /= static_cast<double>(xs.size());
  if (xs.size() < 2) return {mean, 0.0};
  double ss = 0.0;
  for (double x : xs) ss += (x - mean) * (x - mean);
  return {mean, std::sqrt(ss / static_cast<double>(xs.size() - 1))};
}

struct ResultsTable {
  std::vector<ResultRow> rows;

  /// One entry per strategy, ordered by mean exact match (best first), then name.
  std::vector<Aggregate> aggregates() const {
    std::vector<std::string> order;
    std::map<std::string, std::map<std::uint64_t, std::vector<const ResultRow*>>> grouped;
    for (const auto& r : rows) {
      if (!grouped.count(r.strategy)) order.push_back(r.strategy);
      grouped[r.strategy][r.seed].push_back(&r);
    }
    std::vector<Aggregate> out;
    for (const auto& name : order) {
      std::vector<double> em, acc, ppl;
      for (const auto& [seed, rs] : grouped[name]) {
        double e = 0, a = 0, p = 0;
        for (const auto* r : rs) {
          e += r->metrics.exact_match;
          a += r->metrics.token_accuracy;
          p += r->metrics.perplexity;
        }
        const double n = static_cast<double>(rs.size());
        em.push_back(e / n);
        acc.push_back(a / n);
        ppl.push_back(p / n);
      }
      Aggregate g;
      g.strategy = name;
      g.seeds = em.size();
      std::tie(g.exact_match_mean, g.exact_match_std) = mean_std(em);
      std::tie(g.token_accuracy_mean, g.token_accuracy_std) = mean_std(acc);
      std::tie(g.perplexity_mean, g.perplexity_std) = mean_std(ppl);
      out.push_back(g);
    }
    std::stable_sort(out.begin(), out.end(), [](const Aggregate& a, const Aggregate& b) {
      if (a.exact_match_mean != b.exact_match_mean) return a.exact_match_mean > b.exact_match_mean;
      return a.strategy < b.strategy;
    });
    return out;
  }

  std::string rows_csv() const {
    std::ostringstream out;
    out.precision(17);
    out << "strategy,seed,task,k_shots,token_accuracy,exact_match,perplexity\n";
    for (const auto& r : rows) {
      out << r.strategy << ',' << r.seed << ',' << r.task << ',' << r.k_shots << ',' << r.metrics.token_accuracy << ','
          << r.metrics.exact_match << ',' << r.metrics.perplexity << '\n';
    }
    return out.str();
  }

  std::string summary_csv() const {
    std::ostringstream out;
    out.precision(17);
    out << "strategy,seeds,exact_match_mean,exact_match_std,token_accuracy_mean,token_accuracy_std,perplexity_mean,"
           "perplexity_std\n";
    for (const auto& g : aggregates()) {
      out << g.strategy << ',' << g.seeds << ',' << g.exact_match_mean << ',' << g.exact_match_std << ','
          << g.token_accuracy_mean << ',' << g.token_accuracy_std << ',' << g.perplexity_mean << ','
          << g.perplexity_std << '\n';
    }
    return out.str();
  }

  nlohmann::json to_json() const {
    nlohmann::json j;
    auto& rs = j["rows"] = nlohmann::json::array();
    for (const auto& r : rows) {
      rs.push_back({{"strategy", r.strategy},
                    {"seed", r.seed},
                    {"task", r.task},
                    {"k_shots", r.k_shots},
                    {"token_accuracy", r.metrics.token_accuracy},
                    {"exact_match", r.metrics.exact_match},
                    {"perplexity", r.metrics.perplexity}});
    }
    auto& ag = j["aggregates"] = nlohmann::json::array();
    for (const auto& g : aggregates()) {
      ag.push_back({{"strategy", g.strategy},
                    {"seeds", g.seeds},
                    {"exact_match_mean", g.exact_match_mean},
                    {"exact_match_std", g.exact_match_std},
                    {"token_accuracy_mean", g.token_accuracy_mean},
                    {"token_accuracy_std", g.token_accuracy_std},
                    {"perplexity_mean", g.perplexity_mean},
                    {"perplexity_std", g.perplexity_std}});
    }
    return j;
  }

  static ResultsTable from_json(const nlohmann::json& j) {
    ResultsTable t;
    for (const auto& r : j.at("rows")) {
      ResultRow row;
      row.strategy = r.at("strategy").get<std::string>();
      row.seed = r.at("seed").get<std::uint64_t>();
      row.task = r.at("task").get<std::string>();
      row.k_shots = r.at("k_shots").get<std::size_t>();
      row.metrics.token_accuracy = r.at("token_accuracy").get<double>();
      row.metrics.exact_match = r.at("exact_match").get<double>();
      row.metrics.perplexity = r.at("perplexity").get<double>();
      t.rows.push_back(row);
    }
    return t;
  }
};

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  out << text;
}

inline void write_results(const std::filesystem::path& dir, const ResultsTable& table) {
  write_text(dir / "results.csv", table.rows_csv());
  write_text(dir / "summary.csv", table.summary_csv());
  write_text(dir / "results.json", table.to_json().dump(2) + "\n");
}

/// A freshly pre-trained strategy.
struct PretrainedRun {
  AdaptedModel model;
  StrategyDescriptor strategy;
  ModelOptions options;
  TrainLog log;
  std::vector<AlignmentReport> probes;
};

inline BackboneConfig backbone_for(const ExperimentConfig& c, const TaskSet& set) {
  BackboneConfig b = c.backbone;
  b.vocab_size = set.vocab.size();
  b.validate();
  return b;
}

inline std::shared_ptr<const FrozenBackbone> make_backbone(const ExperimentConfig& c, const TaskSet& set) {
  return std::make_shared<const FrozenBackbone>(backbone_for(c, set));
}

inline PretrainedRun pretrain_strategy(const ExperimentConfig& c, const TaskSet& set,
                                       std::shared_ptr<const FrozenBackbone> backbone, Method method,
                                       std::uint64_t seed) {
  const auto train = set.names(Split::train_task);
  if (train.empty()) throw DataError("the task set has no train-task tasks");
  PretrainedRun run;
  run.strategy = build_strategy(method, c.dims(method, train.size()));
  run.options = c.model_options(seed);
  run.model = assemble_model(run.strategy, std::move(backbone), train, run.options);
  run.log = pretrain(run.model, run.strategy, set, c.trainer_for(seed), &run.probes);
  run.model.freeze_all();
  return run;
}

/// Few-shot adaptation and evaluation of every test task for every seed,
/// each job on its own model copy. Rows come back in (seed, task) order
/// whatever the thread count.
inline std::vector<ResultRow> adapt_and_evaluate(const AdaptedModel& trained, const StrategyDescriptor& strategy,
                                                 const TaskSet& set, const ExperimentConfig& c,
                                                 const std::vector<std::uint64_t>& seeds) {
  const auto tests = set.test_tasks();
  std::map<std::string, std::vector<Example>> train_examples;
  for (const auto* t : set.train_tasks()) train_examples[t->name] = t->examples;

  struct Job {
    std::uint64_t seed;
    const TaskSpec* task;
  };
  std::vector<Job> jobs;
  for (auto seed : seeds)
    for (const auto* t : tests) jobs.push_back({seed, t});
  std::vector<ResultRow> rows(jobs.size());
  std::vector<std::exception_ptr> errors(jobs.size());

  auto run_job = [&](std::size_t i) {
    try {
      const Job& job = jobs[i];
      const TrainerConfig tc = c.trainer_for(job.seed);
      const auto split = few_shot_split(*job.task, tc.k_shots, derive_seed(job.seed, hash_string(job.task->name)));
      TestTaskContext ctx{job.task->name, split.support, train_examples, job.seed};
      AdaptedModel model = init_test_task(strategy, trained, ctx);
      adapt(model, strategy, job.task->name, split.support, tc);
      rows[i] = {strategy.name(), job.seed, job.task->name, tc.k_shots, evaluate(model, job.task->name, split.query)};
    } catch (...) {
      errors[i] = std::current_exception();
    }
  };

  const std::size_t workers = std::min<std::size_t>(c.threads, jobs.size());
  if (workers <= 1) {
    for (std::size_t i = 0; i < jobs.size(); ++i) run_job(i);
  } else {
    std::atomic<std::size_t> next{0};
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w) {
      pool.emplace_back([&] {
        for (std::size_t i = next++; i < jobs.size(); i = next++) run_job(i);
      });
    }
    for (auto& t : pool) t.join();
  }
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
  return rows;
}

inline void write_train_outputs(const std::filesystem::path& dir, const TrainLog& log,
                                 const std::vector<AlignmentReport>& probes) {
  write_text(dir / "train_log.csv", log.steps_csv());
  write_text(dir / "eval_log.csv", log.evals_csv());
  write_text(dir / "train_log.json", log.to_json().dump(2) + "\n");
  if (!probes.empty()) {
    std::ostringstream csv;
    csv.precision(17);
    csv << "step,mean_off_diagonal,valid_pairs\n";
    nlohmann::json j = nlohmann::json::array();
    for (const auto& p : probes) {
      csv << p.step << ',';
      if (!std::isnan(p.mean_off_diagonal)) csv << p.mean_off_diagonal;
      csv << ',' << p.valid_pairs << '\n';
      j.push_back(p.to_json());
    }
    write_text(dir / "alignment_probes.csv", csv.str());
    write_text(dir / "alignment_probes.json", j.dump(2) + "\n");
  }
}

inline std::filesystem::path output_dir(const ExperimentConfig& c) { return std::filesystem::path(c.output_dir); }

/// pretrain: trains `strategy.method` with the first seed and writes the
/// checkpoint plus training logs.
inline std::filesystem::path cmd_pretrain(const ExperimentConfig& c) {
  const TaskSet set = load_task_source(c);
  const auto dir = output_dir(c);
  write_text(dir / "config.ini", to_config_text(c));
  auto run = pretrain_strategy(c, set, make_backbone(c, set), c.method, c.seeds.front());
  const auto ckpt = dir / "checkpoint";
  save_checkpoint(ckpt, run.model, run.strategy, run.options, set.vocab, set.names(Split::train_task));
  write_train_outputs(dir, run.log, run.probes);
  return ckpt;
}

inline Checkpoint load_matching_checkpoint(const std::filesystem::path& checkpoint, const TaskSet& set) {
  Checkpoint ck = load_checkpoint(checkpoint);
  if (!(ck.vocab == set.vocab)) throw DataError("task data vocabulary differs from the checkpoint vocabulary");
  if (ck.train_tasks != set.names(Split::train_task)) {
    throw DataError("task data train tasks differ from the checkpoint's");
  }
  return ck;
}

/// adapt-eval: every test task under every configured seed, from one checkpoint.
inline ResultsTable cmd_adapt_eval(const ExperimentConfig& c, const std::filesystem::path& checkpoint) {
  const TaskSet set = load_task_source(c);
  const Checkpoint ck = load_matching_checkpoint(checkpoint, set);
  if (set.test_tasks().empty()) std::cerr << "warning: no test-task tasks; writing an empty table\n";
  ResultsTable table;
  table.rows = adapt_and_evaluate(ck.model, ck.strategy, set, c, c.seeds);
  const auto dir = output_dir(c);
  write_text(dir / "config.ini", to_config_text(c));
  write_results(dir, table);
  return table;
}

/// align: gradient alignment of the checkpoint's training tasks.
inline AlignmentReport cmd_align(const ExperimentConfig& c, const std::filesystem::path& checkpoint) {
  const TaskSet set = load_task_source(c);
  Checkpoint ck = load_matching_checkpoint(checkpoint, set);
  const auto data = split_pretrain_data(set, c.trainer.val_fraction, ck.options.seed);
  prepare_phase(ck.model, ck.strategy, Phase::pretrain);
  AlignmentReport report = gradient_alignment(ck.model, data.tasks, data.train, c.trainer.probe_batch, ck.options.seed);
  ck.model.freeze_all();
  const auto dir = output_dir(c);
  write_text(dir / "alignment.csv", report.to_csv());
  write_text(dir / "alignment.json", report.to_json().dump(2) + "\n");
  return report;
}

/// suite: pretrain + adapt-eval for each configured method and seed on the
/// same task data; one table ordered by mean exact match.
inline ResultsTable cmd_suite(const ExperimentConfig& c) {
  const TaskSet set = load_task_source(c);
  const auto backbone = make_backbone(c, set);
  const auto dir = output_dir(c);
  write_text(dir / "config.ini", to_config_text(c));
  if (set.test_tasks().empty()) std::cerr << "warning: no test-task tasks; writing an empty table\n";
  ResultsTable table;
  for (Method m : c.methods) {
    for (auto seed : c.seeds) {
      auto run = pretrain_strategy(c, set, backbone, m, seed);
      write_train_outputs(dir / std::string(method_name(m)) / ("seed" + std::to_string(seed)), run.log, run.probes);
      auto rows = adapt_and_evaluate(run.model, run.strategy, set, c, {seed});
      table.rows.insert(table.rows.end(), rows.begin(), rows.end());
    }
  }
  write_results(dir, table);
  return table;
}

}  // namespace polyroute
