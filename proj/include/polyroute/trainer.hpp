// Copyright (c) 2026 The polyroute Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

// Two-phase optimization: multi-task pre-training over the training tasks,
// then independent few-shot adaptation per test task. Also the evaluation
// metrics and the gradient-alignment probe.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <numeric>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "polyroute/model.hpp"
#include "polyroute/strategies.hpp"
#include "polyroute/tasks.hpp"

namespace polyroute {

struct TrainerConfig {
  std::size_t steps = 1000;
  std::size_t batch_size = 16;
  double lr = 1e-2;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::size_t eval_every = 100;
  std::size_t patience = 5;  // evaluations without improvement before stopping
  double val_fraction = 0.1;
  std::size_t probe_every = 0;  // 0 disables alignment probes while pre-training
  std::size_t probe_batch = 32;
  std::size_t adapt_steps = 100;
  std::size_t adapt_batch_size = 16;
  double adapt_lr = 1e-2;
  double routing_lr = 0.0;  // routing logits in both phases; 0 uses lr / adapt_lr
  bool adapt_early_stopping = false;
  std::size_t adapt_eval_every = 10;
  std::size_t k_shots = 16;
  std::uint64_t seed = 0;
};

/// Adam with bias correction; moment buffers mirror the parameter list.
class Adam {
 public:
  Adam(std::vector<Tensor> params, double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : params_(std::move(params)), lr_(params_.size(), lr), beta1_(beta1), beta2_(beta2), eps_(eps) {
    for (const auto& p : params_) {
      m_.emplace_back(p.numel(), 0.0);
      v_.emplace_back(p.numel(), 0.0);
    }
  }

  /// Overrides the rate of every parameter in `group` that this optimizer owns.
  void set_lr(const std::vector<Tensor>& group, double lr) {
    for (const auto& g : group) {
      for (std::size_t i = 0; i < params_.size(); ++i) {
        if (params_[i].node() == g.node()) lr_[i] = lr;
      }
    }
  }

  void step() {
    ++t_;
    const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (std::size_t i = 0; i < params_.size(); ++i) {
      auto& p = params_[i];
      if (!p.has_grad()) continue;
      const auto g = p.grad();
      auto w = p.mutable_values();
      for (std::size_t j = 0; j < w.size(); ++j) {
        m_[i][j] = beta1_ * m_[i][j] + (1.0 - beta1_) * g[j];
        v_[i][j] = beta2_ * v_[i][j] + (1.0 - beta2_) * g[j] * g[j];
        w[j] -= lr_[i] * (m_[i][j] / c1) / (std::sqrt(v_[i][j] / c2) + eps_);
      }
    }
  }

  void zero_grad() {
    for (auto& p : params_) p.zero_grad();
  }

  std::size_t step_count() const { return t_; }
  const std::vector<Tensor>& params() const { return params_; }

 private:
  std::vector<Tensor> params_;
  std::vector<std::vector<double>> m_, v_;
  std::vector<double> lr_;
  double beta1_, beta2_, eps_;
  std::size_t t_ = 0;
};

struct Metrics {
  double token_accuracy = 0.0;
  double exact_match = 0.0;
  double perplexity = 0.0;
};

struct StepRecord {
  std::size_t step = 0;
  std::string phase;
  std::string task;
  double loss = 0.0;
  double temperature = 0.0;
  std::optional<double> alignment;
};

struct EvalRecord {
  std::size_t step = 0;
  std::string phase;
  std::string task;
  std::string split;
  double token_accuracy = 0.0;  // teacher-forced for validation records
  double perplexity = 0.0;
};

struct TrainLog {
  std::vector<StepRecord> steps;
  std::vector<EvalRecord> evals;
  std::size_t best_step = 0;
  double best_perplexity = std::numeric_limits<double>::infinity();
  bool stopped_early = false;

  std::string steps_csv() const {
    std::ostringstream out;
    out.precision(17);
    out << "step,phase,task,loss,temperature,alignment\n";
    for (const auto& r : steps) {
      out << r.step << ',' << r.phase << ',' << r.task << ',' << r.loss << ',' << r.temperature << ',';
      if (r.alignment) out << *r.alignment;
      out << '\n';
    }
    return out.str();
  }

  std::string evals_csv() const {
    std::ostringstream out;
    out.precision(17);
    out << "step,phase,task,split,token_accuracy,perplexity\n";
    for (const auto& r : evals) {
      out << r.step << ',' << r.phase << ',' << r.task << ',' << r.split << ',' << r.token_accuracy << ','
          << r.perplexity << '\n';
    }
    return out.str();
  }

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["best_step"] = best_step;
    j["best_perplexity"] = best_perplexity;
    j["stopped_early"] = stopped_early;
    auto& s = j["steps"] = nlohmann::json::array();
    for (const auto& r : steps) {
      nlohmann::json row{{"step", r.step}, {"phase", r.phase}, {"task", r.task}, {"loss", r.loss},
                         {"temperature", r.temperature}};
      row["alignment"] = r.alignment ? nlohmann::json(*r.alignment) : nlohmann::json(nullptr);
      s.push_back(row);
    }
    auto& e = j["evals"] = nlohmann::json::array();
    for (const auto& r : evals) {
      e.push_back({{"step", r.step}, {"phase", r.phase}, {"task", r.task}, {"split", r.split},
                   {"token_accuracy", r.token_accuracy}, {"perplexity", r.perplexity}});
    }
    return j;
  }
};

/// Pairwise cosine similarity of per-task gradients over the shared
/// adapter tensors. Entries involving a zero gradient are NaN and are left
/// out of the mean.
struct AlignmentReport {
  std::size_t step = 0;
  std::vector<std::string> tasks;
  std::vector<std::vector<double>> matrix;
  double mean_off_diagonal = std::numeric_limits<double>::quiet_NaN();
  std::size_t valid_pairs = 0;

  std::string to_csv() const {
    std::ostringstream out;
    out.precision(17);
    out << "task_a,task_b,cosine\n";
    for (std::size_t i = 0; i < tasks.size(); ++i)
      for (std::size_t j = 0; j < tasks.size(); ++j) {
        out << tasks[i] << ',' << tasks[j] << ',';
        if (!std::isnan(matrix[i][j])) out << matrix[i][j];
        out << '\n';
      }
    out << "mean_off_diagonal,,";
    if (!std::isnan(mean_off_diagonal)) out << mean_off_diagonal;
    out << '\n';
    return out.str();
  }

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["step"] = step;
    j["tasks"] = tasks;
    auto& m = j["matrix"] = nlohmann::json::array();
    for (const auto& row : matrix) {
      auto& r = m.emplace_back(nlohmann::json::array());
      for (double v : row) r.push_back(std::isnan(v) ? nlohmann::json(nullptr) : nlohmann::json(v));
    }
    j["mean_off_diagonal"] = std::isnan(mean_off_diagonal) ? nlohmann::json(nullptr) : nlohmann::json(mean_off_diagonal);
    j["valid_pairs"] = valid_pairs;
    return j;
  }
};

namespace detail {

inline std::vector<const Example*> pointers(const std::vector<Example>& examples) {
  std::vector<const Example*> out;
  out.reserve(examples.size());
  for (const auto& e : examples) out.push_back(&e);
  return out;
}

template <class Rng>
std::vector<const Example*> sample_batch(const std::vector<Example>& pool, std::size_t size, Rng& rng) {
  if (pool.size() <= size) return pointers(pool);
  std::uniform_int_distribution<std::size_t> pick(0, pool.size() - 1);
  std::vector<const Example*> out;
  for (std::size_t i = 0; i < size; ++i) out.push_back(&pool[pick(rng)]);
  return out;
}

using Snapshot = std::vector<std::vector<double>>;

inline Snapshot snapshot(const AdaptedModel& model) {
  Snapshot out;
  for (const auto& t : model.all_parameters()) out.emplace_back(t.values().begin(), t.values().end());
  return out;
}

inline void restore(AdaptedModel& model, const Snapshot& snap) {
  auto params = model.all_parameters();
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto dst = params[i].mutable_values();
    std::copy(snap[i].begin(), snap[i].end(), dst.begin());
  }
}

/// Teacher-forced perplexity and token accuracy of one task.
inline EvalRecord teacher_forced(const AdaptedModel& model, const std::string& task,
                                 const std::vector<Example>& examples) {
  NoGradGuard no_grad;
  const PackedBatch batch = pack_batch(pointers(examples), model.backbone->config().max_seq_len);
  const Tensor logits = model.eval_logits(batch, task);
  const double nll = softmax_cross_entropy(logits, batch.labels).item();
  const std::size_t v = logits.cols();
  std::size_t correct = 0;
  for (std::size_t i = 0; i < batch.labels.size(); ++i) {
    const double* row = logits.values().data() + i * v;
    if (std::max_element(row, row + v) - row == batch.labels[i]) ++correct;
  }
  EvalRecord r;
  r.task = task;
  r.perplexity = std::exp(nll);
  r.token_accuracy = static_cast<double>(correct) / static_cast<double>(batch.labels.size());
  return r;
}

}  // namespace detail

/// Per-task train/validation partition of the pre-training data.
struct PretrainData {
  std::vector<std::string> tasks;
  std::map<std::string, std::vector<Example>> train, validation;
};

inline PretrainData split_pretrain_data(const TaskSet& set, double val_fraction, std::uint64_t seed) {
  PretrainData data;
  for (const auto* task : set.train_tasks()) {
    data.tasks.push_back(task->name);
    std::vector<std::size_t> order(task->examples.size());
    std::iota(order.begin(), order.end(), 0);
    std::mt19937_64 rng(derive_seed(seed, hash_string(task->name)));
    std::shuffle(order.begin(), order.end(), rng);
    std::size_t n_val = static_cast<std::size_t>(std::floor(val_fraction * static_cast<double>(order.size())));
    if (val_fraction > 0.0 && order.size() >= 2) n_val = std::max<std::size_t>(n_val, 1);
    for (std::size_t i = 0; i < order.size(); ++i) {
      (i < n_val ? data.validation : data.train)[task->name].push_back(task->examples[order[i]]);
    }
  }
  if (data.tasks.empty()) throw DataError("pre-training needs at least one train task");
  return data;
}

/// Greedy-decoded accuracy, exact match, and teacher-forced perplexity.
inline Metrics evaluate(const AdaptedModel& model, const std::string& task, const std::vector<Example>& query) {
  Metrics m;
  if (query.empty()) return m;
  NoGradGuard no_grad;
  const AdapterView view = model.resolve_eval(task);
  std::size_t longest = 0;
  for (const auto& e : query) longest = std::max(longest, e.target.size() + 1);
  const auto decoded = model.backbone->greedy_decode(detail::pointers(query), longest, &view);
  std::size_t tokens = 0, correct = 0, exact = 0;
  for (std::size_t i = 0; i < query.size(); ++i) {
    std::vector<int> labels = query[i].target;
    labels.push_back(kEosId);
    bool all = true;
    for (std::size_t t = 0; t < labels.size(); ++t) {
      const bool ok = decoded[i][t] == labels[t];
      correct += ok;
      all = all && ok;
    }
    tokens += labels.size();
    exact += all;
  }
  m.token_accuracy = static_cast<double>(correct) / static_cast<double>(tokens);
  m.exact_match = static_cast<double>(exact) / static_cast<double>(query.size());
  const PackedBatch batch = pack_batch(detail::pointers(query), model.backbone->config().max_seq_len);
  m.perplexity = std::exp(model.backbone->loss(batch, &view).item());
  return m;
}

/// Pairwise cosine similarity of flattened per-task gradients. Pairs with a
/// zero-norm gradient are NaN and left out of the mean.
inline AlignmentReport alignment_from_gradients(const std::vector<std::string>& tasks,
                                                const std::vector<std::vector<double>>& grads) {
  if (grads.size() != tasks.size()) throw DimensionError("one gradient per task is required");
  AlignmentReport report;
  report.tasks = tasks;
  const std::size_t n = tasks.size();
  std::vector<double> norms(n);
  for (std::size_t i = 0; i < n; ++i) {
    double s = 0.0;
    for (double g : grads[i]) s += g * g;
    norms[i] = std::sqrt(s);
  }
  report.matrix.assign(n, std::vector<double>(n, std::numeric_limits<double>::quiet_NaN()));
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i; j < n; ++j) {
      if (norms[i] == 0.0 || norms[j] == 0.0) continue;
      double dot = 0.0;
      for (std::size_t k = 0; k < grads[i].size(); ++k) dot += grads[i][k] * grads[j][k];
      const double c = i == j ? 1.0 : std::clamp(dot / (norms[i] * norms[j]), -1.0, 1.0);
      report.matrix[i][j] = report.matrix[j][i] = c;
      if (i != j) {
        total += c;
        ++report.valid_pairs;
      }
    }
  }
  if (report.valid_pairs) report.mean_off_diagonal = total / static_cast<double>(report.valid_pairs);
  return report;
}

/// Gradient alignment between training tasks over the model's skill tensors,
/// with deterministic routing and a fixed probe batch per task.
inline AlignmentReport gradient_alignment(AdaptedModel& model, const std::vector<std::string>& tasks,
                                          const std::map<std::string, std::vector<Example>>& data,
                                          std::size_t probe_batch, std::uint64_t seed) {
  if (tasks.size() < 2) throw ConfigError("gradient alignment needs at least two training tasks");
  auto params = model.inventory.parameters();
  std::vector<bool> had_grad_flag;
  for (auto& p : params) {
    had_grad_flag.push_back(p.requires_grad());
    p.set_requires_grad(true);
  }
  auto all = model.all_parameters();
  std::vector<std::vector<double>> grads;
  for (const auto& task : tasks) {
    for (auto& p : all) p.zero_grad();
    auto it = data.find(task);
    if (it == data.end() || it->second.empty()) throw DataError("no probe data for task '" + task + "'");
    std::mt19937_64 rng(derive_seed(seed, hash_string(task)));
    const auto batch = pack_batch(detail::sample_batch(it->second, probe_batch, rng), model.backbone->config().max_seq_len);
    model.eval_loss(batch, task).backward();
    std::vector<double> flat;
    for (const auto& p : params) {
      if (p.has_grad()) {
        flat.insert(flat.end(), p.grad().begin(), p.grad().end());
      } else {
        flat.insert(flat.end(), p.numel(), 0.0);
      }
    }
    grads.push_back(std::move(flat));
  }
  for (auto& p : all) p.zero_grad();
  for (std::size_t i = 0; i < params.size(); ++i) params[i].set_requires_grad(had_grad_flag[i]);

  return alignment_from_gradients(tasks, grads);
}

/// Mean validation perplexity across tasks (the early-stopping signal).
inline double validation_perplexity(const AdaptedModel& model, const std::vector<std::string>& tasks,
                                    const std::map<std::string, std::vector<Example>>& validation, TrainLog& log,
                                    std::size_t step, const std::string& phase) {
  double total = 0.0;
  std::size_t counted = 0;
  for (const auto& task : tasks) {
    auto it = validation.find(task);
    if (it == validation.end() || it->second.empty()) continue;
    EvalRecord r = detail::teacher_forced(model, task, it->second);
    r.step = step;
    r.phase = phase;
    r.split = "validation";
    total += r.perplexity;
    ++counted;
    log.evals.push_back(r);
  }
  return counted ? total / static_cast<double>(counted) : std::numeric_limits<double>::quiet_NaN();
}

/// Multi-task pre-training. Single-task batches in round-robin task order,
/// examples sampled uniformly; early stopping on mean validation perplexity
/// restores the best parameters seen. Probe reports go to `probes` when given.
inline TrainLog pretrain(AdaptedModel& model, const StrategyDescriptor& strategy, const TaskSet& set,
                         const TrainerConfig& config, std::vector<AlignmentReport>* probes = nullptr) {
  const PretrainData data = split_pretrain_data(set, config.val_fraction, config.seed);
  auto params = prepare_phase(model, strategy, Phase::pretrain);
  Adam adam(params, config.lr, config.beta1, config.beta2, config.eps);
  if (model.router && config.routing_lr > 0.0) adam.set_lr(model.router->parameters(), config.routing_lr);
  std::mt19937_64 rng(derive_seed(config.seed, 10));
  TrainLog log;
  const std::size_t eval_every = config.eval_every ? config.eval_every : config.steps + 1;
  const double temp_start = model.router ? model.router->schedule().start : 1.0;
  const TemperatureSchedule schedule = model.router ? model.router->schedule() : TemperatureSchedule{temp_start, temp_start};

  detail::Snapshot best = detail::snapshot(model);
  std::size_t since_best = 0;
  auto check_validation = [&](std::size_t step) {
    const double ppl = validation_perplexity(model, data.tasks, data.validation, log, step, "pretrain");
    if (std::isnan(ppl)) return false;
    if (ppl < log.best_perplexity) {
      log.best_perplexity = ppl;
      log.best_step = step;
      best = detail::snapshot(model);
      since_best = 0;
    } else if (++since_best > config.patience) {
      return true;
    }
    return false;
  };
  check_validation(0);

  for (std::size_t step = 0; step < config.steps; ++step) {
    if (probes && config.probe_every && step % config.probe_every == 0) {
      auto report = gradient_alignment(model, data.tasks, data.train, config.probe_batch, config.seed);
      report.step = step;
      probes->push_back(report);
      log.steps.push_back({step, "probe", "", 0.0, 0.0, report.mean_off_diagonal});
    }
    const std::string& task = data.tasks[step % data.tasks.size()];
    const auto batch = pack_batch(detail::sample_batch(data.train.at(task), config.batch_size, rng),
                                  model.backbone->config().max_seq_len);
    const double temperature = schedule.at(step, config.steps);
    double value = std::numeric_limits<double>::quiet_NaN();
    try {
      Tensor loss = model.loss(batch, task, RoutingMode::train_sampled, temperature, rng);
      value = loss.item();
      adam.zero_grad();
      loss.backward();
    } catch (const NumericError& e) {
      detail::restore(model, best);
      throw TrainingError(std::string("pre-training diverged at step ") + std::to_string(step) + ": " + e.what());
    }
    adam.step();
    log.steps.push_back({step + 1, "pretrain", task, value, temperature, std::nullopt});
    if ((step + 1) % eval_every == 0 || step + 1 == config.steps) {
      if (check_validation(step + 1)) {
        log.stopped_early = true;
        break;
      }
    }
  }
  detail::restore(model, best);
  adam.zero_grad();
  return log;
}

/// Few-shot adaptation of a model produced by init_test_task. Routing is
/// deterministic. With early stopping the support set is split 80/20.
inline TrainLog adapt(AdaptedModel& model, const StrategyDescriptor& strategy, const std::string& task,
                      const std::vector<Example>& support, const TrainerConfig& config) {
  auto params = prepare_phase(model, strategy, Phase::finetune, task);
  TrainLog log;
  if (support.empty() || config.adapt_steps == 0 || params.empty()) return log;
  Adam adam(params, config.adapt_lr, config.beta1, config.beta2, config.eps);
  if (model.router && config.routing_lr > 0.0) adam.set_lr(model.router->parameters(), config.routing_lr);
  std::mt19937_64 rng(derive_seed(config.seed, hash_string(task) ^ 0x5eedULL));

  std::vector<Example> train = support, held_out;
  const bool early = config.adapt_early_stopping && support.size() >= 5;
  if (early) {
    const std::size_t n_val = std::max<std::size_t>(1, support.size() / 5);
    held_out.assign(support.end() - static_cast<std::ptrdiff_t>(n_val), support.end());
    train.resize(support.size() - n_val);
  }
  const std::vector<std::string> tasks{task};
  const std::map<std::string, std::vector<Example>> validation{{task, held_out}};
  detail::Snapshot best = detail::snapshot(model);
  std::size_t since_best = 0;
  if (early) {
    log.best_perplexity = validation_perplexity(model, tasks, validation, log, 0, "adapt");
  }
  for (std::size_t step = 0; step < config.adapt_steps; ++step) {
    const auto batch =
        pack_batch(detail::sample_batch(train, config.adapt_batch_size, rng), model.backbone->config().max_seq_len);
    double value = 0.0;
    try {
      Tensor loss = model.loss(batch, task, RoutingMode::eval_deterministic, 1.0, rng);
      value = loss.item();
      adam.zero_grad();
      loss.backward();
    } catch (const NumericError& e) {
      detail::restore(model, best);
      throw TrainingError(std::string("adaptation diverged at step ") + std::to_string(step) + ": " + e.what());
    }
    adam.step();
    log.steps.push_back({step + 1, "adapt", task, value, 0.0, std::nullopt});
    if (early && ((step + 1) % std::max<std::size_t>(1, config.adapt_eval_every) == 0 || step + 1 == config.adapt_steps)) {
      const double ppl = validation_perplexity(model, tasks, validation, log, step + 1, "adapt");
      if (ppl < log.best_perplexity) {
        log.best_perplexity = ppl;
        log.best_step = step + 1;
        best = detail::snapshot(model);
        since_best = 0;
      } else if (++since_best > config.patience) {
        log.stopped_early = true;
        break;
      }
    }
  }
  if (early) {
    detail::restore(model, best);
  } else {
    log.best_step = config.adapt_steps;
  }
  adam.zero_grad();
  return log;
}

}  // namespace polyroute
