// Copyright (c) 2026 The polyroute Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

// The method zoo. Each method is a declarative recipe saying how skills are
// combined while pre-training, which tensors train in each phase, and how
// the adapter for an unseen task is initialized before few-shot tuning.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <memory>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "polyroute/adapters.hpp"
#include "polyroute/backbone.hpp"
#include "polyroute/method.hpp"
#include "polyroute/model.hpp"
#include "polyroute/routing.hpp"

namespace polyroute {

enum class TestInit {
  keep,           // reuse the single pre-trained adapter
  average,        // mean of all skills
  fresh_routing,  // new routing row for the test task, skills kept
  soup,           // mean of the skills of the most similar training tasks
};

struct StrategyDescriptor {
  Method method = Method::shared;
  Combination combination = Combination::single;
  bool pretrain_skills = true;
  bool pretrain_routing = false;
  bool finetune_skills = true;
  bool finetune_routing = false;
  TestInit test_init = TestInit::keep;
  std::size_t num_skills = 1;
  std::size_t heads = 1;
  std::size_t soup_k = 3;

  std::string name() const { return std::string(method_name(method)); }
};

struct StrategyDims {
  std::size_t num_skills = 8;  // 0: method default (|T| for private-mu/adapter-soup, else 8)
  std::size_t heads = 8;
  std::size_t num_train_tasks = 1;
  std::size_t model_dim = 16;
  std::size_t soup_k = 3;
};

inline StrategyDescriptor build_strategy(Method method, const StrategyDims& dims) {
  if (method == Method::full_ft) throw ConfigError("full-ft is only available to the parameter accountant");
  if (dims.num_train_tasks == 0) throw ConfigError("strategies need at least one training task");
  StrategyDescriptor s;
  s.method = method;
  s.soup_k = dims.soup_k;
  const std::size_t skills = dims.num_skills ? dims.num_skills : 8;
  auto require_heads = [&](std::size_t h) {
    if (h == 0 || dims.model_dim % h != 0) {
      throw ConfigError("routing head count " + std::to_string(h) + " must divide model_dim " +
                        std::to_string(dims.model_dim));
    }
    return h;
  };
  switch (method) {
    case Method::shared:
      s.num_skills = 1;
      break;
    case Method::private_mu:
    case Method::adapter_soup:
      if (dims.num_skills != 0 && dims.num_skills != dims.num_train_tasks) {
        throw ConfigError(std::string(method_name(method)) + " needs one skill per training task (|S| = |T| = " +
                          std::to_string(dims.num_train_tasks) + ", got " + std::to_string(dims.num_skills) + ")");
      }
      s.num_skills = dims.num_train_tasks;
      s.combination = Combination::fixed;
      s.test_init = method == Method::private_mu ? TestInit::average : TestInit::soup;
      break;
    case Method::random_mu:
      s.num_skills = skills;
      s.combination = Combination::fixed;
      s.test_init = TestInit::average;
      break;
    case Method::poly:
    case Method::poly_z:
    case Method::poly_mu:
    case Method::poly_s:
    case Method::poly_s_z:
    case Method::mhr_mu: {
      const bool multi_head = method == Method::poly_s || method == Method::poly_s_z || method == Method::mhr_mu;
      s.num_skills = skills;
      s.heads = multi_head ? require_heads(dims.heads) : 1;
      s.combination = Combination::routed;
      s.pretrain_routing = true;
      if (method == Method::poly_mu || method == Method::mhr_mu) {
        s.test_init = TestInit::average;
      } else {
        s.test_init = TestInit::fresh_routing;
        s.finetune_routing = true;
        s.finetune_skills = method == Method::poly || method == Method::poly_s;
      }
      break;
    }
    case Method::full_ft:
      break;
  }
  if (s.soup_k == 0) throw ConfigError("adapter-soup top-k must be positive");
  return s;
}

/// Everything needed to assemble a model for one strategy.
struct ModelOptions {
  Parametrization parametrization = Parametrization::lora;
  std::size_t rank = 4;
  std::size_t group_period = 1;
  TemperatureSchedule schedule;
  std::uint64_t seed = 0;
};

/// Random-mu allocation: every row has exactly floor(|S|/2) ones.
inline FixedAllocation random_half_allocation(const std::vector<std::string>& tasks, std::size_t num_skills,
                                              std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  FixedAllocation a;
  a.tasks = tasks;
  for (std::size_t t = 0; t < tasks.size(); ++t) {
    std::vector<std::size_t> order(num_skills);
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng);
    std::vector<std::uint8_t> row(num_skills, 0);
    for (std::size_t i = 0; i < num_skills / 2; ++i) row[order[i]] = 1;
    a.rows.push_back(std::move(row));
  }
  return a;
}

inline FixedAllocation identity_allocation(const std::vector<std::string>& tasks) {
  FixedAllocation a;
  a.tasks = tasks;
  for (std::size_t t = 0; t < tasks.size(); ++t) {
    std::vector<std::uint8_t> row(tasks.size(), 0);
    row[t] = 1;
    a.rows.push_back(std::move(row));
  }
  return a;
}

/// Pre-training model for a strategy: fresh inventory, allocation or router.
inline AdaptedModel assemble_model(const StrategyDescriptor& strategy, std::shared_ptr<const FrozenBackbone> backbone,
                                   const std::vector<std::string>& train_tasks, const ModelOptions& options) {
  if (train_tasks.empty()) throw ConfigError("at least one training task is required");
  backbone->config().validate_heads(strategy.heads);
  AdaptedModel model;
  const auto sites = injection_sites(backbone->config(), options.parametrization);
  model.backbone = std::move(backbone);
  model.inventory =
      init_inventory(sites, strategy.num_skills, options.parametrization, options.rank, derive_seed(options.seed, 1));
  model.combination = strategy.combination;
  switch (strategy.combination) {
    case Combination::single: break;
    case Combination::fixed:
      model.allocation = strategy.method == Method::random_mu
                             ? random_half_allocation(train_tasks, strategy.num_skills, derive_seed(options.seed, 2))
                             : identity_allocation(train_tasks);
      break;
    case Combination::routed: {
      model.router = Router(sites.size(), options.group_period, strategy.num_skills, strategy.heads, options.schedule);
      std::mt19937_64 rng(derive_seed(options.seed, 3));
      for (const auto& t : train_tasks) model.router->add_task(t, rng);
      break;
    }
  }
  return model;
}

/// Tensors updated in a phase. Fine-tuning expects the model produced by
/// init_test_task; inference expects a collapsed model.
inline std::vector<Tensor> trainable_params(const AdaptedModel& model, const StrategyDescriptor& strategy, Phase phase,
                                            const std::string& test_task = {}) {
  std::vector<Tensor> out;
  const bool averaged = strategy.test_init != TestInit::fresh_routing;
  bool skills = false, routing = false;
  switch (phase) {
    case Phase::pretrain:
      skills = strategy.pretrain_skills;
      routing = strategy.pretrain_routing;
      break;
    case Phase::finetune:
      skills = averaged || strategy.finetune_skills;
      routing = !averaged && strategy.finetune_routing;
      break;
    case Phase::inference:
      skills = true;
      break;
  }
  if (skills) out = model.inventory.parameters();
  if (routing && model.router) {
    if (phase == Phase::pretrain) {
      for (auto& t : model.router->parameters()) out.push_back(t);
    } else {
      for (auto& t : model.router->task_rows(test_task)) out.push_back(t);
    }
  }
  return out;
}

inline std::size_t census(const std::vector<Tensor>& tensors) {
  std::size_t n = 0;
  for (const auto& t : tensors) n += t.numel();
  return n;
}

/// Marks exactly the phase's trainable tensors as requiring gradients.
inline std::vector<Tensor> prepare_phase(AdaptedModel& model, const StrategyDescriptor& strategy, Phase phase,
                                         const std::string& test_task = {}) {
  model.freeze_all();
  auto params = trainable_params(model, strategy, phase, test_task);
  for (auto& t : params) t.set_requires_grad(true);
  return params;
}

/// Mean-pooled encoder output of the bare backbone, averaged over inputs.
inline std::vector<double> task_embedding(const FrozenBackbone& backbone, const std::vector<Example>& examples) {
  if (examples.empty()) throw DataError("cannot embed a task without examples");
  NoGradGuard no_grad;
  const std::size_t d = backbone.config().model_dim;
  std::vector<double> acc(d, 0.0);
  std::vector<const Example*> ptrs;
  for (const auto& e : examples) ptrs.push_back(&e);
  const PackedBatch batch = pack_batch(ptrs, backbone.config().max_seq_len);
  const Tensor enc = backbone.encode(batch, nullptr);
  for (const auto& seg : batch.enc_segments) {
    for (std::size_t i = 0; i < seg.q_len; ++i)
      for (std::size_t c = 0; c < d; ++c) acc[c] += enc.values()[(seg.q_offset + i) * d + c] / static_cast<double>(seg.q_len);
  }
  for (auto& x : acc) x /= static_cast<double>(examples.size());
  return acc;
}

inline double cosine(const std::vector<double>& a, const std::vector<double>& b) {
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  if (na == 0.0 || nb == 0.0) return 0.0;
  return dot / std::sqrt(na * nb);
}

/// Indices of the k most similar entries; equal similarity goes to the
/// lower index.
inline std::vector<std::size_t> top_k_similar(const std::vector<double>& similarity, std::size_t k) {
  if (k > similarity.size()) {
    throw ConfigError("adapter-soup top-k " + std::to_string(k) + " exceeds " + std::to_string(similarity.size()) +
                      " training tasks");
  }
  std::vector<std::size_t> order(similarity.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return similarity[a] > similarity[b]; });
  order.resize(k);
  return order;
}

/// Inputs available for initializing an unseen task.
struct TestTaskContext {
  std::string name;
  std::vector<Example> support;
  /// Training examples per training task (AdapterSoup similarity only).
  std::map<std::string, std::vector<Example>> train_examples;
  std::uint64_t seed = 0;
};

inline AdaptedModel init_test_task(const StrategyDescriptor& strategy, const AdaptedModel& trained,
                                   const TestTaskContext& ctx) {
  AdaptedModel out;
  out.backbone = trained.backbone;
  switch (strategy.test_init) {
    case TestInit::keep:
      out = trained.clone();
      break;
    case TestInit::average:
      out.inventory = average_inventory(trained.inventory);
      out.combination = Combination::single;
      break;
    case TestInit::fresh_routing: {
      out = trained.clone();
      std::mt19937_64 rng(derive_seed(ctx.seed, hash_string(ctx.name)));
      out.router->add_task(ctx.name, rng);
      break;
    }
    case TestInit::soup: {
      const auto& alloc = trained.allocation.value();
      if (strategy.soup_k > alloc.tasks.size()) {
        throw ConfigError("adapter-soup top-k " + std::to_string(strategy.soup_k) + " exceeds " +
                          std::to_string(alloc.tasks.size()) + " training tasks");
      }
      const auto target = task_embedding(*trained.backbone, ctx.support);
      std::vector<double> similarity;
      for (const auto& task : alloc.tasks) {
        auto it = ctx.train_examples.find(task);
        if (it == ctx.train_examples.end()) throw DataError("no training examples for task '" + task + "'");
        similarity.push_back(cosine(task_embedding(*trained.backbone, it->second), target));
      }
      const auto chosen = top_k_similar(similarity, strategy.soup_k);
      std::vector<std::vector<Skill>> skills;
      for (std::size_t s = 0; s < trained.inventory.num_sites(); ++s) {
        std::vector<Skill> selected;
        for (auto t : chosen) {
          const auto& row = alloc.rows[t];
          const auto skill = static_cast<std::size_t>(std::find(row.begin(), row.end(), 1) - row.begin());
          selected.push_back(trained.inventory.at(s).at(skill));
        }
        skills.push_back({average_skills(selected)});
      }
      out.inventory = SkillInventory(trained.inventory.parametrization(), trained.inventory.rank(),
                                     trained.inventory.sites(), std::move(skills));
      out.combination = Combination::single;
      break;
    }
  }
  return out;
}

}  // namespace polyroute
