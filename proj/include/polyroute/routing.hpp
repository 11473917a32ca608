// Copyright (c) 2026 The polyroute Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

// Task-skill routing.
//
// For every routing group there is a logit tensor Z of shape |T| x |S| x h,
// stored here as one |S| x h row per task. A forward pass relaxes the task's
// row (Gumbel-sigmoid while training, plain sigmoid otherwise), normalizes
// each head column to sum to one, and mixes the skills of every site in the
// group: head k averages row-block k of all skills with the weights in
// column k. With h = 1 this is the single-head weighted average.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "polyroute/adapters.hpp"
#include "polyroute/error.hpp"
#include "polyroute/tensor.hpp"

namespace polyroute {

enum class RoutingMode { train_sampled, eval_deterministic };

inline constexpr double kNormalizeEps = 1e-12;

/// Column-wise normalization alpha_ik = z_ik / max(sum_j z_jk, eps). The
/// floor only guards vanishing columns; a column that sums to exactly zero
/// becomes uniform 1/|S| and passes no gradient.
inline Tensor normalize_columns(const Tensor& zhat, double eps = kNormalizeEps) {
  detail::require_matrix(zhat, "normalize_columns");
  const std::size_t skills = zhat.rows(), heads = zhat.cols();
  const auto z = zhat.values();
  std::vector<double> out(z.size());
  std::vector<double> denom(heads, 0.0);
  std::vector<bool> fallback(heads, false), floored(heads, false);
  for (std::size_t k = 0; k < heads; ++k) {
    double total = 0.0;
    for (std::size_t i = 0; i < skills; ++i) {
      if (z[i * heads + k] < 0.0) throw NumericError("normalize_columns expects nonnegative entries");
      total += z[i * heads + k];
    }
    fallback[k] = total == 0.0;
    floored[k] = total < eps;
    denom[k] = std::max(total, eps);
    for (std::size_t i = 0; i < skills; ++i) {
      out[i * heads + k] = fallback[k] ? 1.0 / static_cast<double>(skills) : z[i * heads + k] / denom[k];
    }
  }
  return detail::make_result("normalize_columns", zhat.shape(), std::move(out), {zhat},
                             [skills, heads, denom, fallback, floored](Node& self) {
                               const auto& zv = self.parents[0]->value;
                               auto& g = detail::parent_grad(self, 0);
                               for (std::size_t k = 0; k < heads; ++k) {
                                 if (fallback[k]) continue;
                                 const double s = denom[k];
                                 double weighted = 0.0;
                                 if (!floored[k]) {
                                   for (std::size_t i = 0; i < skills; ++i) weighted += self.grad[i * heads + k] * zv[i * heads + k];
                                 }
                                 for (std::size_t j = 0; j < skills; ++j) {
                                   g[j * heads + k] += self.grad[j * heads + k] / s - weighted / (s * s);
                                 }
                               }
                             });
}

/// Head-wise weighted combination of same-shaped matrices. Row block k of
/// the result is sum_i weights[i, k] * skills[i][block k]; with one head it
/// is the plain weighted sum. Differentiable in both the weights and the
/// skill tensors.
inline Tensor mix_rows(const std::vector<Tensor>& skills, const Tensor& weights) {
  if (skills.empty()) throw DimensionError("mix_rows needs at least one skill");
  detail::require_matrix(weights, "mix_rows");
  const std::size_t count = skills.size(), heads = weights.cols();
  if (weights.rows() != count) {
    throw DimensionError("mix_rows: " + std::to_string(weights.rows()) + " weight rows for " +
                         std::to_string(count) + " skills");
  }
  const Shape shape = skills.front().shape();
  for (const auto& s : skills) {
    detail::require_matrix(s, "mix_rows");
    if (s.shape() != shape) throw DimensionError("mix_rows: skills must share a shape");
  }
  const std::size_t d = shape[0], r = shape[1];
  if (d % heads != 0) {
    throw ConfigError("mix_rows: " + std::to_string(heads) + " heads do not divide " + std::to_string(d) + " rows");
  }
  const std::size_t block = d / heads;
  const auto w = weights.values();
  std::vector<double> out(d * r, 0.0);
  for (std::size_t i = 0; i < count; ++i) {
    const auto sv = skills[i].values();
    for (std::size_t k = 0; k < heads; ++k) {
      const double wk = w[i * heads + k];
      for (std::size_t e = k * block * r; e < (k + 1) * block * r; ++e) out[e] += wk * sv[e];
    }
  }
  std::vector<Tensor> parents = skills;
  parents.push_back(weights);
  return detail::make_result("mix_rows", shape, std::move(out), std::move(parents),
                             [count, heads, block, r](Node& self) {
                               const auto& w = self.parents[count]->value;
                               const bool want_w = detail::wants_grad(self, count);
                               std::vector<double>* gw = want_w ? &detail::parent_grad(self, count) : nullptr;
                               for (std::size_t i = 0; i < count; ++i) {
                                 const auto& sv = self.parents[i]->value;
                                 const bool want_s = detail::wants_grad(self, i);
                                 std::vector<double>* gs = want_s ? &detail::parent_grad(self, i) : nullptr;
                                 for (std::size_t k = 0; k < heads; ++k) {
                                   const double wk = w[i * heads + k];
                                   double dot = 0.0;
                                   for (std::size_t e = k * block * r; e < (k + 1) * block * r; ++e) {
                                     if (gs) (*gs)[e] += wk * self.grad[e];
                                     dot += sv[e] * self.grad[e];
                                   }
                                   if (gw) (*gw)[i * heads + k] += dot;
                                 }
                               }
                             });
}

/// Single-head combination; alpha is |S| x 1.
inline Tensor combine_poly(const std::vector<Tensor>& skills, const Tensor& alpha) {
  if (alpha.numel() != skills.size()) {
    throw DimensionError("combine_poly: " + std::to_string(alpha.numel()) + " weights for " +
                         std::to_string(skills.size()) + " skills");
  }
  return mix_rows(skills, alpha.rank() == 2 && alpha.cols() == 1 ? alpha : reshape(alpha, {skills.size(), 1}));
}

/// Multi-head combination; alpha is |S| x h and h must divide the row count.
inline Tensor combine_mhr(const std::vector<Tensor>& skills, const Tensor& alpha) { return mix_rows(skills, alpha); }

/// Skill combination for one site: applies the same weights to every tensor
/// role (A and B for LoRA, l for IA3).
inline Skill combine_skills(const std::vector<Skill>& skills, const Tensor& alpha) {
  Skill out;
  for (std::size_t role = 0; role < skills.front().tensors.size(); ++role) {
    std::vector<Tensor> parts;
    parts.reserve(skills.size());
    for (const auto& s : skills) parts.push_back(s.tensors[role]);
    out.tensors.push_back(mix_rows(parts, alpha));
  }
  return out;
}

/// Standard Gumbel draw, -log(-log u) with u in (0, 1).
template <class Rng>
double sample_gumbel(Rng& rng) {
  std::uniform_real_distribution<double> uniform(std::numeric_limits<double>::min(), 1.0);
  double u = uniform(rng);
  while (u >= 1.0) u = uniform(rng);
  return -std::log(-std::log(u));
}

/// Relaxed allocation in (0,1). Train mode: sigmoid((z + g1 - g2) / tau) with
/// independent standard Gumbel g1, g2. Eval mode: sigmoid(z).
template <class Rng>
Tensor relax(const Tensor& logits, RoutingMode mode, double temperature, Rng& rng) {
  if (!(temperature > 0.0)) throw ConfigError("Gumbel-sigmoid temperature must be positive");
  for (double z : logits.values()) {
    if (!std::isfinite(z)) throw NumericError("non-finite routing logit");
  }
  if (mode == RoutingMode::eval_deterministic) return sigmoid(logits);
  std::vector<double> noise(logits.numel());
  for (auto& n : noise) {
    const double g1 = sample_gumbel(rng);
    const double g2 = sample_gumbel(rng);
    n = g1 - g2;
  }
  const Tensor perturbed = add(logits, Tensor(logits.shape(), std::move(noise)));
  return sigmoid(scale(perturbed, 1.0 / temperature));
}

/// Linear annealing from `start` to `end` over the pre-training budget.
struct TemperatureSchedule {
  double start = 1.0;
  double end = 0.1;

  double at(std::size_t step, std::size_t total_steps) const {
    if (total_steps <= 1) return end;
    const double t = std::min(1.0, static_cast<double>(step) / static_cast<double>(total_steps - 1));
    return start + (end - start) * t;
  }
};

/// Assignment of adapted sites to routing groups; consecutive runs of
/// `period` sites share one routing tensor.
class RoutingGroupMap {
 public:
  RoutingGroupMap() = default;
  RoutingGroupMap(std::size_t num_sites, std::size_t period) : period_(period) {
    if (period == 0) throw ConfigError("routing group period must be positive");
    if (num_sites == 0) throw ConfigError("routing needs at least one adapted site");
    for (std::size_t s = 0; s < num_sites; ++s) site_group_.push_back(s / period);
    num_groups_ = (num_sites + period - 1) / period;
  }

  std::size_t period() const { return period_; }
  std::size_t num_groups() const { return num_groups_; }
  std::size_t num_sites() const { return site_group_.size(); }
  std::size_t group_of(std::size_t site) const { return site_group_.at(site); }

 private:
  std::size_t period_ = 1;
  std::size_t num_groups_ = 0;
  std::vector<std::size_t> site_group_;
};

/// Logits of one routing group: a |S| x h row per registered task.
class RoutingTensor {
 public:
  RoutingTensor() = default;
  RoutingTensor(std::size_t num_skills, std::size_t heads) : num_skills_(num_skills), heads_(heads) {
    if (num_skills == 0 || heads == 0) throw ConfigError("routing tensor needs |S| >= 1 and h >= 1");
  }

  std::size_t num_skills() const { return num_skills_; }
  std::size_t heads() const { return heads_; }
  const std::vector<std::string>& tasks() const { return tasks_; }
  bool has_task(const std::string& task) const { return index_.count(task) > 0; }

  /// Registers a task with logits drawn uniformly from [-init_scale, init_scale].
  template <class Rng>
  const Tensor& add_task(const std::string& task, Rng& rng, double init_scale = 1e-3) {
    std::uniform_real_distribution<double> uniform(-init_scale, init_scale);
    std::vector<double> values(num_skills_ * heads_);
    for (auto& v : values) v = uniform(rng);
    return set_row(task, Tensor({num_skills_, heads_}, std::move(values), true));
  }

  const Tensor& set_row(const std::string& task, Tensor row) {
    if (row.shape() != Shape{num_skills_, heads_}) {
      throw DimensionError("routing row for " + task + " has shape " + shape_string(row.shape()));
    }
    if (auto it = index_.find(task); it != index_.end()) {
      rows_[it->second] = std::move(row);
      return rows_[it->second];
    }
    index_[task] = rows_.size();
    tasks_.push_back(task);
    rows_.push_back(std::move(row));
    return rows_.back();
  }

  const Tensor& row(const std::string& task) const {
    auto it = index_.find(task);
    if (it == index_.end()) throw RoutingError("task '" + task + "' is not registered with the router");
    return rows_[it->second];
  }

  const std::vector<Tensor>& rows() const { return rows_; }

  RoutingTensor clone() const {
    RoutingTensor out(num_skills_, heads_);
    for (std::size_t i = 0; i < rows_.size(); ++i) out.set_row(tasks_[i], rows_[i].clone());
    return out;
  }

 private:
  std::size_t num_skills_ = 1;
  std::size_t heads_ = 1;
  std::vector<std::string> tasks_;
  std::vector<Tensor> rows_;
  std::map<std::string, std::size_t> index_;
};

/// All routing state of a model: group map, one RoutingTensor per group,
/// and the temperature schedule used while pre-training.
class Router {
 public:
  Router() = default;
  Router(std::size_t num_sites, std::size_t period, std::size_t num_skills, std::size_t heads,
         TemperatureSchedule schedule = {})
      : groups_(num_sites, period), schedule_(schedule) {
    for (std::size_t g = 0; g < groups_.num_groups(); ++g) tensors_.emplace_back(num_skills, heads);
  }

  const RoutingGroupMap& groups() const { return groups_; }
  const TemperatureSchedule& schedule() const { return schedule_; }
  void set_schedule(TemperatureSchedule s) { schedule_ = s; }
  std::size_t num_skills() const { return tensors_.front().num_skills(); }
  std::size_t heads() const { return tensors_.front().heads(); }
  const std::vector<RoutingTensor>& tensors() const { return tensors_; }
  std::vector<RoutingTensor>& tensors() { return tensors_; }

  bool has_task(const std::string& task) const { return tensors_.front().has_task(task); }
  std::vector<std::string> tasks() const { return tensors_.front().tasks(); }

  template <class Rng>
  void add_task(const std::string& task, Rng& rng, double init_scale = 1e-3) {
    for (auto& t : tensors_) t.add_task(task, rng, init_scale);
  }

  /// Routing logits of one task across every group.
  std::vector<Tensor> task_rows(const std::string& task) const {
    std::vector<Tensor> out;
    for (const auto& t : tensors_) out.push_back(t.row(task));
    return out;
  }

  std::vector<Tensor> parameters() const {
    std::vector<Tensor> out;
    for (const auto& t : tensors_)
      for (const auto& r : t.rows()) out.push_back(r);
    return out;
  }

  /// Mixing weights for every group: one relaxation per group per call.
  template <class Rng>
  std::vector<Tensor> mixing_weights(const std::string& task, RoutingMode mode, double temperature, Rng& rng) const {
    std::vector<Tensor> out;
    out.reserve(tensors_.size());
    for (const auto& t : tensors_) out.push_back(normalize_columns(relax(t.row(task), mode, temperature, rng)));
    return out;
  }

  Router clone() const {
    Router out;
    out.groups_ = groups_;
    out.schedule_ = schedule_;
    for (const auto& t : tensors_) out.tensors_.push_back(t.clone());
    return out;
  }

 private:
  RoutingGroupMap groups_;
  std::vector<RoutingTensor> tensors_;
  TemperatureSchedule schedule_;
};

}  // namespace polyroute
