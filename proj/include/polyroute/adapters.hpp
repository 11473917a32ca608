// Copyright (c) 2026 The polyroute Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

// Skill inventories: per injection site, |S| adapter parameter sets of one
// parametrization. A LoRA skill is the pair (A, B), both d x r, contributing
// (1/r) * A B^T x. An IA3 skill is a single column vector l that rescales
// the wrapped activation elementwise.

#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "polyroute/backbone.hpp"
#include "polyroute/error.hpp"
#include "polyroute/method.hpp"
#include "polyroute/tensor.hpp"

namespace polyroute {

struct Skill {
  std::vector<Tensor> tensors;  // LoRA: {A, B}; IA3: {l}

  Skill clone() const {
    Skill out;
    for (const auto& t : tensors) out.tensors.push_back(t.clone());
    return out;
  }
};

class SkillInventory {
 public:
  SkillInventory() = default;
  SkillInventory(Parametrization p, std::size_t rank, std::vector<InjectionSite> sites,
                 std::vector<std::vector<Skill>> skills)
      : parametrization_(p), rank_(rank), sites_(std::move(sites)), skills_(std::move(skills)) {
    if (skills_.size() != sites_.size()) throw DimensionError("inventory needs one skill list per site");
    for (const auto& per_site : skills_) {
      if (per_site.size() != num_skills()) throw DimensionError("every site must hold the same number of skills");
    }
  }

  Parametrization parametrization() const { return parametrization_; }
  std::size_t rank() const { return rank_; }
  double alpha() const { return 1.0 / static_cast<double>(rank_); }
  const std::vector<InjectionSite>& sites() const { return sites_; }
  std::size_t num_sites() const { return sites_.size(); }
  std::size_t num_skills() const { return skills_.empty() ? 0 : skills_.front().size(); }

  const std::vector<Skill>& at(std::size_t site) const { return skills_.at(site); }
  std::vector<Skill>& at(std::size_t site) { return skills_.at(site); }

  /// Every skill tensor, site-major then skill-major.
  std::vector<Tensor> parameters() const {
    std::vector<Tensor> out;
    for (const auto& per_site : skills_)
      for (const auto& skill : per_site)
        for (const auto& t : skill.tensors) out.push_back(t);
    return out;
  }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& t : parameters()) n += t.numel();
    return n;
  }

  void set_requires_grad(bool flag) {
    for (auto& t : parameters()) t.set_requires_grad(flag);
  }

  SkillInventory clone() const {
    std::vector<std::vector<Skill>> copy;
    for (const auto& per_site : skills_) {
      auto& dst = copy.emplace_back();
      for (const auto& skill : per_site) dst.push_back(skill.clone());
    }
    return SkillInventory(parametrization_, rank_, sites_, std::move(copy));
  }

 private:
  Parametrization parametrization_ = Parametrization::lora;
  std::size_t rank_ = 1;
  std::vector<InjectionSite> sites_;
  std::vector<std::vector<Skill>> skills_;
};

inline bool site_supports(const InjectionSite& site, Parametrization p) {
  if (p == Parametrization::lora) return site.kind != SiteKind::ff;
  return site.kind == SiteKind::k || site.kind == SiteKind::v || site.kind == SiteKind::ff;
}

/// Fresh inventory. LoRA: A ~ N(0, 1/sqrt(r)), B = 0. IA3: all ones.
/// Either way the adapted model starts at the frozen model's function.
inline SkillInventory init_inventory(const std::vector<InjectionSite>& sites, std::size_t num_skills,
                                     Parametrization p, std::size_t rank, std::uint64_t seed) {
  if (num_skills == 0) throw ConfigError("an inventory needs at least one skill");
  if (p == Parametrization::lora && rank == 0) throw ConfigError("LoRA rank must be positive");
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0 / std::sqrt(static_cast<double>(rank ? rank : 1)));
  std::vector<std::vector<Skill>> skills;
  for (const auto& site : sites) {
    if (!site_supports(site, p)) {
      throw ConfigError("site " + site.name() + " cannot host a " + to_string(p) + " adapter");
    }
    auto& per_site = skills.emplace_back();
    for (std::size_t s = 0; s < num_skills; ++s) {
      Skill skill;
      if (p == Parametrization::lora) {
        std::vector<double> a(site.dim * rank);
        for (auto& v : a) v = normal(rng);
        skill.tensors.push_back(Tensor({site.dim, rank}, std::move(a), true));
        skill.tensors.push_back(Tensor::zeros({site.dim, rank}, true));
      } else {
        skill.tensors.push_back(Tensor::ones({site.dim, 1}, true));
      }
      per_site.push_back(std::move(skill));
    }
  }
  return SkillInventory(p, p == Parametrization::lora ? rank : 1, sites, std::move(skills));
}

/// Arithmetic mean over skills for every tensor role at every site; |S| = 1.
inline Skill average_skills(const std::vector<Skill>& skills) {
  if (skills.empty()) throw ConfigError("cannot average an empty skill list");
  Skill out;
  const double inv = 1.0 / static_cast<double>(skills.size());
  for (std::size_t role = 0; role < skills.front().tensors.size(); ++role) {
    const Tensor& first = skills.front().tensors[role];
    std::vector<double> acc(first.numel(), 0.0);
    for (const auto& skill : skills) {
      const auto v = skill.tensors.at(role).values();
      if (v.size() != acc.size()) throw DimensionError("skills at a site must share shapes");
      for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += v[i];
    }
    for (auto& x : acc) x *= inv;
    out.tensors.push_back(Tensor(first.shape(), std::move(acc), first.requires_grad()));
  }
  return out;
}

inline SkillInventory average_inventory(const SkillInventory& inv) {
  if (inv.num_skills() == 0) throw ConfigError("cannot average an empty inventory");
  if (inv.num_skills() == 1) return inv.clone();
  std::vector<std::vector<Skill>> skills;
  for (std::size_t s = 0; s < inv.num_sites(); ++s) skills.push_back({average_skills(inv.at(s))});
  return SkillInventory(inv.parametrization(), inv.rank(), inv.sites(), std::move(skills));
}

struct CountDims {
  std::size_t d = 16;
  std::size_t r = 4;
  std::size_t skills = 8;
  std::size_t tasks = 10;
  std::size_t heads = 1;
};

/// Trainable LoRA parameters per adapted d x d linear layer.
inline std::size_t count_parameters(Method method, Phase phase, const CountDims& dims) {
  const std::size_t d = dims.d, r = dims.r, S = dims.skills, T = dims.tasks, h = dims.heads;
  if (d == 0 || r == 0 || S == 0 || T == 0 || h == 0) throw ConfigError("count dimensions must be positive");
  const std::size_t single = 2 * d * r;
  if (method == Method::full_ft) return d * d;
  if (phase == Phase::inference) return single;
  const bool pre = phase == Phase::pretrain;
  switch (method) {
    case Method::shared: return single;
    case Method::private_mu:
    case Method::adapter_soup: return pre ? single * T : single;
    case Method::random_mu: return pre ? single * S : single;
    case Method::poly_mu: return pre ? single * S + T * S : single;
    case Method::poly: return pre ? single * S + T * S : single * S + S;
    case Method::poly_z: return pre ? single * S + T * S : S;
    case Method::poly_s: return pre ? single * S + T * S * h : single * S + S * h;
    case Method::mhr_mu: return pre ? single * S + T * S * h : single;
    case Method::poly_s_z: return pre ? single * S + T * S * h : S * h;
    case Method::full_ft: break;
  }
  throw ConfigError("unknown method");
}

/// Whole-model budget: skill tensors live at every adapted site, routing
/// logits once per routing group.
struct ModelBudget {
  std::size_t per_layer = 0;
  std::size_t whole_model = 0;
};

inline ModelBudget count_model_parameters(Method method, Phase phase, const CountDims& dims, std::size_t sites,
                                          std::size_t groups) {
  ModelBudget b;
  b.per_layer = count_parameters(method, phase, dims);
  if (method == Method::full_ft || groups == sites) {
    b.whole_model = b.per_layer * sites;
    return b;
  }
  // Split the per-layer count into its skill part and its routing part.
  const std::size_t routing = [&]() -> std::size_t {
    const bool pre = phase == Phase::pretrain;
    if (phase == Phase::inference) return 0;
    switch (method) {
      case Method::poly:
      case Method::poly_z:
      case Method::poly_mu: return pre ? dims.tasks * dims.skills : (method == Method::poly_mu ? 0 : dims.skills);
      case Method::poly_s:
      case Method::poly_s_z:
      case Method::mhr_mu:
        return pre ? dims.tasks * dims.skills * dims.heads : (method == Method::mhr_mu ? 0 : dims.skills * dims.heads);
      default: return 0;
    }
  }();
  b.whole_model = (b.per_layer - routing) * sites + routing * groups;
  return b;
}

}  // namespace polyroute
