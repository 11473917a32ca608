// Copyright (c) 2026 The polyroute Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <memory>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "polyroute/adapters.hpp"
#include "polyroute/backbone.hpp"
#include "polyroute/routing.hpp"

namespace polyroute {

/// splitmix64 finalizer; derives independent seeds for sub-components.
inline std::uint64_t derive_seed(std::uint64_t base, std::uint64_t stream) {
  std::uint64_t z = base + 0x9E3779B97F4A7C15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

inline std::uint64_t hash_string(const std::string& s) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

/// How skills are combined into the per-task adapter.
enum class Combination {
  single,  // one skill, used as is
  fixed,   // frozen binary allocation, normalized
  routed,  // learned routing logits
};

inline const char* to_string(Combination c) {
  switch (c) {
    case Combination::single: return "single";
    case Combination::fixed: return "fixed";
    case Combination::routed: return "routed";
  }
  return "?";
}

/// Frozen binary task-skill allocation (Random-mu, Private-mu, AdapterSoup).
struct FixedAllocation {
  std::vector<std::string> tasks;
  std::vector<std::vector<std::uint8_t>> rows;

  const std::vector<std::uint8_t>& row(const std::string& task) const {
    for (std::size_t i = 0; i < tasks.size(); ++i) {
      if (tasks[i] == task) return rows[i];
    }
    throw RoutingError("task '" + task + "' has no fixed allocation");
  }

  /// Normalized mixing weights as a constant |S| x 1 tensor.
  Tensor weights(const std::string& task) const {
    const auto& r = row(task);
    return normalize_columns(Tensor({r.size(), 1}, std::vector<double>(r.begin(), r.end())));
  }
};

/// Frozen backbone plus adapters: the unit that is trained, adapted,
/// evaluated and checkpointed.
class AdaptedModel {
 public:
  std::shared_ptr<const FrozenBackbone> backbone;
  SkillInventory inventory;
  Combination combination = Combination::single;
  std::optional<Router> router;
  std::optional<FixedAllocation> allocation;

  /// Per-site adapters for one forward pass of `task`.
  template <class Rng>
  AdapterView resolve(const std::string& task, RoutingMode mode, double temperature, Rng& rng) const {
    AdapterView view;
    view.parametrization = inventory.parametrization();
    view.sites.resize(inventory.num_sites());
    std::vector<Tensor> group_weights;
    Tensor fixed_weights;
    if (combination == Combination::routed) {
      group_weights = router.value().mixing_weights(task, mode, temperature, rng);
    } else if (combination == Combination::fixed) {
      fixed_weights = allocation.value().weights(task);
    }
    for (std::size_t s = 0; s < inventory.num_sites(); ++s) {
      const auto& skills = inventory.at(s);
      Skill combined;
      switch (combination) {
        case Combination::single: combined = skills.front(); break;
        case Combination::fixed: combined = combine_skills(skills, fixed_weights); break;
        case Combination::routed:
          combined = combine_skills(skills, group_weights[router->groups().group_of(s)]);
          break;
      }
      view.sites[s] = to_site_adapter(combined);
    }
    return view;
  }

  AdapterView resolve_eval(const std::string& task) const {
    std::mt19937_64 unused(0);
    return resolve(task, RoutingMode::eval_deterministic, 1.0, unused);
  }

  template <class Rng>
  Tensor loss(const PackedBatch& batch, const std::string& task, RoutingMode mode, double temperature,
              Rng& rng) const {
    const AdapterView view = resolve(task, mode, temperature, rng);
    return backbone->loss(batch, &view);
  }

  Tensor eval_loss(const PackedBatch& batch, const std::string& task) const {
    const AdapterView view = resolve_eval(task);
    return backbone->loss(batch, &view);
  }

  Tensor eval_logits(const PackedBatch& batch, const std::string& task) const {
    const AdapterView view = resolve_eval(task);
    return backbone->logits(batch, &view);
  }

  /// The inference form for one task: every site collapsed to a single
  /// detached skill (eval-mode routing).
  AdaptedModel collapse(const std::string& task) const {
    NoGradGuard no_grad;
    const AdapterView view = resolve_eval(task);
    std::vector<std::vector<Skill>> skills;
    for (const auto& site : view.sites) {
      Skill s;
      if (site.lora_a.defined()) {
        s.tensors = {site.lora_a.detach(), site.lora_b.detach()};
      } else {
        s.tensors = {site.ia3_scale.detach()};
      }
      skills.push_back({std::move(s)});
    }
    AdaptedModel out;
    out.backbone = backbone;
    out.inventory = SkillInventory(inventory.parametrization(), inventory.rank(), inventory.sites(), std::move(skills));
    out.combination = Combination::single;
    return out;
  }

  /// Deep copy of every adapter and routing tensor; the backbone is shared.
  AdaptedModel clone() const {
    AdaptedModel out;
    out.backbone = backbone;
    out.inventory = inventory.clone();
    out.combination = combination;
    if (router) out.router = router->clone();
    out.allocation = allocation;
    return out;
  }

  /// Every adapter and routing tensor (trainable or not).
  std::vector<Tensor> all_parameters() const {
    auto out = inventory.parameters();
    if (router) {
      for (auto& t : router->parameters()) out.push_back(t);
    }
    return out;
  }

  void freeze_all() {
    for (auto& t : all_parameters()) t.set_requires_grad(false);
  }

 private:
  SiteAdapter to_site_adapter(const Skill& skill) const {
    SiteAdapter a;
    if (inventory.parametrization() == Parametrization::lora) {
      a.lora_a = skill.tensors.at(0);
      a.lora_b = skill.tensors.at(1);
      a.alpha = inventory.alpha();
    } else {
      a.ia3_scale = skill.tensors.at(0);
    }
    return a;
  }
};

}  // namespace polyroute
