// Copyright (c) 2026 The polyroute Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <random>

#include "test_support.hpp"

namespace polyroute {
namespace {

using testing::live_census;
using testing::ptrs;
using testing::random_examples;
using testing::small_backbone_config;

TEST(InitInventory, LoraStartsWithGaussianAAndZeroB) {
  const auto cfg = small_backbone_config(64);
  const auto inv = init_inventory(injection_sites(cfg, Parametrization::lora), 3, Parametrization::lora, 4, 9);
  EXPECT_EQ(inv.num_sites(), 24u);
  EXPECT_EQ(inv.num_skills(), 3u);
  EXPECT_DOUBLE_EQ(inv.alpha(), 0.25);
  double ss = 0.0;
  std::size_t n = 0;
  for (std::size_t s = 0; s < inv.num_sites(); ++s) {
    for (const auto& skill : inv.at(s)) {
      ASSERT_EQ(skill.tensors.size(), 2u);
      EXPECT_EQ(skill.tensors[0].shape(), (Shape{64, 4}));
      for (double v : skill.tensors[0].values()) {
        ss += v * v;
        ++n;
      }
      for (double v : skill.tensors[1].values()) EXPECT_EQ(v, 0.0);
    }
  }
  // A ~ N(0, 1/sqrt(r)): standard deviation 0.5 at r = 4.
  EXPECT_NEAR(std::sqrt(ss / static_cast<double>(n)), 0.5, 0.01);
}

TEST(InitInventory, SameSeedIsBitwiseEqual) {
  const auto sites = injection_sites(small_backbone_config(), Parametrization::lora);
  const auto a = init_inventory(sites, 4, Parametrization::lora, 2, 5);
  const auto b = init_inventory(sites, 4, Parametrization::lora, 2, 5);
  const auto c = init_inventory(sites, 4, Parametrization::lora, 2, 6);
  const auto pa = a.parameters(), pb = b.parameters(), pc = c.parameters();
  bool differs = false;
  for (std::size_t i = 0; i < pa.size(); ++i) {
    EXPECT_TRUE(bitwise_equal(pa[i], pb[i]));
    differs = differs || !bitwise_equal(pa[i], pc[i]);
  }
  EXPECT_TRUE(differs);
}

TEST(InitInventory, RejectsUnsupportedSitesAndEmptyInventories) {
  const auto cfg = small_backbone_config();
  EXPECT_THROW(init_inventory(injection_sites(cfg, Parametrization::ia3), 2, Parametrization::lora, 2, 0), ConfigError);
  EXPECT_THROW(init_inventory(injection_sites(cfg, Parametrization::lora), 2, Parametrization::ia3, 1, 0), ConfigError);
  EXPECT_THROW(init_inventory(injection_sites(cfg, Parametrization::lora), 0, Parametrization::lora, 2, 0), ConfigError);
}

TEST(InitInventory, FreshIa3InventoryLeavesForwardUnchanged) {
  const auto cfg = small_backbone_config();
  auto bb = std::make_shared<const FrozenBackbone>(cfg);
  ModelOptions options;
  options.parametrization = Parametrization::ia3;
  std::mt19937_64 rng(3);
  const auto examples = random_examples(2, cfg.vocab_size, 4, rng);
  const auto batch = pack_batch(ptrs(examples), cfg.max_seq_len);
  const Tensor bare = bb->logits(batch, nullptr);

  const auto single = build_strategy(Method::shared, {1, 1, 2, cfg.model_dim, 3});
  EXPECT_TRUE(bitwise_equal(assemble_model(single, bb, {"a", "b"}, options).eval_logits(batch, "a"), bare));

  // Routed mixing of all-ones vectors is one up to the normalization epsilon.
  const auto routed = build_strategy(Method::poly, {4, 1, 2, cfg.model_dim, 3});
  const Tensor mixed = assemble_model(routed, bb, {"a", "b"}, options).eval_logits(batch, "a");
  for (std::size_t i = 0; i < bare.numel(); ++i) {
    EXPECT_NEAR(mixed.values()[i], bare.values()[i], 1e-10 * std::max(1.0, std::abs(bare.values()[i])));
  }
}

TEST(AverageInventory, HandArithmetic) {
  InjectionSite site{0, Block::encoder_self, SiteKind::q, 1};
  Skill s1{{Tensor({1, 1}, {2.0}), Tensor({1, 1}, {0.0})}};
  Skill s2{{Tensor({1, 1}, {4.0}), Tensor({1, 1}, {1.0})}};
  const SkillInventory inv(Parametrization::lora, 1, {site}, {{s1, s2}});
  const auto avg = average_inventory(inv);
  ASSERT_EQ(avg.num_skills(), 1u);
  EXPECT_EQ(avg.at(0).front().tensors[0].item(), 3.0);
  EXPECT_EQ(avg.at(0).front().tensors[1].item(), 0.5);
}

TEST(AverageInventory, IdenticalSkillsAverageToThatSkillAndIsIdempotent) {
  const auto sites = injection_sites(small_backbone_config(), Parametrization::lora);
  auto one = init_inventory(sites, 1, Parametrization::lora, 2, 4);
  std::vector<std::vector<Skill>> copies;
  for (std::size_t s = 0; s < one.num_sites(); ++s) copies.push_back({one.at(s)[0], one.at(s)[0], one.at(s)[0]});
  const SkillInventory triple(Parametrization::lora, 2, sites, copies);
  const auto avg = average_inventory(triple);
  const auto again = average_inventory(one);
  for (std::size_t s = 0; s < one.num_sites(); ++s) {
    for (std::size_t role = 0; role < 2; ++role) {
      EXPECT_LT(max_abs_diff(avg.at(s)[0].tensors[role], one.at(s)[0].tensors[role]), 1e-15);
      EXPECT_TRUE(bitwise_equal(again.at(s)[0].tensors[role], one.at(s)[0].tensors[role]));
    }
  }
}

TEST(AverageInventory, CommutesWithHeadPartition) {
  std::mt19937_64 rng(8);
  std::vector<Tensor> skills;
  for (int i = 0; i < 5; ++i) skills.push_back(testing::random_tensor({16, 3}, rng));
  std::vector<Skill> as_skills;
  for (const auto& t : skills) as_skills.push_back(Skill{{t}});
  const Tensor mean = average_skills(as_skills).tensors[0];
  for (std::size_t h : {1u, 2u, 4u, 8u, 16u}) {
    std::vector<Tensor> parts;
    for (std::size_t k = 0; k < h; ++k) {
      std::vector<Skill> sliced;
      for (const auto& t : skills) sliced.push_back(Skill{{slice_rows(t, k, h)}});
      parts.push_back(average_skills(sliced).tensors[0]);
    }
    EXPECT_LT(max_abs_diff(concat_rows(parts), mean), 1e-15) << "h=" << h;
  }
}

TEST(LoraContribution, IsLinearInInput) {
  std::mt19937_64 rng(12);
  const Tensor x = testing::random_tensor({3, 8}, rng, 1.0, false);
  const Tensor w = Tensor::zeros({8, 8});
  SiteAdapter a;
  a.lora_a = testing::random_tensor({8, 2}, rng);
  a.lora_b = testing::random_tensor({8, 2}, rng);
  a.alpha = 0.5;
  for (double c : {-2.0, 0.0, 0.3, 7.0}) {
    const Tensor lhs = adapted_projection(scale(x, c), w, &a);
    const Tensor rhs = scale(adapted_projection(x, w, &a), c);
    EXPECT_LT(max_abs_diff(lhs, rhs), 1e-12) << "c=" << c;
  }
}

TEST(LoraContribution, MatchesAlphaABTransposeX) {
  // y = x W0 + alpha * x B A^T for row-vector inputs.
  const Tensor x({1, 2}, {1.0, 2.0});
  const Tensor w({2, 2}, {1.0, 0.0, 0.0, 1.0});
  SiteAdapter a;
  a.lora_a = Tensor({2, 1}, {3.0, -1.0});
  a.lora_b = Tensor({2, 1}, {1.0, 1.0});
  a.alpha = 1.0;
  const Tensor y = adapted_projection(x, w, &a);
  // x B = 3; times A^T = (9, -3); plus x = (10, -1).
  EXPECT_EQ(y.at(0, 0), 10.0);
  EXPECT_EQ(y.at(0, 1), -1.0);
}

TEST(CountParameters, HandValues) {
  CountDims dims{16, 4, 8, 10, 8};
  EXPECT_EQ(count_parameters(Method::poly_s, Phase::pretrain, dims), 1664u);
  EXPECT_EQ(count_parameters(Method::poly_s, Phase::finetune, dims), 2u * 16 * 4 * 8 + 8 * 8);
  for (Phase p : kAllPhases) EXPECT_EQ(count_parameters(Method::shared, p, dims), 128u);
  EXPECT_EQ(count_parameters(Method::poly, Phase::pretrain, dims), 2u * 16 * 4 * 8 + 10 * 8);
  EXPECT_EQ(count_parameters(Method::poly, Phase::finetune, dims), 2u * 16 * 4 * 8 + 8);
  EXPECT_EQ(count_parameters(Method::poly_mu, Phase::finetune, dims), 128u);
  EXPECT_EQ(count_parameters(Method::mhr_mu, Phase::finetune, dims), 128u);
  EXPECT_EQ(count_parameters(Method::poly_z, Phase::finetune, dims), 8u);
  EXPECT_EQ(count_parameters(Method::poly_s_z, Phase::finetune, dims), 64u);
  EXPECT_EQ(count_parameters(Method::private_mu, Phase::pretrain, dims), 1280u);
  EXPECT_EQ(count_parameters(Method::full_ft, Phase::pretrain, dims), 256u);
  EXPECT_THROW(count_parameters(Method::poly, Phase::pretrain, {0, 4, 8, 10, 1}), ConfigError);
}

TEST(CountParameters, InferenceMatchesSharedForEveryAdapterMethod) {
  CountDims dims{32, 2, 4, 6, 4};
  for (Method m : kTrainableMethods) {
    EXPECT_EQ(count_parameters(m, Phase::inference, dims), 2u * 32 * 2) << method_name(m);
  }
}

TEST(CountParameters, AgreesWithLiveCensus) {
  const CountDims dims{8, 2, 4, 3, 2};
  for (Method m : kAllMethods) {
    for (Phase p : kAllPhases) {
      const auto expected = count_model_parameters(m, p, dims, 24, 24).whole_model;
      EXPECT_EQ(live_census(m, p, dims), expected) << method_name(m) << " " << phase_name(p);
    }
  }
}

TEST(CountParameters, SharedRoutingGroupsCountRoutingOncePerGroup) {
  const CountDims dims{8, 2, 4, 3, 2};
  for (std::size_t period : {2u, 5u, 24u}) {
    const std::size_t groups = (24 + period - 1) / period;
    for (Method m : {Method::poly, Method::poly_s, Method::poly_s_z, Method::poly_z}) {
      for (Phase p : kAllPhases) {
        EXPECT_EQ(live_census(m, p, dims, 2, period), count_model_parameters(m, p, dims, 24, groups).whole_model)
            << method_name(m) << " " << phase_name(p) << " period " << period;
      }
    }
  }
}

TEST(CountParameters, UnknownMethodNameIsAConfigError) {
  EXPECT_THROW(parse_method("poly-x"), ConfigError);
  try {
    parse_method("nope");
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("poly-s"), std::string::npos);
  }
}

}  // namespace
}  // namespace polyroute
