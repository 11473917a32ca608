// Copyright (c) 2026 The polyroute Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <random>
#include <set>

#include "test_support.hpp"

namespace polyroute {
namespace {

using testing::ptrs;
using testing::random_examples;
using testing::random_tensor;
using testing::small_backbone_config;

AdapterView lora_view(const BackboneConfig& c, std::size_t rank, std::mt19937_64& rng, bool zero_b) {
  AdapterView view;
  view.parametrization = Parametrization::lora;
  for (const auto& site : injection_sites(c, Parametrization::lora)) {
    SiteAdapter a;
    a.lora_a = random_tensor({site.dim, rank}, rng);
    a.lora_b = zero_b ? Tensor::zeros({site.dim, rank}, true) : random_tensor({site.dim, rank}, rng);
    a.alpha = 1.0 / static_cast<double>(rank);
    view.sites.push_back(a);
  }
  return view;
}

AdapterView ia3_view(const BackboneConfig& c, std::mt19937_64* rng) {
  AdapterView view;
  view.parametrization = Parametrization::ia3;
  for (const auto& site : injection_sites(c, Parametrization::ia3)) {
    SiteAdapter a;
    a.ia3_scale = rng ? testing::uniform_tensor({site.dim, 1}, *rng, 0.5, 1.5) : Tensor::ones({site.dim, 1}, true);
    view.sites.push_back(a);
  }
  return view;
}

TEST(BackboneConfig, ValidatesVocabularyAndHeads) {
  BackboneConfig c = small_backbone_config();
  c.vocab_size = 3;
  EXPECT_THROW(c.validate(), ConfigError);
  c = small_backbone_config(16);
  EXPECT_THROW(c.validate_heads(3), ConfigError);
  EXPECT_NO_THROW(c.validate_heads(8));
  EXPECT_EQ(c.ff(), 64u);
}

TEST(InjectionSites, LoraCoversQkvoOfEveryAttentionBlock) {
  const auto sites = injection_sites(small_backbone_config(), Parametrization::lora);
  EXPECT_EQ(sites.size(), 24u);  // 2 layers x (enc self + dec self + dec cross) x 4
  std::set<std::string> names;
  for (const auto& s : sites) {
    EXPECT_NE(s.kind, SiteKind::ff);
    names.insert(s.name());
  }
  EXPECT_EQ(names.size(), sites.size());
  EXPECT_EQ(sites.front().block, Block::encoder_self);
  EXPECT_EQ(sites.back().block, Block::decoder_cross);
}

TEST(InjectionSites, Ia3CoversKeyValueAndFeedForward) {
  const auto c = small_backbone_config();
  const auto sites = injection_sites(c, Parametrization::ia3);
  EXPECT_EQ(sites.size(), 16u);  // per layer: enc k,v,ff + dec self k,v + cross k,v + ff
  for (const auto& s : sites) {
    EXPECT_TRUE(s.kind == SiteKind::k || s.kind == SiteKind::v || s.kind == SiteKind::ff);
    EXPECT_EQ(s.dim, s.kind == SiteKind::ff ? c.ff() : c.model_dim);
  }
}

TEST(PackBatch, LayoutAddsEosAndBos) {
  Example e{{5, 6}, {7, 8, 9}};
  const auto b = pack_batch({&e}, 8);
  EXPECT_EQ(b.enc_tokens, (std::vector<int>{5, 6, kEosId}));
  EXPECT_EQ(b.dec_tokens, (std::vector<int>{kBosId, 7, 8, 9}));
  EXPECT_EQ(b.labels, (std::vector<int>{7, 8, 9, kEosId}));
  EXPECT_EQ(b.dec_positions, (std::vector<int>{0, 1, 2, 3}));
  EXPECT_THROW(pack_batch({&e}, 3), DataError);
  EXPECT_THROW(pack_batch({}, 8), DataError);
}

TEST(Backbone, SameSeedSameWeights) {
  const FrozenBackbone a(small_backbone_config(16, 16, 4)), b(small_backbone_config(16, 16, 4)),
      c(small_backbone_config(16, 16, 5));
  EXPECT_EQ(a.weights_hash(), b.weights_hash());
  EXPECT_NE(a.weights_hash(), c.weights_hash());
}

TEST(Backbone, InitializationScales) {
  const auto cfg = small_backbone_config(64, 16, 1);
  const FrozenBackbone bb(cfg);
  for (const auto& [name, t] : bb.named_tensors()) {
    if (name == "positions") continue;
    double ss = 0.0;
    for (double v : t.values()) ss += v * v;
    const double sd = std::sqrt(ss / static_cast<double>(t.numel()));
    double expected = 1.0 / std::sqrt(64.0);
    if (name == "embedding") expected = 1.0;
    if (name.size() > 3 && name.substr(name.size() - 3) == ".w2") expected = 1.0 / std::sqrt(256.0);
    EXPECT_NEAR(sd, expected, 0.15 * expected) << name;
  }
}

TEST(Backbone, ParameterCountMatchesLayerRecipe) {
  const auto cfg = small_backbone_config(16, 16, 0);
  const FrozenBackbone bb(cfg);
  const std::size_t V = 16, d = 16, L = 2, ff = 4 * d, len = cfg.max_seq_len;
  const std::size_t encoder_layer = 4 * d * d + 2 * d * ff;
  const std::size_t decoder_layer = 8 * d * d + 2 * d * ff;
  EXPECT_EQ(bb.parameter_count(), V * d + len * d + d * V + L * (encoder_layer + decoder_layer));
  for (const auto& [name, t] : bb.named_tensors()) EXPECT_FALSE(t.requires_grad()) << name;
}

TEST(Backbone, ZeroLoraBIsBareBackbone) {
  const auto cfg = small_backbone_config();
  const FrozenBackbone bb(cfg);
  std::mt19937_64 rng(1);
  const auto examples = random_examples(3, cfg.vocab_size, 4, rng);
  const auto batch = pack_batch(ptrs(examples), cfg.max_seq_len);
  const AdapterView view = lora_view(cfg, 4, rng, true);
  EXPECT_TRUE(bitwise_equal(bb.logits(batch, &view), bb.logits(batch, nullptr)));
}

TEST(Backbone, Ia3OnesIsBareBackbone) {
  const auto cfg = small_backbone_config();
  const FrozenBackbone bb(cfg);
  std::mt19937_64 rng(2);
  const auto examples = random_examples(3, cfg.vocab_size, 4, rng);
  const auto batch = pack_batch(ptrs(examples), cfg.max_seq_len);
  const AdapterView view = ia3_view(cfg, nullptr);
  EXPECT_TRUE(bitwise_equal(bb.logits(batch, &view), bb.logits(batch, nullptr)));
}

TEST(Backbone, PackedBatchMatchesPerExampleForward) {
  const auto cfg = small_backbone_config();
  const FrozenBackbone bb(cfg);
  std::mt19937_64 rng(3);
  auto examples = random_examples(4, cfg.vocab_size, 3, rng);
  examples[1].input.push_back(5);
  examples[2].target.pop_back();
  const AdapterView view = lora_view(cfg, 2, rng, false);
  const Tensor packed = bb.logits(pack_batch(ptrs(examples), cfg.max_seq_len), &view);
  std::size_t row = 0;
  for (const auto& e : examples) {
    const Tensor single = bb.logits(pack_batch({&e}, cfg.max_seq_len), &view);
    for (std::size_t i = 0; i < single.rows(); ++i, ++row)
      for (std::size_t j = 0; j < single.cols(); ++j) EXPECT_NEAR(packed.at(row, j), single.at(i, j), 1e-12 * std::max(1.0, std::abs(single.at(i, j))));
  }
  EXPECT_EQ(row, packed.rows());
}

TEST(Backbone, LogitsDoNotSeeFutureTargets) {
  const auto cfg = small_backbone_config();
  const FrozenBackbone bb(cfg);
  std::mt19937_64 rng(4);
  auto examples = random_examples(1, cfg.vocab_size, 5, rng);
  const Tensor before = bb.logits(pack_batch(ptrs(examples), cfg.max_seq_len), nullptr);
  examples[0].target[4] = examples[0].target[4] == 5 ? 6 : 5;
  const Tensor after = bb.logits(pack_batch(ptrs(examples), cfg.max_seq_len), nullptr);
  for (std::size_t i = 0; i <= 4; ++i)
    for (std::size_t j = 0; j < cfg.vocab_size; ++j) EXPECT_EQ(before.at(i, j), after.at(i, j));
}

TEST(Backbone, GreedyDecodeAgreesWithTeacherForcedArgmax) {
  const auto cfg = small_backbone_config();
  const FrozenBackbone bb(cfg);
  std::mt19937_64 rng(5);
  auto examples = random_examples(3, cfg.vocab_size, 4, rng);
  const auto decoded = bb.greedy_decode(ptrs(examples), 5, nullptr);
  ASSERT_EQ(decoded.size(), 3u);
  for (std::size_t b = 0; b < 3; ++b) {
    ASSERT_EQ(decoded[b].size(), 5u);
    // Feeding the greedy output back as the target must reproduce it.
    Example e{examples[b].input, std::vector<int>(decoded[b].begin(), decoded[b].end() - 1)};
    const Tensor logits = bb.logits(pack_batch({&e}, cfg.max_seq_len), nullptr);
    for (std::size_t t = 0; t < 5; ++t) {
      const double* row = logits.values().data() + t * cfg.vocab_size;
      EXPECT_EQ(std::max_element(row, row + cfg.vocab_size) - row, decoded[b][t]);
    }
  }
}

TEST(Backbone, AdapterViewWithWrongSiteCountIsRejected) {
  const auto cfg = small_backbone_config();
  const FrozenBackbone bb(cfg);
  std::mt19937_64 rng(6);
  AdapterView view = lora_view(cfg, 2, rng, false);
  view.sites.pop_back();
  const auto examples = random_examples(1, cfg.vocab_size, 3, rng);
  EXPECT_THROW(bb.logits(pack_batch(ptrs(examples), cfg.max_seq_len), &view), DimensionError);
}

TEST(Backbone, GradientsOfLoraAndIa3MatchFiniteDifferences) {
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    auto cfg = small_backbone_config(8, 10, seed);
    const FrozenBackbone bb(cfg);
    std::mt19937_64 rng(seed + 100);
    const auto examples = random_examples(2, cfg.vocab_size, 3, rng);
    const auto batch = pack_batch(ptrs(examples), cfg.max_seq_len);
    AdapterView lv = lora_view(cfg, 2, rng, false);
    std::vector<Tensor> leaves{lv.sites[0].lora_a, lv.sites[5].lora_b, lv.sites[23].lora_a};
    EXPECT_LT(testing::gradient_check([&] { return bb.loss(batch, &lv); }, leaves), 1e-5);
    AdapterView iv = ia3_view(cfg, &rng);
    std::vector<Tensor> scales{iv.sites[0].ia3_scale, iv.sites[2].ia3_scale, iv.sites[15].ia3_scale};
    EXPECT_LT(testing::gradient_check([&] { return bb.loss(batch, &iv); }, scales), 1e-5);
  }
}

TEST(Backbone, LoadTensorsRoundTrip) {
  const auto cfg = small_backbone_config(8, 10, 3);
  const FrozenBackbone src(cfg);
  FrozenBackbone dst(small_backbone_config(8, 10, 4));
  std::vector<std::pair<std::string, std::vector<double>>> values;
  for (const auto& [name, t] : src.named_tensors()) values.emplace_back(name, std::vector<double>(t.values().begin(), t.values().end()));
  dst.load_tensors(values);
  EXPECT_EQ(dst.weights_hash(), src.weights_hash());
  values.pop_back();
  EXPECT_THROW(dst.load_tensors(values), DataError);
}

}  // namespace
}  // namespace polyroute
