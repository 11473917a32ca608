// Copyright (c) 2026 The polyroute Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

// A tiny frozen encoder-decoder transformer. It stands in for a pre-trained
// text-to-text model: every weight is drawn once from the seed and never
// receives gradients. Adapters hook into the q/k/v/o projections of every
// attention block (encoder self, decoder self, decoder cross) and into the
// feed-forward inner activation.

#include <cmath>
#include <cstdint>
#include <cstring>
#include <optional>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "polyroute/error.hpp"
#include "polyroute/tensor.hpp"

namespace polyroute {

inline constexpr int kPadId = 0;
inline constexpr int kBosId = 1;
inline constexpr int kEosId = 2;
inline constexpr int kUnkId = 3;

struct BackboneConfig {
  std::size_t vocab_size = 16;
  std::size_t model_dim = 32;
  std::size_t num_layers = 2;
  std::size_t ff_dim = 0;  // 0 means 4 * model_dim
  std::size_t max_seq_len = 16;
  std::size_t attention_heads = 1;
  std::uint64_t seed = 0;

  std::size_t ff() const { return ff_dim ? ff_dim : 4 * model_dim; }

  void validate() const {
    if (vocab_size < 4) throw ConfigError("vocab_size must be at least 4 (pad, bos, eos, one symbol)");
    if (model_dim == 0 || num_layers == 0 || max_seq_len < 2) {
      throw ConfigError("model_dim, num_layers must be positive and max_seq_len at least 2");
    }
    if (attention_heads == 0 || model_dim % attention_heads != 0) {
      throw ConfigError("model_dim " + std::to_string(model_dim) + " not divisible by attention head count " +
                        std::to_string(attention_heads));
    }
  }

  /// Routing heads partition adapter rows, so each must divide model_dim.
  void validate_heads(std::size_t heads) const {
    if (heads == 0 || model_dim % heads != 0) {
      throw ConfigError("model_dim " + std::to_string(model_dim) + " not divisible by routing head count " +
                        std::to_string(heads));
    }
  }
};

enum class Parametrization { lora, ia3 };

inline std::string to_string(Parametrization p) { return p == Parametrization::lora ? "lora" : "ia3"; }

inline Parametrization parse_parametrization(const std::string& s) {
  if (s == "lora") return Parametrization::lora;
  if (s == "ia3") return Parametrization::ia3;
  throw ConfigError("unknown parametrization '" + s + "' (expected lora or ia3)");
}

enum class Block { encoder_self, encoder_ff, decoder_self, decoder_cross, decoder_ff };
enum class SiteKind { q, k, v, o, ff };

inline const char* to_string(Block b) {
  switch (b) {
    case Block::encoder_self: return "enc.self";
    case Block::encoder_ff: return "enc.ff";
    case Block::decoder_self: return "dec.self";
    case Block::decoder_cross: return "dec.cross";
    case Block::decoder_ff: return "dec.ff";
  }
  return "?";
}

inline const char* to_string(SiteKind k) {
  switch (k) {
    case SiteKind::q: return "q";
    case SiteKind::k: return "k";
    case SiteKind::v: return "v";
    case SiteKind::o: return "o";
    case SiteKind::ff: return "ff";
  }
  return "?";
}

/// One adapted map inside the backbone. For LoRA sites `dim` is the width of
/// the wrapped d x d projection; for IA3 sites it is the length of the
/// rescaled activation (d for k/v, ff_dim for ff).
struct InjectionSite {
  std::size_t layer = 0;
  Block block = Block::encoder_self;
  SiteKind kind = SiteKind::q;
  std::size_t dim = 0;

  std::string name() const {
    return "L" + std::to_string(layer) + "." + to_string(block) + "." + to_string(kind);
  }
  bool operator==(const InjectionSite&) const = default;
};

/// Canonical site order: encoder layers first, then decoder layers; within a
/// layer, blocks in execution order. Routing groups are formed over this order.
inline std::vector<InjectionSite> injection_sites(const BackboneConfig& config, Parametrization p) {
  std::vector<InjectionSite> sites;
  const std::size_t d = config.model_dim;
  auto attention_sites = [&](std::size_t layer, Block block) {
    if (p == Parametrization::lora) {
      for (auto k : {SiteKind::q, SiteKind::k, SiteKind::v, SiteKind::o}) sites.push_back({layer, block, k, d});
    } else {
      for (auto k : {SiteKind::k, SiteKind::v}) sites.push_back({layer, block, k, d});
    }
  };
  for (std::size_t l = 0; l < config.num_layers; ++l) {
    attention_sites(l, Block::encoder_self);
    if (p == Parametrization::ia3) sites.push_back({l, Block::encoder_ff, SiteKind::ff, config.ff()});
  }
  for (std::size_t l = 0; l < config.num_layers; ++l) {
    attention_sites(l, Block::decoder_self);
    attention_sites(l, Block::decoder_cross);
    if (p == Parametrization::ia3) sites.push_back({l, Block::decoder_ff, SiteKind::ff, config.ff()});
  }
  return sites;
}

/// The adapter acting at one site during a single forward pass. Empty
/// tensors mean the site is left untouched.
struct SiteAdapter {
  Tensor lora_a;  // [d x r]
  Tensor lora_b;  // [d x r]
  double alpha = 1.0;
  Tensor ia3_scale;  // [dim x 1]
};

/// Adapters for every site of one parametrization, aligned with
/// injection_sites(config, parametrization).
struct AdapterView {
  Parametrization parametrization = Parametrization::lora;
  std::vector<SiteAdapter> sites;
};

struct Example {
  std::vector<int> input;
  std::vector<int> target;
  bool operator==(const Example&) const = default;
};

/// A batch of examples packed row-wise. Encoder rows are input+eos, decoder
/// rows are bos+target and labels are target+eos.
struct PackedBatch {
  std::vector<int> enc_tokens, enc_positions;
  std::vector<int> dec_tokens, dec_positions;
  std::vector<int> labels;
  std::vector<AttentionSegment> enc_segments, dec_segments, cross_segments;

  std::size_t size() const { return enc_segments.size(); }
};

inline PackedBatch pack_batch(const std::vector<const Example*>& examples, std::size_t max_seq_len) {
  if (examples.empty()) throw DataError("cannot pack an empty batch");
  PackedBatch batch;
  for (const Example* ex : examples) {
    const std::size_t enc_len = ex->input.size() + 1, dec_len = ex->target.size() + 1;
    if (enc_len > max_seq_len || dec_len > max_seq_len) {
      throw DataError("sequence longer than max_seq_len " + std::to_string(max_seq_len));
    }
    const std::size_t enc_off = batch.enc_tokens.size(), dec_off = batch.dec_tokens.size();
    for (std::size_t i = 0; i < ex->input.size(); ++i) {
      batch.enc_tokens.push_back(ex->input[i]);
      batch.enc_positions.push_back(static_cast<int>(i));
    }
    batch.enc_tokens.push_back(kEosId);
    batch.enc_positions.push_back(static_cast<int>(ex->input.size()));
    batch.dec_tokens.push_back(kBosId);
    batch.dec_positions.push_back(0);
    for (std::size_t i = 0; i < ex->target.size(); ++i) {
      batch.dec_tokens.push_back(ex->target[i]);
      batch.dec_positions.push_back(static_cast<int>(i + 1));
      batch.labels.push_back(ex->target[i]);
    }
    batch.labels.push_back(kEosId);
    batch.enc_segments.push_back({enc_off, enc_len, enc_off, enc_len});
    batch.dec_segments.push_back({dec_off, dec_len, dec_off, dec_len});
    batch.cross_segments.push_back({dec_off, dec_len, enc_off, enc_len});
  }
  return batch;
}

/// x W for a frozen projection W, plus the site's adapter: LoRA adds
/// alpha * x B A^T, IA3 rescales the output columns.
inline Tensor adapted_projection(const Tensor& x, const Tensor& w, const SiteAdapter* adapter) {
  Tensor y = matmul(x, w);
  if (!adapter) return y;
  if (adapter->lora_a.defined()) {
    // Rows of A index output features, rows of B input features.
    y = add(y, scale(matmul(matmul(x, adapter->lora_b), transpose(adapter->lora_a)), adapter->alpha));
  }
  if (adapter->ia3_scale.defined()) y = scale_columns(y, adapter->ia3_scale);
  return y;
}

struct AttentionWeights {
  Tensor q, k, v, o;  // each [d x d], applied as x * W
};

struct FeedForwardWeights {
  Tensor w1;  // [d x ff]
  Tensor w2;  // [ff x d]
};

class FrozenBackbone {
 public:
  explicit FrozenBackbone(BackboneConfig config) : config_(std::move(config)) {
    config_.validate();
    std::mt19937_64 rng(config_.seed);
    const std::size_t d = config_.model_dim, ff = config_.ff();
    auto gaussian = [&](Shape shape, double sd) {
      std::normal_distribution<double> normal(0.0, sd);
      std::vector<double> values(shape_numel(shape));
      for (auto& v : values) v = normal(rng);
      return Tensor(std::move(shape), std::move(values), false);
    };
    const double s = 1.0 / std::sqrt(static_cast<double>(d));
    embedding_ = gaussian({config_.vocab_size, d}, 1.0);
    positions_ = sinusoidal(config_.max_seq_len, d);
    auto attention = [&] { return AttentionWeights{gaussian({d, d}, s), gaussian({d, d}, s), gaussian({d, d}, s), gaussian({d, d}, s)}; };
    auto feed_forward = [&] {
      return FeedForwardWeights{gaussian({d, ff}, s), gaussian({ff, d}, 1.0 / std::sqrt(static_cast<double>(ff)))};
    };
    for (std::size_t l = 0; l < config_.num_layers; ++l) {
      encoder_self_.push_back(attention());
      encoder_ff_.push_back(feed_forward());
    }
    for (std::size_t l = 0; l < config_.num_layers; ++l) {
      decoder_self_.push_back(attention());
      decoder_cross_.push_back(attention());
      decoder_ff_.push_back(feed_forward());
    }
    output_ = gaussian({d, config_.vocab_size}, s);
  }

  const BackboneConfig& config() const { return config_; }

  /// All weights in canonical order with stable names; used for
  /// serialization, hashing, and the parameter census.
  std::vector<std::pair<std::string, Tensor>> named_tensors() const {
    std::vector<std::pair<std::string, Tensor>> out{{"embedding", embedding_}, {"positions", positions_}};
    auto add_attention = [&](const std::string& prefix, const AttentionWeights& w) {
      out.emplace_back(prefix + ".q", w.q);
      out.emplace_back(prefix + ".k", w.k);
      out.emplace_back(prefix + ".v", w.v);
      out.emplace_back(prefix + ".o", w.o);
    };
    auto add_ff = [&](const std::string& prefix, const FeedForwardWeights& w) {
      out.emplace_back(prefix + ".w1", w.w1);
      out.emplace_back(prefix + ".w2", w.w2);
    };
    for (std::size_t l = 0; l < config_.num_layers; ++l) {
      const auto p = "encoder." + std::to_string(l);
      add_attention(p + ".self", encoder_self_[l]);
      add_ff(p + ".ff", encoder_ff_[l]);
    }
    for (std::size_t l = 0; l < config_.num_layers; ++l) {
      const auto p = "decoder." + std::to_string(l);
      add_attention(p + ".self", decoder_self_[l]);
      add_attention(p + ".cross", decoder_cross_[l]);
      add_ff(p + ".ff", decoder_ff_[l]);
    }
    out.emplace_back("output", output_);
    return out;
  }

  /// Overwrites weights from a checkpoint; names and shapes must match.
  void load_tensors(const std::vector<std::pair<std::string, std::vector<double>>>& values) {
    auto named = named_tensors();
    if (values.size() != named.size()) throw DataError("backbone checkpoint has wrong tensor count");
    for (std::size_t i = 0; i < named.size(); ++i) {
      if (values[i].first != named[i].first || values[i].second.size() != named[i].second.numel()) {
        throw DataError("backbone checkpoint tensor mismatch at " + named[i].first);
      }
      auto dst = named[i].second.mutable_values();
      std::copy(values[i].second.begin(), values[i].second.end(), dst.begin());
    }
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& [name, t] : named_tensors()) n += t.numel();
    return n;
  }

  /// FNV-1a over the raw bytes of every weight.
  std::uint64_t weights_hash() const {
    std::uint64_t h = 1469598103934665603ULL;
    for (const auto& [name, t] : named_tensors()) {
      for (double v : t.values()) {
        unsigned char bytes[sizeof(double)];
        std::memcpy(bytes, &v, sizeof(double));
        for (unsigned char b : bytes) {
          h ^= b;
          h *= 1099511628211ULL;
        }
      }
    }
    return h;
  }

  /// The frozen d x d projection wrapped by an attention site.
  const Tensor& projection(const InjectionSite& site) const {
    const auto& w = attention_block(site.layer, site.block);
    switch (site.kind) {
      case SiteKind::q: return w.q;
      case SiteKind::k: return w.k;
      case SiteKind::v: return w.v;
      case SiteKind::o: return w.o;
      case SiteKind::ff: break;
    }
    throw ConfigError("site " + site.name() + " does not wrap a d x d projection");
  }

  /// Encoder output rows for a packed batch.
  Tensor encode(const PackedBatch& batch, const AdapterView* adapters) const {
    const SiteLookup lookup(config_, adapters);
    Tensor x = embed(batch.enc_tokens, batch.enc_positions);
    for (std::size_t l = 0; l < config_.num_layers; ++l) {
      x = add(x, attention_block_forward(x, x, encoder_self_[l], l, Block::encoder_self, batch.enc_segments,
                                         false, lookup));
      x = add(x, feed_forward(x, encoder_ff_[l], l, Block::encoder_ff, lookup));
    }
    return x;
  }

  /// Decoder logits [rows x V] given encoder output and decoder token rows.
  Tensor decode(const Tensor& encoded, const std::vector<int>& dec_tokens, const std::vector<int>& dec_positions,
                const std::vector<AttentionSegment>& dec_segments,
                const std::vector<AttentionSegment>& cross_segments, const AdapterView* adapters) const {
    const SiteLookup lookup(config_, adapters);
    Tensor x = embed(dec_tokens, dec_positions);
    for (std::size_t l = 0; l < config_.num_layers; ++l) {
      x = add(x, attention_block_forward(x, x, decoder_self_[l], l, Block::decoder_self, dec_segments, true,
                                         lookup));
      x = add(x, attention_block_forward(x, encoded, decoder_cross_[l], l, Block::decoder_cross,
                                         cross_segments, false, lookup));
      x = add(x, feed_forward(x, decoder_ff_[l], l, Block::decoder_ff, lookup));
    }
    return matmul(x, output_);
  }

  /// Teacher-forced logits for a packed batch.
  Tensor logits(const PackedBatch& batch, const AdapterView* adapters) const {
    const Tensor encoded = encode(batch, adapters);
    return decode(encoded, batch.dec_tokens, batch.dec_positions, batch.dec_segments, batch.cross_segments,
                  adapters);
  }

  /// Mean token cross-entropy of the labels under teacher forcing.
  Tensor loss(const PackedBatch& batch, const AdapterView* adapters) const {
    return softmax_cross_entropy(logits(batch, adapters), batch.labels);
  }

  /// Greedy decoding of `steps` tokens per example (no gradient).
  std::vector<std::vector<int>> greedy_decode(const std::vector<const Example*>& examples, std::size_t steps,
                                              const AdapterView* adapters) const {
    NoGradGuard no_grad;
    const PackedBatch batch = pack_batch(examples, config_.max_seq_len);
    const Tensor encoded = encode(batch, adapters);
    std::vector<std::vector<int>> decoded(examples.size(), std::vector<int>{kBosId});
    const std::size_t v = config_.vocab_size;
    for (std::size_t step = 0; step < steps; ++step) {
      std::vector<int> tokens, positions;
      std::vector<AttentionSegment> self_segments, cross_segments;
      std::vector<std::size_t> last_rows;
      for (std::size_t b = 0; b < decoded.size(); ++b) {
        const std::size_t off = tokens.size(), len = decoded[b].size();
        for (std::size_t i = 0; i < len; ++i) {
          tokens.push_back(decoded[b][i]);
          positions.push_back(static_cast<int>(i));
        }
        self_segments.push_back({off, len, off, len});
        cross_segments.push_back({off, len, batch.enc_segments[b].q_offset, batch.enc_segments[b].q_len});
        last_rows.push_back(off + len - 1);
      }
      const Tensor out = decode(encoded, tokens, positions, self_segments, cross_segments, adapters);
      for (std::size_t b = 0; b < decoded.size(); ++b) {
        const double* row = out.values().data() + last_rows[b] * v;
        decoded[b].push_back(static_cast<int>(std::max_element(row, row + v) - row));
      }
    }
    for (auto& seq : decoded) seq.erase(seq.begin());
    return decoded;
  }

 private:
  /// Maps (layer, block, kind) to the adapter supplied for that site.
  class SiteLookup {
   public:
    SiteLookup(const BackboneConfig& config, const AdapterView* adapters) : adapters_(adapters) {
      if (!adapters_) return;
      sites_ = injection_sites(config, adapters_->parametrization);
      if (sites_.size() != adapters_->sites.size()) {
        throw DimensionError("adapter view has " + std::to_string(adapters_->sites.size()) + " sites, backbone expects " +
                             std::to_string(sites_.size()));
      }
    }
    const SiteAdapter* find(std::size_t layer, Block block, SiteKind kind) const {
      if (!adapters_) return nullptr;
      for (std::size_t i = 0; i < sites_.size(); ++i) {
        const auto& s = sites_[i];
        if (s.layer == layer && s.block == block && s.kind == kind) return &adapters_->sites[i];
      }
      return nullptr;
    }

   private:
    const AdapterView* adapters_;
    std::vector<InjectionSite> sites_;
  };

  static Tensor sinusoidal(std::size_t len, std::size_t d) {
    std::vector<double> values(len * d);
    for (std::size_t p = 0; p < len; ++p) {
      for (std::size_t i = 0; i < d; ++i) {
        const double freq = std::pow(10000.0, -static_cast<double>(2 * (i / 2)) / static_cast<double>(d));
        values[p * d + i] = (i % 2 == 0) ? std::sin(p * freq) : std::cos(p * freq);
      }
    }
    return Tensor({len, d}, std::move(values), false);
  }

  const AttentionWeights& attention_block(std::size_t layer, Block block) const {
    switch (block) {
      case Block::encoder_self: return encoder_self_.at(layer);
      case Block::decoder_self: return decoder_self_.at(layer);
      case Block::decoder_cross: return decoder_cross_.at(layer);
      default: break;
    }
    throw ConfigError("block has no attention weights");
  }

  Tensor embed(const std::vector<int>& tokens, const std::vector<int>& positions) const {
    return add(gather_rows(embedding_, tokens), gather_rows(positions_, positions));
  }

  static Tensor project(const Tensor& x, const Tensor& w, const SiteAdapter* adapter) {
    return adapted_projection(x, w, adapter);
  }


  Tensor attention_block_forward(const Tensor& x, const Tensor& memory, const AttentionWeights& w,
                                 std::size_t layer, Block block, const std::vector<AttentionSegment>& segments,
                                 bool causal, const SiteLookup& lookup) const {
    const Tensor q = project(x, w.q, lookup.find(layer, block, SiteKind::q));
    const Tensor k = project(memory, w.k, lookup.find(layer, block, SiteKind::k));
    const Tensor v = project(memory, w.v, lookup.find(layer, block, SiteKind::v));
    const Tensor mixed = attention(q, k, v, segments, causal);
    return project(mixed, w.o, lookup.find(layer, block, SiteKind::o));
  }

  Tensor feed_forward(const Tensor& x, const FeedForwardWeights& w, std::size_t layer, Block block,
                      const SiteLookup& lookup) const {
    Tensor hidden = gelu(matmul(x, w.w1));
    if (const SiteAdapter* a = lookup.find(layer, block, SiteKind::ff); a && a->ia3_scale.defined()) {
      hidden = scale_columns(hidden, a->ia3_scale);
    }
    return matmul(hidden, w.w2);
  }

  BackboneConfig config_;
  Tensor embedding_, positions_, output_;
  std::vector<AttentionWeights> encoder_self_, decoder_self_, decoder_cross_;
  std::vector<FeedForwardWeights> encoder_ff_, decoder_ff_;
};

inline FrozenBackbone build_backbone(const BackboneConfig& config) { return FrozenBackbone(config); }

}  // namespace polyroute
