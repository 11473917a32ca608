// Copyright (c) 2026 The polyroute Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

// Checkpoint directory layout:
//   backbone.bin   frozen weights
//   inventory.bin  skill tensors
//   routing.json   routing logits or fixed allocation
//   manifest.json  strategy, options, hashes, creation time
//   vocab.json     token -> id map
//
// Binary files are a magic tag, a length-prefixed JSON header naming every
// tensor and its shape, then the raw float64 payload in header order.

#include <chrono>
#include <cstdint>
#include <cstring>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "polyroute/model.hpp"
#include "polyroute/strategies.hpp"
#include "polyroute/tasks.hpp"

namespace polyroute {

inline constexpr char kTensorFileMagic[8] = {'P', 'R', 'T', 'E', 'N', 'S', '0', '1'};
inline constexpr int kCheckpointVersion = 1;

struct NamedBlob {
  std::string name;
  Shape shape;
  std::vector<double> values;
};

inline void write_tensor_file(const std::filesystem::path& path, const nlohmann::json& meta,
                              const std::vector<NamedBlob>& blobs) {
  nlohmann::json header = meta;
  auto& list = header["tensors"] = nlohmann::json::array();
  for (const auto& b : blobs) list.push_back({{"name", b.name}, {"shape", b.shape}});
  const std::string text = header.dump();
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  out.write(kTensorFileMagic, sizeof(kTensorFileMagic));
  const std::uint64_t length = text.size();
  out.write(reinterpret_cast<const char*>(&length), sizeof(length));
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const auto& b : blobs) {
    out.write(reinterpret_cast<const char*>(b.values.data()), static_cast<std::streamsize>(b.values.size() * sizeof(double)));
  }
  if (!out) throw DataError("short write to " + path.string());
}

inline std::pair<nlohmann::json, std::vector<NamedBlob>> read_tensor_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  char magic[sizeof(kTensorFileMagic)];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kTensorFileMagic, sizeof(magic)) != 0) {
    throw DataError(path.string() + " is not a polyroute tensor file");
  }
  std::uint64_t length = 0;
  in.read(reinterpret_cast<char*>(&length), sizeof(length));
  if (!in || length > (1ULL << 32)) throw DataError(path.string() + ": corrupt header length");
  std::string text(length, '\0');
  in.read(text.data(), static_cast<std::streamsize>(length));
  if (!in) throw DataError(path.string() + ": truncated header");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw DataError(path.string() + ": bad header: " + e.what());
  }
  std::vector<NamedBlob> blobs;
  for (const auto& t : header.at("tensors")) {
    NamedBlob b{t.at("name").get<std::string>(), t.at("shape").get<Shape>(), {}};
    b.values.resize(shape_numel(b.shape));
    in.read(reinterpret_cast<char*>(b.values.data()), static_cast<std::streamsize>(b.values.size() * sizeof(double)));
    if (!in) throw DataError(path.string() + ": truncated payload at " + b.name);
    blobs.push_back(std::move(b));
  }
  if (in.peek() != std::char_traits<char>::eof()) throw DataError(path.string() + ": trailing bytes");
  return {header, blobs};
}

inline nlohmann::json backbone_config_json(const BackboneConfig& c) {
  return {{"vocab_size", c.vocab_size}, {"model_dim", c.model_dim}, {"num_layers", c.num_layers},
          {"ff_dim", c.ff()},           {"max_seq_len", c.max_seq_len}, {"attention_heads", c.attention_heads},
          {"seed", c.seed}};
}

inline BackboneConfig backbone_config_from_json(const nlohmann::json& j) {
  BackboneConfig c;
  c.vocab_size = j.at("vocab_size").get<std::size_t>();
  c.model_dim = j.at("model_dim").get<std::size_t>();
  c.num_layers = j.at("num_layers").get<std::size_t>();
  c.ff_dim = j.at("ff_dim").get<std::size_t>();
  c.max_seq_len = j.at("max_seq_len").get<std::size_t>();
  c.attention_heads = j.at("attention_heads").get<std::size_t>();
  c.seed = j.at("seed").get<std::uint64_t>();
  return c;
}

inline std::string hex64(std::uint64_t v) {
  std::ostringstream out;
  out << std::hex << std::setw(16) << std::setfill('0') << v;
  return out.str();
}

inline std::string utc_timestamp() {
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  std::ostringstream out;
  out << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
  return out.str();
}

/// Everything needed to rebuild a pre-trained model.
struct Checkpoint {
  AdaptedModel model;
  StrategyDescriptor strategy;
  ModelOptions options;
  Vocabulary vocab;
  std::vector<std::string> train_tasks;
  nlohmann::json manifest;
};

inline nlohmann::json routing_json(const AdaptedModel& model) {
  nlohmann::json j;
  j["combination"] = to_string(model.combination);
  if (model.router) {
    const Router& r = *model.router;
    j["num_skills"] = r.num_skills();
    j["heads"] = r.heads();
    j["num_sites"] = r.groups().num_sites();
    j["group_period"] = r.groups().period();
    j["num_groups"] = r.groups().num_groups();
    j["temperature"] = {{"start", r.schedule().start}, {"end", r.schedule().end}};
    nlohmann::json tasks = nlohmann::json::object();
    for (const auto& task : r.tasks()) {
      auto& groups = tasks[task] = nlohmann::json::array();
      for (const auto& row : r.task_rows(task)) groups.push_back(std::vector<double>(row.values().begin(), row.values().end()));
    }
    j["logits"] = tasks;
  }
  if (model.allocation) {
    j["allocation"] = {{"tasks", model.allocation->tasks}, {"rows", model.allocation->rows}};
  }
  return j;
}

inline void save_checkpoint(const std::filesystem::path& dir, const AdaptedModel& model,
                            const StrategyDescriptor& strategy, const ModelOptions& options, const Vocabulary& vocab,
                            const std::vector<std::string>& train_tasks) {
  std::filesystem::create_directories(dir);
  const FrozenBackbone& bb = *model.backbone;

  std::vector<NamedBlob> backbone_blobs;
  for (const auto& [name, t] : bb.named_tensors()) {
    backbone_blobs.push_back({name, t.shape(), {t.values().begin(), t.values().end()}});
  }
  write_tensor_file(dir / "backbone.bin", {{"config", backbone_config_json(bb.config())}}, backbone_blobs);

  const SkillInventory& inv = model.inventory;
  std::vector<NamedBlob> skill_blobs;
  static const char* kLoraRoles[] = {"A", "B"};
  for (std::size_t s = 0; s < inv.num_sites(); ++s) {
    for (std::size_t k = 0; k < inv.num_skills(); ++k) {
      const auto& tensors = inv.at(s)[k].tensors;
      for (std::size_t role = 0; role < tensors.size(); ++role) {
        const std::string r = inv.parametrization() == Parametrization::lora ? kLoraRoles[role] : "l";
        skill_blobs.push_back({inv.sites()[s].name() + "/skill" + std::to_string(k) + "/" + r, tensors[role].shape(),
                               {tensors[role].values().begin(), tensors[role].values().end()}});
      }
    }
  }
  nlohmann::json sites = nlohmann::json::array();
  for (const auto& site : inv.sites()) sites.push_back(site.name());
  write_tensor_file(dir / "inventory.bin",
                    {{"parametrization", to_string(inv.parametrization())},
                     {"rank", inv.rank()},
                     {"num_skills", inv.num_skills()},
                     {"sites", sites}},
                    skill_blobs);

  auto write_json = [&](const std::string& file, const nlohmann::json& j) {
    std::ofstream out(dir / file);
    if (!out) throw DataError("cannot write " + (dir / file).string());
    out << j.dump(2) << '\n';
  };
  write_json("routing.json", routing_json(model));
  write_json("vocab.json", vocab.to_json());
  nlohmann::json manifest;
  manifest["version"] = kCheckpointVersion;
  manifest["created_at"] = utc_timestamp();
  manifest["strategy"] = {{"method", std::string(method_name(strategy.method))},
                          {"num_skills", strategy.num_skills},
                          {"heads", strategy.heads},
                          {"soup_k", strategy.soup_k}};
  manifest["options"] = {{"parametrization", to_string(options.parametrization)},
                         {"rank", options.rank},
                         {"group_period", options.group_period},
                         {"temperature_start", options.schedule.start},
                         {"temperature_end", options.schedule.end},
                         {"seed", options.seed}};
  manifest["train_tasks"] = train_tasks;
  manifest["backbone_hash"] = hex64(bb.weights_hash());
  manifest["files"] = {"backbone.bin", "inventory.bin", "routing.json", "manifest.json", "vocab.json"};
  write_json("manifest.json", manifest);
}

inline nlohmann::json read_json_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path.string());
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw DataError(path.string() + ": " + e.what());
  }
}

inline Checkpoint load_checkpoint(const std::filesystem::path& dir) {
  Checkpoint ck;
  try {
    ck.manifest = read_json_file(dir / "manifest.json");
    if (ck.manifest.at("version").get<int>() != kCheckpointVersion) throw DataError("unsupported checkpoint version");
    ck.vocab = Vocabulary::from_json(read_json_file(dir / "vocab.json"));
    ck.train_tasks = ck.manifest.at("train_tasks").get<std::vector<std::string>>();

    const auto& o = ck.manifest.at("options");
    ck.options.parametrization = parse_parametrization(o.at("parametrization").get<std::string>());
    ck.options.rank = o.at("rank").get<std::size_t>();
    ck.options.group_period = o.at("group_period").get<std::size_t>();
    ck.options.schedule = {o.at("temperature_start").get<double>(), o.at("temperature_end").get<double>()};
    ck.options.seed = o.at("seed").get<std::uint64_t>();

    auto [bb_header, bb_blobs] = read_tensor_file(dir / "backbone.bin");
    const BackboneConfig config = backbone_config_from_json(bb_header.at("config"));
    config.validate();
    auto backbone = std::make_shared<FrozenBackbone>(config);
    std::vector<std::pair<std::string, std::vector<double>>> values;
    for (auto& b : bb_blobs) values.emplace_back(b.name, std::move(b.values));
    backbone->load_tensors(values);
    if (hex64(backbone->weights_hash()) != ck.manifest.at("backbone_hash").get<std::string>()) {
      throw DataError("backbone weights do not match the manifest hash");
    }

    const auto& s = ck.manifest.at("strategy");
    StrategyDims dims;
    dims.num_skills = s.at("num_skills").get<std::size_t>();
    dims.heads = s.at("heads").get<std::size_t>();
    dims.soup_k = s.at("soup_k").get<std::size_t>();
    dims.num_train_tasks = ck.train_tasks.size();
    dims.model_dim = config.model_dim;
    ck.strategy = build_strategy(parse_method(s.at("method").get<std::string>()), dims);
    ck.strategy.heads = dims.heads;

    auto [inv_header, inv_blobs] = read_tensor_file(dir / "inventory.bin");
    const auto sites = injection_sites(config, ck.options.parametrization);
    const std::size_t num_skills = inv_header.at("num_skills").get<std::size_t>();
    const std::size_t roles = ck.options.parametrization == Parametrization::lora ? 2 : 1;
    if (inv_blobs.size() != sites.size() * num_skills * roles) throw DataError("inventory tensor count mismatch");
    std::vector<std::vector<Skill>> skills(sites.size());
    std::size_t next = 0;
    for (std::size_t site = 0; site < sites.size(); ++site) {
      for (std::size_t k = 0; k < num_skills; ++k) {
        Skill skill;
        for (std::size_t r = 0; r < roles; ++r, ++next) {
          auto& b = inv_blobs[next];
          if (b.name.rfind(sites[site].name() + "/", 0) != 0) throw DataError("inventory tensor out of order: " + b.name);
          skill.tensors.emplace_back(b.shape, std::move(b.values), true);
        }
        skills[site].push_back(std::move(skill));
      }
    }
    ck.model.backbone = std::move(backbone);
    ck.model.inventory = SkillInventory(ck.options.parametrization, inv_header.at("rank").get<std::size_t>(), sites,
                                        std::move(skills));
    ck.model.combination = ck.strategy.combination;

    const auto routing = read_json_file(dir / "routing.json");
    if (routing.contains("logits")) {
      Router router(sites.size(), routing.at("group_period").get<std::size_t>(), routing.at("num_skills").get<std::size_t>(),
                    routing.at("heads").get<std::size_t>(),
                    {routing.at("temperature").at("start").get<double>(), routing.at("temperature").at("end").get<double>()});
      const std::size_t S = router.num_skills(), h = router.heads();
      for (const auto& task : ck.train_tasks) {
        const auto& groups = routing.at("logits").at(task);
        if (groups.size() != router.tensors().size()) throw DataError("routing group count mismatch for " + task);
        for (std::size_t g = 0; g < groups.size(); ++g) {
          router.tensors()[g].set_row(task, Tensor({S, h}, groups[g].get<std::vector<double>>(), true));
        }
      }
      ck.model.router = std::move(router);
    }
    if (routing.contains("allocation")) {
      FixedAllocation a;
      a.tasks = routing.at("allocation").at("tasks").get<std::vector<std::string>>();
      a.rows = routing.at("allocation").at("rows").get<std::vector<std::vector<std::uint8_t>>>();
      ck.model.allocation = std::move(a);
    }
  } catch (const nlohmann::json::exception& e) {
    throw DataError("malformed checkpoint in " + dir.string() + ": " + e.what());
  }
  return ck;
}

}  // namespace polyroute
