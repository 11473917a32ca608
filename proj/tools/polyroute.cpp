// Copyright (c) 2026 The polyroute Authors
// SPDX-License-Identifier: Apache-2.0

// polyroute command-line front end.
//
//   polyroute pretrain   --config FILE [--set k=v]... [--dry-run]
//   polyroute adapt-eval --config FILE --checkpoint DIR [--set k=v]...
//   polyroute count      --method NAME [--d N] [--r N] [--skills N] [--tasks N] [--heads N]
//   polyroute align      --config FILE --checkpoint DIR [--set k=v]...
//   polyroute suite      --config FILE [--set k=v]...
//
// Exit codes: 0 success, 2 configuration error, 3 data error, 4 training error.

#include <cstdio>
#include <iomanip>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "polyroute/polyroute.hpp"

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitData = 3;
constexpr int kExitTraining = 4;

using namespace polyroute;

void print_budget(std::ostream& out, Method method, const CountDims& dims, std::size_t sites, std::size_t groups) {
  out << "method " << method_name(method) << " (d=" << dims.d << " r=" << dims.r << " skills=" << dims.skills
      << " tasks=" << dims.tasks << " heads=" << dims.heads << " sites=" << sites << " groups=" << groups << ")\n";
  out << std::left << std::setw(10) << "phase" << std::right << std::setw(12) << "per_layer" << std::setw(14)
      << "whole_model" << '\n';
  for (Phase p : kAllPhases) {
    const auto b = count_model_parameters(method, p, dims, sites, groups);
    out << std::left << std::setw(10) << phase_name(p) << std::right << std::setw(12) << b.per_layer << std::setw(14)
        << b.whole_model << '\n';
  }
}

std::size_t lora_sites(std::size_t layers) {
  BackboneConfig c;
  c.num_layers = layers;
  return injection_sites(c, Parametrization::lora).size();
}

/// Parameter budget of every configured method, from the config alone.
void dry_run(const ExperimentConfig& c) {
  const TaskSet set = load_task_source(c);
  const auto train = set.names(Split::train_task);
  BackboneConfig b = backbone_for(c, set);
  const std::size_t sites = injection_sites(b, c.parametrization).size();
  const std::size_t groups = (sites + c.group_period - 1) / c.group_period;
  std::cout << "config ok: " << set.tasks.size() << " tasks (" << train.size() << " train), vocabulary "
            << set.vocab.size() << ", backbone parameters " << FrozenBackbone(b).parameter_count() << "\n";
  const auto strategy = build_strategy(c.method, c.dims(c.method, train.size()));
  CountDims dims{b.model_dim, c.rank, strategy.num_skills, std::max<std::size_t>(train.size(), 1), strategy.heads};
  print_budget(std::cout, c.method, dims, sites, groups);
}

template <class Fn>
int guarded(Fn&& fn) {
  try {
    fn();
    return 0;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return kExitData;
  } catch (const TrainingError& e) {
    std::cerr << "training error: " << e.what() << '\n';
    return kExitTraining;
  } catch (const NumericError& e) {
    std::cerr << "training error: " << e.what() << '\n';
    return kExitTraining;
  } catch (const RoutingError& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return kExitData;
  } catch (const DimensionError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const std::filesystem::filesystem_error& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return kExitData;
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Modular adapter routing: pre-train, adapt, evaluate and count parameters"};
  app.require_subcommand(1);

  std::string config_path, checkpoint;
  std::vector<std::string> overrides;
  bool dry = false;

  auto add_config = [&](CLI::App* sub) {
    sub->add_option("--config", config_path, "Experiment config file")->required();
    sub->add_option("--set", overrides, "Override a setting: section.key=value")->take_all();
  };

  auto* pretrain_cmd = app.add_subcommand("pretrain", "Multi-task pre-training; writes a checkpoint");
  add_config(pretrain_cmd);
  pretrain_cmd->add_flag("--dry-run", dry, "Validate the config and print the parameter budget");

  auto* adapt_cmd = app.add_subcommand("adapt-eval", "Few-shot adaptation and evaluation of every test task");
  add_config(adapt_cmd);
  adapt_cmd->add_option("--checkpoint", checkpoint, "Checkpoint directory")->required();

  auto* align_cmd = app.add_subcommand("align", "Gradient alignment between training tasks");
  add_config(align_cmd);
  align_cmd->add_option("--checkpoint", checkpoint, "Checkpoint directory")->required();

  auto* suite_cmd = app.add_subcommand("suite", "Pre-train and evaluate every configured method");
  add_config(suite_cmd);

  std::string method;
  CountDims dims;
  dims.heads = 1;
  std::size_t layers = 2, period = 1;
  auto* count_cmd = app.add_subcommand("count", "Trainable parameter budget per phase");
  count_cmd->add_option("--method", method, "Method name")->required();
  count_cmd->add_option("--d", dims.d, "Model dimension")->capture_default_str();
  count_cmd->add_option("--r", dims.r, "LoRA rank")->capture_default_str();
  count_cmd->add_option("--skills", dims.skills, "Inventory size |S|")->capture_default_str();
  count_cmd->add_option("--tasks", dims.tasks, "Training tasks |T|")->capture_default_str();
  count_cmd->add_option("--heads", dims.heads, "Routing heads h")->capture_default_str();
  count_cmd->add_option("--layers", layers, "Encoder and decoder layers, for the whole-model count")->capture_default_str();
  count_cmd->add_option("--group-period", period, "Sites sharing one routing tensor")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitConfig;
  }

  if (*count_cmd) {
    return guarded([&] {
      const Method m = parse_method(method);
      if (layers == 0 || period == 0) throw ConfigError("--layers and --group-period must be positive");
      const std::size_t sites = lora_sites(layers);
      print_budget(std::cout, m, dims, sites, (sites + period - 1) / period);
    });
  }

  return guarded([&] {
    const ExperimentConfig config = load_config(config_path, overrides);
    if (*pretrain_cmd) {
      if (dry) {
        dry_run(config);
        return;
      }
      const auto dir = cmd_pretrain(config);
      std::cout << "checkpoint written to " << dir.string() << '\n';
    } else if (*adapt_cmd) {
      const auto table = cmd_adapt_eval(config, checkpoint);
      std::cout << table.summary_csv();
    } else if (*align_cmd) {
      const auto report = cmd_align(config, checkpoint);
      std::cout << "mean off-diagonal alignment " << report.mean_off_diagonal << " over " << report.valid_pairs
                << " pairs\n";
    } else if (*suite_cmd) {
      const auto table = cmd_suite(config);
      std::cout << table.summary_csv();
    }
  });
}
