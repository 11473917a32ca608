// Copyright (c) 2026 The polyroute Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <algorithm>
#include <map>
#include <random>

#include "test_support.hpp"

namespace polyroute {
namespace {

using testing::ptrs;
using testing::random_examples;

struct Bench {
  TaskSet set;
  std::shared_ptr<const FrozenBackbone> bb;
  std::vector<std::string> train;
  ModelOptions options;
  TrainerConfig trainer;

  explicit Bench(GeneratorConfig g = testing::small_generator(), std::size_t d = 16) {
    set = generate_compositional_tasks(g);
    BackboneConfig cfg;
    cfg.vocab_size = set.vocab.size();
    cfg.model_dim = d;
    cfg.max_seq_len = g.sequence_length + 1;
    cfg.seed = 3;
    bb = std::make_shared<const FrozenBackbone>(cfg);
    train = set.names(Split::train_task);
    options.rank = 2;
    trainer.steps = 40;
    trainer.eval_every = 10;
    trainer.batch_size = 8;
    trainer.adapt_steps = 10;
  }

  StrategyDescriptor strategy(Method m, std::size_t skills = 4, std::size_t heads = 2) const {
    StrategyDims d;
    d.num_skills = (m == Method::private_mu || m == Method::adapter_soup) ? 0 : skills;
    d.heads = heads;
    d.num_train_tasks = train.size();
    d.model_dim = bb->config().model_dim;
    d.soup_k = std::min<std::size_t>(2, train.size());
    return build_strategy(m, d);
  }

  AdaptedModel model(const StrategyDescriptor& s) const { return assemble_model(s, bb, train, options); }
};

std::vector<std::vector<double>> values_of(const std::vector<Tensor>& ts) {
  std::vector<std::vector<double>> out;
  for (const auto& t : ts) out.emplace_back(t.values().begin(), t.values().end());
  return out;
}

TEST(Adam, HandComputedSteps) {
  Tensor p = Tensor::scalar(1.0, true);
  Tensor frozen = Tensor::scalar(5.0, true);
  Adam adam({p, frozen}, 0.1);
  for (int step = 0; step < 2; ++step) {
    adam.zero_grad();
    scale(p, 2.0).backward();  // constant gradient 2
    adam.step();
  }
  // Bias-corrected moments equal g and g^2 for a constant gradient, so each
  // step moves lr * g / (|g| + eps).
  EXPECT_NEAR(p.item(), 1.0 - 2 * 0.1 * 2.0 / (2.0 + 1e-8), 1e-15);
  EXPECT_EQ(frozen.item(), 5.0);
  EXPECT_EQ(adam.step_count(), 2u);
}

TEST(Adam, FirstStepFromZeroMomentsIsSignScaled) {
  Tensor p({3, 1}, {0.0, 0.0, 0.0}, true);
  Adam adam({p}, 0.01);
  sum(mul(p, Tensor({3, 1}, {3.0, -0.5, 0.0}))).backward();
  adam.step();
  EXPECT_NEAR(p.values()[0], -0.01, 1e-10);
  EXPECT_NEAR(p.values()[1], 0.01, 1e-9);
  EXPECT_EQ(p.values()[2], 0.0);
}

TEST(Adam, PerParameterRates) {
  Tensor a = Tensor::scalar(0.0, true), b = Tensor::scalar(0.0, true);
  Adam adam({a, b}, 0.01);
  adam.set_lr({b, Tensor::scalar(0.0, true)}, 0.5);  // tensors it does not own are ignored
  add(a, b).backward();
  adam.step();
  EXPECT_NEAR(a.item(), -0.01 / (1.0 + 1e-8), 1e-15);
  EXPECT_NEAR(b.item(), -0.5 / (1.0 + 1e-8), 1e-15);
}

TEST(SplitPretrainData, DisjointWithAtLeastOneValidationExample) {
  const Bench s;
  const auto data = split_pretrain_data(s.set, 0.1, 4);
  EXPECT_EQ(data.tasks, s.train);
  for (const auto& t : data.tasks) {
    EXPECT_EQ(data.validation.at(t).size(), 3u);
    EXPECT_EQ(data.train.at(t).size() + data.validation.at(t).size(), s.set.find(t).examples.size());
  }
  const auto tiny = split_pretrain_data(generate_compositional_tasks(testing::small_generator(2, 0, 4)), 0.1, 4);
  EXPECT_EQ(tiny.validation.begin()->second.size(), 1u);
}

TEST(Pretrain, ZeroStepsKeepsInitialization) {
  Bench s;
  s.trainer.steps = 0;
  for (Method m : {Method::shared, Method::poly_s, Method::random_mu}) {
    const auto strategy = s.strategy(m);
    AdaptedModel model = s.model(strategy);
    const auto before = values_of(model.all_parameters());
    const TrainLog log = pretrain(model, strategy, s.set, s.trainer);
    EXPECT_TRUE(log.steps.empty());
    EXPECT_EQ(values_of(model.all_parameters()), before) << method_name(m);
  }
}

TEST(Pretrain, DefaultConfigBuildsEveryTrainableMethod) {
  // num_skills sizes routed inventories only; per-task methods take |T|.
  const ExperimentConfig c;
  for (Method m : kTrainableMethods) {
    const auto strategy = build_strategy(m, c.dims(m, 20));
    const bool per_task = m == Method::private_mu || m == Method::adapter_soup;
    EXPECT_EQ(strategy.num_skills, per_task ? 20u : (m == Method::shared ? 1u : c.num_skills)) << method_name(m);
  }
}

TEST(Pretrain, SharedSingleTaskLossDecreasesOverFirstFiftySteps) {
  // Default synthetic benchmark with one training task, default model size.
  const ExperimentConfig c;
  GeneratorConfig g = c.generator;
  g.num_train_tasks = 1;
  g.num_test_tasks = 0;
  const TaskSet set = generate_compositional_tasks(g);
  const auto bb = make_backbone(c, set);
  const auto strategy = build_strategy(Method::shared, c.dims(Method::shared, 1));
  AdaptedModel model = assemble_model(strategy, bb, set.names(Split::train_task), c.model_options(0));
  const auto& examples = set.tasks[0].examples;
  const auto full = pack_batch(ptrs(examples), bb->config().max_seq_len);
  auto objective = [&] {
    NoGradGuard no_grad;
    return model.eval_loss(full, set.tasks[0].name).item();
  };
  Adam adam(prepare_phase(model, strategy, Phase::pretrain), 1e-2);
  std::mt19937_64 rng(0);
  double previous = objective();
  for (int step = 0; step < 50; ++step) {
    const auto batch = pack_batch(detail::sample_batch(examples, 16, rng), bb->config().max_seq_len);
    adam.zero_grad();
    model.loss(batch, set.tasks[0].name, RoutingMode::train_sampled, 1.0, rng).backward();
    adam.step();
    const double now = objective();
    EXPECT_LT(now, previous) << "step " << step + 1;
    previous = now;
  }
}

TEST(Pretrain, IdenticalSeedsGiveIdenticalLogsAndParameters) {
  Bench s;
  s.trainer.probe_every = 20;
  const auto strategy = s.strategy(Method::poly_s);
  AdaptedModel a = s.model(strategy), b = s.model(strategy);
  std::vector<AlignmentReport> pa, pb;
  const TrainLog la = pretrain(a, strategy, s.set, s.trainer, &pa);
  const TrainLog lb = pretrain(b, strategy, s.set, s.trainer, &pb);
  EXPECT_EQ(la.steps_csv(), lb.steps_csv());
  EXPECT_EQ(la.evals_csv(), lb.evals_csv());
  EXPECT_EQ(la.to_json().dump(), lb.to_json().dump());
  EXPECT_EQ(values_of(a.all_parameters()), values_of(b.all_parameters()));
  ASSERT_EQ(pa.size(), 2u);
  EXPECT_EQ(pa[1].to_json().dump(), pb[1].to_json().dump());
}

TEST(Pretrain, StepsIncreaseWithinEachPhase) {
  Bench s;
  s.trainer.probe_every = 15;
  const auto strategy = s.strategy(Method::poly);
  AdaptedModel m = s.model(strategy);
  std::vector<AlignmentReport> probes;
  const TrainLog log = pretrain(m, strategy, s.set, s.trainer, &probes);
  std::map<std::string, std::size_t> last;
  for (const auto& r : log.steps) {
    if (last.count(r.phase)) EXPECT_GT(r.step, last[r.phase]) << r.phase;
    last[r.phase] = r.step;
  }
  EXPECT_EQ(last["pretrain"], 40u);
  EXPECT_EQ(probes.size(), 3u);
  const auto steps = nlohmann::json::parse(log.to_json().dump());
  EXPECT_EQ(steps["steps"].size(), log.steps.size());
}

TEST(Pretrain, TemperatureFollowsTheSchedule) {
  Bench s;
  const auto strategy = s.strategy(Method::poly);
  s.options.schedule = {1.0, 0.1};
  AdaptedModel m = s.model(strategy);
  const TrainLog log = pretrain(m, strategy, s.set, s.trainer);
  EXPECT_EQ(log.steps.front().temperature, 1.0);
  EXPECT_NEAR(log.steps.back().temperature, 0.1, 1e-15);
}

TEST(Pretrain, EarlyStoppingRestoresTheBestEvaluation) {
  Bench s;
  s.trainer.lr = 0.3;  // large enough that validation perplexity gets worse
  s.trainer.steps = 200;
  s.trainer.eval_every = 5;
  s.trainer.patience = 2;
  const auto strategy = s.strategy(Method::shared);
  AdaptedModel m = s.model(strategy);
  const TrainLog log = pretrain(m, strategy, s.set, s.trainer);
  std::map<std::size_t, std::pair<double, int>> per_step;
  for (const auto& e : log.evals) {
    per_step[e.step].first += e.perplexity;
    per_step[e.step].second += 1;
  }
  double best = INFINITY;
  std::size_t best_step = 0;
  for (const auto& [step, acc] : per_step) {
    const double mean = acc.first / acc.second;
    if (mean < best) {
      best = mean;
      best_step = step;
    }
  }
  EXPECT_TRUE(log.stopped_early);
  EXPECT_EQ(log.best_step, best_step);
  EXPECT_EQ(log.best_perplexity, best);
  EXPECT_LT(log.best_step, per_step.rbegin()->first);
  const auto data = split_pretrain_data(s.set, s.trainer.val_fraction, s.trainer.seed);
  TrainLog scratch;
  EXPECT_EQ(validation_perplexity(m, data.tasks, data.validation, scratch, 0, "check"), best);
}

TEST(Pretrain, DivergenceIsATrainingError) {
  Bench s;
  s.trainer.lr = 1e150;
  s.trainer.eval_every = 0;
  const auto strategy = s.strategy(Method::shared);
  AdaptedModel m = s.model(strategy);
  const auto before = values_of(m.all_parameters());
  EXPECT_THROW(pretrain(m, strategy, s.set, s.trainer), TrainingError);
  EXPECT_EQ(values_of(m.all_parameters()), before);  // last good parameters
}

TEST(Pretrain, FrozenBackboneIsUntouchedByEveryStrategy) {
  Bench s;
  s.trainer.steps = 6;
  const auto hash = s.bb->weights_hash();
  for (Method m : kTrainableMethods) {
    const auto strategy = s.strategy(m);
    AdaptedModel model = s.model(strategy);
    pretrain(model, strategy, s.set, s.trainer);
    const auto& task = *s.set.test_tasks().front();
    TestTaskContext ctx{task.name, {task.examples.begin(), task.examples.begin() + 4}, {}, 0};
    for (const auto* t : s.set.train_tasks()) ctx.train_examples[t->name] = t->examples;
    AdaptedModel test = init_test_task(strategy, model, ctx);
    adapt(test, strategy, task.name, ctx.support, s.trainer);
    EXPECT_EQ(s.bb->weights_hash(), hash) << method_name(m);
    for (const auto& [name, t] : s.bb->named_tensors()) EXPECT_FALSE(t.requires_grad());
  }
}

struct Adapted {
  AdaptedModel trained, test;
  StrategyDescriptor strategy;
  std::string task;
  std::vector<Example> support;
};

Adapted adapted_model(Method m, std::size_t steps = 10) {
  Bench s;
  s.trainer.steps = 10;
  s.trainer.adapt_steps = steps;
  Adapted out;
  out.strategy = s.strategy(m);
  out.trained = s.model(out.strategy);
  pretrain(out.trained, out.strategy, s.set, s.trainer);
  const auto& task = *s.set.test_tasks().front();
  out.task = task.name;
  out.support.assign(task.examples.begin(), task.examples.begin() + 8);
  out.test = init_test_task(out.strategy, out.trained, {task.name, out.support, {}, 0});
  adapt(out.test, out.strategy, out.task, out.support, s.trainer);
  return out;
}

TEST(Adapt, RoutingOnlyMethodsLeaveSkillsBitIdentical) {
  for (Method m : {Method::poly_z, Method::poly_s_z}) {
    Bench s;
    const auto strategy = s.strategy(m);
    AdaptedModel trained = s.model(strategy);
    testing::perturb_adapters(trained, 3);
    const auto& task = *s.set.test_tasks().front();
    const std::vector<Example> support(task.examples.begin(), task.examples.begin() + 8);
    AdaptedModel test = init_test_task(strategy, trained, {task.name, support, {}, 0});
    const auto skills_before = values_of(test.inventory.parameters());
    const auto rows_before = values_of(test.router->task_rows(task.name));
    adapt(test, strategy, task.name, support, s.trainer);
    EXPECT_EQ(values_of(test.inventory.parameters()), skills_before) << method_name(m);
    EXPECT_NE(values_of(test.router->task_rows(task.name)), rows_before) << method_name(m);
    EXPECT_EQ(values_of(test.router->task_rows(s.train[0])), values_of(trained.router->task_rows(s.train[0])));
  }
}

TEST(Adapt, RoutingRateAppliesToRoutingLogitsOnly) {
  Bench s;
  s.trainer.adapt_steps = 1;
  s.trainer.adapt_lr = 1e-3;
  s.trainer.routing_lr = 0.25;
  const auto strategy = s.strategy(Method::poly_s);
  AdaptedModel trained = s.model(strategy);
  testing::perturb_adapters(trained, 6);
  const auto& task = *s.set.test_tasks().front();
  const std::vector<Example> support(task.examples.begin(), task.examples.begin() + 8);
  AdaptedModel test = init_test_task(strategy, trained, {task.name, support, {}, 0});
  const auto rows_before = values_of(test.router->task_rows(task.name));
  const auto skills_before = values_of(test.inventory.parameters());
  adapt(test, strategy, task.name, support, s.trainer);
  // A first Adam step moves every coordinate with a non-zero gradient by its rate.
  auto largest_move = [](const auto& before, const auto& after) {
    double worst = 0.0;
    for (std::size_t i = 0; i < before.size(); ++i)
      for (std::size_t j = 0; j < before[i].size(); ++j) worst = std::max(worst, std::abs(after[i][j] - before[i][j]));
    return worst;
  };
  EXPECT_NEAR(largest_move(rows_before, values_of(test.router->task_rows(task.name))), 0.25, 1e-6);
  EXPECT_NEAR(largest_move(skills_before, values_of(test.inventory.parameters())), 1e-3, 1e-6);
}

TEST(Adapt, ZeroStepPolyMuEvaluatesTheAveragedInitialization) {
  Bench s;
  s.trainer.adapt_steps = 0;
  const auto strategy = s.strategy(Method::poly_mu);
  AdaptedModel trained = s.model(strategy);
  testing::perturb_adapters(trained, 4);
  const auto& task = *s.set.test_tasks().front();
  const std::vector<Example> support(task.examples.begin(), task.examples.begin() + 4);
  const std::vector<Example> query(task.examples.begin() + 4, task.examples.end());
  AdaptedModel test = init_test_task(strategy, trained, {task.name, support, {}, 0});
  const auto averaged = values_of(average_inventory(trained.inventory).parameters());
  const TrainLog log = adapt(test, strategy, task.name, support, s.trainer);
  EXPECT_TRUE(log.steps.empty());
  EXPECT_EQ(values_of(test.inventory.parameters()), averaged);
  AdaptedModel reference;
  reference.backbone = trained.backbone;
  reference.inventory = average_inventory(trained.inventory);
  const Metrics a = evaluate(test, task.name, query), b = evaluate(reference, task.name, query);
  EXPECT_EQ(a.token_accuracy, b.token_accuracy);
  EXPECT_EQ(a.perplexity, b.perplexity);
}

TEST(Adapt, TestTasksDoNotInterfere) {
  Bench s;
  const auto strategy = s.strategy(Method::poly_s);
  AdaptedModel trained = s.model(strategy);
  testing::perturb_adapters(trained, 5);
  const auto snapshot = values_of(trained.all_parameters());
  const auto tests = s.set.test_tasks();
  const std::vector<Example> sup0(tests[0]->examples.begin(), tests[0]->examples.begin() + 6);
  const std::vector<Example> sup1(tests[1]->examples.begin(), tests[1]->examples.begin() + 6);
  AdaptedModel a = init_test_task(strategy, trained, {tests[0]->name, sup0, {}, 0});
  adapt(a, strategy, tests[0]->name, sup0, s.trainer);
  const auto a_values = values_of(a.all_parameters());
  AdaptedModel b = init_test_task(strategy, trained, {tests[1]->name, sup1, {}, 0});
  adapt(b, strategy, tests[1]->name, sup1, s.trainer);
  EXPECT_EQ(values_of(trained.all_parameters()), snapshot);
  EXPECT_EQ(values_of(a.all_parameters()), a_values);
}

TEST(Adapt, EarlyStoppingSplitsSupportAndRestoresBest) {
  Bench s;
  s.trainer.adapt_early_stopping = true;
  s.trainer.adapt_steps = 60;
  s.trainer.adapt_eval_every = 5;
  s.trainer.adapt_lr = 0.5;
  s.trainer.patience = 1;
  const auto strategy = s.strategy(Method::shared);
  AdaptedModel m = s.model(strategy);
  const auto& task = *s.set.test_tasks().front();
  const std::vector<Example> support(task.examples.begin(), task.examples.begin() + 10);
  const TrainLog log = adapt(m, strategy, task.name, support, s.trainer);
  double best = INFINITY;
  for (const auto& e : log.evals) best = std::min(best, e.perplexity);
  EXPECT_EQ(log.best_perplexity, best);
  const std::vector<Example> held_out(support.end() - 2, support.end());
  EXPECT_EQ(detail::teacher_forced(m, task.name, held_out).perplexity, best);
}

TEST(Evaluate, UniformLogitsGivePerplexityV) {
  Bench s;
  FrozenBackbone zeroed(s.bb->config());
  std::vector<std::pair<std::string, std::vector<double>>> values;
  for (const auto& [name, t] : s.bb->named_tensors()) {
    values.emplace_back(name, std::vector<double>(t.values().begin(), t.values().end()));
    if (name == "output") std::fill(values.back().second.begin(), values.back().second.end(), 0.0);
  }
  zeroed.load_tensors(values);
  AdaptedModel m;
  m.backbone = std::make_shared<const FrozenBackbone>(zeroed);
  m.inventory = init_inventory(injection_sites(zeroed.config(), Parametrization::lora), 1, Parametrization::lora, 2, 0);
  const Metrics metrics = evaluate(m, "any", s.set.tasks[0].examples);
  EXPECT_NEAR(metrics.perplexity, static_cast<double>(s.set.vocab.size()), 1e-12);
}

TEST(Evaluate, UntrainedAccuracyOnRandomTargetsIsChance) {
  // Targets drawn uniformly over all V ids are independent of the model's
  // predictions, so each target token is hit with probability 1/V. The
  // appended end-of-sequence position is not random: bound it by 0 or 1.
  GeneratorConfig g = testing::small_generator();
  g.sequence_length = 8;
  Bench s(g);
  AdaptedModel m = s.model(s.strategy(Method::shared));
  const std::size_t V = s.set.vocab.size(), L = 8, n = 600;
  std::mt19937_64 rng(21);
  std::uniform_int_distribution<int> tok(0, static_cast<int>(V) - 1);
  std::vector<Example> query(n);
  for (auto& e : query) {
    for (std::size_t i = 0; i < 4; ++i) e.input.push_back(tok(rng) % static_cast<int>(V - 4) + 4);
    for (std::size_t i = 0; i < L; ++i) e.target.push_back(tok(rng));
  }
  const Metrics metrics = evaluate(m, "any", query);
  const double p = 1.0 / static_cast<double>(V);
  const double sigma = std::sqrt(p * (1 - p) / static_cast<double>(n * L));
  const double frac = static_cast<double>(L) / static_cast<double>(L + 1);
  EXPECT_GE(metrics.token_accuracy, frac * (p - 3 * sigma));
  EXPECT_LE(metrics.token_accuracy, frac * (p + 3 * sigma) + 1.0 / static_cast<double>(L + 1));
}

TEST(Evaluate, MemorizedSingleExampleIsExact) {
  Bench s;
  s.trainer.adapt_steps = 150;
  s.trainer.adapt_lr = 3e-2;
  const auto strategy = s.strategy(Method::shared);
  AdaptedModel m = s.model(strategy);
  const std::vector<Example> one{s.set.tasks[0].examples[0]};
  adapt(m, strategy, "memo", one, s.trainer);
  const Metrics metrics = evaluate(m, "memo", one);
  EXPECT_EQ(metrics.exact_match, 1.0);
  EXPECT_EQ(metrics.token_accuracy, 1.0);
  EXPECT_LT(metrics.perplexity, 1.1);
}

TEST(Evaluate, IsDeterministic) {
  const Adapted a = adapted_model(Method::poly);
  const auto& query = a.support;
  const Metrics x = evaluate(a.test, a.task, query), y = evaluate(a.test, a.task, query);
  EXPECT_EQ(x.token_accuracy, y.token_accuracy);
  EXPECT_EQ(x.exact_match, y.exact_match);
  EXPECT_EQ(x.perplexity, y.perplexity);
}

TEST(Alignment, ExactProperties) {
  EXPECT_EQ(alignment_from_gradients({"a", "b"}, {{1, 2, 3}, {-1, -2, -3}}).matrix[0][1], -1.0);
  const auto r = alignment_from_gradients({"a", "b", "c", "d"}, {{1, 0, 0}, {1, 1, 0}, {0, 0, 0}, {0.5, -2, 1}});
  for (std::size_t i = 0; i < 4; ++i) {
    for (std::size_t j = 0; j < 4; ++j) {
      if (i == 2 || j == 2) {
        EXPECT_TRUE(std::isnan(r.matrix[i][j]));
        continue;
      }
      EXPECT_EQ(r.matrix[i][j], r.matrix[j][i]);
      EXPECT_LE(std::abs(r.matrix[i][j]), 1.0);
    }
  }
  EXPECT_EQ(r.matrix[0][0], 1.0);
  EXPECT_NEAR(r.matrix[0][1], 1.0 / std::sqrt(2.0), 1e-15);
  EXPECT_EQ(r.valid_pairs, 3u);
  EXPECT_NEAR(r.mean_off_diagonal, (r.matrix[0][1] + r.matrix[0][3] + r.matrix[1][3]) / 3.0, 1e-15);
  EXPECT_TRUE(r.to_json()["matrix"][2][2].is_null());
  EXPECT_THROW(alignment_from_gradients({"a"}, {}), DimensionError);
}

TEST(Alignment, IdenticalTasksAlignPerfectly) {
  Bench s;
  const auto strategy = s.strategy(Method::shared);
  AdaptedModel m = s.model(strategy);
  testing::perturb_adapters(m, 7);
  const std::vector<Example> data(s.set.tasks[0].examples.begin(), s.set.tasks[0].examples.begin() + 10);
  const std::map<std::string, std::vector<Example>> probe{{"x", data}, {"y", data}};
  const auto r = gradient_alignment(m, {"x", "y"}, probe, 32, 0);
  EXPECT_NEAR(r.matrix[0][1], 1.0, 1e-9);
}

TEST(Alignment, PermutingTasksPermutesTheMatrix) {
  Bench s;
  const auto strategy = s.strategy(Method::poly_s);
  AdaptedModel m = s.model(strategy);
  testing::perturb_adapters(m, 8);
  const auto data = split_pretrain_data(s.set, 0.1, 0);
  const std::vector<std::string> order{s.train[2], s.train[0], s.train[3], s.train[1]};
  const auto a = gradient_alignment(m, s.train, data.train, 8, 0);
  const auto b = gradient_alignment(m, order, data.train, 8, 0);
  const std::vector<std::size_t> index{2, 0, 3, 1};
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j < 4; ++j) EXPECT_EQ(b.matrix[i][j], a.matrix[index[i]][index[j]]);
  EXPECT_NEAR(a.mean_off_diagonal, b.mean_off_diagonal, 1e-15);
  for (std::size_t i = 0; i < 4; ++i) {
    EXPECT_EQ(a.matrix[i][i], 1.0);
    for (std::size_t j = 0; j < 4; ++j) {
      EXPECT_EQ(a.matrix[i][j], a.matrix[j][i]);
      EXPECT_LE(std::abs(a.matrix[i][j]), 1.0 + 1e-9);
    }
  }
  // Probing leaves gradients and trainability as they were.
  for (const auto& t : m.all_parameters()) EXPECT_FALSE(t.has_grad() && std::any_of(t.grad().begin(), t.grad().end(), [](double g) { return g != 0.0; }));
  EXPECT_THROW(gradient_alignment(m, {s.train[0]}, data.train, 8, 0), ConfigError);
}

}  // namespace
}  // namespace polyroute
