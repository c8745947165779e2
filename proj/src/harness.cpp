#include "elab/harness.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <exception>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <tuple>

#include "elab/error.hpp"
#include "elab/rng.hpp"
#include "elab/tune.hpp"

namespace elab {

namespace {

// Stream ids for derive_seed.
enum Stream : std::uint64_t {
  kVanillaTarget = 1,
  kTuneInit = 2,
  kLmPrompt = 3,
  kMatchedVanilla = 4,
  kShuffle = 5,
  kSubset = 6,
  kTokenMap = 7,
};

struct Target {
  std::string kind;
  std::uint64_t id = 0;  // pair id, shared by the arms of a paired comparison
  double nominal_bits = 0.0;
  ProbVector distribution;
  bool converged = true;
};

struct TargetRecipe {
  std::string kind;
  std::uint64_t id = 0;
  double nominal_bits = 0.0;
  // Exactly one of these is used.
  std::optional<TargetSpec> spec;
  std::optional<ProbVector> given;
};

std::string experiment_label(const ExperimentPlan& plan) { return std::string(to_string(plan.experiment)); }

TargetSpec vanilla_spec(const ExperimentPlan& plan, double h, std::uint64_t seed) {
  TargetSpec s;
  s.kind = TargetKind::vanilla;
  s.target_entropy_bits = h;
  s.margin_epsilon_bits = plan.epsilon_bits;
  s.outlier_slack = plan.outlier_slack;
  s.seed = seed;
  return s;
}

// Materializes recipes in parallel. Infeasible ones are dropped with a reason.
std::vector<Target> build_targets(const ExperimentPlan& plan, std::vector<TargetRecipe> recipes,
                                  std::vector<std::string>& skipped) {
  const std::size_t vocab = plan.model_config.vocab_size;
  std::vector<std::optional<Target>> built(recipes.size());
  std::vector<std::string> reasons(recipes.size());
  std::vector<std::exception_ptr> errors(recipes.size());
  const auto n = static_cast<std::ptrdiff_t>(recipes.size());
#pragma omp parallel for schedule(dynamic)
  for (std::ptrdiff_t i = 0; i < n; ++i) {
    auto& r = recipes[static_cast<std::size_t>(i)];
    try {
      Target t{r.kind, r.id, r.nominal_bits, {}, true};
      if (r.given) {
        t.distribution = *r.given;
      } else {
        const SynthesisOutcome o = r.spec->kind == TargetKind::outlier ? synth_outlier(*r.spec, vocab, plan.synthesis)
                                                                         : synth_vanilla(*r.spec, vocab, plan.synthesis);
        t.distribution = o.distribution;
        t.converged = o.converged;
      }
      built[static_cast<std::size_t>(i)] = std::move(t);
    } catch (const InfeasibleError& e) {
      reasons[static_cast<std::size_t>(i)] =
          r.kind + " target " + std::to_string(r.id) + " at " + std::to_string(r.nominal_bits) + " bits: " + e.what();
    } catch (...) {
      errors[static_cast<std::size_t>(i)] = std::current_exception();
    }
  }
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
  std::vector<Target> out;
  for (std::size_t i = 0; i < built.size(); ++i) {
    if (built[i])
      out.push_back(std::move(*built[i]));
    else
      skipped.push_back(reasons[i]);
  }
  return out;
}

// Removes every arm of a pair when any arm of it was skipped, so paired
// aggregates always cover the same pair ids.
void keep_complete_pairs(std::vector<Target>& targets, std::size_t arms_per_pair) {
  std::vector<std::pair<std::uint64_t, double>> keys;
  for (const auto& t : targets) keys.emplace_back(t.id, t.nominal_bits);
  std::vector<Target> kept;
  for (auto& t : targets) {
    const auto count = static_cast<std::size_t>(
        std::count(keys.begin(), keys.end(), std::pair<std::uint64_t, double>{t.id, t.nominal_bits}));
    if (count >= arms_per_pair) kept.push_back(std::move(t));
  }
  targets = std::move(kept);
}

void dump_run(const std::string& dir, const ExperimentRecord& rec, std::size_t target_index, const ProbVector& target,
              const TuneResult& r) {
  std::string framework = rec.framework;
  std::replace(framework.begin(), framework.end(), ':', '-');
  const std::string stem = dir + "/" + rec.experiment + "_" + rec.target_kind + "_" + std::to_string(rec.target_id) +
                           "_t" + std::to_string(target_index) + "_" + framework + "_" + std::to_string(rec.seed);
  write_trajectory(r, stem + ".traj.csv");
  std::ofstream out(stem + ".output.csv");
  if (!out) throw IoError("cannot open " + stem + ".output.csv");
  out << "token,target,output\n";
  char line[96];
  for (std::size_t v = 0; v < target.size(); ++v) {
    std::snprintf(line, sizeof line, "%zu,%.17g,%.17g\n", v, target[v], r.best_output[v]);
    out << line;
  }
  if (!out) throw IoError("write failed: " + stem + ".output.csv");
}

std::vector<ExperimentRecord> tune_all(const ExperimentPlan& plan, const ModelBundle& model,
                                       const std::vector<Target>& targets) {
  struct Job {
    std::size_t target;
    std::size_t layout;
    std::size_t init;
  };
  std::vector<Job> jobs;
  for (std::size_t t = 0; t < targets.size(); ++t)
    for (std::size_t l = 0; l < plan.layouts.size(); ++l)
      for (std::size_t i = 0; i < plan.inits_per_target; ++i) jobs.push_back({t, l, i});

  std::vector<ExperimentRecord> records(jobs.size());
  std::vector<std::exception_ptr> errors(jobs.size());
  const std::string label = experiment_label(plan);
  if (!plan.dump_dir.empty()) std::filesystem::create_directories(plan.dump_dir);
  const auto n = static_cast<std::ptrdiff_t>(jobs.size());
#pragma omp parallel for schedule(dynamic)
  for (std::ptrdiff_t j = 0; j < n; ++j) {
    const Job& job = jobs[static_cast<std::size_t>(j)];
    const Target& target = targets[job.target];
    try {
      const auto start = std::chrono::steady_clock::now();
      // Same seed for every arm and layout of a pair: paired comparisons.
      const std::uint64_t seed = derive_seed(plan.seed, {kTuneInit, target.id, job.init});
      PromptState state = init_prompt(model, plan.layouts[job.layout], seed, plan.tune_config.soft_init);
      TuneConfig cfg = plan.tune_config;
      cfg.seed = seed;
      const TuneResult r = tune_hybrid(model, target.distribution, std::move(state), cfg);
      const double ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();

      ExperimentRecord& rec = records[static_cast<std::size_t>(j)];
      rec.experiment = label;
      rec.target_kind = target.kind;
      rec.target_id = target.id;
      rec.target_entropy_bits = target.nominal_bits;
      rec.achieved_target_entropy_bits = target.distribution.entropy_bits();
      rec.target_converged = target.converged;
      rec.framework = plan.layouts[job.layout].framework_label();
      rec.seed = seed;
      rec.min_loss_bits = r.min_loss_bits;
      rec.best_output_entropy_bits = r.best_output_entropy_bits;
      rec.epochs_run = r.epochs_run;
      rec.wall_ms = plan.record_timing ? ms : 0.0;
      if (!plan.dump_dir.empty()) dump_run(plan.dump_dir, rec, job.target, target.distribution, r);
    } catch (...) {
      errors[static_cast<std::size_t>(j)] = std::current_exception();
    }
  }
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
  sort_records(records);
  return records;
}

std::vector<TargetRecipe> vanilla_grid_recipes(const ExperimentPlan& plan) {
  std::vector<TargetRecipe> recipes;
  const auto grid = plan.resolved_grid();
  for (std::size_t g = 0; g < grid.size(); ++g)
    for (std::size_t t = 0; t < plan.targets_per_point; ++t) {
      const std::uint64_t id = g * plan.targets_per_point + t;
      recipes.push_back({"vanilla", id, grid[g], vanilla_spec(plan, grid[g], derive_seed(plan.seed, {kVanillaTarget, g, t})), {}});
    }
  return recipes;
}

// LM targets from `source` (optionally migrated) plus matched vanilla targets.
std::vector<TargetRecipe> lm_pair_recipes(const ExperimentPlan& plan, const ModelBundle& source, const TokenMap* map,
                                          std::vector<std::string>& skipped, std::vector<ProbVector>* lm_out) {
  const ForwardOptions fwd{plan.tune_config.leading_token};
  std::vector<TargetRecipe> recipes;
  for (std::size_t i = 0; i < plan.lm_targets; ++i) {
    LmTarget lm = lm_generated_target(source, plan.lm_prompt_len, derive_seed(plan.seed, {kLmPrompt, i}), fwd);
    ProbVector p = lm.distribution;
    std::string kind = "lm_generated";
    if (map) {
      try {
        p = migrate_distribution(lm.distribution, *map, plan.model_config.vocab_size);
      } catch (const MigrationUndefined& e) {
        skipped.push_back("migrated target " + std::to_string(i) + ": " + e.what());
        continue;
      }
      kind = "migrated";
    }
    const double h = p.entropy_bits();
    recipes.push_back({kind, i, h, {}, p});
    recipes.push_back({"vanilla", i, h, vanilla_spec(plan, h, derive_seed(plan.seed, {kMatchedVanilla, i})), {}});
    if (lm_out) lm_out->push_back(std::move(p));
  }
  return recipes;
}

}  // namespace

void sort_records(std::vector<ExperimentRecord>& records) {
  std::stable_sort(records.begin(), records.end(), [](const ExperimentRecord& a, const ExperimentRecord& b) {
    return std::tie(a.experiment, a.target_kind, a.target_entropy_bits, a.framework, a.target_id, a.seed) <
           std::tie(b.experiment, b.target_kind, b.target_entropy_bits, b.framework, b.target_id, b.seed);
  });
}

ExperimentOutcome run_vanilla_sweep(const ExperimentPlan& plan, const ModelBundle& model) {
  plan.validate();
  ExperimentOutcome out;
  const auto targets = build_targets(plan, vanilla_grid_recipes(plan), out.skipped);
  out.records = tune_all(plan, model, targets);
  return out;
}

ExperimentOutcome run_framework_compare(const ExperimentPlan& plan, const ModelBundle& model) {
  bool soft = false, hard = false, mixed = false;
  for (const auto& l : plan.layouts) {
    soft |= l.hard_count() == 0;
    hard |= l.soft_count() == 0;
    mixed |= l.soft_count() != 0 && l.hard_count() != 0;
  }
  if (!(soft && hard && mixed))
    throw InvalidArgument("framework comparison needs all-soft, all-hard and mixed layouts");
  return run_vanilla_sweep(plan, model);
}

ExperimentOutcome run_outlier_experiment(const ExperimentPlan& plan, const ModelBundle& model) {
  plan.validate();
  ExperimentOutcome out;
  std::vector<TargetRecipe> recipes;
  const auto grid = plan.resolved_grid();
  for (std::size_t g = 0; g < grid.size(); ++g)
    for (std::size_t t = 0; t < plan.targets_per_point; ++t) {
      const std::uint64_t id = g * plan.targets_per_point + t;
      const std::uint64_t seed = derive_seed(plan.seed, {kVanillaTarget, g, t});
      recipes.push_back({"vanilla", id, grid[g], vanilla_spec(plan, grid[g], seed), {}});
      for (std::size_t k : plan.outlier_counts) {
        TargetSpec s = vanilla_spec(plan, grid[g], seed);
        s.kind = TargetKind::outlier;
        s.outlier_count = k;
        recipes.push_back({"outlier_k" + std::to_string(k), id, grid[g], s, {}});
      }
    }
  auto targets = build_targets(plan, std::move(recipes), out.skipped);
  out.records = tune_all(plan, model, targets);
  return out;
}

ExperimentOutcome run_lm_target_experiment(const ExperimentPlan& plan, const ModelBundle& model) {
  plan.validate();
  ExperimentOutcome out;
  auto targets = build_targets(plan, lm_pair_recipes(plan, model, nullptr, out.skipped, nullptr), out.skipped);
  keep_complete_pairs(targets, 2);
  out.records = tune_all(plan, model, targets);
  return out;
}

ExperimentOutcome run_shuffle_experiment(const ExperimentPlan& plan, const ModelBundle& model) {
  plan.validate();
  ExperimentOutcome out;
  std::vector<ProbVector> lm;
  auto recipes = lm_pair_recipes(plan, model, nullptr, out.skipped, &lm);
  for (std::size_t i = 0; i < lm.size(); ++i)
    for (std::size_t s = 0; s < plan.shuffles_per_target; ++s)
      recipes.push_back({"shuffled", i, lm[i].entropy_bits(), {}, shuffle_distribution(lm[i], derive_seed(plan.seed, {kShuffle, i, s}))});
  auto targets = build_targets(plan, std::move(recipes), out.skipped);
  keep_complete_pairs(targets, 2 + plan.shuffles_per_target);
  out.records = tune_all(plan, model, targets);
  return out;
}

ExperimentOutcome run_migrate_experiment(const ExperimentPlan& plan, const ModelBundle& model,
                                         const ModelBundle& source_model, const TokenMap& shared_map) {
  plan.validate();
  ExperimentOutcome out;
  auto targets = build_targets(plan, lm_pair_recipes(plan, source_model, &shared_map, out.skipped, nullptr), out.skipped);
  keep_complete_pairs(targets, 2);
  out.records = tune_all(plan, model, targets);
  return out;
}

ExperimentOutcome run_subset_uniform_experiment(const ExperimentPlan& plan, const ModelBundle& model) {
  plan.validate();
  const std::size_t vocab = plan.model_config.vocab_size;
  if (plan.subset_size < 1 || plan.subset_size > vocab) throw InvalidArgument("subset_size must be in [1, |V|]");
  ExperimentOutcome out;
  std::vector<TargetRecipe> recipes;
  for (std::size_t i = 0; i < plan.targets_per_point; ++i) {
    auto ids = sample_distinct_tokens(plan.subset_size, vocab, derive_seed(plan.seed, {kSubset, i}));
    ProbVector p = subset_uniform(std::move(ids), vocab);
    const double h = p.entropy_bits();
    recipes.push_back({"subset_uniform", i, h, {}, std::move(p)});
    recipes.push_back({"vanilla", i, h, vanilla_spec(plan, h, derive_seed(plan.seed, {kMatchedVanilla, i})), {}});
  }
  auto targets = build_targets(plan, std::move(recipes), out.skipped);
  keep_complete_pairs(targets, 2);
  out.records = tune_all(plan, model, targets);
  return out;
}

TokenMap random_token_map(std::size_t source_vocab, std::size_t target_vocab, double fraction, std::uint64_t seed,
                          bool identity) {
  if (identity) {
    if (source_vocab != target_vocab) throw InvalidArgument("identity map needs equal vocabularies");
    TokenMap m;
    for (std::size_t i = 0; i < source_vocab; ++i) m.emplace_back(static_cast<TokenId>(i), static_cast<TokenId>(i));
    return m;
  }
  const auto count = static_cast<std::size_t>(std::floor(fraction * static_cast<double>(std::min(source_vocab, target_vocab))));
  const auto src = sample_distinct_tokens(count, source_vocab, derive_seed(seed, {0}));
  const auto dst = sample_distinct_tokens(count, target_vocab, derive_seed(seed, {1}));
  TokenMap m;
  for (std::size_t i = 0; i < count; ++i) m.emplace_back(src[i], dst[i]);
  return m;
}

ExperimentOutcome run_experiment(const ExperimentPlan& plan) {
  plan.validate();
  const ModelBundle model = init_random_model(plan.model_config);
  switch (plan.experiment) {
    case ExperimentKind::vanilla_sweep: return run_vanilla_sweep(plan, model);
    case ExperimentKind::framework_compare: return run_framework_compare(plan, model);
    case ExperimentKind::outlier: return run_outlier_experiment(plan, model);
    case ExperimentKind::lm_target: return run_lm_target_experiment(plan, model);
    case ExperimentKind::shuffle: return run_shuffle_experiment(plan, model);
    case ExperimentKind::subset_uniform: return run_subset_uniform_experiment(plan, model);
    case ExperimentKind::migrate: {
      ModelConfig src = plan.model_config;
      src.seed = plan.migrate_source_seed;
      if (plan.migrate_source_vocab_size) src.vocab_size = plan.migrate_source_vocab_size;
      const ModelBundle source = init_random_model(src);
      const TokenMap map = random_token_map(src.vocab_size, plan.model_config.vocab_size, plan.migrate_shared_fraction,
                                            derive_seed(plan.seed, {kTokenMap}));
      return run_migrate_experiment(plan, model, source, map);
    }
  }
  throw InvalidArgument("unknown experiment");
}

}  // namespace elab
