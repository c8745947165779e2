#pragma once

// Experiment orchestration. Each experiment expands a plan into independent
// (target, layout, init) jobs, runs them on the OpenMP worker pool, and
// returns records in a deterministic order. Every seed is derived from the
// plan's master seed and the job's coordinates, never from scheduling, so
// the output does not depend on the worker count.

#include <cstdint>
#include <string>
#include <vector>

#include "elab/model.hpp"
#include "elab/plan.hpp"
#include "elab/synth.hpp"

namespace elab {

struct ExperimentRecord {
  std::string experiment;
  std::string target_kind;
  std::uint64_t target_id = 0;
  double target_entropy_bits = 0.0;
  double achieved_target_entropy_bits = 0.0;
  bool target_converged = true;
  std::string framework;
  std::uint64_t seed = 0;
  double min_loss_bits = 0.0;
  double best_output_entropy_bits = 0.0;
  std::uint64_t epochs_run = 0;
  double wall_ms = 0.0;

  friend bool operator==(const ExperimentRecord&, const ExperimentRecord&) = default;
};

struct ExperimentOutcome {
  std::vector<ExperimentRecord> records;
  /// One line per target that was skipped (infeasible, zero shared mass...).
  std::vector<std::string> skipped;
};

/// Builds the tuning model from plan.model_config and dispatches on
/// plan.experiment. Migration uses a source model seeded by
/// plan.migrate_source_seed and a random shared-token map.
ExperimentOutcome run_experiment(const ExperimentPlan& plan);

ExperimentOutcome run_vanilla_sweep(const ExperimentPlan& plan, const ModelBundle& model);
/// As the sweep, but requires all-hard, all-soft and mixed layouts so the
/// frameworks are compared on shared targets and seeds.
ExperimentOutcome run_framework_compare(const ExperimentPlan& plan, const ModelBundle& model);
/// Paired vanilla / k-outlier targets (k from plan.outlier_counts) per grid entropy.
ExperimentOutcome run_outlier_experiment(const ExperimentPlan& plan, const ModelBundle& model);
/// LM-generated targets paired with matched-entropy vanilla targets.
ExperimentOutcome run_lm_target_experiment(const ExperimentPlan& plan, const ModelBundle& model);
/// The LM pairing plus plan.shuffles_per_target shuffled copies of each LM target.
ExperimentOutcome run_shuffle_experiment(const ExperimentPlan& plan, const ModelBundle& model);
ExperimentOutcome run_migrate_experiment(const ExperimentPlan& plan, const ModelBundle& model,
                                         const ModelBundle& source_model, const TokenMap& shared_map);
/// Uniform-over-random-subset targets paired with matched-entropy vanilla targets.
ExperimentOutcome run_subset_uniform_experiment(const ExperimentPlan& plan, const ModelBundle& model);

/// `fraction` of min(|V_source|, |V_target|) random source tokens mapped to
/// distinct random target tokens. fraction == 1 with equal vocabularies and
/// `identity` set yields the identity map.
TokenMap random_token_map(std::size_t source_vocab, std::size_t target_vocab, double fraction, std::uint64_t seed,
                          bool identity = false);

/// Sort key used for emission: experiment, target kind, entropy, framework,
/// target id, seed. Stable, so ties keep job order.
void sort_records(std::vector<ExperimentRecord>& records);

}  // namespace elab
