#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "elab/model.hpp"
#include "elab/synth.hpp"
#include "elab/tune.hpp"

namespace elab {

enum class ExperimentKind { vanilla_sweep, framework_compare, outlier, lm_target, shuffle, migrate, subset_uniform };

std::string_view to_string(ExperimentKind kind);
ExperimentKind parse_experiment_kind(std::string_view name);

/// Everything needed to reproduce one experiment. Serialized as flat
/// `key = value` text (see to_text) and, inside an ELAB container, as a plan
/// artifact.
struct ExperimentPlan {
  ExperimentKind experiment = ExperimentKind::vanilla_sweep;
  std::uint64_t seed = 0;
  ModelConfig model_config;
  /// Explicit grid in bits. Unset means 0, step, 2 step, ... up to log2 |V|.
  std::optional<std::vector<double>> entropy_grid;
  double step_bits = 0.25;
  std::size_t targets_per_point = 5;
  std::size_t inits_per_target = 5;
  std::vector<PromptLayout> layouts = {PromptLayout::all_soft(kDefaultPrefixLength)};
  TuneConfig tune_config;
  std::string output_path = "records.csv";

  std::vector<std::size_t> outlier_counts = {1, 2, 4};
  std::size_t lm_targets = 100;
  std::size_t lm_prompt_len = 5;
  std::size_t shuffles_per_target = 5;
  std::size_t subset_size = 100;

  std::uint64_t migrate_source_seed = 1;
  std::size_t migrate_source_vocab_size = 0;  // 0: same as the tuning model
  double migrate_shared_fraction = 0.5;

  double epsilon_bits = 0.01;
  double outlier_slack = 0.01;
  SynthesisOptions synthesis;

  /// When non-empty, every tuning job writes its trajectory and its best
  /// output next to the target into this directory.
  std::string dump_dir;

  /// Off by default: wall-clock columns would make reruns differ.
  bool record_timing = false;

  /// Grid the plan actually runs (explicit or generated from step_bits).
  std::vector<double> resolved_grid() const;
  void validate() const;

  friend bool operator==(const ExperimentPlan& a, const ExperimentPlan& b);
};

/// One `key = value` per line, every field, reals with 17 significant digits.
std::string to_text(const ExperimentPlan& plan);

/// Starts from defaults and applies each line. '#' starts a comment.
/// Throws InvalidArgument naming the line for unknown keys or bad values.
ExperimentPlan parse_plan(std::string_view text);

ExperimentPlan read_plan_file(const std::string& path);

}  // namespace elab
