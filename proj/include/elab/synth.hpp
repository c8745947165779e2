#pragma once

// Target-distribution construction: entropy-targeted logits search, outlier
// constrained search, and the transformations the experiments apply to
// targets (shuffle, cross-vocabulary migration, subset-uniform).

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "elab/model.hpp"
#include "elab/prob.hpp"

namespace elab {

enum class TargetKind { vanilla, outlier, lm_generated, shuffled, migrated, subset_uniform };

std::string_view to_string(TargetKind kind);
/// Throws InvalidArgument for unknown names.
TargetKind parse_target_kind(std::string_view name);

struct TargetSpec {
  TargetKind kind = TargetKind::vanilla;
  double target_entropy_bits = 0.0;
  /// Outlier set V_o. When empty for an outlier target, `outlier_count`
  /// tokens are drawn uniformly at random from the seed.
  std::vector<TokenId> outlier_tokens;
  std::size_t outlier_count = 1;
  double margin_epsilon_bits = 0.01;
  double outlier_slack = 0.01;
  std::uint64_t seed = 0;
};

/// Logit search hyperparameters. The search runs an Adam-style adaptive
/// gradient descent on the logits; see README for why plain descent is not
/// used.
struct SynthesisOptions {
  double learning_rate = 0.05;
  std::size_t max_iterations = 20000;
  double alpha = 1.0;  // weight of the entropy term
  double beta = 1.0;   // weight of the outlier-mass term
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_epsilon = 1e-8;
};

struct SynthesisOutcome {
  ProbVector distribution;
  double achieved_entropy_bits = 0.0;
  std::size_t iterations = 0;
  bool converged = false;
  // Outlier targets only.
  std::vector<TokenId> outlier_tokens;
  double outlier_mass = 0.0;
  double mass_bound = 0.0;
};

/// softmax(z) with |H - h| <= eps, starting from z ~ N(0, 1) drawn from
/// spec.seed and minimizing (H(z) - h)^2.
SynthesisOutcome synth_vanilla(const TargetSpec& spec, std::size_t vocab_size, const SynthesisOptions& options = {});

/// -m ln m - (1 - m) ln((1 - m) / (n - 1)): the largest entropy (nats) of a
/// distribution over n outcomes that puts mass m on one of them.
double outlier_entropy_ceiling_nats(double m, std::size_t n);

/// Root of outlier_entropy_ceiling_nats(m, n) = h ln 2 on the decreasing
/// branch [1/n, 1), by bisection to 1e-9. Returns 1 when h is so small that
/// the root lies above the bracket. Throws InfeasibleError for h outside
/// [0, log2 n].
double solve_outlier_mass(double h_bits, std::size_t n);

/// solve_outlier_mass rounded down to a multiple of 0.01. k only has to
/// satisfy 1 <= k < n: the single-outlier case is the binding one for every
/// small k. Throws InfeasibleError when the rounded mass drops below 1/n,
/// where it would leave the decreasing branch and stop guaranteeing the
/// entropy is reachable.
double outlier_mass_bound(std::size_t k, double h_bits, std::size_t n);

/// Minimizes alpha (H - h)^2 - beta sum_{V_o} p, with the mass term switched
/// off once sum_{V_o} p >= m - slack, until both that and |H - h| <= eps hold.
SynthesisOutcome synth_outlier(const TargetSpec& spec, std::size_t vocab_size, const SynthesisOptions& options = {});

/// Permutes all |V| probabilities with a seeded uniform permutation.
ProbVector shuffle_distribution(const ProbVector& p, std::uint64_t seed);

using TokenMap = std::vector<std::pair<TokenId, TokenId>>;

/// Moves mass of mapped source tokens onto their target ids and renormalizes.
/// Unmapped target tokens get zero. Throws InvalidArgument for a map that is
/// not injective or out of range, MigrationUndefined when the mapped mass is 0.
ProbVector migrate_distribution(const ProbVector& source, const TokenMap& shared_map, std::size_t target_vocab_size);

/// Uniform over `token_ids` (duplicates collapse), zero elsewhere.
ProbVector subset_uniform(std::vector<TokenId> token_ids, std::size_t vocab_size);

struct LmTarget {
  std::vector<TokenId> prompt;
  ProbVector distribution;
};

/// Next-token distribution of `model` after `prompt_len` uniformly random tokens.
LmTarget lm_generated_target(const ModelBundle& model, std::size_t prompt_len, std::uint64_t seed,
                             const ForwardOptions& options = {});

/// Draws `count` distinct token ids uniformly from [0, n).
std::vector<TokenId> sample_distinct_tokens(std::size_t count, std::size_t n, std::uint64_t seed);

}  // namespace elab
