#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "elab/model.hpp"
#include "elab/prob.hpp"

namespace elab {

enum class PositionKind : std::uint8_t { hard = 0, soft = 1 };

/// Which prefix positions are free vectors (soft) and which are pinned to
/// vocabulary rows (hard).
struct PromptLayout {
  std::vector<PositionKind> kinds;

  static PromptLayout all_soft(std::size_t length);
  static PromptLayout all_hard(std::size_t length);
  /// `soft_count` trailing soft positions after `length - soft_count` hard ones.
  static PromptLayout hybrid(std::size_t length, std::size_t soft_count);

  std::size_t size() const { return kinds.size(); }
  std::size_t soft_count() const;
  std::size_t hard_count() const { return size() - soft_count(); }
  bool is_soft(std::size_t i) const { return kinds[i] == PositionKind::soft; }

  /// "soft", "hard" or "hybrid:<soft count>".
  std::string framework_label() const;
  /// "soft:5", "hard:5", "hybrid:5:3"; parse() accepts the same forms.
  std::string spec_string() const;
  static PromptLayout parse(std::string_view text);

  void validate() const;
  friend bool operator==(const PromptLayout&, const PromptLayout&) = default;
};

/// Current prefix. hard_tokens holds one id per hard position, in position
/// order, and each hard row of `embeddings` is exactly that token's row.
struct PromptState {
  PromptLayout layout;
  EmbeddingSequence embeddings;
  std::vector<TokenId> hard_tokens;

  /// Index into hard_tokens for hard position `pos`.
  std::size_t hard_slot(std::size_t pos) const;
  friend bool operator==(const PromptState&, const PromptState&) = default;
};

enum class SoftInit {
  embedding_stats,  // N(mean, var) of all token-embedding entries
  token_rows,       // copies of uniformly drawn vocabulary rows
  standard_normal,
};

std::string_view to_string(SoftInit init);
SoftInit parse_soft_init(std::string_view name);

struct TuneConfig {
  double learning_rate = 0.1;
  std::size_t max_epochs = 500;
  std::size_t patience = 20;
  double weight_decay = 0.0;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_epsilon = 1e-8;
  std::uint64_t seed = 0;
  SoftInit soft_init = SoftInit::embedding_stats;
  std::optional<TokenId> leading_token;

  void validate() const;
  friend bool operator==(const TuneConfig&, const TuneConfig&) = default;
};

/// A loss counts as an improvement only when it beats the best so far by more than this.
inline constexpr double kImprovementThreshold = 1e-12;
inline constexpr std::size_t kDefaultInits = 5;
inline constexpr std::size_t kDefaultPrefixLength = 5;

enum class StopReason { patience, max_epochs, converged_hard, numeric_error };
std::string_view to_string(StopReason reason);

struct TuneResult {
  double min_loss_bits = 0.0;
  /// Loss (bits) at the start of each epoch; entry 0 is the initial prompt.
  std::vector<double> loss_trajectory;
  ProbVector best_output;
  double best_output_entropy_bits = 0.0;
  std::size_t epochs_run = 0;
  StopReason stop_reason = StopReason::max_epochs;
  PromptState best_state;
  std::uint64_t init_seed = 0;
};

PromptState init_prompt(const ModelBundle& model, const PromptLayout& layout, std::uint64_t seed,
                        SoftInit soft_init = SoftInit::embedding_stats);

/// argmin_x (W(x) - theta_i)^T grad_i over the whole vocabulary, ties to the
/// smallest id. `grad_row` is the loss gradient at prefix row `position`.
TokenId best_flip_candidate(const ModelBundle& model, const PromptState& state, std::size_t position,
                            std::span<const double> grad_row);

/// Computes the gradient at `state` and returns best_flip_candidate for a
/// hard `position`. The caller decides whether to apply the flip.
TokenId hard_flip_step(const ModelBundle& model, const PromptState& state, const ProbVector& target,
                       std::size_t position, const ForwardOptions& options = {});

/// Replaces hard position `position` with `token` (row and id).
void apply_flip(const ModelBundle& model, PromptState& state, std::size_t position, TokenId token);

/// Left-to-right gradient-guided flips, each kept only if it does not raise
/// the true loss. Stops when a full sweep changes nothing.
TuneResult tune_hard(const ModelBundle& model, const ProbVector& target, PromptState state, const TuneConfig& config);

/// One AdamW step on every row per epoch.
TuneResult tune_soft(const ModelBundle& model, const ProbVector& target, PromptState state, const TuneConfig& config);

/// Left-to-right pass per epoch: hard positions flip as in tune_hard, soft
/// positions take their AdamW step from the gradient at the start of the
/// epoch. Degenerates to tune_soft / tune_hard for all-soft / all-hard.
TuneResult tune_hybrid(const ModelBundle& model, const ProbVector& target, PromptState state, const TuneConfig& config);

/// Runs the tuner for `layout` from seeds config.seed + 0 .. num_inits - 1
/// and returns the run with the smallest min_loss_bits (earliest on ties).
TuneResult best_of_inits(const ModelBundle& model, const ProbVector& target, const PromptLayout& layout,
                         const TuneConfig& config, std::size_t num_inits = kDefaultInits);

/// "epoch,loss_bits" lines.
void write_trajectory(const TuneResult& result, const std::string& path);

}  // namespace elab
