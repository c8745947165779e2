#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "elab/matrix.hpp"
#include "elab/prob.hpp"

namespace elab {

struct ModelConfig {
  std::uint64_t vocab_size = 512;
  std::uint64_t embed_dim = 64;
  std::uint64_t num_layers = 2;
  std::uint64_t num_heads = 4;
  std::uint64_t mlp_hidden = 256;
  std::uint64_t max_positions = 16;
  double layernorm_epsilon = 1e-5;
  std::uint64_t seed = 0;

  std::uint64_t head_dim() const { return embed_dim / num_heads; }
  /// Throws InvalidArgument describing the first violated constraint.
  void validate() const;

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

struct LayerNormParams {
  std::vector<double> gamma;
  std::vector<double> beta;
  friend bool operator==(const LayerNormParams&, const LayerNormParams&) = default;
};

struct BlockWeights {
  LayerNormParams ln_attn;
  Matrix qkv;  // d x 3d, columns [q | k | v]
  std::vector<double> qkv_bias;
  Matrix attn_out;  // d x d
  std::vector<double> attn_out_bias;
  LayerNormParams ln_mlp;
  Matrix mlp_in;  // d x hidden
  std::vector<double> mlp_in_bias;
  Matrix mlp_out;  // hidden x d
  std::vector<double> mlp_out_bias;
  friend bool operator==(const BlockWeights&, const BlockWeights&) = default;
};

/// Frozen pre-layernorm GPT-style transformer. Nothing in the library
/// mutates a bundle after it is built; share it by const reference.
struct ModelBundle {
  ModelConfig config;
  Matrix token_embeddings;     // |V| x d
  Matrix position_embeddings;  // max_positions x d
  std::vector<BlockWeights> blocks;
  LayerNormParams ln_final;
  Matrix output_projection;  // d x |V|

  friend bool operator==(const ModelBundle&, const ModelBundle&) = default;
};

/// Prefix rows fed to the transformer in place of token lookups.
using EmbeddingSequence = Matrix;

struct ForwardOptions {
  /// Fixed token placed before the tunable prefix (a BOS-like anchor). It
  /// takes position 0 and never receives a gradient.
  std::optional<TokenId> leading_token;
};

/// Deterministic random init from config.seed: projections ~ N(0, 1/d),
/// embeddings ~ N(0, 1), biases 0, layernorm gain 1 and shift 0.
ModelBundle init_random_model(const ModelConfig& config);

/// Rows of the token embedding table. Throws InvalidToken.
EmbeddingSequence embed_tokens(const ModelBundle& model, std::span<const TokenId> tokens);

/// Logits at the last position.
std::vector<double> next_token_logits(const ModelBundle& model, const EmbeddingSequence& prefix,
                                      const ForwardOptions& options = {});

ProbVector next_token_distribution(const ModelBundle& model, const EmbeddingSequence& prefix,
                                   const ForwardOptions& options = {});

/// Residual stream entering each block and leaving the last one
/// (num_layers + 1 matrices, one row per position incl. any leading token).
std::vector<Matrix> hidden_states(const ModelBundle& model, const EmbeddingSequence& prefix,
                                  const ForwardOptions& options = {});

struct Evaluation {
  double loss_nats = 0.0;
  ProbVector output;
};

struct LossAndGradient {
  double loss_nats = 0.0;
  ProbVector output;
  Matrix grad;  // same shape as the prefix
};

/// KL(target || model(prefix)) in nats, forward only.
Evaluation kl_loss(const ModelBundle& model, const EmbeddingSequence& prefix, const ProbVector& target,
                   const ForwardOptions& options = {});

/// KL(target || model(prefix)) in nats and its exact gradient with respect to
/// every prefix row. Model weights get no gradient.
LossAndGradient kl_loss_and_prefix_gradient(const ModelBundle& model, const EmbeddingSequence& prefix,
                                            const ProbVector& target, const ForwardOptions& options = {});

/// FNV-1a over the serialized weights; equal bundles have equal checksums.
std::uint64_t checksum(const ModelBundle& model);

/// Calls `fn(span)` for every parameter tensor in serialization order.
template <typename Bundle, typename Fn>
void for_each_tensor(Bundle& model, Fn&& fn) {
  fn(std::span(model.token_embeddings.data));
  fn(std::span(model.position_embeddings.data));
  for (auto& b : model.blocks) {
    fn(std::span(b.ln_attn.gamma));
    fn(std::span(b.ln_attn.beta));
    fn(std::span(b.qkv.data));
    fn(std::span(b.qkv_bias));
    fn(std::span(b.attn_out.data));
    fn(std::span(b.attn_out_bias));
    fn(std::span(b.ln_mlp.gamma));
    fn(std::span(b.ln_mlp.beta));
    fn(std::span(b.mlp_in.data));
    fn(std::span(b.mlp_in_bias));
    fn(std::span(b.mlp_out.data));
    fn(std::span(b.mlp_out_bias));
  }
  fn(std::span(model.ln_final.gamma));
  fn(std::span(model.ln_final.beta));
  fn(std::span(model.output_projection.data));
}

/// Allocates every tensor at the shape `config` implies, zero-filled.
ModelBundle allocate_model(const ModelConfig& config);

}  // namespace elab
