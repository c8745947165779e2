#pragma once

// ELAB container: one little-endian binary layout for every persisted
// artifact. Byte layout is documented in docs/FORMAT.md.

#include <cstdint>
#include <string>
#include <vector>

#include "elab/model.hpp"
#include "elab/plan.hpp"
#include "elab/synth.hpp"
#include "elab/tune.hpp"

namespace elab {

inline constexpr char kMagic[4] = {'E', 'L', 'A', 'B'};
inline constexpr std::uint32_t kFormatVersion = 1;
inline constexpr std::size_t kHeaderSize = 32;

enum class ArtifactKind : std::uint32_t { model = 0, target = 1, prompt = 2, plan = 3 };

struct ArtifactHeader {
  std::uint32_t format_version = kFormatVersion;
  ArtifactKind kind = ArtifactKind::model;
  std::uint64_t payload_length = 0;
  std::uint64_t payload_checksum = 0;
};

/// A target distribution plus how it was made.
struct TargetArtifact {
  TargetKind kind = TargetKind::vanilla;
  double target_entropy_bits = 0.0;
  std::uint64_t seed = 0;
  ProbVector distribution;
  std::vector<TokenId> outlier_tokens;
  double mass_bound = 0.0;
  bool converged = true;

  friend bool operator==(const TargetArtifact&, const TargetArtifact&) = default;
};

std::uint64_t fnv1a64(const std::uint8_t* data, std::size_t len);

// Byte-level encode/decode. decode_* throw CorruptionError on a malformed
// container (bad magic, short read, checksum mismatch, trailing bytes),
// UnsupportedVersion on version skew, and InvalidArgument on a kind mismatch.
std::vector<std::uint8_t> encode_model(const ModelBundle& model);
ModelBundle decode_model(const std::vector<std::uint8_t>& bytes);
std::vector<std::uint8_t> encode_target(const TargetArtifact& target);
TargetArtifact decode_target(const std::vector<std::uint8_t>& bytes);
std::vector<std::uint8_t> encode_prompt(const PromptState& prompt);
PromptState decode_prompt(const std::vector<std::uint8_t>& bytes);
std::vector<std::uint8_t> encode_plan(const ExperimentPlan& plan);
ExperimentPlan decode_plan(const std::vector<std::uint8_t>& bytes);

/// Header of any container, validated (magic, version, length, checksum).
ArtifactHeader read_header(const std::vector<std::uint8_t>& bytes);

void save_model(const std::string& path, const ModelBundle& model);
ModelBundle load_model(const std::string& path);
/// Also writes a text summary next to the container: same basename, `.meta` extension.
void save_target(const std::string& path, const TargetArtifact& target);
TargetArtifact load_target(const std::string& path);
void save_prompt(const std::string& path, const PromptState& prompt);
PromptState load_prompt(const std::string& path);
void save_plan(const std::string& path, const ExperimentPlan& plan);
ExperimentPlan load_plan(const std::string& path);

std::vector<std::uint8_t> read_file(const std::string& path);
void write_file(const std::string& path, const std::vector<std::uint8_t>& bytes);

/// Human-readable sidecar text for a target (entropy, sum, outlier checks).
std::string target_summary(const TargetArtifact& target);

}  // namespace elab
