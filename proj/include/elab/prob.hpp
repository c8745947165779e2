#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

namespace elab {

using TokenId = std::uint32_t;

/// A probability distribution over a vocabulary with its entropy cached in
/// bits. Construction validates: entries finite and >= 0, sum within 1e-9
/// of one.
class ProbVector {
 public:
  ProbVector() = default;
  explicit ProbVector(std::vector<double> probs);

  /// Uniform distribution over `n` outcomes.
  static ProbVector uniform(std::size_t n);
  /// Point mass on `token`.
  static ProbVector one_hot(std::size_t n, TokenId token);
  /// Numerically stable softmax of `logits`.
  static ProbVector softmax(std::span<const double> logits);

  std::span<const double> probs() const { return probs_; }
  const std::vector<double>& values() const { return probs_; }
  double operator[](std::size_t i) const { return probs_[i]; }
  std::size_t size() const { return probs_.size(); }
  double entropy_bits() const { return entropy_bits_; }

  friend bool operator==(const ProbVector& a, const ProbVector& b) { return a.probs_ == b.probs_; }

 private:
  std::vector<double> probs_;
  double entropy_bits_ = 0.0;
};

inline constexpr double kSumTolerance = 1e-9;

/// -sum p_i log2 p_i with 0 log 0 = 0.
double entropy_bits(std::span<const double> p);
inline double entropy_bits(const ProbVector& p) { return entropy_bits(p.probs()); }

/// -sum p_i ln p_i with 0 log 0 = 0.
double entropy_nats(std::span<const double> p);

/// KL(p || q) in bits. Throws DivergenceUndefined when q_v == 0 < p_v and
/// InvalidArgument on size mismatch.
double kl_bits(const ProbVector& p, const ProbVector& q);
double kl_nats(std::span<const double> p, std::span<const double> q);

/// log2 n, the largest entropy any distribution over n outcomes can have.
double max_entropy_bits(std::size_t n);

}  // namespace elab
