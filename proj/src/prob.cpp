#include "elab/prob.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>

#include "elab/error.hpp"

namespace elab {

ProbVector::ProbVector(std::vector<double> probs) : probs_(std::move(probs)) {
  if (probs_.empty()) throw InvalidArgument("probability vector is empty");
  double sum = 0.0;
  for (double p : probs_) {
    if (!std::isfinite(p) || p < 0.0) throw InvalidArgument("probability entries must be finite and non-negative");
    sum += p;
  }
  if (std::abs(sum - 1.0) > kSumTolerance)
    throw InvalidArgument("probabilities sum to " + std::to_string(sum) + ", expected 1");
  entropy_bits_ = elab::entropy_bits(probs_);
}

ProbVector ProbVector::uniform(std::size_t n) {
  return ProbVector(std::vector<double>(n, 1.0 / static_cast<double>(n)));
}

ProbVector ProbVector::one_hot(std::size_t n, TokenId token) {
  if (token >= n) throw InvalidToken("token " + std::to_string(token) + " outside vocabulary");
  std::vector<double> p(n, 0.0);
  p[token] = 1.0;
  return ProbVector(std::move(p));
}

ProbVector ProbVector::softmax(std::span<const double> logits) {
  const double hi = *std::max_element(logits.begin(), logits.end());
  if (!std::isfinite(hi)) throw NumericError("non-finite logit");
  std::vector<double> p(logits.size());
  double z = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    p[i] = std::exp(logits[i] - hi);
    z += p[i];
  }
  for (double& x : p) x /= z;
  return ProbVector(std::move(p));
}

// Terms are summed in sorted order so that any permutation of p gives a
// bit-identical entropy.
double entropy_bits(std::span<const double> p) {
  std::vector<double> terms;
  terms.reserve(p.size());
  for (double x : p)
    if (x > 0.0) terms.push_back(x * std::log2(x));
  std::sort(terms.begin(), terms.end());
  double h = 0.0;
  for (double t : terms) h -= t;
  return h;
}

double entropy_nats(std::span<const double> p) {
  double h = 0.0;
  for (double x : p)
    if (x > 0.0) h -= x * std::log(x);
  return h;
}

double kl_nats(std::span<const double> p, std::span<const double> q) {
  if (p.size() != q.size()) throw InvalidArgument("KL operands have different vocabulary sizes");
  double kl = 0.0;
  for (std::size_t v = 0; v < p.size(); ++v) {
    if (p[v] <= 0.0) continue;
    if (q[v] <= 0.0) throw DivergenceUndefined("q(" + std::to_string(v) + ") = 0 where p > 0");
    kl += p[v] * std::log(p[v] / q[v]);
  }
  return kl;
}

double kl_bits(const ProbVector& p, const ProbVector& q) {
  return kl_nats(p.probs(), q.probs()) / std::numbers::ln2;
}

double max_entropy_bits(std::size_t n) {
  if (n == 0) throw InvalidArgument("vocabulary size must be >= 1");
  return std::log2(static_cast<double>(n));
}

}  // namespace elab
