#include "elab/synth.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <numeric>
#include <string>

#include "elab/error.hpp"
#include "elab/rng.hpp"

namespace elab {

namespace {

constexpr double kLn2 = std::numbers::ln2;

std::vector<double> softmax_raw(const std::vector<double>& z) {
  const double hi = *std::max_element(z.begin(), z.end());
  std::vector<double> p(z.size());
  double s = 0.0;
  for (std::size_t i = 0; i < z.size(); ++i) {
    p[i] = std::exp(z[i] - hi);
    s += p[i];
  }
  for (double& x : p) x /= s;
  return p;
}

// dH/dz_v = -p_v (ln p_v + H), H in nats.
void entropy_grad(const std::vector<double>& p, double h_nats, double coeff, std::vector<double>& g) {
  for (std::size_t v = 0; v < p.size(); ++v) {
    const double lp = p[v] > 0.0 ? std::log(p[v]) : 0.0;
    g[v] += coeff * (-p[v] * (lp + h_nats));
  }
}

class AdamState {
 public:
  AdamState(std::size_t n, const SynthesisOptions& o) : m_(n, 0.0), v_(n, 0.0), o_(o) {}

  void step(std::vector<double>& z, const std::vector<double>& g) {
    ++t_;
    const double c1 = 1.0 - std::pow(o_.beta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(o_.beta2, static_cast<double>(t_));
    for (std::size_t i = 0; i < z.size(); ++i) {
      m_[i] = o_.beta1 * m_[i] + (1.0 - o_.beta1) * g[i];
      v_[i] = o_.beta2 * v_[i] + (1.0 - o_.beta2) * g[i] * g[i];
      z[i] -= o_.learning_rate * (m_[i] / c1) / (std::sqrt(v_[i] / c2) + o_.adam_epsilon);
    }
  }

 private:
  std::vector<double> m_, v_;
  SynthesisOptions o_;
  std::size_t t_ = 0;
};

std::vector<double> initial_logits(std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<double> z(n);
  for (double& x : z) x = rng.normal();
  return z;
}

void check_entropy_range(double h_bits, std::size_t n) {
  if (n == 0) throw InvalidArgument("vocabulary size must be >= 1");
  if (!(h_bits >= 0.0) || h_bits > max_entropy_bits(n) + 1e-12)
    throw InfeasibleError("target entropy " + std::to_string(h_bits) + " bits outside [0, log2 " +
                          std::to_string(n) + "]");
}

}  // namespace

std::string_view to_string(TargetKind kind) {
  switch (kind) {
    case TargetKind::vanilla: return "vanilla";
    case TargetKind::outlier: return "outlier";
    case TargetKind::lm_generated: return "lm_generated";
    case TargetKind::shuffled: return "shuffled";
    case TargetKind::migrated: return "migrated";
    case TargetKind::subset_uniform: return "subset_uniform";
  }
  return "unknown";
}

TargetKind parse_target_kind(std::string_view name) {
  for (auto k : {TargetKind::vanilla, TargetKind::outlier, TargetKind::lm_generated, TargetKind::shuffled,
                 TargetKind::migrated, TargetKind::subset_uniform})
    if (to_string(k) == name) return k;
  throw InvalidArgument("unknown target kind '" + std::string(name) + "'");
}

SynthesisOutcome synth_vanilla(const TargetSpec& spec, std::size_t vocab_size, const SynthesisOptions& options) {
  if (spec.kind != TargetKind::vanilla) throw InvalidArgument("synth_vanilla needs a vanilla spec");
  check_entropy_range(spec.target_entropy_bits, vocab_size);
  const double h = spec.target_entropy_bits * kLn2;
  const double eps_nats = spec.margin_epsilon_bits * kLn2;

  std::vector<double> z = initial_logits(vocab_size, spec.seed);
  AdamState adam(vocab_size, options);
  std::vector<double> g(vocab_size);
  std::vector<double> best;
  double best_gap = INFINITY;
  std::size_t it = 0;
  bool converged = false;
  for (;; ++it) {
    std::vector<double> p = softmax_raw(z);
    const double hn = entropy_nats(p);
    const double gap = std::abs(hn - h);
    if (gap < best_gap) {
      best_gap = gap;
      best = p;
    }
    if (gap <= eps_nats) {
      converged = true;
      break;
    }
    if (it == options.max_iterations) break;
    std::fill(g.begin(), g.end(), 0.0);
    entropy_grad(p, hn, 2.0 * (hn - h), g);
    adam.step(z, g);
  }
  SynthesisOutcome out;
  out.distribution = ProbVector(std::move(best));
  out.achieved_entropy_bits = out.distribution.entropy_bits();
  out.iterations = it;
  out.converged = converged && std::abs(out.achieved_entropy_bits - spec.target_entropy_bits) <= spec.margin_epsilon_bits;
  return out;
}

double outlier_entropy_ceiling_nats(double m, std::size_t n) {
  const double rest = 1.0 - m;
  double h = 0.0;
  if (m > 0.0) h -= m * std::log(m);
  if (rest > 0.0) h -= rest * std::log(rest / static_cast<double>(n - 1));
  return h;
}

double solve_outlier_mass(double h_bits, std::size_t n) {
  if (n < 2) throw InfeasibleError("outlier mass needs a vocabulary of at least 2 tokens");
  check_entropy_range(h_bits, n);
  const double e = h_bits * kLn2;
  double lo = 1.0 / static_cast<double>(n);
  double hi = 1.0 - 1e-12;
  if (outlier_entropy_ceiling_nats(hi, n) >= e) return 1.0;
  // The ceiling peaks at m = 1/n with zero slope, so near h = log2 n the
  // root is blurred by rounding over ~sqrt(eps). Within a few ulps of the
  // peak only the uniform distribution qualifies.
  if (outlier_entropy_ceiling_nats(lo, n) <= e * (1.0 + 8.0 * std::numeric_limits<double>::epsilon())) return lo;
  while (hi - lo > 1e-9) {
    const double mid = 0.5 * (lo + hi);
    if (outlier_entropy_ceiling_nats(mid, n) >= e)
      lo = mid;
    else
      hi = mid;
  }
  return lo;
}

double outlier_mass_bound(std::size_t k, double h_bits, std::size_t n) {
  if (k < 1 || k >= n) throw InfeasibleError("outlier count must satisfy 1 <= k < vocab size");
  const double m = solve_outlier_mass(h_bits, n);
  const double rounded = std::floor(m * 100.0) / 100.0;
  if (rounded < 1.0 / static_cast<double>(n))
    throw InfeasibleError("outlier mass bound " + std::to_string(m) + " rounds to " + std::to_string(rounded) +
                          ", below 1/|V|; entropy " + std::to_string(h_bits) + " bits is too close to the maximum");
  return rounded;
}

std::vector<TokenId> sample_distinct_tokens(std::size_t count, std::size_t n, std::uint64_t seed) {
  if (count > n) throw InvalidArgument("cannot draw more distinct tokens than the vocabulary holds");
  Rng rng(seed);
  std::vector<TokenId> out;
  out.reserve(count);
  while (out.size() < count) {
    const auto t = static_cast<TokenId>(rng.uniform_index(n));
    if (std::find(out.begin(), out.end(), t) == out.end()) out.push_back(t);
  }
  return out;
}

SynthesisOutcome synth_outlier(const TargetSpec& spec, std::size_t vocab_size, const SynthesisOptions& options) {
  if (spec.kind != TargetKind::outlier) throw InvalidArgument("synth_outlier needs an outlier spec");
  std::vector<TokenId> outliers = spec.outlier_tokens;
  if (outliers.empty()) outliers = sample_distinct_tokens(spec.outlier_count, vocab_size, derive_seed(spec.seed, {1}));
  {
    auto sorted = outliers;
    std::sort(sorted.begin(), sorted.end());
    if (std::adjacent_find(sorted.begin(), sorted.end()) != sorted.end())
      throw InvalidArgument("outlier tokens must be distinct");
    if (!sorted.empty() && sorted.back() >= vocab_size) throw InvalidToken("outlier token outside vocabulary");
  }
  const double m = outlier_mass_bound(outliers.size(), spec.target_entropy_bits, vocab_size);
  const double mass_goal = m - spec.outlier_slack;
  const double h = spec.target_entropy_bits * kLn2;
  const double eps_nats = spec.margin_epsilon_bits * kLn2;

  std::vector<char> is_outlier(vocab_size, 0);
  for (TokenId t : outliers) is_outlier[t] = 1;

  // Outliers are shifted up together until the leading one ties the largest
  // logit. From a random start a low-entropy target collapses onto whichever
  // token leads, and the linear mass term cannot pull a trailing outlier back
  // once its probability is tiny. A common shift keeps the outliers distinct,
  // which k > 1 needs when h < log2 k.
  std::vector<double> z = initial_logits(vocab_size, spec.seed);
  double lead = -INFINITY;
  for (TokenId t : outliers) lead = std::max(lead, z[t]);
  const double shift = *std::max_element(z.begin(), z.end()) - lead;
  for (TokenId t : outliers) z[t] += shift;
  AdamState adam(vocab_size, options);
  std::vector<double> g(vocab_size);
  std::vector<double> best;
  double best_violation = INFINITY;
  std::size_t it = 0;
  bool converged = false;
  for (;; ++it) {
    std::vector<double> p = softmax_raw(z);
    const double hn = entropy_nats(p);
    double mass = 0.0;
    for (TokenId t : outliers) mass += p[t];
    const double violation = std::max(0.0, std::abs(hn - h) - eps_nats) + std::max(0.0, mass_goal - mass);
    if (violation < best_violation) {
      best_violation = violation;
      best = p;
    }
    if (violation == 0.0) {
      converged = true;
      break;
    }
    if (it == options.max_iterations) break;
    std::fill(g.begin(), g.end(), 0.0);
    entropy_grad(p, hn, options.alpha * 2.0 * (hn - h), g);
    if (mass < mass_goal) {
      // d(sum_{V_o} p)/dz_v = p_v (1[v in V_o] - mass)
      for (std::size_t v = 0; v < vocab_size; ++v) g[v] -= options.beta * p[v] * (is_outlier[v] - mass);
    }
    adam.step(z, g);
  }
  SynthesisOutcome out;
  out.distribution = ProbVector(std::move(best));
  out.achieved_entropy_bits = out.distribution.entropy_bits();
  out.iterations = it;
  out.outlier_tokens = std::move(outliers);
  for (TokenId t : out.outlier_tokens) out.outlier_mass += out.distribution[t];
  out.mass_bound = m;
  out.converged = converged && std::abs(out.achieved_entropy_bits - spec.target_entropy_bits) <= spec.margin_epsilon_bits;
  return out;
}

ProbVector shuffle_distribution(const ProbVector& p, std::uint64_t seed) {
  const std::size_t n = p.size();
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  Rng rng(seed);
  for (std::size_t i = n; i > 1; --i) std::swap(perm[i - 1], perm[rng.uniform_index(i)]);
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) out[perm[i]] = p[i];
  return ProbVector(std::move(out));
}

ProbVector migrate_distribution(const ProbVector& source, const TokenMap& shared_map, std::size_t target_vocab_size) {
  std::vector<char> src_seen(source.size(), 0), dst_seen(target_vocab_size, 0);
  double mass = 0.0;
  for (auto [s, t] : shared_map) {
    if (s >= source.size()) throw InvalidToken("source token " + std::to_string(s) + " outside source vocabulary");
    if (t >= target_vocab_size) throw InvalidToken("target token " + std::to_string(t) + " outside target vocabulary");
    if (src_seen[s] || dst_seen[t]) throw InvalidArgument("shared token map must be injective on both sides");
    src_seen[s] = dst_seen[t] = 1;
    mass += source[s];
  }
  if (!(mass > 0.0)) throw MigrationUndefined("source puts no mass on shared tokens");
  std::vector<double> out(target_vocab_size, 0.0);
  for (auto [s, t] : shared_map) out[t] = source[s] / mass;
  return ProbVector(std::move(out));
}

ProbVector subset_uniform(std::vector<TokenId> token_ids, std::size_t vocab_size) {
  if (token_ids.empty()) throw InvalidArgument("subset must be non-empty");
  std::sort(token_ids.begin(), token_ids.end());
  token_ids.erase(std::unique(token_ids.begin(), token_ids.end()), token_ids.end());
  if (token_ids.back() >= vocab_size) throw InvalidToken("subset token outside vocabulary");
  std::vector<double> p(vocab_size, 0.0);
  const double w = 1.0 / static_cast<double>(token_ids.size());
  for (TokenId t : token_ids) p[t] = w;
  return ProbVector(std::move(p));
}

LmTarget lm_generated_target(const ModelBundle& model, std::size_t prompt_len, std::uint64_t seed,
                             const ForwardOptions& options) {
  if (prompt_len < 1 || prompt_len > model.config.max_positions)
    throw InvalidArgument("prompt length must be in [1, max_positions]");
  Rng rng(seed);
  LmTarget out;
  out.prompt.resize(prompt_len);
  for (TokenId& t : out.prompt) t = static_cast<TokenId>(rng.uniform_index(model.config.vocab_size));
  out.distribution = next_token_distribution(model, embed_tokens(model, out.prompt), options);
  return out;
}

}  // namespace elab
