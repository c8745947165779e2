#include "elab/tune.hpp"

#include <algorithm>
#include <cmath>
#include <exception>
#include <fstream>
#include <iomanip>
#include <numbers>
#include <string>

#include "elab/error.hpp"
#include "elab/kernels.hpp"
#include "elab/rng.hpp"

namespace elab {

PromptLayout PromptLayout::all_soft(std::size_t length) { return {std::vector(length, PositionKind::soft)}; }

PromptLayout PromptLayout::all_hard(std::size_t length) { return {std::vector(length, PositionKind::hard)}; }

PromptLayout PromptLayout::hybrid(std::size_t length, std::size_t soft_count) {
  if (soft_count > length) throw InvalidArgument("soft count exceeds prompt length");
  PromptLayout l = all_hard(length);
  std::fill(l.kinds.end() - static_cast<std::ptrdiff_t>(soft_count), l.kinds.end(), PositionKind::soft);
  return l;
}

std::size_t PromptLayout::soft_count() const {
  return static_cast<std::size_t>(std::count(kinds.begin(), kinds.end(), PositionKind::soft));
}

std::string PromptLayout::framework_label() const {
  const std::size_t s = soft_count();
  if (s == size()) return "soft";
  if (s == 0) return "hard";
  return "hybrid:" + std::to_string(s);
}

std::string PromptLayout::spec_string() const {
  const std::size_t s = soft_count();
  if (s == size()) return "soft:" + std::to_string(size());
  if (s == 0) return "hard:" + std::to_string(size());
  if (*this == hybrid(size(), s)) return "hybrid:" + std::to_string(size()) + ":" + std::to_string(s);
  std::string mask = "mask:";
  for (auto k : kinds) mask += k == PositionKind::soft ? 's' : 'h';
  return mask;
}

PromptLayout PromptLayout::parse(std::string_view text) {
  auto fail = [&]() -> PromptLayout { throw InvalidArgument("bad layout '" + std::string(text) + "'"); };
  auto to_size = [&](std::string_view s) -> std::size_t {
    if (s.empty() || s.find_first_not_of("0123456789") != std::string_view::npos) fail();
    return std::stoul(std::string(s));
  };
  const auto c1 = text.find(':');
  if (c1 == std::string_view::npos) fail();
  const auto head = text.substr(0, c1);
  const auto rest = text.substr(c1 + 1);
  PromptLayout l;
  if (head == "soft") {
    l = all_soft(to_size(rest));
  } else if (head == "hard") {
    l = all_hard(to_size(rest));
  } else if (head == "hybrid") {
    const auto c2 = rest.find(':');
    if (c2 == std::string_view::npos) fail();
    l = hybrid(to_size(rest.substr(0, c2)), to_size(rest.substr(c2 + 1)));
  } else if (head == "mask") {
    for (char ch : rest) {
      if (ch == 's')
        l.kinds.push_back(PositionKind::soft);
      else if (ch == 'h')
        l.kinds.push_back(PositionKind::hard);
      else
        fail();
    }
  } else {
    fail();
  }
  l.validate();
  return l;
}

void PromptLayout::validate() const {
  if (kinds.empty()) throw InvalidArgument("prompt layout must have at least one position");
}

std::size_t PromptState::hard_slot(std::size_t pos) const {
  std::size_t slot = 0;
  for (std::size_t i = 0; i < pos; ++i)
    if (!layout.is_soft(i)) ++slot;
  return slot;
}

std::string_view to_string(SoftInit init) {
  switch (init) {
    case SoftInit::embedding_stats: return "embedding_stats";
    case SoftInit::token_rows: return "token_rows";
    case SoftInit::standard_normal: return "standard_normal";
  }
  return "unknown";
}

SoftInit parse_soft_init(std::string_view name) {
  for (auto s : {SoftInit::embedding_stats, SoftInit::token_rows, SoftInit::standard_normal})
    if (to_string(s) == name) return s;
  throw InvalidArgument("unknown soft init '" + std::string(name) + "'");
}

std::string_view to_string(StopReason reason) {
  switch (reason) {
    case StopReason::patience: return "patience";
    case StopReason::max_epochs: return "max_epochs";
    case StopReason::converged_hard: return "converged_hard";
    case StopReason::numeric_error: return "numeric_error";
  }
  return "unknown";
}

void TuneConfig::validate() const {
  if (!(learning_rate > 0.0)) throw InvalidArgument("learning_rate must be > 0");
  if (patience < 1) throw InvalidArgument("patience must be >= 1");
  if (max_epochs < 1) throw InvalidArgument("max_epochs must be >= 1");
  if (weight_decay < 0.0) throw InvalidArgument("weight_decay must be >= 0");
}

PromptState init_prompt(const ModelBundle& model, const PromptLayout& layout, std::uint64_t seed, SoftInit soft_init) {
  layout.validate();
  const std::size_t d = model.config.embed_dim;
  const auto& table = model.token_embeddings;

  double mean = 0.0, sd = 1.0;
  if (soft_init == SoftInit::embedding_stats) {
    for (double x : table.data) mean += x;
    mean /= static_cast<double>(table.data.size());
    double var = 0.0;
    for (double x : table.data) var += (x - mean) * (x - mean);
    sd = std::sqrt(var / static_cast<double>(table.data.size()));
  }

  Rng rng(seed);
  PromptState s;
  s.layout = layout;
  s.embeddings = Matrix(layout.size(), d);
  for (std::size_t i = 0; i < layout.size(); ++i) {
    auto row = s.embeddings.row(i);
    if (!layout.is_soft(i)) {
      const auto t = static_cast<TokenId>(rng.uniform_index(model.config.vocab_size));
      s.hard_tokens.push_back(t);
      std::copy(table.row(t).begin(), table.row(t).end(), row.begin());
      continue;
    }
    switch (soft_init) {
      case SoftInit::embedding_stats:
      case SoftInit::standard_normal:
        for (double& x : row) x = mean + sd * rng.normal();
        break;
      case SoftInit::token_rows: {
        const auto t = rng.uniform_index(model.config.vocab_size);
        std::copy(table.row(t).begin(), table.row(t).end(), row.begin());
        break;
      }
    }
  }
  return s;
}

TokenId best_flip_candidate(const ModelBundle& model, const PromptState& state, std::size_t position,
                            std::span<const double> grad_row) {
  std::vector<double> scores(model.config.vocab_size);
  kernels::omp::candidate_scores(model.token_embeddings, state.embeddings.row(position), grad_row, scores);
  TokenId best = 0;
  for (std::size_t v = 1; v < scores.size(); ++v)
    if (scores[v] < scores[best]) best = static_cast<TokenId>(v);
  return best;
}

TokenId hard_flip_step(const ModelBundle& model, const PromptState& state, const ProbVector& target,
                       std::size_t position, const ForwardOptions& options) {
  if (position >= state.layout.size() || state.layout.is_soft(position))
    throw InvalidArgument("hard_flip_step needs a hard position");
  const auto lg = kl_loss_and_prefix_gradient(model, state.embeddings, target, options);
  return best_flip_candidate(model, state, position, lg.grad.row(position));
}

void apply_flip(const ModelBundle& model, PromptState& state, std::size_t position, TokenId token) {
  if (token >= model.config.vocab_size) throw InvalidToken("flip token outside vocabulary");
  auto src = model.token_embeddings.row(token);
  std::copy(src.begin(), src.end(), state.embeddings.row(position).begin());
  state.hard_tokens[state.hard_slot(position)] = token;
}

namespace {

class AdamW {
 public:
  AdamW(std::size_t rows, std::size_t cols, const TuneConfig& c) : m_(rows, cols), v_(rows, cols), c_(c) {}

  void begin_step() {
    ++t_;
    bias1_ = 1.0 - std::pow(c_.adam_beta1, static_cast<double>(t_));
    bias2_ = 1.0 - std::pow(c_.adam_beta2, static_cast<double>(t_));
  }

  void update_row(std::span<double> param, std::span<const double> grad, std::size_t r) {
    auto m = m_.row(r);
    auto v = v_.row(r);
    for (std::size_t j = 0; j < param.size(); ++j) {
      param[j] *= 1.0 - c_.learning_rate * c_.weight_decay;
      m[j] = c_.adam_beta1 * m[j] + (1.0 - c_.adam_beta1) * grad[j];
      v[j] = c_.adam_beta2 * v[j] + (1.0 - c_.adam_beta2) * grad[j] * grad[j];
      param[j] -= c_.learning_rate * (m[j] / bias1_) / (std::sqrt(v[j] / bias2_) + c_.adam_epsilon);
    }
  }

 private:
  Matrix m_, v_;
  TuneConfig c_;
  std::size_t t_ = 0;
  double bias1_ = 1.0, bias2_ = 1.0;
};

bool finite_rows(const Matrix& m) {
  return std::all_of(m.data.begin(), m.data.end(), [](double x) { return std::isfinite(x); });
}

TuneResult run_tuner(const ModelBundle& model, const ProbVector& target, PromptState state, const TuneConfig& config) {
  config.validate();
  if (target.size() != model.config.vocab_size) throw InvalidArgument("target size != vocab size");
  if (state.embeddings.rows != state.layout.size()) throw InvalidArgument("prompt state does not match its layout");
  const ForwardOptions fwd{config.leading_token};
  const PromptLayout& layout = state.layout;
  const bool any_soft = layout.soft_count() > 0;

  AdamW opt(layout.size(), model.config.embed_dim, config);
  TuneResult res;
  double best = INFINITY;
  std::size_t since_best = 0;

  for (std::size_t epoch = 0;; ++epoch) {
    LossAndGradient lg;
    try {
      lg = kl_loss_and_prefix_gradient(model, state.embeddings, target, fwd);
    } catch (const NumericError&) {
      res.stop_reason = StopReason::numeric_error;
      break;
    }
    const double loss_bits = lg.loss_nats / std::numbers::ln2;
    res.loss_trajectory.push_back(loss_bits);
    res.epochs_run = epoch + 1;
    // Patience counts only real improvements, but the reported minimum is
    // the exact trajectory minimum.
    if (epoch == 0 || loss_bits < best - kImprovementThreshold)
      since_best = 0;
    else
      ++since_best;
    if (epoch == 0 || loss_bits < best) {
      best = loss_bits;
      res.best_output = lg.output;
      res.best_state = state;
    }
    if (since_best >= config.patience) {
      res.stop_reason = StopReason::patience;
      break;
    }
    if (res.epochs_run >= config.max_epochs) {
      res.stop_reason = StopReason::max_epochs;
      break;
    }

    // Left-to-right pass. Soft rows use the epoch-start gradient; hard rows
    // need the gradient at the current state, recomputed when stale.
    if (any_soft) opt.begin_step();
    double current_loss = lg.loss_nats;
    Matrix grad = std::move(lg.grad);
    bool grad_fresh = true;
    const Matrix epoch_grad = any_soft ? grad : Matrix();
    bool changed = false;
    bool numeric_failure = false;
    for (std::size_t i = 0; i < layout.size() && !numeric_failure; ++i) {
      if (layout.is_soft(i)) {
        opt.update_row(state.embeddings.row(i), epoch_grad.row(i), i);
        grad_fresh = false;
        continue;
      }
      try {
        if (!grad_fresh) {
          auto fresh = kl_loss_and_prefix_gradient(model, state.embeddings, target, fwd);
          current_loss = fresh.loss_nats;
          grad = std::move(fresh.grad);
          grad_fresh = true;
        }
        const TokenId proposal = best_flip_candidate(model, state, i, grad.row(i));
        if (proposal == state.hard_tokens[state.hard_slot(i)]) continue;
        PromptState trial = state;
        apply_flip(model, trial, i, proposal);
        const double trial_loss = kl_loss(model, trial.embeddings, target, fwd).loss_nats;
        if (trial_loss <= current_loss) {
          state = std::move(trial);
          current_loss = trial_loss;
          grad_fresh = false;
          changed = true;
        }
      } catch (const NumericError&) {
        numeric_failure = true;
      }
    }
    if (numeric_failure || !finite_rows(state.embeddings)) {
      res.stop_reason = StopReason::numeric_error;
      break;
    }
    if (!any_soft && !changed) {
      res.stop_reason = StopReason::converged_hard;
      break;
    }
  }

  if (res.loss_trajectory.empty()) throw NumericError("loss is not finite at the initial prompt");
  res.min_loss_bits = best;
  res.best_output_entropy_bits = res.best_output.entropy_bits();
  return res;
}

}  // namespace

TuneResult tune_hard(const ModelBundle& model, const ProbVector& target, PromptState state, const TuneConfig& config) {
  if (state.layout.soft_count() != 0) throw InvalidArgument("tune_hard needs an all-hard layout");
  return run_tuner(model, target, std::move(state), config);
}

TuneResult tune_soft(const ModelBundle& model, const ProbVector& target, PromptState state, const TuneConfig& config) {
  if (state.layout.hard_count() != 0) throw InvalidArgument("tune_soft needs an all-soft layout");
  return run_tuner(model, target, std::move(state), config);
}

TuneResult tune_hybrid(const ModelBundle& model, const ProbVector& target, PromptState state, const TuneConfig& config) {
  return run_tuner(model, target, std::move(state), config);
}

TuneResult best_of_inits(const ModelBundle& model, const ProbVector& target, const PromptLayout& layout,
                         const TuneConfig& config, std::size_t num_inits) {
  if (num_inits < 1) throw InvalidArgument("num_inits must be >= 1");
  std::vector<TuneResult> runs(num_inits);
  std::vector<std::exception_ptr> errors(num_inits);
  const auto n = static_cast<std::ptrdiff_t>(num_inits);
#pragma omp parallel for schedule(dynamic)
  for (std::ptrdiff_t j = 0; j < n; ++j) {
    const auto idx = static_cast<std::size_t>(j);
    try {
      const std::uint64_t seed = config.seed + idx;
      PromptState s = init_prompt(model, layout, seed, config.soft_init);
      runs[idx] = run_tuner(model, target, std::move(s), config);
      runs[idx].init_seed = seed;
    } catch (...) {
      errors[idx] = std::current_exception();
    }
  }
  for (const auto& e : errors)
    if (e) std::rethrow_exception(e);
  std::size_t best = 0;
  for (std::size_t j = 1; j < num_inits; ++j)
    if (runs[j].min_loss_bits < runs[best].min_loss_bits) best = j;
  return std::move(runs[best]);
}

void write_trajectory(const TuneResult& result, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot open " + path + " for writing");
  out << "epoch,loss_bits\n" << std::setprecision(17);
  for (std::size_t e = 0; e < result.loss_trajectory.size(); ++e) out << e << ',' << result.loss_trajectory[e] << '\n';
  if (!out) throw IoError("write failed for " + path);
}

}  // namespace elab
