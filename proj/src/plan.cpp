#include "elab/plan.hpp"

#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <sstream>

#include "elab/error.hpp"

namespace elab {

std::string_view to_string(ExperimentKind kind) {
  switch (kind) {
    case ExperimentKind::vanilla_sweep: return "vanilla_sweep";
    case ExperimentKind::framework_compare: return "framework_compare";
    case ExperimentKind::outlier: return "outlier";
    case ExperimentKind::lm_target: return "lm_target";
    case ExperimentKind::shuffle: return "shuffle";
    case ExperimentKind::migrate: return "migrate";
    case ExperimentKind::subset_uniform: return "subset_uniform";
  }
  return "unknown";
}

ExperimentKind parse_experiment_kind(std::string_view name) {
  for (auto k : {ExperimentKind::vanilla_sweep, ExperimentKind::framework_compare, ExperimentKind::outlier,
                 ExperimentKind::lm_target, ExperimentKind::shuffle, ExperimentKind::migrate,
                 ExperimentKind::subset_uniform})
    if (to_string(k) == name) return k;
  throw InvalidArgument("unknown experiment '" + std::string(name) + "'");
}

std::vector<double> ExperimentPlan::resolved_grid() const {
  if (entropy_grid) return *entropy_grid;
  std::vector<double> grid;
  const double top = max_entropy_bits(model_config.vocab_size);
  for (std::size_t i = 0;; ++i) {
    const double h = static_cast<double>(i) * step_bits;
    if (h > top + 1e-12) break;
    grid.push_back(std::min(h, top));
  }
  return grid;
}

void ExperimentPlan::validate() const {
  model_config.validate();
  tune_config.validate();
  if (!(step_bits > 0.0)) throw InvalidArgument("step_bits must be > 0");
  if (targets_per_point < 1 || inits_per_target < 1) throw InvalidArgument("targets and inits per point must be >= 1");
  if (layouts.empty()) throw InvalidArgument("plan needs at least one layout");
  const double top = max_entropy_bits(model_config.vocab_size);
  for (double h : resolved_grid())
    if (!(h >= 0.0) || h > top + 1e-12) throw InvalidArgument("entropy grid value outside [0, log2 |V|]");
  for (const auto& l : layouts) {
    l.validate();
    if (l.size() + (tune_config.leading_token ? 1 : 0) > model_config.max_positions)
      throw InvalidArgument("layout " + l.spec_string() + " does not fit max_positions");
  }
  if (lm_prompt_len < 1 || lm_prompt_len > model_config.max_positions)
    throw InvalidArgument("lm_prompt_len must be in [1, max_positions]");
  if (!(migrate_shared_fraction > 0.0 && migrate_shared_fraction <= 1.0))
    throw InvalidArgument("migrate.shared_fraction must be in (0, 1]");
  if (!(epsilon_bits > 0.0) || !(outlier_slack > 0.0)) throw InvalidArgument("epsilon and slack must be > 0");
}

bool operator==(const ExperimentPlan& a, const ExperimentPlan& b) { return to_text(a) == to_text(b); }

namespace {

std::string fmt_real(double x) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", x);
  return buf;
}

template <typename T>
std::string join(const std::vector<T>& xs, const std::function<std::string(const T&)>& f) {
  std::string out;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    if (i) out += ',';
    out += f(xs[i]);
  }
  return out;
}

std::string_view trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::vector<std::string_view> split_list(std::string_view s) {
  std::vector<std::string_view> out;
  s = trim(s);
  if (s.empty()) return out;
  std::size_t start = 0;
  while (true) {
    const auto c = s.find(',', start);
    out.push_back(trim(s.substr(start, c == std::string_view::npos ? std::string_view::npos : c - start)));
    if (c == std::string_view::npos) break;
    start = c + 1;
  }
  return out;
}

double parse_real(std::string_view s) {
  s = trim(s);
  std::string tmp(s);
  char* end = nullptr;
  const double v = std::strtod(tmp.c_str(), &end);
  if (tmp.empty() || end != tmp.c_str() + tmp.size() || !std::isfinite(v))
    throw InvalidArgument("not a finite real: '" + tmp + "'");
  return v;
}

std::uint64_t parse_uint(std::string_view s) {
  s = trim(s);
  std::uint64_t v = 0;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (s.empty() || ec != std::errc() || ptr != s.data() + s.size())
    throw InvalidArgument("not an unsigned integer: '" + std::string(s) + "'");
  return v;
}

bool parse_bool(std::string_view s) {
  s = trim(s);
  if (s == "true" || s == "1") return true;
  if (s == "false" || s == "0") return false;
  throw InvalidArgument("not a boolean: '" + std::string(s) + "'");
}

using Setter = std::function<void(ExperimentPlan&, std::string_view)>;
using Getter = std::function<std::string(const ExperimentPlan&)>;

struct Field {
  const char* key;
  Getter get;
  Setter set;
};

#define ELAB_UINT_FIELD(name, member)                                                          \
  Field {                                                                                      \
    name, [](const ExperimentPlan& p) { return std::to_string(p.member); },                   \
        [](ExperimentPlan& p, std::string_view v) { p.member = static_cast<decltype(p.member)>(parse_uint(v)); } \
  }
#define ELAB_REAL_FIELD(name, member)                                                           \
  Field {                                                                                       \
    name, [](const ExperimentPlan& p) { return fmt_real(p.member); },                          \
        [](ExperimentPlan& p, std::string_view v) { p.member = parse_real(v); }                \
  }

const std::vector<Field>& fields() {
  static const std::vector<Field> table = {
      {"experiment", [](const ExperimentPlan& p) { return std::string(to_string(p.experiment)); },
       [](ExperimentPlan& p, std::string_view v) { p.experiment = parse_experiment_kind(trim(v)); }},
      ELAB_UINT_FIELD("seed", seed),
      {"output_path", [](const ExperimentPlan& p) { return p.output_path; },
       [](ExperimentPlan& p, std::string_view v) { p.output_path = std::string(trim(v)); }},
      ELAB_UINT_FIELD("model.vocab_size", model_config.vocab_size),
      ELAB_UINT_FIELD("model.embed_dim", model_config.embed_dim),
      ELAB_UINT_FIELD("model.num_layers", model_config.num_layers),
      ELAB_UINT_FIELD("model.num_heads", model_config.num_heads),
      ELAB_UINT_FIELD("model.mlp_hidden", model_config.mlp_hidden),
      ELAB_UINT_FIELD("model.max_positions", model_config.max_positions),
      ELAB_REAL_FIELD("model.layernorm_epsilon", model_config.layernorm_epsilon),
      ELAB_UINT_FIELD("model.seed", model_config.seed),
      {"entropy_grid",
       [](const ExperimentPlan& p) {
         return p.entropy_grid ? join<double>(*p.entropy_grid, [](const double& x) { return fmt_real(x); })
                               : std::string("auto");
       },
       [](ExperimentPlan& p, std::string_view v) {
         if (trim(v) == "auto") {
           p.entropy_grid.reset();
           return;
         }
         std::vector<double> g;
         if (!trim(v).empty())
           for (auto item : split_list(v)) g.push_back(parse_real(item));
         p.entropy_grid = std::move(g);
       }},
      ELAB_REAL_FIELD("step_bits", step_bits),
      ELAB_UINT_FIELD("targets_per_point", targets_per_point),
      ELAB_UINT_FIELD("inits_per_target", inits_per_target),
      {"layouts",
       [](const ExperimentPlan& p) {
         return join<PromptLayout>(p.layouts, [](const PromptLayout& l) { return l.spec_string(); });
       },
       [](ExperimentPlan& p, std::string_view v) {
         p.layouts.clear();
         for (auto item : split_list(v)) p.layouts.push_back(PromptLayout::parse(item));
       }},
      ELAB_REAL_FIELD("tune.learning_rate", tune_config.learning_rate),
      ELAB_UINT_FIELD("tune.max_epochs", tune_config.max_epochs),
      ELAB_UINT_FIELD("tune.patience", tune_config.patience),
      ELAB_REAL_FIELD("tune.weight_decay", tune_config.weight_decay),
      ELAB_REAL_FIELD("tune.adam_beta1", tune_config.adam_beta1),
      ELAB_REAL_FIELD("tune.adam_beta2", tune_config.adam_beta2),
      ELAB_REAL_FIELD("tune.adam_epsilon", tune_config.adam_epsilon),
      ELAB_UINT_FIELD("tune.seed", tune_config.seed),
      {"tune.soft_init", [](const ExperimentPlan& p) { return std::string(to_string(p.tune_config.soft_init)); },
       [](ExperimentPlan& p, std::string_view v) { p.tune_config.soft_init = parse_soft_init(trim(v)); }},
      {"tune.leading_token",
       [](const ExperimentPlan& p) {
         return p.tune_config.leading_token ? std::to_string(*p.tune_config.leading_token) : std::string("none");
       },
       [](ExperimentPlan& p, std::string_view v) {
         if (trim(v) == "none")
           p.tune_config.leading_token.reset();
         else
           p.tune_config.leading_token = static_cast<TokenId>(parse_uint(v));
       }},
      {"outlier_counts",
       [](const ExperimentPlan& p) {
         return join<std::size_t>(p.outlier_counts, [](const std::size_t& k) { return std::to_string(k); });
       },
       [](ExperimentPlan& p, std::string_view v) {
         p.outlier_counts.clear();
         if (!trim(v).empty())
           for (auto item : split_list(v)) p.outlier_counts.push_back(parse_uint(item));
       }},
      ELAB_UINT_FIELD("lm_targets", lm_targets),
      ELAB_UINT_FIELD("lm_prompt_len", lm_prompt_len),
      ELAB_UINT_FIELD("shuffles_per_target", shuffles_per_target),
      ELAB_UINT_FIELD("subset_size", subset_size),
      ELAB_UINT_FIELD("migrate.source_seed", migrate_source_seed),
      ELAB_UINT_FIELD("migrate.source_vocab_size", migrate_source_vocab_size),
      ELAB_REAL_FIELD("migrate.shared_fraction", migrate_shared_fraction),
      ELAB_REAL_FIELD("synth.epsilon_bits", epsilon_bits),
      ELAB_REAL_FIELD("synth.outlier_slack", outlier_slack),
      ELAB_REAL_FIELD("synth.learning_rate", synthesis.learning_rate),
      ELAB_UINT_FIELD("synth.max_iterations", synthesis.max_iterations),
      ELAB_REAL_FIELD("synth.alpha", synthesis.alpha),
      ELAB_REAL_FIELD("synth.beta", synthesis.beta),
      {"dump_dir", [](const ExperimentPlan& p) { return p.dump_dir; },
       [](ExperimentPlan& p, std::string_view v) { p.dump_dir = std::string(trim(v)); }},
      {"record_timing", [](const ExperimentPlan& p) { return std::string(p.record_timing ? "true" : "false"); },
       [](ExperimentPlan& p, std::string_view v) { p.record_timing = parse_bool(v); }},
  };
  return table;
}

#undef ELAB_UINT_FIELD
#undef ELAB_REAL_FIELD

}  // namespace

std::string to_text(const ExperimentPlan& plan) {
  std::string out;
  for (const auto& f : fields()) {
    out += f.key;
    out += " = ";
    out += f.get(plan);
    out += '\n';
  }
  return out;
}

ExperimentPlan parse_plan(std::string_view text) {
  ExperimentPlan plan;
  std::size_t line_no = 0;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    const auto nl = text.find('\n', pos);
    std::string_view line = text.substr(pos, nl == std::string_view::npos ? std::string_view::npos : nl - pos);
    pos = nl == std::string_view::npos ? text.size() + 1 : nl + 1;
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string_view::npos)
      throw InvalidArgument("plan line " + std::to_string(line_no) + ": expected key = value");
    const auto key = trim(line.substr(0, eq));
    const auto value = line.substr(eq + 1);
    const Field* field = nullptr;
    for (const auto& f : fields())
      if (key == f.key) field = &f;
    if (!field) throw InvalidArgument("plan line " + std::to_string(line_no) + ": unknown key '" + std::string(key) + "'");
    try {
      field->set(plan, value);
    } catch (const InvalidArgument& e) {
      throw InvalidArgument("plan line " + std::to_string(line_no) + " (" + std::string(key) + "): " + e.what());
    }
  }
  return plan;
}

ExperimentPlan read_plan_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open plan file " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_plan(ss.str());
}

}  // namespace elab
