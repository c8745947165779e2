// Command-line front end: model/target/prompt artifacts, single tuning runs,
// full experiments and reports.

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>

#include "elab/error.hpp"
#include "elab/harness.hpp"
#include "elab/kernels.hpp"
#include "elab/report.hpp"
#include "elab/rng.hpp"
#include "elab/store.hpp"

namespace fs = std::filesystem;
using namespace elab;

namespace {

struct Globals {
  std::optional<std::uint64_t> seed;
  int threads = 0;
  std::string out_dir = ".";
  std::string config;
};

std::string out_path(const Globals& g, const std::string& name) {
  if (fs::path(name).is_absolute()) return name;
  fs::create_directories(g.out_dir);
  return (fs::path(g.out_dir) / name).string();
}

ExperimentPlan load_config(const Globals& g) {
  ExperimentPlan plan = g.config.empty() ? ExperimentPlan{} : read_plan_file(g.config);
  if (g.seed) plan.seed = *g.seed;
  return plan;
}

void print_outcome(const TuneResult& r) {
  std::printf("min_loss_bits=%.9g epochs=%zu stop=%s best_output_entropy_bits=%.9g init_seed=%llu\n", r.min_loss_bits,
              r.epochs_run, std::string(to_string(r.stop_reason)).c_str(), r.best_output_entropy_bits,
              static_cast<unsigned long long>(r.init_seed));
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"entropy-targeted prompt tuning laboratory"};
  app.require_subcommand(1);
  app.fallthrough();
  Globals g;
  app.add_option("--seed", g.seed, "Master seed (overrides the plan)");
  app.add_option("--threads", g.threads, "Worker threads (0: runtime default)")
      ->each([](const std::string& v) { kernels::set_num_threads(std::stoi(v)); })
      ->trigger_on_parse();
  app.add_option("--out-dir", g.out_dir, "Directory for relative output paths");
  app.add_option("--config", g.config, "Plan file (key = value)")->check(CLI::ExistingFile);

  int exit_code = 0;

  // model
  auto* model_cmd = app.add_subcommand("model", "Transformer artifacts")->require_subcommand(1);
  ModelConfig mc;
  std::string model_out = "model.elab";
  auto* model_init = model_cmd->add_subcommand("init", "Random model from a config");
  model_init->add_option("--vocab", mc.vocab_size);
  model_init->add_option("--dim", mc.embed_dim);
  model_init->add_option("--layers", mc.num_layers);
  model_init->add_option("--heads", mc.num_heads);
  model_init->add_option("--hidden", mc.mlp_hidden);
  model_init->add_option("--positions", mc.max_positions);
  model_init->add_option("-o,--out", model_out);
  model_init->callback([&] {
    if (!g.config.empty()) mc = read_plan_file(g.config).model_config;
    if (g.seed) mc.seed = *g.seed;
    const auto model = init_random_model(mc);
    const auto path = out_path(g, model_out);
    save_model(path, model);
    std::printf("%s checksum=%016llx\n", path.c_str(), static_cast<unsigned long long>(checksum(model)));
  });
  std::string inspect_path;
  auto* model_inspect = model_cmd->add_subcommand("inspect", "Print a model's config and checksum");
  model_inspect->add_option("path", inspect_path)->required();
  model_inspect->callback([&] {
    const auto m = load_model(inspect_path);
    const auto& c = m.config;
    std::printf("vocab_size=%llu embed_dim=%llu num_layers=%llu num_heads=%llu mlp_hidden=%llu max_positions=%llu "
                "layernorm_epsilon=%g seed=%llu\nchecksum=%016llx\n",
                (unsigned long long)c.vocab_size, (unsigned long long)c.embed_dim, (unsigned long long)c.num_layers,
                (unsigned long long)c.num_heads, (unsigned long long)c.mlp_hidden, (unsigned long long)c.max_positions,
                c.layernorm_epsilon, (unsigned long long)c.seed, (unsigned long long)checksum(m));
  });

  // target
  auto* target_cmd = app.add_subcommand("target", "Target distributions")->require_subcommand(1);
  std::string target_kind = "vanilla", target_out = "target.elab", target_in;
  std::size_t vocab = 512, outliers = 1, target_vocab = 0;
  double entropy = 4.0, fraction = 0.5;
  auto* target_synth = target_cmd->add_subcommand("synth", "Synthesize a vanilla or outlier target");
  target_synth->add_option("--kind", target_kind)->check(CLI::IsMember({"vanilla", "outlier"}));
  target_synth->add_option("--vocab", vocab);
  target_synth->add_option("--entropy", entropy, "Target entropy in bits");
  target_synth->add_option("--outliers", outliers, "Outlier count k");
  target_synth->add_option("-o,--out", target_out);
  target_synth->callback([&] {
    const ExperimentPlan plan = load_config(g);
    TargetSpec s;
    s.kind = parse_target_kind(target_kind);
    s.target_entropy_bits = entropy;
    s.outlier_count = outliers;
    s.margin_epsilon_bits = plan.epsilon_bits;
    s.outlier_slack = plan.outlier_slack;
    s.seed = plan.seed;
    const auto o = s.kind == TargetKind::outlier ? synth_outlier(s, vocab, plan.synthesis)
                                                 : synth_vanilla(s, vocab, plan.synthesis);
    const TargetArtifact t{s.kind, entropy, s.seed, o.distribution, o.outlier_tokens, o.mass_bound, o.converged};
    save_target(out_path(g, target_out), t);
    std::cout << target_summary(t);
    if (!o.converged) exit_code = 2;
  });
  auto* target_shuffle = target_cmd->add_subcommand("shuffle", "Permute a target's probabilities");
  target_shuffle->add_option("input", target_in)->required();
  target_shuffle->add_option("-o,--out", target_out);
  target_shuffle->callback([&] {
    TargetArtifact t = load_target(target_in);
    t.distribution = shuffle_distribution(t.distribution, g.seed.value_or(0));
    t.kind = TargetKind::shuffled;
    t.seed = g.seed.value_or(0);
    t.outlier_tokens.clear();
    save_target(out_path(g, target_out), t);
    std::cout << target_summary(t);
  });
  auto* target_migrate = target_cmd->add_subcommand("migrate", "Move a target onto another vocabulary");
  target_migrate->add_option("input", target_in)->required();
  target_migrate->add_option("--target-vocab", target_vocab, "Destination vocabulary size (0: same)");
  target_migrate->add_option("--fraction", fraction, "Fraction of tokens shared");
  target_migrate->add_option("-o,--out", target_out);
  target_migrate->callback([&] {
    TargetArtifact t = load_target(target_in);
    const std::size_t n = t.distribution.size();
    const std::size_t m = target_vocab ? target_vocab : n;
    const auto map = random_token_map(n, m, fraction, g.seed.value_or(0));
    t.distribution = migrate_distribution(t.distribution, map, m);
    t.kind = TargetKind::migrated;
    t.outlier_tokens.clear();
    save_target(out_path(g, target_out), t);
    std::cout << target_summary(t);
  });
  auto* target_show = target_cmd->add_subcommand("show", "Print a target summary");
  target_show->add_option("input", target_in)->required();
  target_show->callback([&] { std::cout << target_summary(load_target(target_in)); });

  // tune
  auto* tune_cmd = app.add_subcommand("tune", "Single tuning runs")->require_subcommand(1);
  std::string tune_model, tune_target, layout_spec = "soft:5", prompt_out = "prompt.elab", trajectory_out;
  std::size_t inits = kDefaultInits;
  auto* tune_run = tune_cmd->add_subcommand("run", "Best-of-inits tuning against one target");
  tune_run->add_option("--model", tune_model)->required()->check(CLI::ExistingFile);
  tune_run->add_option("--target", tune_target)->required()->check(CLI::ExistingFile);
  tune_run->add_option("--layout", layout_spec, "soft:N, hard:N, hybrid:N:S or mask:hhs...");
  tune_run->add_option("--inits", inits);
  tune_run->add_option("--prompt-out", prompt_out);
  tune_run->add_option("--trajectory", trajectory_out, "CSV of loss per epoch");
  tune_run->callback([&] {
    const ExperimentPlan plan = load_config(g);
    const auto model = load_model(tune_model);
    const auto target = load_target(tune_target);
    TuneConfig cfg = plan.tune_config;
    cfg.seed = plan.seed;
    const auto r = best_of_inits(model, target.distribution, PromptLayout::parse(layout_spec), cfg, inits);
    print_outcome(r);
    save_prompt(out_path(g, prompt_out), r.best_state);
    if (!trajectory_out.empty()) write_trajectory(r, out_path(g, trajectory_out));
  });

  // exp
  auto* exp_cmd = app.add_subcommand("exp", "Run a full experiment from a plan")->require_subcommand(1);
  const std::pair<const char*, ExperimentKind> experiments[] = {
      {"vanilla", ExperimentKind::vanilla_sweep}, {"compare", ExperimentKind::framework_compare},
      {"outlier", ExperimentKind::outlier},       {"lm", ExperimentKind::lm_target},
      {"shuffle", ExperimentKind::shuffle},       {"migrate", ExperimentKind::migrate},
      {"subset", ExperimentKind::subset_uniform}};
  for (const auto& [name, kind] : experiments) {
    auto* sub = exp_cmd->add_subcommand(name, std::string("Experiment: ") + std::string(to_string(kind)));
    sub->callback([&, kind = kind] {
      ExperimentPlan plan = load_config(g);
      plan.experiment = kind;
      if (kind == ExperimentKind::framework_compare && plan.layouts == ExperimentPlan{}.layouts)
        plan.layouts = {PromptLayout::all_hard(kDefaultPrefixLength), PromptLayout::all_soft(kDefaultPrefixLength),
                        PromptLayout::hybrid(kDefaultPrefixLength, 2)};
      const auto outcome = run_experiment(plan);
      const auto csv = out_path(g, plan.output_path);
      emit_csv(outcome.records, csv);
      save_plan(fs::path(csv).replace_extension(".plan.elab").string(), plan);
      {
        std::ofstream summary(fs::path(csv).replace_extension(".summary.csv"));
        if (!summary) throw IoError("cannot open summary next to " + csv);
        emit_summary_csv(aggregate(outcome.records), summary);
      }
      for (const auto& s : outcome.skipped) std::cerr << "skipped: " << s << '\n';
      std::printf("%zu records -> %s (%zu skipped)\n", outcome.records.size(), csv.c_str(), outcome.skipped.size());
      if (!outcome.skipped.empty()) exit_code = 2;
    });
  }

  // report
  auto* report_cmd = app.add_subcommand("report", "Summaries and plots from records")->require_subcommand(1);
  std::string records_in, report_out, title;
  bool by_entropy = true;
  auto* report_csv = report_cmd->add_subcommand("csv", "Aggregate records into a summary CSV");
  report_csv->add_option("records", records_in)->required()->check(CLI::ExistingFile);
  report_csv->add_option("-o,--out", report_out, "Output path (default: stdout)");
  report_csv->add_flag("!--pooled", by_entropy, "Pool all entropies into one row per group");
  report_csv->callback([&] {
    const auto rows = aggregate(read_records_csv(records_in), {true, by_entropy});
    if (report_out.empty()) {
      emit_summary_csv(rows, std::cout);
    } else {
      std::ofstream out(out_path(g, report_out));
      if (!out) throw IoError("cannot open " + report_out);
      emit_summary_csv(rows, out);
    }
  });
  auto* report_plot = report_cmd->add_subcommand("plot", "SVG of loss against target entropy");
  report_plot->add_option("records", records_in)->required()->check(CLI::ExistingFile);
  report_plot->add_option("-o,--out", report_out)->required();
  report_plot->add_option("--title", title);
  report_plot->callback([&] { emit_plot(aggregate(read_records_csv(records_in)), out_path(g, report_out), title); });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return exit_code;
}
