#pragma once

#include <ostream>
#include <string>
#include <vector>

#include "elab/harness.hpp"

namespace elab {

struct GroupKeys {
  bool experiment = true;
  bool entropy = true;  // target_entropy_bits
};

struct AggregateRow {
  std::string experiment;   // empty when not grouped on
  std::string target_kind;
  std::string framework;
  double target_entropy_bits = 0.0;  // 0 when not grouped on
  std::size_t n_targets = 0;
  double mean_min_loss_bits = 0.0;
  double se_min_loss_bits = 0.0;
  double ci_low = 0.0;
  double ci_high = 0.0;
  /// Mean |H(best output) - H(target)| of the lowest-loss run per target.
  double mean_entropy_gap_bits = 0.0;
};

/// Per target id, the minimum min_loss_bits over its records (inits); then
/// mean, standard error (n - 1 denominator, 0 for n = 1) and a normal 95%
/// interval over targets. Always grouped by target kind and framework.
std::vector<AggregateRow> aggregate(const std::vector<ExperimentRecord>& records, GroupKeys keys = {});

void emit_csv(const std::vector<ExperimentRecord>& records, std::ostream& out);
void emit_csv(const std::vector<ExperimentRecord>& records, const std::string& path);
std::vector<ExperimentRecord> read_records_csv(std::istream& in);
std::vector<ExperimentRecord> read_records_csv(const std::string& path);

void emit_summary_csv(const std::vector<AggregateRow>& rows, std::ostream& out);

/// Line plot of mean min loss against target entropy, one series per
/// (kind, framework), with a shaded standard-error band where it is non-zero.
void emit_plot(const std::vector<AggregateRow>& rows, std::ostream& out, const std::string& title = "");
void emit_plot(const std::vector<AggregateRow>& rows, const std::string& path, const std::string& title = "");

}  // namespace elab
