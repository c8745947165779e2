#include "elab/report.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>
#include <tuple>

#include "elab/error.hpp"

namespace elab {

namespace {

constexpr const char* kColumns[] = {
    "experiment",        "target_kind",   "target_id",      "target_entropy_bits", "achieved_target_entropy_bits",
    "target_converged",  "framework",     "seed",           "min_loss_bits",       "best_output_entropy_bits",
    "epochs_run",        "wall_ms"};
constexpr std::size_t kColumnCount = std::size(kColumns);

std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.12g", v);
  return buf;
}

std::string quote(const std::string& s) {
  if (s.find_first_of(",\"\r\n") == std::string::npos) return s;
  std::string q = "\"";
  for (char c : s) {
    if (c == '"') q += '"';
    q += c;
  }
  return q + '"';
}

// One RFC-4180 record; quoted fields may span lines. False at end of input.
bool read_csv_row(std::istream& in, std::vector<std::string>& fields) {
  fields.clear();
  if (in.peek() == std::char_traits<char>::eof()) return false;
  std::string field;
  bool quoted = false;
  char c;
  while (in.get(c)) {
    if (quoted) {
      if (c == '"') {
        if (in.peek() == '"') {
          in.get(c);
          field += '"';
        } else {
          quoted = false;
        }
      } else {
        field += c;
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      fields.push_back(std::move(field));
      field.clear();
    } else if (c == '\n') {
      break;
    } else if (c != '\r') {
      field += c;
    }
  }
  if (quoted) throw InvalidArgument("csv: unterminated quoted field");
  fields.push_back(std::move(field));
  return true;
}

double to_double(const std::string& s) {
  std::size_t used = 0;
  double v = std::stod(s, &used);
  if (used != s.size()) throw InvalidArgument("csv: bad number '" + s + "'");
  return v;
}

std::uint64_t to_u64(const std::string& s) {
  std::size_t used = 0;
  auto v = std::stoull(s, &used);
  if (used != s.size()) throw InvalidArgument("csv: bad integer '" + s + "'");
  return v;
}

std::string xml_escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

}  // namespace

std::vector<AggregateRow> aggregate(const std::vector<ExperimentRecord>& records, GroupKeys keys) {
  using GroupKey = std::tuple<std::string, std::string, std::string, double>;
  struct Best {
    double loss;
    double gap;
  };
  std::map<GroupKey, std::map<std::uint64_t, Best>> groups;
  for (const auto& r : records) {
    GroupKey key{keys.experiment ? r.experiment : "", r.target_kind, r.framework,
                 keys.entropy ? r.target_entropy_bits : 0.0};
    const double gap = std::abs(r.best_output_entropy_bits - r.achieved_target_entropy_bits);
    auto [it, fresh] = groups[key].try_emplace(r.target_id, Best{r.min_loss_bits, gap});
    if (!fresh && r.min_loss_bits < it->second.loss) it->second = {r.min_loss_bits, gap};
  }
  std::vector<AggregateRow> rows;
  for (const auto& [key, per_target] : groups) {
    AggregateRow row;
    std::tie(row.experiment, row.target_kind, row.framework, row.target_entropy_bits) = key;
    row.n_targets = per_target.size();
    const double n = static_cast<double>(row.n_targets);
    double sum = 0.0, gap = 0.0;
    for (const auto& [id, b] : per_target) {
      sum += b.loss;
      gap += b.gap;
    }
    row.mean_min_loss_bits = sum / n;
    row.mean_entropy_gap_bits = gap / n;
    if (row.n_targets > 1) {
      double ss = 0.0;
      for (const auto& [id, b] : per_target) ss += (b.loss - row.mean_min_loss_bits) * (b.loss - row.mean_min_loss_bits);
      row.se_min_loss_bits = std::sqrt(ss / (n - 1.0)) / std::sqrt(n);
    }
    row.ci_low = row.mean_min_loss_bits - 1.96 * row.se_min_loss_bits;
    row.ci_high = row.mean_min_loss_bits + 1.96 * row.se_min_loss_bits;
    rows.push_back(std::move(row));
  }
  return rows;
}

void emit_csv(const std::vector<ExperimentRecord>& records, std::ostream& out) {
  for (std::size_t i = 0; i < kColumnCount; ++i) out << (i ? "," : "") << kColumns[i];
  out << '\n';
  for (const auto& r : records) {
    out << quote(r.experiment) << ',' << quote(r.target_kind) << ',' << r.target_id << ',' << fmt(r.target_entropy_bits)
        << ',' << fmt(r.achieved_target_entropy_bits) << ',' << (r.target_converged ? "true" : "false") << ','
        << quote(r.framework) << ',' << r.seed << ',' << fmt(r.min_loss_bits) << ','
        << fmt(r.best_output_entropy_bits) << ',' << r.epochs_run << ',' << fmt(r.wall_ms) << '\n';
  }
}

void emit_csv(const std::vector<ExperimentRecord>& records, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open " + path);
  emit_csv(records, out);
  if (!out) throw IoError("write failed: " + path);
}

std::vector<ExperimentRecord> read_records_csv(std::istream& in) {
  std::vector<std::string> f;
  if (!read_csv_row(in, f)) throw InvalidArgument("csv: empty input");
  if (f.size() != kColumnCount || !std::equal(f.begin(), f.end(), std::begin(kColumns)))
    throw InvalidArgument("csv: unexpected header");
  std::vector<ExperimentRecord> out;
  std::size_t line = 1;
  while (read_csv_row(in, f)) {
    ++line;
    if (f.size() == 1 && f[0].empty()) continue;
    if (f.size() != kColumnCount) throw InvalidArgument("csv: wrong field count on record " + std::to_string(line));
    ExperimentRecord r;
    r.experiment = f[0];
    r.target_kind = f[1];
    r.target_id = to_u64(f[2]);
    r.target_entropy_bits = to_double(f[3]);
    r.achieved_target_entropy_bits = to_double(f[4]);
    if (f[5] != "true" && f[5] != "false") throw InvalidArgument("csv: bad boolean '" + f[5] + "'");
    r.target_converged = f[5] == "true";
    r.framework = f[6];
    r.seed = to_u64(f[7]);
    r.min_loss_bits = to_double(f[8]);
    r.best_output_entropy_bits = to_double(f[9]);
    r.epochs_run = to_u64(f[10]);
    r.wall_ms = to_double(f[11]);
    out.push_back(std::move(r));
  }
  return out;
}

std::vector<ExperimentRecord> read_records_csv(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  return read_records_csv(in);
}

void emit_summary_csv(const std::vector<AggregateRow>& rows, std::ostream& out) {
  out << "experiment,target_kind,framework,target_entropy_bits,n_targets,mean_min_loss_bits,se_min_loss_bits,"
         "ci_low,ci_high,mean_entropy_gap_bits\n";
  for (const auto& r : rows)
    out << quote(r.experiment) << ',' << quote(r.target_kind) << ',' << quote(r.framework) << ','
        << fmt(r.target_entropy_bits) << ',' << r.n_targets << ',' << fmt(r.mean_min_loss_bits) << ','
        << fmt(r.se_min_loss_bits) << ',' << fmt(r.ci_low) << ',' << fmt(r.ci_high) << ','
        << fmt(r.mean_entropy_gap_bits) << '\n';
}

void emit_plot(const std::vector<AggregateRow>& rows, std::ostream& out, const std::string& title) {
  constexpr double W = 720, H = 480, L = 70, R = 170, T = 40, B = 60;
  constexpr const char* palette[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf"};

  std::map<std::string, std::vector<const AggregateRow*>> series;
  double x_max = 0.0, y_max = 0.0;
  for (const auto& r : rows) {
    std::string name = r.target_kind + " / " + r.framework;
    if (!r.experiment.empty()) name = r.experiment + ": " + name;
    series[name].push_back(&r);
    x_max = std::max(x_max, r.target_entropy_bits);
    y_max = std::max(y_max, r.mean_min_loss_bits + r.se_min_loss_bits);
  }
  if (x_max <= 0) x_max = 1;
  if (y_max <= 0) y_max = 1;
  const auto sx = [&](double x) { return L + (W - L - R) * x / x_max; };
  const auto sy = [&](double y) { return H - B - (H - T - B) * y / y_max; };

  out << "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n"
      << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H << "\" viewBox=\"0 0 " << W
      << ' ' << H << "\">\n"
      << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  if (!title.empty())
    out << "<text x=\"" << W / 2 << "\" y=\"24\" text-anchor=\"middle\" font-size=\"15\">" << xml_escape(title)
        << "</text>\n";
  out << "<g stroke=\"black\" fill=\"none\"><line x1=\"" << L << "\" y1=\"" << H - B << "\" x2=\"" << W - R
      << "\" y2=\"" << H - B << "\"/><line x1=\"" << L << "\" y1=\"" << T << "\" x2=\"" << L << "\" y2=\"" << H - B
      << "\"/></g>\n";
  for (int i = 0; i <= 5; ++i) {
    const double xv = x_max * i / 5, yv = y_max * i / 5;
    out << "<text x=\"" << fmt(sx(xv)) << "\" y=\"" << H - B + 18 << "\" text-anchor=\"middle\" font-size=\"11\">"
        << fmt(std::round(xv * 100) / 100) << "</text>\n";
    out << "<text x=\"" << L - 6 << "\" y=\"" << fmt(sy(yv) + 4) << "\" text-anchor=\"end\" font-size=\"11\">"
        << fmt(std::round(yv * 100) / 100) << "</text>\n";
  }
  out << "<text x=\"" << (L + W - R) / 2 << "\" y=\"" << H - 15
      << "\" text-anchor=\"middle\" font-size=\"13\">target entropy (bits)</text>\n";
  out << "<text x=\"18\" y=\"" << (T + H - B) / 2 << "\" text-anchor=\"middle\" font-size=\"13\" transform=\"rotate(-90 18 "
      << (T + H - B) / 2 << ")\">min KL loss (bits)</text>\n";

  std::size_t idx = 0;
  for (auto& [name, pts] : series) {
    std::sort(pts.begin(), pts.end(),
              [](const AggregateRow* a, const AggregateRow* b) { return a->target_entropy_bits < b->target_entropy_bits; });
    const char* color = palette[idx % std::size(palette)];
    const bool band = std::any_of(pts.begin(), pts.end(), [](const AggregateRow* p) { return p->se_min_loss_bits > 0; });
    if (band) {
      out << "<polygon fill=\"" << color << "\" fill-opacity=\"0.15\" stroke=\"none\" points=\"";
      for (const auto* p : pts)
        out << fmt(sx(p->target_entropy_bits)) << ',' << fmt(sy(p->mean_min_loss_bits + p->se_min_loss_bits)) << ' ';
      for (auto it = pts.rbegin(); it != pts.rend(); ++it)
        out << fmt(sx((*it)->target_entropy_bits)) << ','
            << fmt(sy(std::max(0.0, (*it)->mean_min_loss_bits - (*it)->se_min_loss_bits))) << ' ';
      out << "\"/>\n";
    }
    out << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"2\" points=\"";
    for (const auto* p : pts) out << fmt(sx(p->target_entropy_bits)) << ',' << fmt(sy(p->mean_min_loss_bits)) << ' ';
    out << "\"/>\n";
    const double ly = T + 10 + 18.0 * static_cast<double>(idx);
    out << "<line x1=\"" << W - R + 10 << "\" y1=\"" << ly << "\" x2=\"" << W - R + 30 << "\" y2=\"" << ly
        << "\" stroke=\"" << color << "\" stroke-width=\"2\"/>\n"
        << "<text x=\"" << W - R + 35 << "\" y=\"" << ly + 4 << "\" font-size=\"11\">" << xml_escape(name)
        << "</text>\n";
    ++idx;
  }
  out << "</svg>\n";
}

void emit_plot(const std::vector<AggregateRow>& rows, const std::string& path, const std::string& title) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open " + path);
  emit_plot(rows, out, title);
  if (!out) throw IoError("write failed: " + path);
}

}  // namespace elab
