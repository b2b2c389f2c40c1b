#pragma once

// File ingestion, run configuration, batch testing, and result emission.
//
// Input is a long-format table (TSV or CSV) with one row per sequenced cell:
//   gene, subject, group, count, read_depth
// Rows are grouped by gene, then by subject (lexicographic), and each gene
// becomes one differential-expression test: fit a mixing distribution per
// subject, build a pairwise W1 distance matrix, and run a permutation test
// (covariate-adjusted when a covariate table is supplied).  P-values are
// corrected across genes with Benjamini-Hochberg, separately per distance
// variant.
//
// All emission (CSV and JSON) is byte-stable for fixed inputs and seed: no
// wall-clock times, no hardware-dependent values, and all doubles are
// printed with shortest round-trip formatting.

#include <algorithm>
#include <array>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <fstream>
#include <limits>
#include <map>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include <json.hpp>

#include "anova.hpp"
#include "errors.hpp"
#include "measures.hpp"
#include "parallel.hpp"
#include "rng.hpp"
#include "simulate.hpp"
#include "solvers.hpp"

namespace poismix {

// ----------------------------------------------------------------- tables ---

enum class table_format { tsv, csv };

inline char delimiter_of(table_format f) noexcept {
  return f == table_format::csv ? ',' : '\t';
}

// Infer the format from the file extension: ".csv" means comma-separated,
// anything else is read as tab-separated.
inline table_format infer_format(const std::string& path) {
  const auto dot = path.rfind('.');
  if (dot != std::string::npos) {
    std::string ext = path.substr(dot);
    for (auto& c : ext) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    if (ext == ".csv") return table_format::csv;
  }
  return table_format::tsv;
}

struct long_table_row {
  std::string gene;
  std::string subject;
  std::string group;
  std::int64_t count = 0;
  double read_depth = 1.0;
};

namespace detail {

inline std::vector<std::string> split_fields(const std::string& line, char delim) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    const std::size_t pos = line.find(delim, start);
    if (pos == std::string::npos) {
      out.push_back(line.substr(start));
      break;
    }
    out.push_back(line.substr(start, pos - start));
    start = pos + 1;
  }
  return out;
}

[[noreturn]] inline void fail_parse(const std::string& source, std::size_t line,
                                    const std::string& msg) {
  throw parse_error(source + ":" + std::to_string(line) + ": " + msg);
}

inline std::int64_t parse_count_field(const std::string& s, const std::string& source,
                                      std::size_t line) {
  std::int64_t v = 0;
  const char* first = s.data();
  const char* last = s.data() + s.size();
  auto res = std::from_chars(first, last, v);
  if (res.ec != std::errc{} || res.ptr != last)
    fail_parse(source, line, "count is not an integer: '" + s + "'");
  if (v < 0) fail_parse(source, line, "count must be nonnegative: '" + s + "'");
  return v;
}

inline double parse_real_field(const std::string& s, const std::string& source,
                               std::size_t line, const char* what) {
  double v = 0.0;
  const char* first = s.data();
  const char* last = s.data() + s.size();
  auto res = std::from_chars(first, last, v);
  if (res.ec != std::errc{} || res.ptr != last || !std::isfinite(v))
    fail_parse(source, line, std::string(what) + " is not a finite number: '" + s + "'");
  return v;
}

// Shortest round-trip decimal representation; stable across runs and
// machines for a given IEEE double.
inline std::string format_double(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  std::array<char, 64> buf{};
  auto res = std::to_chars(buf.data(), buf.data() + buf.size(), v);
  return std::string(buf.data(), res.ptr);
}

// Quote a CSV field only when it needs quoting (embedded delimiter, quote,
// or newline); inner quotes are doubled.
inline std::string csv_escape(const std::string& s, char delim) {
  if (s.find(delim) == std::string::npos && s.find('"') == std::string::npos &&
      s.find('\n') == std::string::npos && s.find('\r') == std::string::npos)
    return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += "\"\"";
    else out += c;
  }
  out += '"';
  return out;
}

inline void strip_cr(std::string& line) {
  if (!line.empty() && line.back() == '\r') line.pop_back();
}

}  // namespace detail

// Parse a long-format count table.  The header must contain exactly the
// columns gene, subject, group, count, read_depth (any order, no duplicates,
// no extras).  Every data row must have the same number of fields as the
// header.  Errors carry the 1-based line number.
inline std::vector<long_table_row> parse_long_table(std::istream& in, table_format fmt,
                                                    const std::string& source) {
  const char delim = delimiter_of(fmt);
  std::string line;
  std::size_t line_no = 0;

  // Header.
  if (!std::getline(in, line)) throw parse_error(source + ": empty file (no header)");
  ++line_no;
  detail::strip_cr(line);
  const auto header = detail::split_fields(line, delim);
  static const std::array<std::string, 5> wanted = {"gene", "subject", "group", "count",
                                                    "read_depth"};
  std::array<int, 5> col{};
  col.fill(-1);
  for (std::size_t j = 0; j < header.size(); ++j) {
    bool known = false;
    for (std::size_t w = 0; w < wanted.size(); ++w) {
      if (header[j] == wanted[w]) {
        known = true;
        if (col[w] != -1)
          detail::fail_parse(source, line_no, "duplicate header column '" + header[j] + "'");
        col[w] = static_cast<int>(j);
      }
    }
    if (!known)
      detail::fail_parse(source, line_no, "unknown header column '" + header[j] + "'");
  }
  for (std::size_t w = 0; w < wanted.size(); ++w)
    if (col[w] == -1)
      detail::fail_parse(source, line_no, "missing header column '" + wanted[w] + "'");

  std::vector<long_table_row> rows;
  while (std::getline(in, line)) {
    ++line_no;
    detail::strip_cr(line);
    if (line.empty()) continue;
    const auto f = detail::split_fields(line, delim);
    if (f.size() != header.size())
      detail::fail_parse(source, line_no,
                         "expected " + std::to_string(header.size()) + " fields, got " +
                             std::to_string(f.size()));
    long_table_row r;
    r.gene = f[static_cast<std::size_t>(col[0])];
    r.subject = f[static_cast<std::size_t>(col[1])];
    r.group = f[static_cast<std::size_t>(col[2])];
    r.count = detail::parse_count_field(f[static_cast<std::size_t>(col[3])], source, line_no);
    r.read_depth =
        detail::parse_real_field(f[static_cast<std::size_t>(col[4])], source, line_no,
                                 "read_depth");
    if (!(r.read_depth > 0.0))
      detail::fail_parse(source, line_no, "read_depth must be positive");
    if (r.gene.empty() || r.subject.empty() || r.group.empty())
      detail::fail_parse(source, line_no, "gene, subject, and group must be nonempty");
    rows.push_back(std::move(r));
  }
  return rows;
}

// One gene's assembled data.  Subjects are ordered lexicographically by id;
// group labels are integers assigned by lexicographic group-name order.
// Count samples are built later, once the support bound is known.
struct gene_block {
  std::string gene;
  std::vector<std::string> subjects;                // lexicographic
  std::vector<std::string> group_names;             // per subject
  std::vector<int> labels;                          // per subject
  std::vector<std::vector<std::int64_t>> counts;    // per subject, file order
  std::vector<std::vector<double>> depths;          // per subject, file order
};

// Group parsed rows into per-gene blocks.  Validates that each subject
// appears in exactly one group per gene; the error carries the line number
// of the first conflicting row.
inline std::vector<gene_block> assemble_gene_blocks(const std::vector<long_table_row>& rows,
                                                    const std::string& source,
                                                    std::size_t first_data_line = 2) {
  struct subject_rec {
    std::string group;
    std::vector<std::int64_t> counts;
    std::vector<double> depths;
  };
  std::map<std::string, std::map<std::string, subject_rec>> genes;
  std::size_t line = first_data_line;
  for (const auto& r : rows) {
    auto& subj = genes[r.gene][r.subject];
    if (subj.counts.empty()) {
      subj.group = r.group;
    } else if (subj.group != r.group) {
      detail::fail_parse(source, line,
                         "subject '" + r.subject + "' appears in groups '" + subj.group +
                             "' and '" + r.group + "' for gene '" + r.gene + "'");
    }
    subj.counts.push_back(r.count);
    subj.depths.push_back(r.read_depth);
    ++line;
  }

  std::vector<gene_block> out;
  out.reserve(genes.size());
  for (auto& [gene, subjects] : genes) {
    gene_block b;
    b.gene = gene;
    std::vector<std::string> names;
    for (auto& [subject, rec] : subjects) names.push_back(rec.group);
    std::sort(names.begin(), names.end());
    names.erase(std::unique(names.begin(), names.end()), names.end());
    for (auto& [subject, rec] : subjects) {
      b.subjects.push_back(subject);
      b.group_names.push_back(rec.group);
      const auto it = std::lower_bound(names.begin(), names.end(), rec.group);
      b.labels.push_back(static_cast<int>(it - names.begin()));
      b.counts.push_back(std::move(rec.counts));
      b.depths.push_back(std::move(rec.depths));
    }
    out.push_back(std::move(b));
  }
  return out;
}

// Read and assemble a count table from disk.
inline std::vector<gene_block> ingest_counts(const std::string& path, table_format fmt) {
  std::ifstream in(path);
  if (!in) throw parse_error("cannot open '" + path + "'");
  const auto rows = parse_long_table(in, fmt, path);
  return assemble_gene_blocks(rows, path);
}

inline std::vector<gene_block> ingest_counts(const std::string& path) {
  return ingest_counts(path, infer_format(path));
}

// Emit gene blocks back to the long-table format, in canonical order (genes
// and subjects as stored, cells in ingestion order).  ingest(emit(ingest(x)))
// reproduces identical structures.
inline void emit_counts(std::ostream& out, const std::vector<gene_block>& blocks,
                        table_format fmt) {
  const char delim = delimiter_of(fmt);
  out << "gene" << delim << "subject" << delim << "group" << delim << "count" << delim
      << "read_depth\n";
  for (const auto& b : blocks) {
    for (std::size_t s = 0; s < b.subjects.size(); ++s) {
      for (std::size_t c = 0; c < b.counts[s].size(); ++c) {
        out << b.gene << delim << b.subjects[s] << delim << b.group_names[s] << delim
            << b.counts[s][c] << delim << detail::format_double(b.depths[s][c]) << '\n';
      }
    }
  }
}

// Emit raw rows in the given order (used to write synthetic datasets).
inline void emit_rows(std::ostream& out, const std::vector<long_table_row>& rows,
                      table_format fmt) {
  const char delim = delimiter_of(fmt);
  out << "gene" << delim << "subject" << delim << "group" << delim << "count" << delim
      << "read_depth\n";
  for (const auto& r : rows) {
    out << r.gene << delim << r.subject << delim << r.group << delim << r.count << delim
        << detail::format_double(r.read_depth) << '\n';
  }
}

// Convert a simulated dataset to long-table rows.  Subjects are named
// s01, s02, ... (zero-padded, lexicographically stable) and groups g1, g2.
inline std::vector<long_table_row> dataset_to_rows(const sim_dataset& ds,
                                                   const std::string& gene) {
  std::size_t width = 1;
  for (std::size_t n = ds.subjects.size(); n >= 10; n /= 10) ++width;
  std::vector<long_table_row> rows;
  for (std::size_t s = 0; s < ds.subjects.size(); ++s) {
    std::string id = std::to_string(s + 1);
    if (id.size() < width) id.insert(0, width - id.size(), '0');
    const auto& counts = ds.subjects[s].counts();
    const auto& depths = ds.subjects[s].read_depths();
    for (std::size_t c = 0; c < counts.size(); ++c) {
      long_table_row r;
      r.gene = gene;
      r.subject = "s" + id;
      r.group = "g" + std::to_string(ds.labels[s] + 1);
      r.count = counts[c];
      r.read_depth = depths[c];
      rows.push_back(std::move(r));
    }
  }
  return rows;
}

// ------------------------------------------------------------- covariates ---

// Per-subject numeric covariates.  CSV with a "subject" column plus numeric
// columns; categorical covariates must be pre-encoded as numbers.
struct covariate_table {
  std::vector<std::string> subjects;
  std::vector<std::string> names;  // covariate columns, file order
  matrix z;                        // subjects x names
};

inline covariate_table parse_covariates(std::istream& in, const std::string& source) {
  std::string line;
  std::size_t line_no = 0;
  if (!std::getline(in, line)) throw parse_error(source + ": empty file (no header)");
  ++line_no;
  detail::strip_cr(line);
  const auto header = detail::split_fields(line, ',');
  int subject_col = -1;
  covariate_table tab;
  for (std::size_t j = 0; j < header.size(); ++j) {
    if (header[j] == "subject") {
      if (subject_col != -1)
        detail::fail_parse(source, line_no, "duplicate header column 'subject'");
      subject_col = static_cast<int>(j);
    } else {
      if (header[j].empty())
        detail::fail_parse(source, line_no, "empty covariate column name");
      if (std::find(tab.names.begin(), tab.names.end(), header[j]) != tab.names.end())
        detail::fail_parse(source, line_no, "duplicate header column '" + header[j] + "'");
      tab.names.push_back(header[j]);
    }
  }
  if (subject_col == -1)
    detail::fail_parse(source, line_no, "missing header column 'subject'");
  if (tab.names.empty())
    detail::fail_parse(source, line_no, "no covariate columns besides 'subject'");

  std::vector<std::vector<double>> values;
  while (std::getline(in, line)) {
    ++line_no;
    detail::strip_cr(line);
    if (line.empty()) continue;
    const auto f = detail::split_fields(line, ',');
    if (f.size() != header.size())
      detail::fail_parse(source, line_no,
                         "expected " + std::to_string(header.size()) + " fields, got " +
                             std::to_string(f.size()));
    const std::string& subject = f[static_cast<std::size_t>(subject_col)];
    if (subject.empty()) detail::fail_parse(source, line_no, "empty subject id");
    if (std::find(tab.subjects.begin(), tab.subjects.end(), subject) != tab.subjects.end())
      detail::fail_parse(source, line_no, "duplicate subject '" + subject + "'");
    tab.subjects.push_back(subject);
    std::vector<double> row;
    for (std::size_t j = 0; j < f.size(); ++j) {
      if (static_cast<int>(j) == subject_col) continue;
      row.push_back(detail::parse_real_field(f[j], source, line_no, "covariate"));
    }
    values.push_back(std::move(row));
  }
  if (values.empty()) throw parse_error(source + ": no covariate rows");

  tab.z = matrix(values.size(), tab.names.size());
  for (std::size_t i = 0; i < values.size(); ++i)
    for (std::size_t j = 0; j < tab.names.size(); ++j) tab.z(i, j) = values[i][j];
  return tab;
}

inline covariate_table load_covariates(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw parse_error("cannot open '" + path + "'");
  return parse_covariates(in, path);
}

// A regression design assembled for one gene: an intercept column is
// prepended automatically, covariate rows are matched to the gene's subjects
// by id, and the diagnosis column index accounts for the intercept.
struct gene_design {
  covariate_matrix z;
  std::size_t diagnosis_col;
};

// Index of a named covariate column, before the intercept shift.
inline std::size_t covariate_index(const covariate_table& tab, const std::string& name) {
  const auto it = std::find(tab.names.begin(), tab.names.end(), name);
  if (it == tab.names.end())
    throw config_error("diagnosis column '" + name + "' not found in covariate table");
  return static_cast<std::size_t>(it - tab.names.begin());
}

inline gene_design design_for_subjects(const covariate_table& tab,
                                       const std::vector<std::string>& subjects,
                                       std::size_t diagnosis_idx) {
  std::unordered_map<std::string, std::size_t> where;
  for (std::size_t i = 0; i < tab.subjects.size(); ++i) where.emplace(tab.subjects[i], i);
  matrix z(subjects.size(), tab.names.size() + 1);
  for (std::size_t i = 0; i < subjects.size(); ++i) {
    const auto it = where.find(subjects[i]);
    if (it == where.end())
      throw std::runtime_error("no covariate row for subject '" + subjects[i] + "'");
    z(i, 0) = 1.0;
    for (std::size_t j = 0; j < tab.names.size(); ++j) z(i, j + 1) = tab.z(it->second, j);
  }
  std::vector<std::string> names;
  names.push_back("(intercept)");
  names.insert(names.end(), tab.names.begin(), tab.names.end());
  return gene_design{covariate_matrix(std::move(z), std::move(names)), diagnosis_idx + 1};
}

// ----------------------------------------------------------------- config ---

enum class variant_mode { mixing, mixture, both };

inline const char* variant_mode_name(variant_mode m) noexcept {
  switch (m) {
    case variant_mode::mixing: return "mixing";
    case variant_mode::mixture: return "mixture";
    default: return "both";
  }
}

inline variant_mode parse_variant_mode(const std::string& s) {
  if (s == "mixing") return variant_mode::mixing;
  if (s == "mixture") return variant_mode::mixture;
  if (s == "both") return variant_mode::both;
  throw config_error("unknown --smoothed value '" + s + "' (expected mixing, mixture, or both)");
}

// Names of the distance variants a mode requests, in emission order.
inline std::vector<std::string> variant_names(variant_mode m) {
  switch (m) {
    case variant_mode::mixing: return {"mixing"};
    case variant_mode::mixture: return {"mixture"};
    default: return {"mixing", "mixture"};
  }
}

struct run_config {
  std::optional<double> b;       // explicit support bound; overrides selection
  double b_quantile = 0.99;      // empirical quantile of pooled count/depth ratios
  double b_factor = 4.0 / 3.0;   // safety factor applied to the quantile
  solver_config solver{};        // defaults: VEM, stop_tol 0.01
  int n_perm = 100000;           // permutation draws per test (data-mode default)
  std::uint64_t seed = 0;
  variant_mode variants = variant_mode::both;
  double fdr_q = 0.05;
  std::string covariates_path;   // empty = plain (unadjusted) test
  std::string diagnosis_col;     // required when covariates_path is set
  int threads = 1;               // 0 = all hardware threads

  void validate() const {
    if (b && !(*b > 0.0)) throw config_error("explicit bound must be positive");
    if (!(b_quantile > 0.0) || !(b_quantile < 1.0))
      throw config_error("b_quantile must lie in (0,1)");
    if (!(b_factor >= 1.0)) throw config_error("b_factor must be >= 1");
    if (n_perm < 1) throw config_error("n_perm must be >= 1");
    if (!(fdr_q > 0.0) || !(fdr_q < 1.0)) throw config_error("fdr_q must lie in (0,1)");
    if (threads < 0) throw config_error("threads must be >= 0");
    if (!covariates_path.empty() && diagnosis_col.empty())
      throw config_error("--diagnosis-col is required when covariates are given");
  }
};

// POISMIX_THREADS overrides the --threads flag when set; it must be a
// nonnegative integer (0 = all hardware threads).
inline int threads_from_env(int flag_value) {
  const char* env = std::getenv("POISMIX_THREADS");
  if (env == nullptr || *env == '\0') return flag_value;
  int v = 0;
  const char* last = env + std::string_view(env).size();
  auto res = std::from_chars(env, last, v);
  if (res.ec != std::errc{} || res.ptr != last || v < 0)
    throw config_error("POISMIX_THREADS must be a nonnegative integer, got '" +
                       std::string(env) + "'");
  return v;
}

// ---------------------------------------------------------- bound selection ---

inline double ceil_to_multiple_of_5(double x) { return 5.0 * std::ceil(x / 5.0); }

// Support bound for an analysis: the explicit override if set, otherwise
// ceil-to-a-multiple-of-5 of b_factor times the empirical b_quantile
// (order-statistic definition) of the pooled count/read_depth ratios, with a
// floor of 5.
inline double select_bound(const std::vector<double>& ratios, const run_config& cfg) {
  if (cfg.b) return *cfg.b;
  if (ratios.empty()) throw std::domain_error("select_bound: no ratios");
  std::vector<double> sorted = ratios;
  std::sort(sorted.begin(), sorted.end());
  const double n = static_cast<double>(sorted.size());
  std::size_t rank = static_cast<std::size_t>(std::ceil(cfg.b_quantile * n));
  if (rank < 1) rank = 1;
  if (rank > sorted.size()) rank = sorted.size();
  const double q = sorted[rank - 1];
  return std::max(5.0, ceil_to_multiple_of_5(cfg.b_factor * q));
}

// Count/read_depth ratios pooled across every cell of every gene (the
// analysis shares one bound, mirroring a single pooled bound choice for a
// whole panel).
inline std::vector<double> pooled_ratios(const std::vector<gene_block>& blocks) {
  std::vector<double> out;
  for (const auto& b : blocks)
    for (std::size_t s = 0; s < b.counts.size(); ++s)
      for (std::size_t c = 0; c < b.counts[s].size(); ++c)
        out.push_back(static_cast<double>(b.counts[s][c]) / b.depths[s][c]);
  return out;
}

// ------------------------------------------------------------- test command ---

// Poisson-smoothing tail tolerance used for the "mixture" distance variant,
// matching the simulation harness.
inline constexpr double k_smooth_tail_tol = 1e-8;

struct subject_diag {
  std::string subject;
  std::string group;
  int n_cells = 0;
  int iterations = 0;
  bool converged = false;
  double certificate = 0.0;
  std::size_t support_size = 0;
  double mean = 0.0;
};

struct variant_result {
  std::string variant;  // "mixing" or "mixture"
  double statistic = std::numeric_limits<double>::quiet_NaN();
  double p_value = std::numeric_limits<double>::quiet_NaN();
  double q_value = std::numeric_limits<double>::quiet_NaN();
  bool degenerate = false;
  std::uint64_t seed = 0;
  std::optional<gower_info> gower;  // set when covariate-adjusted
};

struct gene_test_result {
  std::string gene;
  double b_used = std::numeric_limits<double>::quiet_NaN();
  double converged_fraction = std::numeric_limits<double>::quiet_NaN();
  std::string error;  // empty = success
  std::vector<subject_diag> fits;
  std::vector<variant_result> variants;
};

namespace detail {

struct gene_fit_data {
  std::vector<discrete_measure> estimates;
  std::vector<subject_diag> info;
  double converged_fraction = 0.0;
};

inline gene_fit_data fit_gene(const gene_block& b, double bound, const solver_config& solver) {
  gene_fit_data out;
  int converged = 0;
  for (std::size_t s = 0; s < b.subjects.size(); ++s) {
    count_sample sample(b.counts[s], b.depths[s], bound);
    fit_result fr = fit(sample, solver);
    subject_diag d;
    d.subject = b.subjects[s];
    d.group = b.group_names[s];
    d.n_cells = static_cast<int>(b.counts[s].size());
    d.iterations = fr.iterations;
    d.converged = fr.converged;
    d.certificate = fr.max_phi_prime_at_exit;
    d.support_size = fr.estimate.size();
    d.mean = fr.estimate.mean();
    if (fr.converged) ++converged;
    out.info.push_back(std::move(d));
    out.estimates.push_back(std::move(fr.estimate));
  }
  out.converged_fraction =
      static_cast<double>(converged) / static_cast<double>(b.subjects.size());
  return out;
}

}  // namespace detail

// Run the full per-gene battery: bound selection (pooled), per-subject fits,
// distance matrices per requested variant, permutation tests (plain, or
// covariate-adjusted with restricted permutation when a covariate table is
// given), and Benjamini-Hochberg across genes separately per variant.
// Per-gene failures land in the gene's `error` field; they never abort the
// batch.  Results are deterministic for fixed inputs and seed regardless of
// thread count: gene t's permutation streams derive from (seed, t, variant).
inline std::vector<gene_test_result> run_gene_tests(const run_config& cfg,
                                                    const std::vector<gene_block>& blocks,
                                                    const covariate_table* covariates,
                                                    int n_threads = 1) {
  cfg.validate();
  if (!cfg.covariates_path.empty() && covariates == nullptr)
    throw config_error("covariates path set but no covariate table loaded");

  std::vector<gene_test_result> results(blocks.size());
  if (blocks.empty()) return results;

  const double bound = select_bound(pooled_ratios(blocks), cfg);
  std::size_t diag_idx = 0;
  if (covariates != nullptr) diag_idx = covariate_index(*covariates, cfg.diagnosis_col);

  const auto names = variant_names(cfg.variants);

  parallel_for(blocks.size(), resolve_threads(n_threads), [&](std::size_t t) {
    const gene_block& b = blocks[t];
    gene_test_result& r = results[t];
    r.gene = b.gene;
    r.b_used = bound;
    for (std::size_t v = 0; v < names.size(); ++v) {
      variant_result vr;
      vr.variant = names[v];
      vr.seed = derive_seed(cfg.seed, t, names[v] == "mixing" ? 1 : 2);
      r.variants.push_back(std::move(vr));
    }
    try {
      auto fitted = detail::fit_gene(b, bound, cfg.solver);
      r.fits = std::move(fitted.info);
      r.converged_fraction = fitted.converged_fraction;

      const study_layout layout(b.labels);
      std::optional<gene_design> design;
      if (covariates != nullptr)
        design = design_for_subjects(*covariates, b.subjects, diag_idx);

      for (auto& vr : r.variants) {
        const dist_matrix d =
            distance_matrix(fitted.estimates, vr.variant == "mixture", k_smooth_tail_tol);
        if (design) {
          gower_info ginfo;
          try {
            const test_result res = covariate_permutation_test(
                d, design->z, design->diagnosis_col, cfg.n_perm, vr.seed, {0.05}, 1, &ginfo);
            vr.statistic = res.statistic;
            vr.p_value = res.p_value;
          } catch (const degenerate_error&) {
            vr.degenerate = true;
            vr.p_value = 1.0;
          }
          vr.gower = ginfo;
        } else {
          const test_result res = permutation_test(d, layout, cfg.n_perm, vr.seed);
          vr.statistic = res.statistic;
          vr.p_value = res.p_value;
          vr.degenerate = res.degenerate;
        }
      }
    } catch (const std::exception& e) {
      r.error = e.what();
      r.fits.clear();
      r.converged_fraction = std::numeric_limits<double>::quiet_NaN();
      for (auto& vr : r.variants) {
        vr.statistic = std::numeric_limits<double>::quiet_NaN();
        vr.p_value = std::numeric_limits<double>::quiet_NaN();
        vr.gower.reset();
      }
    }
  });

  // Benjamini-Hochberg across genes, separately per variant, over the genes
  // that produced a p-value.
  for (const auto& name : names) {
    std::vector<std::size_t> which;
    std::vector<double> ps;
    for (std::size_t t = 0; t < results.size(); ++t) {
      if (!results[t].error.empty()) continue;
      for (const auto& vr : results[t].variants) {
        if (vr.variant == name && std::isfinite(vr.p_value)) {
          which.push_back(t);
          ps.push_back(vr.p_value);
        }
      }
    }
    if (ps.empty()) continue;
    const bh_result bh = benjamini_hochberg(ps, cfg.fdr_q);
    for (std::size_t i = 0; i < which.size(); ++i) {
      for (auto& vr : results[which[i]].variants)
        if (vr.variant == name) vr.q_value = bh.adjusted[i];
    }
  }
  return results;
}

// CSV result table: one row per gene per variant.  On per-gene failure the
// numeric fields are left empty and the error column carries the message.
inline void write_test_csv(std::ostream& out, const std::vector<gene_test_result>& results) {
  out << "gene,variant,statistic,p_value,q_value,converged_fraction,B_used,error\n";
  for (const auto& r : results) {
    for (const auto& vr : r.variants) {
      out << detail::csv_escape(r.gene, ',') << ',' << vr.variant << ',';
      if (r.error.empty()) {
        out << detail::format_double(vr.statistic) << ',' << detail::format_double(vr.p_value)
            << ',' << detail::format_double(vr.q_value) << ','
            << detail::format_double(r.converged_fraction) << ','
            << detail::format_double(r.b_used) << ',';
      } else {
        out << ",,,," << detail::format_double(r.b_used) << ',';
      }
      out << detail::csv_escape(r.error, ',') << '\n';
    }
  }
}

namespace detail {

inline nlohmann::ordered_json json_double(double v) {
  // nlohmann serializes NaN/inf as null; make that explicit.
  if (!std::isfinite(v)) return nullptr;
  return v;
}

inline nlohmann::ordered_json config_json(const run_config& cfg) {
  nlohmann::ordered_json j;
  j["b"] = cfg.b ? nlohmann::ordered_json(*cfg.b) : nlohmann::ordered_json(nullptr);
  j["b_quantile"] = cfg.b_quantile;
  j["b_factor"] = cfg.b_factor;
  j["solver"] = {{"algorithm", algorithm_name(cfg.solver.algo)},
                 {"stop_tol", cfg.solver.stop_tol},
                 {"max_iters", cfg.solver.max_iters}};
  j["n_perm"] = cfg.n_perm;
  j["seed"] = cfg.seed;
  j["smoothed"] = variant_mode_name(cfg.variants);
  j["fdr_q"] = cfg.fdr_q;
  j["covariates"] = cfg.covariates_path.empty()
                        ? nlohmann::ordered_json(nullptr)
                        : nlohmann::ordered_json(cfg.covariates_path);
  j["diagnosis_col"] = cfg.diagnosis_col.empty()
                           ? nlohmann::ordered_json(nullptr)
                           : nlohmann::ordered_json(cfg.diagnosis_col);
  return j;
}

}  // namespace detail

// Full JSON diagnostics for a test run.  Thread counts and wall times are
// deliberately absent: the document is identical for identical inputs and
// seed on any machine.
inline nlohmann::ordered_json test_results_json(const run_config& cfg,
                                                const std::vector<gene_test_result>& results) {
  nlohmann::ordered_json root;
  root["command"] = "test";
  root["config"] = detail::config_json(cfg);
  auto genes = nlohmann::ordered_json::array();
  for (const auto& r : results) {
    nlohmann::ordered_json g;
    g["gene"] = r.gene;
    g["b_used"] = detail::json_double(r.b_used);
    g["converged_fraction"] = detail::json_double(r.converged_fraction);
    g["error"] = r.error.empty() ? nlohmann::ordered_json(nullptr)
                                 : nlohmann::ordered_json(r.error);
    auto subjects = nlohmann::ordered_json::array();
    for (const auto& s : r.fits) {
      subjects.push_back({{"subject", s.subject},
                          {"group", s.group},
                          {"n_cells", s.n_cells},
                          {"iterations", s.iterations},
                          {"converged", s.converged},
                          {"certificate", detail::json_double(s.certificate)},
                          {"support_size", s.support_size},
                          {"mean", detail::json_double(s.mean)}});
    }
    g["subjects"] = std::move(subjects);
    auto variants = nlohmann::ordered_json::array();
    for (const auto& vr : r.variants) {
      nlohmann::ordered_json v;
      v["variant"] = vr.variant;
      v["statistic"] = detail::json_double(vr.statistic);
      v["p_value"] = detail::json_double(vr.p_value);
      v["q_value"] = detail::json_double(vr.q_value);
      v["degenerate"] = vr.degenerate;
      v["seed"] = vr.seed;
      if (vr.gower) {
        v["gower"] = {{"min_eigenvalue", detail::json_double(vr.gower->min_eigenvalue)},
                      {"clipped", vr.gower->clipped},
                      {"rounded", vr.gower->rounded}};
      }
      variants.push_back(std::move(v));
    }
    g["variants"] = std::move(variants);
    genes.push_back(std::move(g));
  }
  root["genes"] = std::move(genes);
  return root;
}

// -------------------------------------------------------------- fit command ---

struct gene_fit_result {
  std::string gene;
  double b_used = std::numeric_limits<double>::quiet_NaN();
  double converged_fraction = std::numeric_limits<double>::quiet_NaN();
  std::string error;
  std::vector<subject_diag> info;
  std::vector<discrete_measure> estimates;
};

inline std::vector<gene_fit_result> run_gene_fits(const run_config& cfg,
                                                  const std::vector<gene_block>& blocks,
                                                  int n_threads = 1) {
  cfg.validate();
  std::vector<gene_fit_result> results(blocks.size());
  if (blocks.empty()) return results;
  const double bound = select_bound(pooled_ratios(blocks), cfg);
  parallel_for(blocks.size(), resolve_threads(n_threads), [&](std::size_t t) {
    gene_fit_result& r = results[t];
    r.gene = blocks[t].gene;
    r.b_used = bound;
    try {
      auto fitted = detail::fit_gene(blocks[t], bound, cfg.solver);
      r.info = std::move(fitted.info);
      r.estimates = std::move(fitted.estimates);
      r.converged_fraction = fitted.converged_fraction;
    } catch (const std::exception& e) {
      r.error = e.what();
      r.info.clear();
      r.estimates.clear();
    }
  });
  return results;
}

inline void write_fits_csv(std::ostream& out, const std::vector<gene_fit_result>& results) {
  out << "gene,subject,group,n_cells,iterations,converged,certificate,support_size,mean,"
         "B_used,error\n";
  for (const auto& r : results) {
    if (!r.error.empty()) {
      out << detail::csv_escape(r.gene, ',') << ",,,,,,,,,"
          << detail::format_double(r.b_used) << ',' << detail::csv_escape(r.error, ',')
          << '\n';
      continue;
    }
    for (const auto& s : r.info) {
      out << detail::csv_escape(r.gene, ',') << ',' << detail::csv_escape(s.subject, ',')
          << ',' << detail::csv_escape(s.group, ',') << ',' << s.n_cells << ','
          << s.iterations << ',' << (s.converged ? "true" : "false") << ','
          << detail::format_double(s.certificate) << ',' << s.support_size << ','
          << detail::format_double(s.mean) << ',' << detail::format_double(r.b_used)
          << ",\n";
    }
  }
}

inline nlohmann::ordered_json fits_json(const run_config& cfg,
                                        const std::vector<gene_fit_result>& results) {
  nlohmann::ordered_json root;
  root["command"] = "fit";
  root["config"] = detail::config_json(cfg);
  auto genes = nlohmann::ordered_json::array();
  for (const auto& r : results) {
    nlohmann::ordered_json g;
    g["gene"] = r.gene;
    g["b_used"] = detail::json_double(r.b_used);
    g["converged_fraction"] = detail::json_double(r.converged_fraction);
    g["error"] = r.error.empty() ? nlohmann::ordered_json(nullptr)
                                 : nlohmann::ordered_json(r.error);
    auto subjects = nlohmann::ordered_json::array();
    for (std::size_t s = 0; s < r.info.size(); ++s) {
      const auto& d = r.info[s];
      nlohmann::ordered_json sj;
      sj["subject"] = d.subject;
      sj["group"] = d.group;
      sj["n_cells"] = d.n_cells;
      sj["iterations"] = d.iterations;
      sj["converged"] = d.converged;
      sj["certificate"] = detail::json_double(d.certificate);
      sj["mean"] = detail::json_double(d.mean);
      sj["atoms"] = r.estimates[s].support();
      sj["weights"] = r.estimates[s].weights();
      subjects.push_back(std::move(sj));
    }
    g["subjects"] = std::move(subjects);
    genes.push_back(std::move(g));
  }
  root["genes"] = std::move(genes);
  return root;
}

// --------------------------------------------------------------- w1 command ---

// Pairwise (unsquared) W1 distances between the fitted subjects of each
// gene, on the mixing scale and/or the smoothed (Poisson mixture) scale.
inline void write_w1_csv(std::ostream& out, const run_config& cfg,
                         const std::vector<gene_fit_result>& results) {
  const auto names = variant_names(cfg.variants);
  out << "gene,variant,subject_a,subject_b,w1,error\n";
  for (const auto& r : results) {
    if (!r.error.empty()) {
      out << detail::csv_escape(r.gene, ',') << ",,,,," << detail::csv_escape(r.error, ',')
          << '\n';
      continue;
    }
    for (const auto& name : names) {
      std::vector<truncated_pmf> pmfs;
      if (name == "mixture")
        for (const auto& g : r.estimates) pmfs.push_back(poisson_smooth(g, k_smooth_tail_tol));
      for (std::size_t i = 0; i < r.estimates.size(); ++i) {
        for (std::size_t j = i + 1; j < r.estimates.size(); ++j) {
          const double w = name == "mixture" ? w1_pmfs(pmfs[i], pmfs[j])
                                             : w1_measures(r.estimates[i], r.estimates[j]);
          out << detail::csv_escape(r.gene, ',') << ',' << name << ','
              << detail::csv_escape(r.info[i].subject, ',') << ','
              << detail::csv_escape(r.info[j].subject, ',') << ','
              << detail::format_double(w) << ",\n";
        }
      }
    }
  }
}

inline nlohmann::ordered_json w1_json(const run_config& cfg,
                                      const std::vector<gene_fit_result>& results) {
  const auto names = variant_names(cfg.variants);
  nlohmann::ordered_json root;
  root["command"] = "w1";
  root["config"] = detail::config_json(cfg);
  auto genes = nlohmann::ordered_json::array();
  for (const auto& r : results) {
    nlohmann::ordered_json g;
    g["gene"] = r.gene;
    g["b_used"] = detail::json_double(r.b_used);
    g["error"] = r.error.empty() ? nlohmann::ordered_json(nullptr)
                                 : nlohmann::ordered_json(r.error);
    auto subjects = nlohmann::ordered_json::array();
    for (const auto& d : r.info) subjects.push_back(d.subject);
    g["subjects"] = std::move(subjects);
    if (r.error.empty()) {
      for (const auto& name : names) {
        std::vector<truncated_pmf> pmfs;
        if (name == "mixture")
          for (const auto& gm : r.estimates)
            pmfs.push_back(poisson_smooth(gm, k_smooth_tail_tol));
        auto mat = nlohmann::ordered_json::array();
        for (std::size_t i = 0; i < r.estimates.size(); ++i) {
          auto row = nlohmann::ordered_json::array();
          for (std::size_t j = 0; j < r.estimates.size(); ++j) {
            double w = 0.0;
            if (i != j)
              w = name == "mixture" ? w1_pmfs(pmfs[i], pmfs[j])
                                    : w1_measures(r.estimates[i], r.estimates[j]);
            row.push_back(w);
          }
          mat.push_back(std::move(row));
        }
        g[name] = std::move(mat);
      }
    }
    genes.push_back(std::move(g));
  }
  root["genes"] = std::move(genes);
  return root;
}

// --------------------------------------------------------- simulate command ---

struct simulate_request {
  std::string design_id = "A";
  std::string model_id = "1a";
  int rounds = 1000;
  int n_perm = 1000;           // simulation-mode default
  int cells = 50;              // cells per subject (balanced designs)
  double alpha = 0.05;
  std::uint64_t seed = 0;
  solver_config solver = simulation_solver();
};

inline sim_report run_simulate(const simulate_request& req, int n_threads = 1) {
  if (req.rounds < 1) throw config_error("rounds must be >= 1");
  if (req.n_perm < 1) throw config_error("n_perm must be >= 1");
  if (req.cells < 1) throw config_error("cells must be >= 1");
  if (!(req.alpha > 0.0) || req.alpha > 1.0)
    throw config_error("alpha must lie in (0,1]");
  const design_spec design = make_design(req.design_id, req.cells);
  const auto models = make_models(req.model_id);
  return run_power_study(design, models.first, models.second, req.rounds, req.n_perm,
                         req.alpha, req.seed, n_threads, req.solver);
}

inline nlohmann::ordered_json sim_report_json(const simulate_request& req,
                                              const sim_report& rep) {
  nlohmann::ordered_json j;
  j["command"] = "simulate";
  j["design"] = req.design_id;
  j["model"] = req.model_id;
  j["cells_per_subject"] = req.cells;
  j["rounds"] = rep.rounds;
  j["n_perm"] = rep.n_perm;
  j["alpha"] = rep.alpha;
  j["seed"] = rep.seed;
  j["rejection_rate_mixing"] = rep.rejection_rate_mixing;
  j["rejection_rate_smoothed"] = rep.rejection_rate_smoothed;
  j["failed_rounds"] = rep.failed_rounds;
  j["valid"] = rep.valid;
  return j;
}

inline void write_sim_csv(std::ostream& out, const simulate_request& req,
                          const sim_report& rep) {
  out << "design,model,cells_per_subject,rounds,n_perm,alpha,seed,"
         "rejection_rate_mixing,rejection_rate_smoothed,failed_rounds,valid\n";
  out << req.design_id << ',' << req.model_id << ',' << req.cells << ',' << rep.rounds << ','
      << rep.n_perm << ',' << detail::format_double(rep.alpha) << ',' << rep.seed << ','
      << detail::format_double(rep.rejection_rate_mixing) << ','
      << detail::format_double(rep.rejection_rate_smoothed) << ',' << rep.failed_rounds << ','
      << (rep.valid ? "true" : "false") << '\n';
}

// ----------------------------------------------------------- signal command ---

inline nlohmann::ordered_json signal_json(const std::string& model_id, int reps,
                                          std::uint64_t seed, const signal_estimate& est) {
  nlohmann::ordered_json j;
  j["command"] = "signal";
  j["model"] = model_id;
  j["reps"] = est.reps;
  j["seed"] = seed;
  j["d"] = detail::json_double(est.d);
  j["d_h"] = detail::json_double(est.d_h);
  j["se_d"] = detail::json_double(est.se_d);
  j["se_d_h"] = detail::json_double(est.se_d_h);
  return j;
}

inline void write_signal_csv(std::ostream& out, const std::string& model_id, int reps,
                             std::uint64_t seed, const signal_estimate& est) {
  out << "model,reps,seed,d,d_h,se_d,se_d_h\n";
  out << model_id << ',' << est.reps << ',' << seed << ',' << detail::format_double(est.d)
      << ',' << detail::format_double(est.d_h) << ',' << detail::format_double(est.se_d)
      << ',' << detail::format_double(est.se_d_h) << '\n';
}

// ------------------------------------------------------------ file helpers ---

inline void write_text_file(const std::string& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw parse_error("cannot write '" + path + "'");
  out << content;
  if (!out) throw parse_error("write failed for '" + path + "'");
}

inline std::string json_to_string(const nlohmann::ordered_json& j) {
  return j.dump(2) + "\n";
}

}  // namespace poismix
