// poismix: differential-expression testing for count data with heterogeneous
// read depths, built on nonparametric mixing-distribution estimates and
// Wasserstein-distance permutation tests.
//
// Subcommands:
//   fit       fit a mixing distribution per subject for every gene
//   w1        pairwise W1 distances between fitted subjects
//   test      permutation tests per gene with BH correction across genes
//   simulate  size/power study on synthetic two-group data
//   signal    Monte Carlo signal-strength estimates for a population model
//
// Every command writes <out>.csv and <out>.json; both emissions are
// byte-stable for fixed inputs and seed.  The POISMIX_THREADS environment
// variable overrides --threads; 0 means all hardware threads.

#include <cstdint>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "poismix/io.hpp"

namespace {

using namespace poismix;

struct cli_options {
  std::string counts_path;
  std::string out = "poismix_out";
  std::string smoothed = "both";
  double b = 0.0;  // 0 = unset
  bool b_set = false;
  double b_quantile = 0.99;
  int n_perm = 0;  // 0 = command default
  std::uint64_t seed = 0;
  std::string covariates;
  std::string diagnosis_col;
  double fdr_q = 0.05;
  int threads = 1;
  // simulate / signal
  std::string design_id;
  std::string model_id;
  int rounds = 1000;
  int cells = 50;
};

run_config make_run_config(const cli_options& o, int default_n_perm) {
  run_config cfg;
  if (o.b_set) cfg.b = o.b;
  cfg.b_quantile = o.b_quantile;
  cfg.n_perm = o.n_perm > 0 ? o.n_perm : default_n_perm;
  cfg.seed = o.seed;
  cfg.variants = parse_variant_mode(o.smoothed);
  cfg.fdr_q = o.fdr_q;
  cfg.covariates_path = o.covariates;
  cfg.diagnosis_col = o.diagnosis_col;
  cfg.threads = o.threads;
  return cfg;
}

void add_common_output(CLI::App* cmd, cli_options& o, const std::string& default_out) {
  o.out = default_out;
  cmd->add_option("--out", o.out, "output path prefix (writes <out>.csv and <out>.json)")
      ->capture_default_str();
  cmd->add_option("--threads", o.threads,
                  "worker threads (0 = all hardware threads; POISMIX_THREADS overrides)")
      ->capture_default_str();
  cmd->add_option("--seed", o.seed, "random seed")->capture_default_str();
}

void add_counts_options(CLI::App* cmd, cli_options& o) {
  cmd->add_option("counts", o.counts_path, "long-format count table (TSV or CSV)")
      ->required();
  cmd->add_option("--b", o.b, "explicit support bound (default: selected from the data)")
      ->each([&o](const std::string&) { o.b_set = true; });
  cmd->add_option("--b-quantile", o.b_quantile,
                  "quantile of pooled count/depth ratios used to select the bound")
      ->capture_default_str();
}

int report_written(const std::string& prefix) {
  std::cout << "wrote " << prefix << ".csv\n";
  std::cout << "wrote " << prefix << ".json\n";
  return 0;
}

int cmd_fit(const cli_options& o) {
  const run_config cfg = make_run_config(o, 100000);
  cfg.validate();
  const int threads = threads_from_env(o.threads);
  const auto blocks = ingest_counts(o.counts_path);
  const auto results = run_gene_fits(cfg, blocks, threads);
  int failed = 0;
  for (const auto& r : results) failed += r.error.empty() ? 0 : 1;
  std::ostringstream csv;
  write_fits_csv(csv, results);
  write_text_file(o.out + ".csv", csv.str());
  write_text_file(o.out + ".json", json_to_string(fits_json(cfg, results)));
  std::cout << "fitted " << results.size() << " gene(s), " << failed << " failed\n";
  return report_written(o.out);
}

int cmd_w1(const cli_options& o) {
  const run_config cfg = make_run_config(o, 100000);
  cfg.validate();
  const int threads = threads_from_env(o.threads);
  const auto blocks = ingest_counts(o.counts_path);
  const auto results = run_gene_fits(cfg, blocks, threads);
  std::ostringstream csv;
  write_w1_csv(csv, cfg, results);
  write_text_file(o.out + ".csv", csv.str());
  write_text_file(o.out + ".json", json_to_string(w1_json(cfg, results)));
  std::cout << "computed distances for " << results.size() << " gene(s)\n";
  return report_written(o.out);
}

int cmd_test(const cli_options& o) {
  const run_config cfg = make_run_config(o, 100000);
  cfg.validate();
  const int threads = threads_from_env(o.threads);
  const auto blocks = ingest_counts(o.counts_path);

  covariate_table cov;
  const covariate_table* cov_ptr = nullptr;
  if (!cfg.covariates_path.empty()) {
    cov = load_covariates(cfg.covariates_path);
    cov_ptr = &cov;
  }

  const auto results = run_gene_tests(cfg, blocks, cov_ptr, threads);
  std::ostringstream csv;
  write_test_csv(csv, results);
  write_text_file(o.out + ".csv", csv.str());
  write_text_file(o.out + ".json", json_to_string(test_results_json(cfg, results)));

  int failed = 0;
  for (const auto& r : results) failed += r.error.empty() ? 0 : 1;
  std::cout << "tested " << results.size() << " gene(s), " << failed << " failed\n";
  for (const auto& name : variant_names(cfg.variants)) {
    int rejected = 0, with_p = 0;
    for (const auto& r : results) {
      if (!r.error.empty()) continue;
      for (const auto& vr : r.variants)
        if (vr.variant == name && std::isfinite(vr.q_value)) {
          ++with_p;
          rejected += vr.q_value <= cfg.fdr_q ? 1 : 0;
        }
    }
    std::cout << name << ": rejected " << rejected << " of " << with_p << " at q = "
              << detail::format_double(cfg.fdr_q) << '\n';
  }
  return report_written(o.out);
}

int cmd_simulate(const cli_options& o) {
  const int threads = threads_from_env(o.threads);
  simulate_request req;
  req.design_id = o.design_id;
  req.model_id = o.model_id;
  req.rounds = o.rounds;
  req.n_perm = o.n_perm > 0 ? o.n_perm : 1000;
  req.cells = o.cells;
  req.seed = o.seed;
  const sim_report rep = run_simulate(req, threads);
  std::ostringstream csv;
  write_sim_csv(csv, req, rep);
  write_text_file(o.out + ".csv", csv.str());
  write_text_file(o.out + ".json", json_to_string(sim_report_json(req, rep)));
  std::cout << "design " << req.design_id << " model " << req.model_id << ": mixing "
            << detail::format_double(rep.rejection_rate_mixing) << ", smoothed "
            << detail::format_double(rep.rejection_rate_smoothed) << " over " << rep.rounds
            << " round(s), " << rep.failed_rounds << " failed\n";
  if (!rep.valid) std::cout << "warning: more than 1% of rounds failed; rates are invalid\n";
  return report_written(o.out);
}

int cmd_signal(const cli_options& o) {
  const int threads = threads_from_env(o.threads);
  const auto models = make_models(o.model_id);
  const signal_estimate est =
      signal_strength(models.first, models.second, o.rounds, o.seed, threads);
  std::ostringstream csv;
  write_signal_csv(csv, o.model_id, est.reps, o.seed, est);
  write_text_file(o.out + ".csv", csv.str());
  write_text_file(o.out + ".json", json_to_string(signal_json(o.model_id, est.reps, o.seed, est)));
  std::cout << "model " << o.model_id << ": D = " << detail::format_double(est.d)
            << " (se " << detail::format_double(est.se_d) << "), D_h = "
            << detail::format_double(est.d_h) << " (se " << detail::format_double(est.se_d_h)
            << ") over " << est.reps << " rep(s)\n";
  return report_written(o.out);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{
      "poismix: mixing-distribution tests for count data with heterogeneous read depths"};
  app.require_subcommand(1);

  cli_options fit_o, w1_o, test_o, sim_o, sig_o;

  CLI::App* fit_cmd = app.add_subcommand("fit", "fit per-subject mixing distributions");
  add_counts_options(fit_cmd, fit_o);
  add_common_output(fit_cmd, fit_o, "poismix_fit");

  CLI::App* w1_cmd = app.add_subcommand("w1", "pairwise W1 distances between subjects");
  add_counts_options(w1_cmd, w1_o);
  add_common_output(w1_cmd, w1_o, "poismix_w1");
  w1_cmd->add_option("--smoothed", w1_o.smoothed, "distance scale: mixing, mixture, or both")
      ->check(CLI::IsMember({"mixing", "mixture", "both"}))
      ->capture_default_str();

  CLI::App* test_cmd =
      app.add_subcommand("test", "permutation tests per gene with BH correction");
  add_counts_options(test_cmd, test_o);
  add_common_output(test_cmd, test_o, "poismix_test");
  test_cmd->add_option("--n-perm", test_o.n_perm, "permutations per test (default 100000)");
  test_cmd->add_option("--smoothed", test_o.smoothed,
                       "distance scale: mixing, mixture, or both")
      ->check(CLI::IsMember({"mixing", "mixture", "both"}))
      ->capture_default_str();
  test_cmd->add_option("--covariates", test_o.covariates,
                       "CSV of per-subject numeric covariates (enables adjusted test)");
  test_cmd->add_option("--diagnosis-col", test_o.diagnosis_col,
                       "covariate column treated as the diagnosis label");
  test_cmd->add_option("--fdr-q", test_o.fdr_q, "BH false-discovery level")
      ->capture_default_str();

  CLI::App* sim_cmd = app.add_subcommand("simulate", "size/power study on synthetic data");
  sim_cmd->add_option("design", sim_o.design_id, "design id: A, B, or C")->required();
  sim_cmd->add_option("model", sim_o.model_id, "model id: 1a..4c")->required();
  sim_cmd->add_option("--rounds", sim_o.rounds, "simulation rounds")->capture_default_str();
  sim_cmd->add_option("--n-perm", sim_o.n_perm, "permutations per test (default 1000)");
  sim_cmd->add_option("--cells", sim_o.cells, "cells per subject (balanced designs)")
      ->capture_default_str();
  add_common_output(sim_cmd, sim_o, "poismix_simulate");

  CLI::App* sig_cmd =
      app.add_subcommand("signal", "Monte Carlo signal strength for a population model");
  sig_cmd->add_option("model", sig_o.model_id, "model id: 1a..4c")->required();
  sig_cmd->add_option("--rounds", sig_o.rounds, "Monte Carlo replicates")
      ->capture_default_str();
  add_common_output(sig_cmd, sig_o, "poismix_signal");

  CLI11_PARSE(app, argc, argv);

  try {
    if (fit_cmd->parsed()) return cmd_fit(fit_o);
    if (w1_cmd->parsed()) return cmd_w1(w1_o);
    if (test_cmd->parsed()) return cmd_test(test_o);
    if (sim_cmd->parsed()) return cmd_simulate(sim_o);
    if (sig_cmd->parsed()) return cmd_signal(sig_o);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
