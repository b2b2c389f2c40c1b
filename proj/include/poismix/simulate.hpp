// Simulation harness: the study designs and population models used to
// measure empirical size and power of the two permutation tests, plus the
// Monte Carlo signal-strength summaries D (mixing scale) and D_h (smoothed
// scale) that predict which test wins.
//
// Population model: each subject's mixing distribution is a truncated
// Gamma(shape_base + jitter, rate) with jitter ~ Uniform(-1, 1) drawn once
// per subject, and any realization above the bound B shrunken to B.  Counts
// are Poisson(read_depth * lambda) given lambda from that subject's mixing
// draw.  Designs differ only in group sizes, cells per subject, and how read
// depths are generated (all ones / one shared Uniform(0.5, 1.5) vector /
// fully i.i.d. Uniform(0.5, 1.5)).
//
// Determinism: every random object is drawn from an RNG stream keyed by
// (seed, round index, purpose), where purpose 0 = dataset, 1 = mixing-test
// permutations, 2 = smoothed-test permutations.  Results are therefore
// identical across thread counts and schedules.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "poismix/anova.hpp"
#include "poismix/errors.hpp"
#include "poismix/likelihood.hpp"
#include "poismix/measures.hpp"
#include "poismix/parallel.hpp"
#include "poismix/rng.hpp"
#include "poismix/solvers.hpp"
#include "poismix/special.hpp"

namespace poismix {

// Scalar seed for a sub-task, mixed with the same combine as rng::stream so
// distinct (index, purpose) pairs get independent streams.
inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t index,
                                 std::uint64_t purpose) noexcept {
  std::uint64_t x = seed;
  std::uint64_t h = splitmix64_next(x);
  x ^= index + 0x9e3779b97f4a7c15ULL + (h << 6) + (h >> 2);
  h = splitmix64_next(x);
  x ^= purpose + 0x9e3779b97f4a7c15ULL + (h << 6) + (h >> 2);
  return x;
}

enum class depth_rule {
  all_ones,       // every read depth is 1
  shared_uniform, // one Uniform(0.5,1.5) vector shared by all subjects
  iid_uniform,    // fresh Uniform(0.5,1.5) per cell
};

struct design_spec {
  char kind = 'A';                      // 'A', 'B', or 'C'
  std::vector<int> group_sizes;         // subjects per group
  std::vector<std::vector<int>> cells;  // cells[k][j] = cell count of subject j in group k
  depth_rule depths = depth_rule::all_ones;

  // Balanced two-group designs: 10 + 10 subjects, a common cell count, read
  // depths all one ('A') or one shared Uniform(0.5,1.5) vector ('B').
  static design_spec balanced(char kind, int cells_per_subject) {
    if (kind != 'A' && kind != 'B')
      throw std::invalid_argument("design_spec: balanced kind must be A or B");
    if (cells_per_subject < 1)
      throw std::invalid_argument("design_spec: cells_per_subject must be >= 1");
    design_spec d;
    d.kind = kind;
    d.group_sizes = {10, 10};
    d.cells = {std::vector<int>(10, cells_per_subject),
               std::vector<int>(10, cells_per_subject)};
    d.depths = kind == 'A' ? depth_rule::all_ones : depth_rule::shared_uniform;
    return d;
  }

  // The unbalanced design: 10 vs 13 subjects with fixed per-subject cell
  // counts and fully i.i.d. Uniform(0.5,1.5) read depths.
  static design_spec unbalanced() {
    design_spec d;
    d.kind = 'C';
    d.group_sizes = {10, 13};
    d.cells = {{388, 1142, 162, 391, 215, 278, 284, 193, 542, 106},
               {202, 759, 415, 69, 327, 431, 414, 451, 275, 733, 422, 65, 362}};
    d.depths = depth_rule::iid_uniform;
    return d;
  }
};

// Builds the design named by id: "A" and "B" take the common per-subject
// cell count; "C" is fixed and ignores it.
inline design_spec make_design(const std::string& id, int cells_per_subject) {
  if (id == "A" || id == "a") return design_spec::balanced('A', cells_per_subject);
  if (id == "B" || id == "b") return design_spec::balanced('B', cells_per_subject);
  if (id == "C" || id == "c") return design_spec::unbalanced();
  throw config_error("unknown design '" + id + "' (expected A, B, or C)");
}

// One group's population: truncated Gamma(shape_base + jitter, rate) on
// [0, bound], jitter ~ Uniform(-1,1) per subject.
struct model_spec {
  double shape_base = 0.0;
  double rate = 0.0;
  double bound = 0.0;

  model_spec() = default;
  model_spec(double shape_base_, double rate_, double bound_)
      : shape_base(shape_base_), rate(rate_), bound(bound_) {
    if (!(shape_base >= 1.0))
      throw std::invalid_argument(
          "model_spec: shape_base must be >= 1 so every jittered shape is positive");
    if (!(rate > 0.0) || !(bound > 0.0))
      throw std::invalid_argument("model_spec: rate and bound must be positive");
  }

  friend bool operator==(const model_spec& a, const model_spec& b) = default;
};

// The two-group population models of the simulation study, keyed "1a".."4c".
inline std::pair<model_spec, model_spec> make_models(const std::string& id) {
  if (id == "1a") return {model_spec(14, 7.0 / 4.0, 50), model_spec(14, 7.0 / 4.0, 50)};
  if (id == "1b") return {model_spec(14, 7, 50), model_spec(14, 7, 50)};
  if (id == "1c") return {model_spec(6, 1, 50), model_spec(6, 1, 50)};
  if (id == "2a") return {model_spec(14, 7.0 / 4.0, 50), model_spec(6, 3.0 / 4.0, 50)};
  if (id == "2b") return {model_spec(14, 7.0 / 3.0, 50), model_spec(6, 1, 50)};
  if (id == "2c") return {model_spec(14, 7.0 / 2.0, 50), model_spec(6, 3.0 / 2.0, 50)};
  if (id == "3a") return {model_spec(4, 1, 20), model_spec(5, 1, 20)};
  if (id == "3b") return {model_spec(5, 1, 20), model_spec(6, 1, 20)};
  if (id == "3c") return {model_spec(6, 1, 20), model_spec(7, 1, 20)};
  if (id == "4a") return {model_spec(11, 1, 50), model_spec(12, 1, 50)};
  if (id == "4b") return {model_spec(12, 1, 50), model_spec(13, 1, 50)};
  if (id == "4c") return {model_spec(13, 1, 50), model_spec(14, 1, 50)};
  throw config_error("unknown model '" + id + "' (expected 1a..4c)");
}

// A subject's realized mixing distribution: Gamma(shape, rate) draws with
// values above bound shrunken to bound.
class mixing_sampler {
 public:
  mixing_sampler(double shape, double rate, double bound)
      : shape_(shape), rate_(rate), bound_(bound) {
    if (!(shape > 0.0) || !(rate > 0.0) || !(bound > 0.0))
      throw std::invalid_argument("mixing_sampler: parameters must be positive");
  }

  double draw(rng& r) const { return std::min(r.gamma(shape_, rate_), bound_); }
  double shape() const noexcept { return shape_; }
  double rate() const noexcept { return rate_; }
  double bound() const noexcept { return bound_; }

 private:
  double shape_;
  double rate_;
  double bound_;
};

// Draws the subject-level jitter and returns the subject's sampler.
inline mixing_sampler draw_subject_mixing(const model_spec& m, rng& r) {
  return mixing_sampler(m.shape_base + r.uniform(-1.0, 1.0), m.rate, m.bound);
}

struct sim_dataset {
  std::vector<count_sample> subjects;
  std::vector<int> labels;  // group index per subject, in subjects[] order
  double bound = 0.0;
};

// Generates one synthetic study: per subject draw the mixing jitter, then
// per cell draw lambda from the subject's mixing distribution, a read depth
// per the design rule, and a Poisson(read_depth * lambda) count.
//
// Draw order (fixed, part of the output contract): the shared depth vector
// first when the design asks for one, then subjects in group order; within a
// subject the jitter first, then per cell lambda, depth, count.
inline sim_dataset generate_dataset(const design_spec& d, const model_spec& m0,
                                    const model_spec& m1, std::uint64_t seed) {
  if (m0.bound != m1.bound)
    throw std::invalid_argument("generate_dataset: group models must share a bound");
  if (d.group_sizes.size() != 2 || d.cells.size() != 2)
    throw std::invalid_argument("generate_dataset: two groups expected");
  for (std::size_t k = 0; k < 2; ++k)
    if (d.cells[k].size() != static_cast<std::size_t>(d.group_sizes[k]))
      throw std::invalid_argument("generate_dataset: cells/group_sizes mismatch");

  rng r = rng::stream(seed, 0, 0);

  std::vector<double> shared_depths;
  if (d.depths == depth_rule::shared_uniform) {
    const int n_cells = d.cells[0][0];
    for (const auto& group : d.cells)
      for (int c : group)
        if (c != n_cells)
          throw std::invalid_argument(
              "generate_dataset: a shared depth vector needs equal cell counts");
    shared_depths.resize(static_cast<std::size_t>(n_cells));
    for (auto& v : shared_depths) v = r.uniform(0.5, 1.5);
  }

  sim_dataset out;
  out.bound = m0.bound;
  for (std::size_t k = 0; k < 2; ++k) {
    const model_spec& m = (k == 0) ? m0 : m1;
    for (int j = 0; j < d.group_sizes[k]; ++j) {
      const auto sampler = draw_subject_mixing(m, r);
      const int n_cells = d.cells[k][static_cast<std::size_t>(j)];
      std::vector<std::int64_t> counts(static_cast<std::size_t>(n_cells));
      std::vector<double> depths(static_cast<std::size_t>(n_cells));
      for (int i = 0; i < n_cells; ++i) {
        const double lambda = sampler.draw(r);
        double depth = 1.0;
        if (d.depths == depth_rule::shared_uniform)
          depth = shared_depths[static_cast<std::size_t>(i)];
        else if (d.depths == depth_rule::iid_uniform)
          depth = r.uniform(0.5, 1.5);
        counts[static_cast<std::size_t>(i)] = r.poisson(depth * lambda);
        depths[static_cast<std::size_t>(i)] = depth;
      }
      out.subjects.emplace_back(std::move(counts), std::move(depths), m.bound);
      out.labels.push_back(static_cast<int>(k));
    }
  }
  return out;
}

struct sim_report {
  double rejection_rate_mixing = 0.0;
  double rejection_rate_smoothed = 0.0;
  int rounds = 0;
  int n_perm = 0;
  double alpha = 0.05;
  std::uint64_t seed = 0;
  int failed_rounds = 0;
  bool valid = true;  // false when more than 1% of rounds failed
};

// Per-study solver settings: the workhorse configuration for simulations.
inline solver_config simulation_solver() {
  solver_config cfg;
  cfg.algo = algorithm::vem;
  cfg.stop_tol = 0.01;
  return cfg;
}

// One full size/power study: per round, generate a dataset, fit every
// subject's mixing distribution, build both distance matrices (squared W1
// between fitted measures, and between their Poisson-smoothed PMFs), run
// both permutation tests, and count rejections at `alpha`.  Rounds that
// throw are logged and excluded; the report is flagged invalid when more
// than 1% fail.
inline sim_report run_power_study(const design_spec& d, const model_spec& m0,
                                  const model_spec& m1, int rounds, int n_perm,
                                  double alpha, std::uint64_t seed,
                                  int n_threads = 1,
                                  const solver_config& solver = simulation_solver()) {
  if (rounds < 1) throw std::invalid_argument("run_power_study: rounds must be >= 1");
  if (n_perm < 1) throw std::invalid_argument("run_power_study: n_perm must be >= 1");
  if (!(alpha > 0.0) || !(alpha <= 1.0))
    throw std::invalid_argument("run_power_study: alpha must be in (0, 1]");

  // Per-round outcome: 0/1 rejection flags or -1 for a failed round.
  std::vector<signed char> reject_mixing(static_cast<std::size_t>(rounds), 0);
  std::vector<signed char> reject_smoothed(static_cast<std::size_t>(rounds), 0);

  parallel_for(static_cast<std::size_t>(rounds), resolve_threads(n_threads),
               [&](std::size_t t) {
                 try {
                   const auto data = generate_dataset(
                       d, m0, m1, derive_seed(seed, static_cast<std::uint64_t>(t), 0));
                   const study_layout layout(data.labels);

                   std::vector<discrete_measure> fits;
                   fits.reserve(data.subjects.size());
                   for (const auto& s : data.subjects)
                     fits.push_back(fit(s, solver).estimate);

                   const auto d_mixing = distance_matrix(fits, false);
                   const auto d_smoothed = distance_matrix(fits, true, 1e-8);

                   const auto res_mixing = permutation_test(
                       d_mixing, layout, n_perm,
                       derive_seed(seed, static_cast<std::uint64_t>(t), 1), {alpha});
                   const auto res_smoothed = permutation_test(
                       d_smoothed, layout, n_perm,
                       derive_seed(seed, static_cast<std::uint64_t>(t), 2), {alpha});

                   reject_mixing[t] = res_mixing.reject_at.at(alpha) ? 1 : 0;
                   reject_smoothed[t] = res_smoothed.reject_at.at(alpha) ? 1 : 0;
                 } catch (...) {
                   reject_mixing[t] = -1;
                   reject_smoothed[t] = -1;
                 }
               });

  sim_report report;
  report.rounds = rounds;
  report.n_perm = n_perm;
  report.alpha = alpha;
  report.seed = seed;
  int ok = 0, hits_mixing = 0, hits_smoothed = 0;
  for (int t = 0; t < rounds; ++t) {
    if (reject_mixing[static_cast<std::size_t>(t)] < 0) {
      ++report.failed_rounds;
      continue;
    }
    ++ok;
    hits_mixing += reject_mixing[static_cast<std::size_t>(t)];
    hits_smoothed += reject_smoothed[static_cast<std::size_t>(t)];
  }
  if (ok > 0) {
    report.rejection_rate_mixing = static_cast<double>(hits_mixing) / ok;
    report.rejection_rate_smoothed = static_cast<double>(hits_smoothed) / ok;
  }
  report.valid =
      static_cast<double>(report.failed_rounds) <= 0.01 * static_cast<double>(rounds);
  return report;
}

namespace detail {

// Quantiles of the unit-rate Gamma(shape) at probabilities (i+0.5)/n for
// i = 0..n-1, by warm-started Newton along the ascending sequence with the
// bisection-safeguarded inverse as fallback.  The first quantile anchors on
// the safeguarded inverse.
inline std::vector<double> gamma_midpoint_quantiles(double shape, int n) {
  std::vector<double> q(static_cast<std::size_t>(n));
  const double log_norm = -lgamma_fn(shape);
  double x = gamma_p_inverse(shape, 0.5 / static_cast<double>(n));
  q[0] = x;
  for (int i = 1; i < n; ++i) {
    const double p = (static_cast<double>(i) + 0.5) / static_cast<double>(n);
    bool ok = false;
    for (int step = 0; step < 8; ++step) {
      const double f = gamma_p(shape, x) - p;
      const double pdf = std::exp(log_norm + (shape - 1.0) * std::log(x) - x);
      if (pdf <= 0.0) break;
      const double dx = f / pdf;
      x -= dx;
      if (!(x > 0.0) || !std::isfinite(x)) break;
      if (std::abs(dx) <= 1e-12 * std::max(1.0, x)) {
        ok = true;
        break;
      }
    }
    if (!ok || !(x > 0.0) || !std::isfinite(x)) x = gamma_p_inverse(shape, p);
    q[static_cast<std::size_t>(i)] = x;
  }
  return q;
}

}  // namespace detail

// Equal-weight discretization of the truncated Gamma(shape, rate) on
// [0, bound]: atoms at the quantile midpoints (i+0.5)/atoms, with quantiles
// beyond the bound shrunken to it (exactly how draws are clamped).
inline discrete_measure discretize_gamma(double shape, double rate, double bound,
                                         int atoms = 512) {
  if (atoms < 2) throw std::invalid_argument("discretize_gamma: atoms must be >= 2");
  auto q = detail::gamma_midpoint_quantiles(shape, atoms);
  for (auto& v : q) v = std::min(v / rate, bound);
  return discrete_measure(std::move(q),
                          std::vector<double>(static_cast<std::size_t>(atoms),
                                              1.0 / static_cast<double>(atoms)),
                          bound);
}

struct signal_estimate {
  double d = 0.0;    // mixing-scale signal strength
  double d_h = 0.0;  // smoothed-scale signal strength
  double se_d = 0.0;
  double se_d_h = 0.0;
  int reps = 0;
};

// Monte Carlo estimate of the signal strengths
//   D   = E W1(Q1, Q2)^2 - (E W1(Q1, Q1')^2 + E W1(Q2, Q2')^2) / 2
//   D_h = the same with every measure Poisson-smoothed first,
// where Q1, Q1' (resp. Q2, Q2') are independent subject-level mixing draws
// from m0 (resp. m1), each represented by its 512-atom quantile-midpoint
// discretization.
inline signal_estimate signal_strength(const model_spec& m0, const model_spec& m1,
                                       int mc_reps, std::uint64_t seed,
                                       int n_threads = 1) {
  if (mc_reps < 100)
    throw std::invalid_argument("signal_strength: need at least 100 Monte Carlo reps");
  if (m0.bound != m1.bound)
    throw std::invalid_argument("signal_strength: group models must share a bound");

  std::vector<double> d_vals(static_cast<std::size_t>(mc_reps));
  std::vector<double> dh_vals(static_cast<std::size_t>(mc_reps));

  parallel_for(static_cast<std::size_t>(mc_reps), resolve_threads(n_threads),
               [&](std::size_t t) {
                 rng r = rng::stream(seed, static_cast<std::uint64_t>(t));
                 const auto draw = [&](const model_spec& m) {
                   const double shape = m.shape_base + r.uniform(-1.0, 1.0);
                   return discretize_gamma(shape, m.rate, m.bound);
                 };
                 const auto q1 = draw(m0);
                 const auto q1b = draw(m0);
                 const auto q2 = draw(m1);
                 const auto q2b = draw(m1);

                 const double between = w1_measures(q1, q2);
                 const double within1 = w1_measures(q1, q1b);
                 const double within2 = w1_measures(q2, q2b);
                 d_vals[t] = between * between -
                             0.5 * (within1 * within1 + within2 * within2);

                 const auto h1 = poisson_smooth(q1, 1e-8);
                 const auto h1b = poisson_smooth(q1b, 1e-8);
                 const auto h2 = poisson_smooth(q2, 1e-8);
                 const auto h2b = poisson_smooth(q2b, 1e-8);
                 const double between_h = w1_pmfs(h1, h2);
                 const double within1_h = w1_pmfs(h1, h1b);
                 const double within2_h = w1_pmfs(h2, h2b);
                 dh_vals[t] = between_h * between_h -
                              0.5 * (within1_h * within1_h + within2_h * within2_h);
               });

  const auto summarize = [&](const std::vector<double>& vals, double& mean, double& se) {
    double s = 0.0;
    for (double v : vals) s += v;
    mean = s / static_cast<double>(vals.size());
    double ss = 0.0;
    for (double v : vals) ss += (v - mean) * (v - mean);
    se = std::sqrt(ss / (static_cast<double>(vals.size()) - 1.0) /
                   static_cast<double>(vals.size()));
  };

  signal_estimate out;
  out.reps = mc_reps;
  summarize(d_vals, out.d, out.se_d);
  summarize(dh_vals, out.d_h, out.se_d_h);
  return out;
}

}  // namespace poismix
