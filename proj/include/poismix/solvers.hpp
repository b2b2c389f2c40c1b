#pragma once

// Nonparametric maximum-likelihood estimation of the mixing measure.
//
// All three solvers share the same skeleton: starting from a single atom at
// the mean depth-normalized count, each iteration (1) scans the directional
// gradient phi_prime over a uniform grid on [0, B] (optionally refining the
// best cells by golden section), (2) stops when the largest gradient is at
// most stop_tol — the gradient max bounds the gap to the optimal objective,
// so this is a duality certificate, not a heuristic — and (3) otherwise
// moves mass toward favorable directions:
//
//   * vdm   mixes the current iterate with the single best new atom,
//           choosing the mixing fraction by a concave line search;
//   * vem   additionally locates the worst current support atom and
//           transfers a line-searched share of its weight to the best
//           direction (an exchange step);
//   * isdm  collects every local maximum of the gradient as a candidate
//           atom and reweights {current iterate} + {candidates} by an inner
//           EM pass over the mixture weights.
//
// The objective value is identical across solvers at their common optimum
// even though the support representation may differ; only objective values
// are comparable between runs, never atom layouts.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <string>
#include <utility>
#include <vector>

#include "poismix/likelihood.hpp"
#include "poismix/measures.hpp"

namespace poismix {

enum class algorithm { vdm, vem, isdm };

inline const char* algorithm_name(algorithm a) noexcept {
  switch (a) {
    case algorithm::vdm: return "vdm";
    case algorithm::vem: return "vem";
    default: return "isdm";
  }
}

struct solver_config {
  algorithm algo = algorithm::vem;
  double stop_tol = 0.01;
  int max_iters = 2000;
  int grid_size = 1000;
  bool refine = true;
  double weight_floor = 1e-12;
};

struct fit_result {
  discrete_measure estimate;
  std::vector<double> phi_trace;  // objective after the start and each accepted step
  int iterations = 0;             // number of accepted steps
  bool converged = false;
  double max_phi_prime_at_exit = 0.0;  // gradient certificate at `estimate`
};

// One solver iteration: `next` is the new iterate (equal to the input when
// the certificate already passes or the step cannot move), `max_phi_prime`
// is the gradient certificate at the *input* iterate.
struct solver_step {
  discrete_measure next;
  double max_phi_prime = 0.0;
  bool converged = false;
};

namespace detail {

// Golden-section maximization of a unimodal function, returning the best
// evaluated point (never worse than any probe, even on near-flat functions).
template <class F>
std::pair<double, double> golden_max(F&& f, double lo, double hi, double x_tol,
                                     int max_iters = 200) {
  constexpr double inv_phi = 0.6180339887498949;
  double a = lo, b = hi;
  double x1 = b - inv_phi * (b - a);
  double x2 = a + inv_phi * (b - a);
  double f1 = f(x1);
  double f2 = f(x2);
  double best_x = (f1 >= f2) ? x1 : x2;
  double best_f = std::max(f1, f2);
  for (int iter = 0; iter < max_iters && (b - a) > x_tol; ++iter) {
    if (f1 >= f2) {
      b = x2;
      x2 = x1;
      f2 = f1;
      x1 = b - inv_phi * (b - a);
      f1 = f(x1);
      if (f1 > best_f) best_f = f1, best_x = x1;
    } else {
      a = x1;
      x1 = x2;
      f1 = f2;
      x2 = a + inv_phi * (b - a);
      f2 = f(x2);
      if (f2 > best_f) best_f = f2, best_x = x2;
    }
  }
  return {best_x, best_f};
}

struct direction_search {
  double lambda_max = 0.0;
  double value_max = -std::numeric_limits<double>::infinity();
  std::vector<std::pair<double, double>> local_maxima;  // (lambda, value), ascending lambda
};

// Grid scan of phi_prime with optional golden-section refinement of each
// kept candidate inside its bracketing grid cells.
inline direction_search search_directions(const std::vector<double>& denoms,
                                          const count_sample& s, const solver_config& cfg,
                                          bool collect_local_maxima) {
  const double bound = s.bound();
  const int n = std::max(cfg.grid_size, 2);
  const double eps0 = 1e-9 * bound;

  std::vector<double> lams(static_cast<std::size_t>(n));
  std::vector<double> values(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    double lam = bound * static_cast<double>(i) / static_cast<double>(n - 1);
    if (i == 0 && s.max_count() > 0) lam = eps0;
    lams[static_cast<std::size_t>(i)] = lam;
    values[static_cast<std::size_t>(i)] =
        phi_prime_from_denominators(denoms, lam, s);
  }

  auto refine_cell = [&](int i) -> std::pair<double, double> {
    const auto idx = static_cast<std::size_t>(i);
    if (!cfg.refine) return {lams[idx], values[idx]};
    const double lo = lams[static_cast<std::size_t>(std::max(i - 1, 0))];
    const double hi = lams[static_cast<std::size_t>(std::min(i + 1, n - 1))];
    auto [x, fx] = golden_max(
        [&](double lam) { return phi_prime_from_denominators(denoms, lam, s); }, lo, hi,
        1e-10 * bound);
    return (fx > values[idx]) ? std::pair{x, fx} : std::pair{lams[idx], values[idx]};
  };

  direction_search out;
  int argmax = 0;
  for (int i = 1; i < n; ++i)
    if (values[static_cast<std::size_t>(i)] > values[static_cast<std::size_t>(argmax)])
      argmax = i;
  std::tie(out.lambda_max, out.value_max) = refine_cell(argmax);

  if (collect_local_maxima) {
    for (int i = 0; i < n; ++i) {
      const auto idx = static_cast<std::size_t>(i);
      const bool up_ok = (i == 0) || (values[idx] > values[idx - 1]);
      const bool down_ok = (i == n - 1) || (values[idx] > values[idx + 1]);
      if (up_ok && down_ok) {
        const auto [x, fx] = refine_cell(i);
        if (fx > 0.0) out.local_maxima.emplace_back(x, fx);
      }
    }
    if (out.local_maxima.empty() && out.value_max > 0.0)
      out.local_maxima.emplace_back(out.lambda_max, out.value_max);
  }
  return out;
}

// Merge an existing support (scaled by `scale`) with extra atoms and build
// the next iterate.
inline discrete_measure rebuild(const discrete_measure& g, double scale,
                                const std::vector<double>& extra_atoms,
                                const std::vector<double>& extra_weights,
                                const solver_config& cfg) {
  std::vector<double> support;
  std::vector<double> weights;
  support.reserve(g.size() + extra_atoms.size());
  weights.reserve(g.size() + extra_atoms.size());
  for (std::size_t m = 0; m < g.size(); ++m) {
    support.push_back(g.support()[m]);
    weights.push_back(scale * g.weights()[m]);
  }
  for (std::size_t j = 0; j < extra_atoms.size(); ++j) {
    support.push_back(extra_atoms[j]);
    weights.push_back(extra_weights[j]);
  }
  return discrete_measure(std::move(support), std::move(weights), g.bound(),
                          cfg.weight_floor);
}

inline bool same_measure(const discrete_measure& a, const discrete_measure& b) noexcept {
  return a.support() == b.support() && a.weights() == b.weights();
}

}  // namespace detail

// One vertex-direction step: blend the iterate with the best new atom.
inline solver_step step_vdm(const discrete_measure& g, const count_sample& s,
                            const solver_config& cfg) {
  const auto denoms = detail::log_denominators(g, s);
  const auto dir = detail::search_directions(denoms, s, cfg, false);
  if (dir.value_max <= cfg.stop_tol) return {g, dir.value_max, true};

  // phi((1-alpha) G + alpha delta) is concave in alpha; evaluate it from the
  // cached per-group log densities with a shared scale per group.
  const auto& groups = s.groups();
  std::vector<double> ea(groups.size()), eb(groups.size());
  double base = 0.0;
  for (std::size_t u = 0; u < groups.size(); ++u) {
    const double b =
        detail::log_kernel(dir.lambda_max, groups[u].count, groups[u].read_depth);
    const double c = std::max(denoms[u], b);
    ea[u] = std::exp(denoms[u] - c);
    eb[u] = std::exp(b - c);
    base += groups[u].multiplicity * c;
  }
  const double n = static_cast<double>(s.size());
  auto objective = [&](double alpha) {
    double total = 0.0;
    for (std::size_t u = 0; u < groups.size(); ++u) {
      const double v = std::max((1.0 - alpha) * ea[u] + alpha * eb[u], 1e-300);
      total += groups[u].multiplicity * std::log(v);
    }
    return (base + total) / n;
  };
  const auto [alpha, value] = detail::golden_max(objective, 0.0, 1.0, 1e-8);
  (void)value;

  auto next = detail::rebuild(g, 1.0 - alpha, {dir.lambda_max}, {alpha}, cfg);
  return {std::move(next), dir.value_max, false};
}

// One vertex-exchange step: move weight from the worst support atom to the
// best new direction.
inline solver_step step_vem(const discrete_measure& g, const count_sample& s,
                            const solver_config& cfg) {
  const auto denoms = detail::log_denominators(g, s);
  const auto dir = detail::search_directions(denoms, s, cfg, false);
  if (dir.value_max <= cfg.stop_tol) return {g, dir.value_max, true};

  // Worst support atom: smallest gradient, ties to the smallest location.
  std::size_t worst = 0;
  double worst_value = std::numeric_limits<double>::infinity();
  for (std::size_t m = 0; m < g.size(); ++m) {
    const double v = detail::phi_prime_from_denominators(denoms, g.support()[m], s);
    if (v < worst_value) {
      worst_value = v;
      worst = m;
    }
  }
  const double lam_min = g.support()[worst];
  const double w_min = g.weights()[worst];
  if (std::abs(dir.lambda_max - lam_min) <= 1e-9 * g.bound())
    return {g, dir.value_max, false};  // exchange with itself cannot move

  const auto& groups = s.groups();
  std::vector<double> ea(groups.size()), delta(groups.size());
  double base = 0.0;
  for (std::size_t u = 0; u < groups.size(); ++u) {
    const double b =
        detail::log_kernel(dir.lambda_max, groups[u].count, groups[u].read_depth);
    const double c =
        detail::log_kernel(lam_min, groups[u].count, groups[u].read_depth);
    const double m = std::max(denoms[u], b);
    ea[u] = std::exp(denoms[u] - m);
    // f_G >= w_min k_min pointwise, so the bracket below stays nonnegative
    // for alpha in [0,1] up to rounding.
    delta[u] = w_min * (std::exp(b - m) - std::exp(c - m));
    base += groups[u].multiplicity * m;
  }
  const double n = static_cast<double>(s.size());
  auto objective = [&](double alpha) {
    double total = 0.0;
    for (std::size_t u = 0; u < groups.size(); ++u) {
      const double v = std::max(ea[u] + alpha * delta[u], 1e-300);
      total += groups[u].multiplicity * std::log(v);
    }
    return (base + total) / n;
  };
  const auto [alpha, value] = detail::golden_max(objective, 0.0, 1.0, 1e-8);
  (void)value;

  std::vector<double> support(g.support());
  std::vector<double> weights(g.weights());
  weights[worst] -= alpha * w_min;
  support.push_back(dir.lambda_max);
  weights.push_back(alpha * w_min);
  auto next = discrete_measure(std::move(support), std::move(weights), g.bound(),
                               cfg.weight_floor);
  return {std::move(next), dir.value_max, false};
}

// One intra-simplex step: pool the current support atoms with every local
// maximum of the gradient, then reweight the whole pool by an inner EM over
// the mixture weights.  Working at atom granularity (rather than treating
// the previous iterate as one frozen block) lets weight drain out of stale
// atoms, which keeps the support lean and the outer iteration fast; the
// fixed points are the same either way.
inline solver_step step_isdm(const discrete_measure& g, const count_sample& s,
                             const solver_config& cfg) {
  const auto denoms = detail::log_denominators(g, s);
  const auto dir = detail::search_directions(denoms, s, cfg, true);
  if (dir.value_max <= cfg.stop_tol) return {g, dir.value_max, true};

  const auto& groups = s.groups();
  std::vector<double> atoms(g.support());
  const std::size_t n_old = atoms.size();
  for (const auto& [lam, value] : dir.local_maxima) atoms.push_back(lam);
  const std::size_t n_atoms = atoms.size();
  const std::size_t n_candidates = n_atoms - n_old;

  // Scaled kernel matrix (shared per-group scale keeps exp in range).
  std::vector<double> dens(n_atoms * groups.size());
  for (std::size_t u = 0; u < groups.size(); ++u) {
    double scale = -std::numeric_limits<double>::infinity();
    for (std::size_t a = 0; a < n_atoms; ++a) {
      const double lk = detail::log_kernel(atoms[a], groups[u].count, groups[u].read_depth);
      dens[a * groups.size() + u] = lk;
      scale = std::max(scale, lk);
    }
    for (std::size_t a = 0; a < n_atoms; ++a) {
      auto& cell = dens[a * groups.size() + u];
      cell = std::exp(cell - scale);
    }
  }

  const double n = static_cast<double>(s.size());
  // Objective over the weight simplex, up to per-group constants (enough to
  // compare weight vectors against each other).
  auto scaled_phi = [&](const std::vector<double>& weights) {
    double total = 0.0;
    for (std::size_t u = 0; u < groups.size(); ++u) {
      double mix = 0.0;
      for (std::size_t a = 0; a < n_atoms; ++a)
        mix += weights[a] * dens[a * groups.size() + u];
      total += groups[u].multiplicity * std::log(std::max(mix, 1e-300));
    }
    return total / n;
  };

  // Warm start near the current iterate: every candidate has a positive
  // gradient, so a small enough blend toward them strictly improves the
  // objective.  The shrinking loop guards against second-order loss, and
  // EM sweeps only ever increase the objective from there — together they
  // keep the outer iteration monotone (a cold uniform start would not be).
  std::vector<double> weights(n_atoms, 0.0);
  std::copy(g.weights().begin(), g.weights().end(), weights.begin());
  const double phi_current = scaled_phi(weights);
  double blend = 0.25;
  for (; blend > 1e-14; blend *= 0.25) {
    for (std::size_t a = 0; a < n_old; ++a) weights[a] = (1.0 - blend) * g.weights()[a];
    for (std::size_t j = 0; j < n_candidates; ++j)
      weights[n_old + j] = blend / static_cast<double>(n_candidates);
    if (scaled_phi(weights) > phi_current) break;
  }
  if (blend <= 1e-14) return {g, dir.value_max, false};  // cannot improve

  // Drive the inner EM essentially to its fixed point: a loosely solved
  // inner problem degrades the outer iteration to a sublinear crawl.
  std::vector<double> ratios(n_atoms);
  for (int em_iter = 0; em_iter < 30000; ++em_iter) {
    std::fill(ratios.begin(), ratios.end(), 0.0);
    for (std::size_t u = 0; u < groups.size(); ++u) {
      double mix = 0.0;
      for (std::size_t a = 0; a < n_atoms; ++a)
        mix += weights[a] * dens[a * groups.size() + u];
      if (mix <= 0.0) continue;
      const double scale = groups[u].multiplicity / mix;
      for (std::size_t a = 0; a < n_atoms; ++a)
        ratios[a] += scale * dens[a * groups.size() + u];
    }
    double max_change = 0.0;
    for (std::size_t a = 0; a < n_atoms; ++a) {
      const double updated = weights[a] * ratios[a] / n;
      max_change = std::max(max_change, std::abs(updated - weights[a]));
      weights[a] = updated;
    }
    if (max_change < 1e-13) break;
  }

  auto next = discrete_measure(std::move(atoms), std::move(weights), g.bound(),
                               cfg.weight_floor);
  return {std::move(next), dir.value_max, false};
}

inline solver_step step(const discrete_measure& g, const count_sample& s,
                        const solver_config& cfg) {
  switch (cfg.algo) {
    case algorithm::vdm: return step_vdm(g, s, cfg);
    case algorithm::vem: return step_vem(g, s, cfg);
    default: return step_isdm(g, s, cfg);
  }
}

// Full solve: iterate the configured step from a single-atom start until the
// gradient certificate passes or the iteration budget runs out.
inline fit_result fit(const count_sample& s, const solver_config& cfg = {}) {
  if (!(cfg.stop_tol > 0.0)) throw std::invalid_argument("fit: stop_tol must be positive");
  if (cfg.max_iters < 1) throw std::invalid_argument("fit: max_iters must be >= 1");
  if (cfg.grid_size < 2) throw std::invalid_argument("fit: grid_size must be >= 2");

  const double bound = s.bound();
  const double eps0 = 1e-9 * bound;
  const double start = std::clamp(s.ratio_mean(), eps0, bound);

  fit_result result{point_mass(start, bound), {}, 0, false, 0.0};
  result.phi_trace.push_back(phi(result.estimate, s));

  for (int iter = 0; iter < cfg.max_iters; ++iter) {
    auto st = step(result.estimate, s, cfg);
    result.max_phi_prime_at_exit = st.max_phi_prime;
    if (st.converged) {
      result.converged = true;
      return result;
    }
    if (detail::same_measure(st.next, result.estimate)) {
      // The step could not move (degenerate exchange or a vanishing line
      // search); the certificate above is still the honest exit state.
      return result;
    }
    result.estimate = std::move(st.next);
    result.phi_trace.push_back(phi(result.estimate, s));
    result.iterations = iter + 1;
  }

  // Budget exhausted: recompute the certificate at the final iterate.
  const auto denoms = detail::log_denominators(result.estimate, s);
  result.max_phi_prime_at_exit =
      detail::search_directions(denoms, s, cfg, false).value_max;
  result.converged = result.max_phi_prime_at_exit <= cfg.stop_tol;
  return result;
}

// With equal read depths the optimal support cannot carry more atoms than
// there are distinct count values; a violation signals a solver problem and
// is reported by callers as a warning.  With heterogeneous depths no such
// bound is available and the check passes vacuously.
inline bool support_size_check(const fit_result& result, const count_sample& s) {
  if (!s.equal_read_depths()) return true;
  std::vector<std::int64_t> distinct(s.counts());
  std::sort(distinct.begin(), distinct.end());
  distinct.erase(std::unique(distinct.begin(), distinct.end()), distinct.end());
  return result.estimate.size() <= distinct.size();
}

}  // namespace poismix
