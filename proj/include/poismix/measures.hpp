#pragma once

// Discrete measures on a bounded interval [0, B], Poisson smoothing of such
// measures into count distributions, and Wasserstein-1 distances between
// both kinds of object.
//
// A `discrete_measure` is a probability measure with finitely many atoms; it
// is the estimand of the mixture solvers.  A `truncated_pmf` is a probability
// mass function on {0, 1, ..., x_max} plus an explicitly tracked tail mass;
// it is what Poisson smoothing of a discrete measure produces once the far
// tail is cut at a configurable tolerance.
//
// On the real line, W1 between two distributions is the L1 distance between
// their CDFs.  For atomic measures that integral is a finite sum over the
// merged support; for integer-support PMFs it is a sum over {0,...,x_max} of
// absolute CDF differences.  Both routines below use that closed form; no
// transport problem is solved numerically.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <numeric>
#include <stdexcept>
#include <utility>
#include <vector>

#include "poismix/errors.hpp"

namespace poismix {

class discrete_measure {
 public:
  // Atoms are sorted by location, locations closer than 1e-9 * bound are
  // merged (weighted-mean position, summed weight), weights are normalized
  // to sum to one, and normalized weights below `weight_floor` are pruned
  // (with one renormalization afterwards).
  discrete_measure(std::vector<double> support, std::vector<double> weights,
                   double bound, double weight_floor = 1e-12)
      : bound_(bound) {
    if (!(bound > 0.0) || !std::isfinite(bound))
      throw std::domain_error("discrete_measure: bound must be positive and finite");
    if (support.size() != weights.size() || support.empty())
      throw std::domain_error("discrete_measure: support/weights must be non-empty and equal length");
    for (std::size_t i = 0; i < support.size(); ++i) {
      if (!std::isfinite(support[i]) || support[i] < 0.0 || support[i] > bound)
        throw std::domain_error("discrete_measure: atom outside [0, bound]");
      if (!std::isfinite(weights[i]) || weights[i] < 0.0)
        throw std::domain_error("discrete_measure: weights must be finite and >= 0");
    }

    std::vector<std::size_t> order(support.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::sort(order.begin(), order.end(),
              [&](std::size_t a, std::size_t b) { return support[a] < support[b]; });

    const double merge_tol = 1e-9 * bound;
    for (std::size_t idx : order) {
      const double lam = support[idx];
      const double w = weights[idx];
      if (!support_.empty() && lam - support_.back() <= merge_tol) {
        const double w_total = weights_.back() + w;
        // The weighted mean lies in [back, lam] exactly; clamp the rounded
        // value so boundary atoms can never drift past the bound.
        if (w_total > 0.0)
          support_.back() = std::clamp(
              (support_.back() * weights_.back() + lam * w) / w_total,
              support_.back(), lam);
        weights_.back() = w_total;
      } else {
        support_.push_back(lam);
        weights_.push_back(w);
      }
    }

    normalize_and_prune(weight_floor);
  }

  const std::vector<double>& support() const noexcept { return support_; }
  const std::vector<double>& weights() const noexcept { return weights_; }
  double bound() const noexcept { return bound_; }
  std::size_t size() const noexcept { return support_.size(); }

  double mean() const noexcept {
    double m = 0.0;
    for (std::size_t i = 0; i < support_.size(); ++i) m += support_[i] * weights_[i];
    return m;
  }

 private:
  void normalize_and_prune(double weight_floor) {
    const double total = std::accumulate(weights_.begin(), weights_.end(), 0.0);
    if (!(total > 0.0))
      throw std::domain_error("discrete_measure: total weight must be positive");
    for (double& w : weights_) w /= total;

    std::size_t kept = 0;
    for (std::size_t i = 0; i < weights_.size(); ++i) {
      if (weights_[i] >= weight_floor) {
        support_[kept] = support_[i];
        weights_[kept] = weights_[i];
        ++kept;
      }
    }
    if (kept == 0)
      throw std::domain_error("discrete_measure: all weights below the pruning floor");
    support_.resize(kept);
    weights_.resize(kept);

    const double kept_total = std::accumulate(weights_.begin(), weights_.end(), 0.0);
    for (double& w : weights_) w /= kept_total;
  }

  std::vector<double> support_;
  std::vector<double> weights_;
  double bound_;
};

// Unit mass at a single location.
inline discrete_measure point_mass(double lambda, double bound) {
  return discrete_measure({lambda}, {1.0}, bound);
}

class truncated_pmf {
 public:
  // `masses[x]` is the probability of count x for x in {0,...,masses.size()-1};
  // `tail_mass` is everything beyond.  The two must account for all mass.
  truncated_pmf(std::vector<double> masses, double tail_mass, double tail_tol)
      : masses_(std::move(masses)), tail_mass_(tail_mass), tail_tol_(tail_tol) {
    if (masses_.empty()) throw std::domain_error("truncated_pmf: masses must be non-empty");
    double total = 0.0;
    for (double& m : masses_) {
      if (!std::isfinite(m) || m < -1e-12)
        throw std::domain_error("truncated_pmf: masses must be finite and >= 0");
      m = std::max(m, 0.0);
      total += m;
    }
    if (!(tail_mass_ >= 0.0) || !std::isfinite(tail_mass_))
      throw std::domain_error("truncated_pmf: tail mass must be finite and >= 0");
    if (std::abs(total + tail_mass_ - 1.0) > 1e-10)
      throw std::domain_error("truncated_pmf: masses plus tail must sum to one");
  }

  const std::vector<double>& masses() const noexcept { return masses_; }
  std::int64_t x_max() const noexcept { return static_cast<std::int64_t>(masses_.size()) - 1; }
  double tail_mass() const noexcept { return tail_mass_; }
  double tail_tol() const noexcept { return tail_tol_; }

  // Mean of the retained part only; the true mean exceeds this by at most
  // the (unknown) mass-weighted location of the truncated tail.
  double mean_lower() const noexcept {
    double m = 0.0;
    for (std::size_t x = 0; x < masses_.size(); ++x)
      m += static_cast<double>(x) * masses_[x];
    return m;
  }

 private:
  std::vector<double> masses_;
  double tail_mass_;
  double tail_tol_;
};

// Pushes a mixing measure through the Poisson kernel:
//   masses[x] = sum_m w_m * exp(-lam_m) lam_m^x / x!,
// truncated at the smallest x_max whose residual tail mass is <= tail_tol.
// Each atom's PMF is advanced by the recurrence p(x+1) = p(x) * lam/(x+1);
// atoms too far out to start in double range are carried in log space until
// they surface.
inline truncated_pmf poisson_smooth(const discrete_measure& g, double tail_tol = 1e-10) {
  if (!(tail_tol > 0.0) || tail_tol >= 1.0)
    throw std::domain_error("poisson_smooth: tail_tol must lie in (0, 1)");

  struct atom_state {
    double lam, weight, pmf, log_pmf;
    bool linear;
  };
  std::vector<atom_state> atoms;
  atoms.reserve(g.size());
  for (std::size_t m = 0; m < g.size(); ++m) {
    const double lam = g.support()[m];
    atom_state st{lam, g.weights()[m], 0.0, -lam, lam <= 700.0};
    if (st.linear) st.pmf = std::exp(-lam);
    atoms.push_back(st);
  }

  std::vector<double> masses;
  double cumulative = 0.0;
  constexpr std::int64_t hard_cap = 1000000;
  for (std::int64_t x = 0; x <= hard_cap; ++x) {
    double mass_x = 0.0;
    for (auto& st : atoms) {
      if (x > 0) {
        const double step = st.lam / static_cast<double>(x);
        if (st.linear) {
          st.pmf *= step;
        } else {
          st.log_pmf += std::log(step);
          if (st.log_pmf > -700.0) {
            st.pmf = std::exp(st.log_pmf);
            st.linear = true;
          }
        }
      }
      if (st.linear) mass_x += st.weight * st.pmf;
    }
    masses.push_back(mass_x);
    cumulative += mass_x;
    if (1.0 - cumulative <= tail_tol) {
      return truncated_pmf(std::move(masses), std::max(0.0, 1.0 - cumulative), tail_tol);
    }
  }
  throw std::domain_error("poisson_smooth: tail tolerance not reached within the support cap");
}

// W1 between two atomic measures: integral of |F1 - F2| over the merged
// support breakpoints.  The bounds of the two measures need not match; the
// distance is well-defined for any pair of distributions on [0, inf).
inline double w1_measures(const discrete_measure& g1, const discrete_measure& g2) {
  const auto& s1 = g1.support();
  const auto& s2 = g2.support();
  const auto& w1 = g1.weights();
  const auto& w2 = g2.weights();

  std::size_t i = 0, j = 0;
  double cdf1 = 0.0, cdf2 = 0.0;
  double distance = 0.0;
  double prev = 0.0;
  bool first = true;
  while (i < s1.size() || j < s2.size()) {
    double t;
    if (j >= s2.size() || (i < s1.size() && s1[i] <= s2[j]))
      t = s1[i];
    else
      t = s2[j];
    if (!first) distance += std::abs(cdf1 - cdf2) * (t - prev);
    while (i < s1.size() && s1[i] == t) cdf1 += w1[i++];
    while (j < s2.size() && s2[j] == t) cdf2 += w2[j++];
    prev = t;
    first = false;
  }
  return distance;
}

// W1 between two truncated PMFs: sum over x of |H1(x) - H2(x)| where H is
// the CDF of the retained masses (the shorter PMF is implicitly zero-padded).
// Exact up to truncation, whose contribution is bounded by
// `w1_pmfs_truncation_bound` for distributions whose tail mass sits within a
// small multiple of x_max (true for the Poisson mixtures used here).
inline double w1_pmfs(const truncated_pmf& h1, const truncated_pmf& h2) {
  const auto& m1 = h1.masses();
  const auto& m2 = h2.masses();
  const std::size_t len = std::max(m1.size(), m2.size());
  double cdf1 = 0.0, cdf2 = 0.0;
  double distance = 0.0;
  for (std::size_t x = 0; x < len; ++x) {
    if (x < m1.size()) cdf1 += m1[x];
    if (x < m2.size()) cdf2 += m2[x];
    distance += std::abs(cdf1 - cdf2);
  }
  return distance;
}

// Bookkeeping bound on the part of W1 lost to truncation.
inline double w1_pmfs_truncation_bound(const truncated_pmf& h1, const truncated_pmf& h2) {
  const double x_scale = static_cast<double>(std::max(h1.x_max(), h2.x_max()) + 1);
  return 2.0 * (h1.tail_mass() + h2.tail_mass()) * x_scale;
}

}  // namespace poismix
