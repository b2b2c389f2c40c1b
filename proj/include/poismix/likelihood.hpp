#pragma once

// The mixture log-likelihood functional and its directional gradient.
//
// Data for one subject is a vector of counts X_i with per-observation read
// depths r_i; under a mixing measure G on [0, B] the i-th observation has
// marginal density sum_m G(lam_m) * exp(-lam_m r_i) (lam_m r_i)^{X_i}.  The
// functional
//
//   phi(G) = (1/N) sum_i log sum_m G(lam_m) exp(-lam_m r_i) (lam_m r_i)^{X_i}
//
// deliberately omits the 1/X_i! factor: it does not depend on G, so it
// shifts phi by a constant without moving the maximizer.  Callers that want
// a true log-likelihood add the factorial constant back (the CLI reports it
// separately).
//
// The directional gradient toward a point mass at lam is
//
//   phi_prime(G, lam) = (1/N) sum_i k(lam; X_i, r_i) / f_G(X_i, r_i) - 1,
//
// whose maximum over lam is both the search direction of every solver step
// and the optimality certificate: the NPMLE is reached exactly when the max
// is zero.
//
// Observations with identical (count, read depth) pairs contribute identical
// terms, so `count_sample` groups them up front with multiplicities.  With
// equal read depths this collapses thousands of observations into a few
// dozen groups and is the main reason large fits are cheap.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <stdexcept>
#include <utility>
#include <vector>

#include "poismix/measures.hpp"

namespace poismix {

class count_sample {
 public:
  struct obs_group {
    double count;
    double read_depth;
    double multiplicity;
  };

  count_sample(std::vector<std::int64_t> counts, std::vector<double> read_depths,
               double bound)
      : counts_(std::move(counts)), read_depths_(std::move(read_depths)), bound_(bound) {
    if (!(bound_ > 0.0) || !std::isfinite(bound_))
      throw std::domain_error("count_sample: bound must be positive and finite");
    if (counts_.empty() || counts_.size() != read_depths_.size())
      throw std::domain_error("count_sample: counts/read_depths must be non-empty and equal length");
    for (std::size_t i = 0; i < counts_.size(); ++i) {
      if (counts_[i] < 0) throw std::domain_error("count_sample: counts must be >= 0");
      if (!(read_depths_[i] > 0.0) || !std::isfinite(read_depths_[i]))
        throw std::domain_error("count_sample: read depths must be positive and finite");
    }

    std::vector<std::size_t> order(counts_.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
      if (counts_[a] != counts_[b]) return counts_[a] < counts_[b];
      return read_depths_[a] < read_depths_[b];
    });
    for (std::size_t idx : order) {
      const auto x = static_cast<double>(counts_[idx]);
      const double r = read_depths_[idx];
      if (!groups_.empty() && groups_.back().count == x && groups_.back().read_depth == r)
        groups_.back().multiplicity += 1.0;
      else
        groups_.push_back({x, r, 1.0});
    }
  }

  const std::vector<std::int64_t>& counts() const noexcept { return counts_; }
  const std::vector<double>& read_depths() const noexcept { return read_depths_; }
  const std::vector<obs_group>& groups() const noexcept { return groups_; }
  double bound() const noexcept { return bound_; }
  std::size_t size() const noexcept { return counts_.size(); }

  std::int64_t max_count() const noexcept {
    return *std::max_element(counts_.begin(), counts_.end());
  }

  // Mean of the depth-normalized counts X_i / r_i; the solver's starting atom.
  double ratio_mean() const noexcept {
    double sum = 0.0;
    for (std::size_t i = 0; i < counts_.size(); ++i)
      sum += static_cast<double>(counts_[i]) / read_depths_[i];
    return sum / static_cast<double>(counts_.size());
  }

  // True read depths are all equal (Design-A style data).
  bool equal_read_depths() const noexcept {
    return std::all_of(read_depths_.begin(), read_depths_.end(),
                       [&](double r) { return r == read_depths_.front(); });
  }

 private:
  std::vector<std::int64_t> counts_;
  std::vector<double> read_depths_;
  std::vector<obs_group> groups_;
  double bound_;
};

namespace detail {

// log k(lam; x, r) = -lam r + x log(lam r), with the conventions
// 0 * log(0) = 0 and log(0) = -inf for positive x.
inline double log_kernel(double lam, double count, double read_depth) noexcept {
  const double mean = lam * read_depth;
  if (mean == 0.0)
    return count == 0.0 ? 0.0 : -std::numeric_limits<double>::infinity();
  return -mean + count * std::log(mean);
}

// Per-group log mixture densities log f_G(x_u, r_u); -inf entries mark
// groups with zero density under G.
inline std::vector<double> log_denominators(const discrete_measure& g,
                                            const count_sample& s) {
  const auto& groups = s.groups();
  std::vector<double> log_weights(g.size());
  for (std::size_t m = 0; m < g.size(); ++m) log_weights[m] = std::log(g.weights()[m]);

  std::vector<double> denoms(groups.size());
  std::vector<double> terms(g.size());
  for (std::size_t u = 0; u < groups.size(); ++u) {
    double max_term = -std::numeric_limits<double>::infinity();
    for (std::size_t m = 0; m < g.size(); ++m) {
      terms[m] = log_weights[m] + log_kernel(g.support()[m], groups[u].count, groups[u].read_depth);
      max_term = std::max(max_term, terms[m]);
    }
    if (max_term == -std::numeric_limits<double>::infinity()) {
      denoms[u] = max_term;
      continue;
    }
    double sum = 0.0;
    for (double t : terms) sum += std::exp(t - max_term);
    denoms[u] = max_term + std::log(sum);
  }
  return denoms;
}

inline double phi_from_denominators(const std::vector<double>& denoms,
                                    const count_sample& s) noexcept {
  const auto& groups = s.groups();
  double total = 0.0;
  for (std::size_t u = 0; u < groups.size(); ++u) {
    if (denoms[u] == -std::numeric_limits<double>::infinity())
      return -std::numeric_limits<double>::infinity();
    total += groups[u].multiplicity * denoms[u];
  }
  return total / static_cast<double>(s.size());
}

inline double phi_prime_from_denominators(const std::vector<double>& denoms,
                                          double lam, const count_sample& s) {
  const auto& groups = s.groups();
  double total = 0.0;
  for (std::size_t u = 0; u < groups.size(); ++u) {
    if (!std::isfinite(denoms[u]))
      throw std::invalid_argument("phi_prime: phi(G) must be finite");
    const double log_ratio = log_kernel(lam, groups[u].count, groups[u].read_depth) - denoms[u];
    total += groups[u].multiplicity * std::exp(log_ratio);
  }
  return total / static_cast<double>(s.size()) - 1.0;
}

}  // namespace detail

// Average log mixture density of the sample under G (factorial constant
// omitted).  Returns -inf when some observation has zero density under G.
inline double phi(const discrete_measure& g, const count_sample& s) {
  if (g.bound() != s.bound())
    throw std::invalid_argument("phi: measure and sample bounds differ");
  return detail::phi_from_denominators(detail::log_denominators(g, s), s);
}

// Directional gradient of phi at G toward the point mass at lam.  Requires
// phi(G) finite; may overflow to +inf for directions vastly better than any
// support point of G (monotone, so still usable for maximization).
inline double phi_prime(const discrete_measure& g, double lam, const count_sample& s) {
  if (g.bound() != s.bound())
    throw std::invalid_argument("phi_prime: measure and sample bounds differ");
  if (!(lam >= 0.0) || lam > g.bound())
    throw std::invalid_argument("phi_prime: lam must lie in [0, bound]");
  return detail::phi_prime_from_denominators(detail::log_denominators(g, s), lam, s);
}

// phi_prime evaluated on a uniform grid of `grid_size` points spanning
// [0, B].  When the sample has positive counts the zero endpoint is nudged
// to eps0 = 1e-9 * B, keeping every grid iterate usable as a mixture atom.
inline std::vector<std::pair<double, double>> phi_prime_grid(const discrete_measure& g,
                                                             const count_sample& s,
                                                             int grid_size = 1000) {
  if (grid_size < 2) throw std::invalid_argument("phi_prime_grid: grid_size must be >= 2");
  if (g.bound() != s.bound())
    throw std::invalid_argument("phi_prime_grid: measure and sample bounds differ");
  const auto denoms = detail::log_denominators(g, s);
  const double bound = s.bound();
  const double eps0 = 1e-9 * bound;
  std::vector<std::pair<double, double>> values;
  values.reserve(static_cast<std::size_t>(grid_size));
  for (int i = 0; i < grid_size; ++i) {
    double lam = bound * static_cast<double>(i) / static_cast<double>(grid_size - 1);
    if (i == 0 && s.max_count() > 0) lam = eps0;
    values.emplace_back(lam, detail::phi_prime_from_denominators(denoms, lam, s));
  }
  return values;
}

}  // namespace poismix
