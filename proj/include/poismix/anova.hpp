// Distance-based K-group comparison: pseudo-F statistics on matrices of
// squared Wasserstein-1 distances, Fisher-Pitman permutation tests (plain and
// covariate-adjusted), and Benjamini-Hochberg FDR correction.
//
// The plain statistic is (SS_T - sum_k SS_k) / sum_k SS_k, where SS_T sums
// all ordered-pair squared distances scaled by 1/n and SS_k does the same
// within group k scaled by 1/n_k.  On scalar data embedded as point masses it
// collapses to the classic one-way ANOVA ratio SSB/SSW.  The covariate
// variant projects the Gower-centered Gram matrix of the distances onto the
// column space of a design matrix: F = tr(H G H) / tr((I-H) G (I-H)).
//
// Permutation p-values use the add-one convention p = (1 + #{F^pi >= F}) /
// (1 + n_perm): the observed labeling enters explicitly, ties count toward
// the numerator, and a permuted statistic with a zero denominator counts as
// +infinity (an exceedance).  Each replicate draws its permutation from an
// independent RNG stream keyed by (seed, replicate index), so results do not
// depend on thread count or scheduling.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <map>
#include <numeric>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "poismix/errors.hpp"
#include "poismix/linalg.hpp"
#include "poismix/measures.hpp"
#include "poismix/parallel.hpp"
#include "poismix/rng.hpp"

namespace poismix {

// Group structure of a study: which group each subject belongs to.
// Constructed from arbitrary integer labels; groups are numbered 0..K-1 in
// ascending label order.
class study_layout {
 public:
  explicit study_layout(const std::vector<int>& labels) {
    if (labels.size() < 2)
      throw std::invalid_argument("study_layout: need at least two subjects");
    std::vector<int> distinct(labels);
    std::sort(distinct.begin(), distinct.end());
    distinct.erase(std::unique(distinct.begin(), distinct.end()), distinct.end());
    if (distinct.size() < 2)
      throw std::invalid_argument("study_layout: need at least two groups");

    group_of_.reserve(labels.size());
    n_k_.assign(distinct.size(), 0);
    for (int label : labels) {
      const auto it = std::lower_bound(distinct.begin(), distinct.end(), label);
      const int g = static_cast<int>(it - distinct.begin());
      group_of_.push_back(g);
      ++n_k_[static_cast<std::size_t>(g)];
    }
    members_.resize(distinct.size());
    for (std::size_t i = 0; i < group_of_.size(); ++i)
      members_[static_cast<std::size_t>(group_of_[i])].push_back(i);
  }

  int k() const noexcept { return static_cast<int>(n_k_.size()); }
  std::size_t n() const noexcept { return group_of_.size(); }
  const std::vector<int>& group_of() const noexcept { return group_of_; }
  const std::vector<int>& group_sizes() const noexcept { return n_k_; }
  const std::vector<std::vector<std::size_t>>& members() const noexcept { return members_; }

 private:
  std::vector<int> group_of_;
  std::vector<int> n_k_;
  std::vector<std::vector<std::size_t>> members_;  // subject indices per group
};

// Symmetric matrix of *squared* distances with a zero diagonal.
class dist_matrix {
 public:
  explicit dist_matrix(matrix squared) : d_(std::move(squared)) {
    const std::size_t n = d_.rows();
    if (n == 0 || d_.cols() != n)
      throw std::domain_error("dist_matrix: matrix must be square and non-empty");
    for (std::size_t i = 0; i < n; ++i) {
      if (d_(i, i) != 0.0) throw std::domain_error("dist_matrix: diagonal must be zero");
      for (std::size_t j = i + 1; j < n; ++j) {
        if (!(d_(i, j) >= 0.0) || !std::isfinite(d_(i, j)))
          throw std::domain_error("dist_matrix: entries must be finite and nonnegative");
        if (std::abs(d_(i, j) - d_(j, i)) > 1e-12)
          throw std::domain_error("dist_matrix: matrix must be symmetric");
      }
    }
  }

  std::size_t n() const noexcept { return d_.rows(); }
  double operator()(std::size_t i, std::size_t j) const { return d_(i, j); }
  const matrix& squared() const noexcept { return d_; }

 private:
  matrix d_;
};

// Pairwise squared W1 distances between fitted mixing measures (smoothed ==
// false) or between their Poisson-smoothed PMFs (smoothed == true).  All
// measures must share one support bound.
inline dist_matrix distance_matrix(const std::vector<discrete_measure>& fits,
                                   bool smoothed, double tail_tol = 1e-10) {
  if (fits.empty()) throw std::domain_error("distance_matrix: no measures");
  const double bound = fits.front().bound();
  for (const auto& g : fits)
    if (g.bound() != bound)
      throw std::domain_error("distance_matrix: measures must share a bound");

  const std::size_t n = fits.size();
  matrix d(n, n);
  if (smoothed) {
    std::vector<truncated_pmf> pmfs;
    pmfs.reserve(n);
    for (const auto& g : fits) pmfs.push_back(poisson_smooth(g, tail_tol));
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = i + 1; j < n; ++j) {
        const double w = w1_pmfs(pmfs[i], pmfs[j]);
        d(i, j) = w * w;
        d(j, i) = w * w;
      }
  } else {
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = i + 1; j < n; ++j) {
        const double w = w1_measures(fits[i], fits[j]);
        d(i, j) = w * w;
        d(j, i) = w * w;
      }
  }
  return dist_matrix(std::move(d));
}

namespace detail {

// Sum of within-group ordered-pair distances scaled by 1/n_k, with subject
// identities taken through the permutation perm (slot i holds subject
// perm[i]).  The observed value is this at the identity permutation; using
// one code path for both makes the tie comparison in the permutation test
// exact rather than tolerance-based.
inline double within_group_sum(const dist_matrix& d, const study_layout& layout,
                               const std::vector<int>& perm) {
  double total = 0.0;
  for (std::size_t g = 0; g < layout.members().size(); ++g) {
    const auto& slots = layout.members()[g];
    double ss = 0.0;
    for (std::size_t a = 0; a < slots.size(); ++a)
      for (std::size_t b = a + 1; b < slots.size(); ++b)
        ss += d(static_cast<std::size_t>(perm[slots[a]]),
                static_cast<std::size_t>(perm[slots[b]]));
    total += 2.0 * ss / static_cast<double>(slots.size());
  }
  return total;
}

inline double total_sum(const dist_matrix& d) {
  double ss = 0.0;
  for (std::size_t i = 0; i < d.n(); ++i)
    for (std::size_t j = i + 1; j < d.n(); ++j) ss += d(i, j);
  return 2.0 * ss / static_cast<double>(d.n());
}

inline std::vector<int> identity_perm(std::size_t n) {
  std::vector<int> p(n);
  std::iota(p.begin(), p.end(), 0);
  return p;
}

}  // namespace detail

// Pseudo-F for a permuted subject assignment: slot i carries subject perm[i].
// Returns +infinity when the within-group sum vanishes while the total does
// not (the permutation-test exceedance convention), and throws
// degenerate_error when the total itself vanishes.
inline double pseudo_f_permuted(const dist_matrix& d, const study_layout& layout,
                                const std::vector<int>& perm) {
  if (d.n() != layout.n())
    throw std::invalid_argument("pseudo_f: distance matrix and layout sizes differ");
  const double ss_t = detail::total_sum(d);
  const double ss_w = detail::within_group_sum(d, layout, perm);
  if (ss_w <= 0.0) {
    if (ss_t <= 0.0)
      throw degenerate_error("pseudo_f: all distances are zero");
    return std::numeric_limits<double>::infinity();
  }
  return (ss_t - ss_w) / ss_w;
}

// The observed ANOVA-type statistic (SS_T - sum_k SS_k) / sum_k SS_k.
// Throws degenerate_error when the denominator is zero.
inline double pseudo_f(const dist_matrix& d, const study_layout& layout) {
  const double f = pseudo_f_permuted(d, layout, detail::identity_perm(d.n()));
  if (std::isinf(f))
    throw degenerate_error("pseudo_f: within-group distances are all zero");
  return f;
}

struct test_result {
  double statistic = std::numeric_limits<double>::quiet_NaN();
  double p_value = 1.0;
  int n_permutations = 0;
  std::map<double, bool> reject_at;
  std::uint64_t seed = 0;
  // True when the observed statistic was undefined (zero denominator); the
  // test then reports p = 1 and a NaN statistic rather than aborting a batch.
  bool degenerate = false;
};

// Fisher-Pitman permutation test of group equality.  Draws n_perm uniform
// permutations of the subject indices, recomputes the pseudo-F under each,
// and reports p = (1 + #{F^pi >= F}) / (1 + n_perm).
inline test_result permutation_test(const dist_matrix& d, const study_layout& layout,
                                    int n_perm, std::uint64_t seed,
                                    const std::vector<double>& alphas = {0.05},
                                    int n_threads = 1) {
  if (n_perm < 1) throw std::invalid_argument("permutation_test: n_perm must be >= 1");

  test_result out;
  out.n_permutations = n_perm;
  out.seed = seed;

  double observed;
  try {
    observed = pseudo_f(d, layout);
  } catch (const degenerate_error&) {
    out.degenerate = true;
    for (double alpha : alphas) out.reject_at[alpha] = false;
    return out;
  }
  out.statistic = observed;

  // SS_T is permutation-invariant: hoist it and rebuild F^pi from the
  // permuted within-group sum alone.  The observed statistic came through
  // the same summation order, so ties compare exactly.
  const double ss_t = detail::total_sum(d);
  const std::size_t n = d.n();
  std::vector<char> exceed(static_cast<std::size_t>(n_perm), 0);
  parallel_for(static_cast<std::size_t>(n_perm), resolve_threads(n_threads),
               [&](std::size_t t) {
                 rng r = rng::stream(seed, static_cast<std::uint64_t>(t));
                 const auto perm = r.permutation(static_cast<int>(n));
                 const double ss_w = detail::within_group_sum(d, layout, perm);
                 const double f = ss_w <= 0.0
                                      ? std::numeric_limits<double>::infinity()
                                      : (ss_t - ss_w) / ss_w;
                 exceed[t] = (f >= observed) ? 1 : 0;
               });

  const int count = static_cast<int>(std::count(exceed.begin(), exceed.end(), char(1)));
  out.p_value = (1.0 + count) / (1.0 + static_cast<double>(n_perm));
  for (double alpha : alphas) out.reject_at[alpha] = (out.p_value <= alpha);
  return out;
}

// Design matrix for the covariate-adjusted test.  Validated to have full
// column rank (tolerance 1e-10 in the Gram-Schmidt rejection norms).
class covariate_matrix {
 public:
  covariate_matrix(matrix z, std::vector<std::string> names)
      : z_(std::move(z)), names_(std::move(names)) {
    if (z_.rows() == 0 || z_.cols() == 0)
      throw design_error("covariate_matrix: design must be non-empty");
    if (names_.size() != z_.cols())
      throw design_error("covariate_matrix: one name per column required");
    for (std::size_t i = 0; i < z_.rows(); ++i)
      for (std::size_t j = 0; j < z_.cols(); ++j)
        if (!std::isfinite(z_(i, j)))
          throw design_error("covariate_matrix: entries must be finite");
    if (mgs_orthonormal(z_).cols() != z_.cols())
      throw design_error("covariate_matrix: design is rank-deficient");
  }

  const matrix& z() const noexcept { return z_; }
  std::size_t n() const noexcept { return z_.rows(); }
  std::size_t p() const noexcept { return z_.cols(); }
  const std::vector<std::string>& names() const noexcept { return names_; }

 private:
  matrix z_;
  std::vector<std::string> names_;
};

struct gower_info {
  double min_eigenvalue = 0.0;  // most negative eigenvalue before clipping
  int clipped = 0;              // eigenvalues below -1e-10 set to zero
  int rounded = 0;              // eigenvalues in (-1e-10, 0) set to zero
};

// Gower's centered Gram matrix of a squared-distance matrix, projected onto
// the PSD cone: G0 = -(1/2) C D C with C the centering projector, then
// negative eigenvalues are set to zero.  Eigenvalues in (-1e-10, 0) are
// round-off and zeroed silently; anything below -1e-10 signals a genuinely
// non-Euclidean D and is reported through `info` so callers can warn.
inline matrix gower_center(const dist_matrix& d, gower_info* info = nullptr) {
  const std::size_t n = d.n();
  std::vector<double> row_mean(n, 0.0);
  double grand = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) row_mean[i] += -0.5 * d(i, j);
    row_mean[i] /= static_cast<double>(n);
    grand += row_mean[i];
  }
  grand /= static_cast<double>(n);

  matrix g0(n, n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j)
      g0(i, j) = -0.5 * d(i, j) - row_mean[i] - row_mean[j] + grand;

  const auto eig = sym_eigen(g0);
  gower_info local;
  local.min_eigenvalue = eig.values.empty() ? 0.0 : eig.values.front();
  std::vector<double> clipped(eig.values);
  for (double& lam : clipped) {
    if (lam < 0.0) {
      if (lam <= -1e-10)
        ++local.clipped;
      else
        ++local.rounded;
      lam = 0.0;
    }
  }
  if (info != nullptr) *info = local;

  matrix g(n, n);
  for (std::size_t j = 0; j < n; ++j) {
    if (clipped[j] == 0.0) continue;
    for (std::size_t i = 0; i < n; ++i) {
      const double vi = eig.vectors(i, j) * clipped[j];
      for (std::size_t k = i; k < n; ++k) g(i, k) += vi * eig.vectors(k, j);
    }
  }
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t k = i + 1; k < n; ++k) g(k, i) = g(i, k);
  return g;
}

namespace detail {

// tr(U^T G U) for an orthonormal basis U of col(Z).  Because the hat matrix
// H = U U^T is idempotent, tr(H G H) = tr(G H) = this trace, and
// tr((I-H) G (I-H)) = tr(G) - this trace.
inline double projected_trace(const matrix& g, const matrix& u) {
  double t = 0.0;
  const std::size_t n = u.rows();
  std::vector<double> gu(n);
  for (std::size_t j = 0; j < u.cols(); ++j) {
    for (std::size_t i = 0; i < n; ++i) {
      double s = 0.0;
      for (std::size_t k = 0; k < n; ++k) s += g(i, k) * u(k, j);
      gu[i] = s;
    }
    for (std::size_t i = 0; i < n; ++i) t += u(i, j) * gu[i];
  }
  return t;
}

inline double trace(const matrix& g) {
  double t = 0.0;
  for (std::size_t i = 0; i < g.rows(); ++i) t += g(i, i);
  return t;
}

}  // namespace detail

// Covariate-adjusted statistic on an explicit Gram matrix:
// F = tr(H G H) / tr((I-H) G (I-H)) with H the hat matrix of Z.
inline double covariate_pseudo_f_from_gram(const matrix& g, const covariate_matrix& z) {
  if (g.rows() != z.n() || g.cols() != z.n())
    throw std::invalid_argument("covariate_pseudo_f: Gram and design sizes differ");
  const matrix u = mgs_orthonormal(z.z());
  const double t = detail::projected_trace(g, u);
  const double denom = detail::trace(g) - t;
  if (denom <= 0.0)
    throw degenerate_error("covariate_pseudo_f: residual trace is zero (saturated design)");
  return t / denom;
}

// Covariate-adjusted statistic on a squared-distance matrix: Gower-center,
// clip to PSD, then project onto the design's column space.
inline double covariate_pseudo_f(const dist_matrix& d, const covariate_matrix& z,
                                 gower_info* info = nullptr) {
  if (d.n() != z.n())
    throw std::invalid_argument("covariate_pseudo_f: distance and design sizes differ");
  return covariate_pseudo_f_from_gram(gower_center(d, info), z);
}

// Restricted permutation test: only the diagnosis column of Z is permuted,
// all other covariates stay glued to their subjects, and the Gram matrix is
// computed once.  A permuted design that loses rank contributes a
// rank-reduced projection rather than aborting; a permuted statistic with a
// zero residual trace counts as an exceedance.
inline test_result covariate_permutation_test(const dist_matrix& d,
                                              const covariate_matrix& z,
                                              std::size_t diagnosis_col, int n_perm,
                                              std::uint64_t seed,
                                              const std::vector<double>& alphas = {0.05},
                                              int n_threads = 1,
                                              gower_info* info = nullptr) {
  if (n_perm < 1) throw std::invalid_argument("covariate_permutation_test: n_perm must be >= 1");
  if (diagnosis_col >= z.p())
    throw config_error("covariate_permutation_test: diagnosis column out of range");

  const matrix g = gower_center(d, info);
  const double trace_g = detail::trace(g);
  const double observed = covariate_pseudo_f_from_gram(g, z);

  test_result out;
  out.statistic = observed;
  out.n_permutations = n_perm;
  out.seed = seed;

  const std::size_t n = z.n();
  std::vector<char> exceed(static_cast<std::size_t>(n_perm), 0);
  parallel_for(static_cast<std::size_t>(n_perm), resolve_threads(n_threads),
               [&](std::size_t t) {
                 rng r = rng::stream(seed, static_cast<std::uint64_t>(t));
                 const auto perm = r.permutation(static_cast<int>(n));
                 matrix zp = z.z();
                 for (std::size_t i = 0; i < n; ++i)
                   zp(i, diagnosis_col) = z.z()(static_cast<std::size_t>(perm[i]), diagnosis_col);
                 const matrix u = mgs_orthonormal(zp);
                 const double tp = detail::projected_trace(g, u);
                 const double denom = trace_g - tp;
                 const double f = denom <= 0.0 ? std::numeric_limits<double>::infinity()
                                               : tp / denom;
                 exceed[t] = (f >= observed) ? 1 : 0;
               });

  const int count = static_cast<int>(std::count(exceed.begin(), exceed.end(), char(1)));
  out.p_value = (1.0 + count) / (1.0 + static_cast<double>(n_perm));
  for (double alpha : alphas) out.reject_at[alpha] = (out.p_value <= alpha);
  return out;
}

struct bh_result {
  std::vector<bool> rejected;
  std::vector<double> adjusted;
};

// Benjamini-Hochberg step-up procedure.  adjusted[i] is the smallest FDR
// level at which p_values[i] would be rejected (the running minimum from the
// largest rank down of m * p_(j) / j, capped at one); rejected[i] is
// adjusted[i] <= q.
inline bh_result benjamini_hochberg(const std::vector<double>& p_values, double q) {
  if (!(q > 0.0) || !(q < 1.0))
    throw std::invalid_argument("benjamini_hochberg: q must be inside (0,1)");
  for (double p : p_values)
    if (!(p >= 0.0) || !(p <= 1.0))
      throw std::invalid_argument("benjamini_hochberg: p-values must be in [0,1]");

  const std::size_t m = p_values.size();
  bh_result out;
  out.rejected.assign(m, false);
  out.adjusted.assign(m, 1.0);
  if (m == 0) return out;

  std::vector<std::size_t> order(m);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return p_values[a] < p_values[b];
  });

  double running = 1.0;
  for (std::size_t r = m; r-- > 0;) {
    const double scaled =
        p_values[order[r]] * static_cast<double>(m) / static_cast<double>(r + 1);
    running = std::min(running, std::min(scaled, 1.0));
    out.adjusted[order[r]] = running;
  }
  for (std::size_t i = 0; i < m; ++i) out.rejected[i] = (out.adjusted[i] <= q);
  return out;
}

}  // namespace poismix
