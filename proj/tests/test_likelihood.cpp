#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <limits>
#include <vector>

#include "poismix/likelihood.hpp"
#include "poismix/rng.hpp"

using Catch::Matchers::WithinAbs;
using Catch::Matchers::WithinRel;
using poismix::count_sample;
using poismix::discrete_measure;
using poismix::point_mass;

namespace {

// Naive reference implementation: one term per observation, direct pow/exp
// arithmetic, no grouping and no log-sum-exp.  Valid for the small counts
// used in these tests; serves as an independent oracle.
double phi_naive(const discrete_measure& g, const std::vector<std::int64_t>& counts,
                 const std::vector<double>& depths) {
  double total = 0.0;
  for (std::size_t i = 0; i < counts.size(); ++i) {
    double density = 0.0;
    for (std::size_t m = 0; m < g.size(); ++m) {
      const double mean = g.support()[m] * depths[i];
      density += g.weights()[m] * std::exp(-mean) *
                 std::pow(mean, static_cast<double>(counts[i]));
    }
    total += std::log(density);
  }
  return total / static_cast<double>(counts.size());
}

double phi_prime_naive(const discrete_measure& g, double lam,
                       const std::vector<std::int64_t>& counts,
                       const std::vector<double>& depths) {
  double total = 0.0;
  for (std::size_t i = 0; i < counts.size(); ++i) {
    double density = 0.0;
    for (std::size_t m = 0; m < g.size(); ++m) {
      const double mean = g.support()[m] * depths[i];
      density += g.weights()[m] * std::exp(-mean) *
                 std::pow(mean, static_cast<double>(counts[i]));
    }
    const double mean = lam * depths[i];
    total += std::exp(-mean) * std::pow(mean, static_cast<double>(counts[i])) / density;
  }
  return total / static_cast<double>(counts.size()) - 1.0;
}

}  // namespace

TEST_CASE("count_sample validates and summarizes its data") {
  CHECK_THROWS_AS(count_sample({}, {}, 10.0), std::domain_error);
  CHECK_THROWS_AS(count_sample({1}, {1.0, 2.0}, 10.0), std::domain_error);
  CHECK_THROWS_AS(count_sample({-1}, {1.0}, 10.0), std::domain_error);
  CHECK_THROWS_AS(count_sample({1}, {0.0}, 10.0), std::domain_error);
  CHECK_THROWS_AS(count_sample({1}, {1.0}, 0.0), std::domain_error);

  const count_sample s({3, 0, 3, 1}, {1.0, 2.0, 1.0, 0.5}, 10.0);
  CHECK(s.size() == 4);
  CHECK(s.max_count() == 3);
  CHECK_THAT(s.ratio_mean(), WithinAbs((3.0 + 0.0 + 3.0 + 2.0) / 4.0, 1e-15));
  CHECK_FALSE(s.equal_read_depths());
  CHECK(count_sample({1, 2}, {1.0, 1.0}, 10.0).equal_read_depths());
}

TEST_CASE("identical (count, depth) pairs are grouped with multiplicities") {
  const count_sample s({3, 3, 0, 3, 0}, {1.0, 1.0, 2.0, 1.0, 2.0}, 10.0);
  REQUIRE(s.groups().size() == 2);
  CHECK(s.groups()[0].count == 0.0);
  CHECK(s.groups()[0].read_depth == 2.0);
  CHECK(s.groups()[0].multiplicity == 2.0);
  CHECK(s.groups()[1].count == 3.0);
  CHECK(s.groups()[1].multiplicity == 3.0);

  // Same count at different depths must stay distinct.
  const count_sample t({2, 2}, {1.0, 1.5}, 10.0);
  CHECK(t.groups().size() == 2);
}

TEST_CASE("phi matches hand-worked values") {
  // Unit point mass at 1, single zero count at depth 1: log(e^{-1}) = -1.
  CHECK_THAT(poismix::phi(point_mass(1.0, 10.0), count_sample({0}, {1.0}, 10.0)),
             WithinAbs(-1.0, 1e-14));

  // Count 2 at depth 2 under a point mass at 1: -2 + 2 log 2.
  CHECK_THAT(poismix::phi(point_mass(1.0, 10.0), count_sample({2}, {2.0}, 10.0)),
             WithinAbs(-2.0 + 2.0 * std::log(2.0), 1e-14));

  // Two-atom mixture, count 2 at depth 1.
  const discrete_measure g({1.0, 3.0}, {0.5, 0.5}, 10.0);
  const double expected = std::log(0.5 * std::exp(-1.0) + 4.5 * std::exp(-3.0));
  CHECK_THAT(poismix::phi(g, count_sample({2}, {1.0}, 10.0)), WithinAbs(expected, 1e-14));
}

TEST_CASE("phi handles zero-density and bound-mismatch edge cases") {
  // A point mass at zero cannot produce positive counts.
  CHECK(poismix::phi(point_mass(0.0, 10.0), count_sample({1}, {1.0}, 10.0)) ==
        -std::numeric_limits<double>::infinity());
  // ... but it fits all-zero counts perfectly.
  CHECK(poismix::phi(point_mass(0.0, 10.0), count_sample({0, 0}, {1.0, 2.0}, 10.0)) == 0.0);

  CHECK_THROWS_AS(poismix::phi(point_mass(1.0, 5.0), count_sample({1}, {1.0}, 10.0)),
                  std::invalid_argument);
}

TEST_CASE("phi agrees with the naive per-observation oracle") {
  poismix::rng r(808);
  for (int rep = 0; rep < 100; ++rep) {
    const int n = 1 + static_cast<int>(r.bounded(40));
    std::vector<std::int64_t> counts;
    std::vector<double> depths;
    for (int i = 0; i < n; ++i) {
      counts.push_back(static_cast<std::int64_t>(r.bounded(15)));
      depths.push_back(r.uniform(0.5, 1.5));
    }
    std::vector<double> s, w;
    const int atoms = 1 + static_cast<int>(r.bounded(4));
    for (int m = 0; m < atoms; ++m) {
      s.push_back(r.uniform(0.05, 20.0));
      w.push_back(r.uniform(0.1, 1.0));
    }
    const discrete_measure g(s, w, 20.0);
    const count_sample sample(counts, depths, 20.0);
    CHECK_THAT(poismix::phi(g, sample),
               WithinAbs(phi_naive(g, counts, depths), 1e-10));
    const double lam = r.uniform(0.05, 20.0);
    const double want = phi_prime_naive(g, lam, counts, depths);
    CHECK_THAT(poismix::phi_prime(g, lam, sample),
               WithinAbs(want, 1e-9) || WithinRel(want, 1e-12));
  }
}

TEST_CASE("phi_prime matches the hand-worked point-mass value") {
  // G = unit mass at 1, count 3 at depth 1, direction lam = 3:
  // k(3;3,1)/k(1;3,1) - 1 = 27 e^{-2} - 1.
  const double value =
      poismix::phi_prime(point_mass(1.0, 10.0), 3.0, count_sample({3}, {1.0}, 10.0));
  CHECK_THAT(value, WithinRel(27.0 * std::exp(-2.0) - 1.0, 1e-13));
}

TEST_CASE("phi_prime satisfies the mixture identity at the support") {
  // sum_m w_m (phi_prime(G, lam_m) + 1) = 1 because the mixture density is
  // the weighted sum of its own kernels.
  const discrete_measure g({0.5, 2.0, 6.0}, {0.2, 0.5, 0.3}, 10.0);
  const count_sample s({0, 1, 4, 9, 2, 2}, {1.0, 1.2, 0.8, 1.0, 1.0, 1.1}, 10.0);
  double total = 0.0;
  for (std::size_t m = 0; m < g.size(); ++m)
    total += g.weights()[m] * (poismix::phi_prime(g, g.support()[m], s) + 1.0);
  CHECK_THAT(total, WithinAbs(1.0, 1e-12));
}

TEST_CASE("phi_prime rejects invalid preconditions") {
  const count_sample s({1}, {1.0}, 10.0);
  // phi(G) = -inf under a zero point mass.
  CHECK_THROWS_AS(poismix::phi_prime(point_mass(0.0, 10.0), 1.0, s),
                  std::invalid_argument);
  CHECK_THROWS_AS(poismix::phi_prime(point_mass(1.0, 10.0), -0.5, s),
                  std::invalid_argument);
  CHECK_THROWS_AS(poismix::phi_prime(point_mass(1.0, 10.0), 11.0, s),
                  std::invalid_argument);
  CHECK_THROWS_AS(poismix::phi_prime(point_mass(1.0, 5.0), 1.0, s),
                  std::invalid_argument);
}

TEST_CASE("phi_prime_grid spans [0, B] with the zero endpoint nudged") {
  const discrete_measure g({1.0, 3.0}, {0.5, 0.5}, 10.0);

  SECTION("positive counts replace 0 with eps0") {
    const count_sample s({2, 5}, {1.0, 1.0}, 10.0);
    const auto grid = poismix::phi_prime_grid(g, s, 11);
    REQUIRE(grid.size() == 11);
    CHECK_THAT(grid.front().first, WithinRel(1e-9 * 10.0, 1e-12));
    CHECK(grid.back().first == 10.0);
    CHECK_THAT(grid[5].first, WithinAbs(5.0, 1e-12));
    for (const auto& [lam, value] : grid)
      CHECK_THAT(value, WithinAbs(poismix::phi_prime(g, lam, s), 1e-12));
  }

  SECTION("all-zero counts keep the exact zero endpoint") {
    const count_sample s({0, 0}, {1.0, 1.0}, 10.0);
    const auto grid = poismix::phi_prime_grid(g, s, 5);
    CHECK(grid.front().first == 0.0);
    // At lam = 0 the kernel is 1 for zero counts, so the gradient is
    // 1/f_G - 1 > 0 there (the mixture puts mass on positive atoms).
    CHECK(grid.front().second > 0.0);
  }

  SECTION("grid size below two is rejected") {
    CHECK_THROWS_AS(poismix::phi_prime_grid(g, count_sample({0}, {1.0}, 10.0), 1),
                    std::invalid_argument);
  }
}

TEST_CASE("grouped evaluation equals ungrouped evaluation on duplicated data") {
  // 400 copies of a few distinct observations must give exactly the phi of
  // the expanded sample (grouping is an exact rewrite, not an approximation).
  std::vector<std::int64_t> counts;
  std::vector<double> depths;
  for (int copy = 0; copy < 400; ++copy) {
    counts.insert(counts.end(), {0, 1, 3, 7});
    depths.insert(depths.end(), {1.0, 1.0, 1.0, 1.0});
  }
  const count_sample big(counts, depths, 15.0);
  CHECK(big.groups().size() == 4);
  const count_sample small({0, 1, 3, 7}, {1.0, 1.0, 1.0, 1.0}, 15.0);
  const discrete_measure g({0.7, 4.0}, {0.6, 0.4}, 15.0);
  CHECK_THAT(poismix::phi(g, big), WithinAbs(poismix::phi(g, small), 1e-13));
}
