#pragma once

// Deterministic random number generation.
//
// Everything stochastic in this library flows through the generator below
// rather than <random>, because the standard library's distribution objects
// are implementation-defined: the same seed can produce different streams on
// different platforms or compiler versions.  Reproducibility of a run given
// (seed, config) is a hard requirement here, so the generator and every
// sampler are pinned to exact, well-known algorithms:
//
//   * xoshiro256++ for the raw 64-bit stream, seeded through splitmix64;
//   * 53-bit mantissa scaling for uniforms (strictly inside (0,1));
//   * Box-Muller for normals;
//   * Marsaglia-Tsang squeeze for Gamma variates;
//   * CDF inversion by sequential search for Poisson counts
//     (one uniform per variate, exact for the mean range used here);
//   * Fisher-Yates with rejection-sampled bounded integers for shuffles.

#include <cmath>
#include <cstdint>
#include <limits>
#include <stdexcept>
#include <vector>

namespace poismix {

// splitmix64 step: advances `x` and returns the next output.  Used to expand
// seeds into generator state and to mix stream indices.
inline std::uint64_t splitmix64_next(std::uint64_t& x) noexcept {
  x += 0x9e3779b97f4a7c15ULL;
  std::uint64_t z = x;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

class rng {
 public:
  explicit rng(std::uint64_t seed) noexcept {
    std::uint64_t x = seed;
    for (auto& word : state_) word = splitmix64_next(x);
  }

  // Derives an independent stream from (seed, a, b).  Simulation rounds and
  // permutation replicates each get their own stream keyed by their index,
  // which makes multi-threaded runs order-independent: results are identical
  // no matter how work is scheduled.
  static rng stream(std::uint64_t seed, std::uint64_t a, std::uint64_t b = 0) noexcept {
    std::uint64_t x = seed;
    std::uint64_t h = splitmix64_next(x);
    x ^= a + 0x9e3779b97f4a7c15ULL + (h << 6) + (h >> 2);
    h = splitmix64_next(x);
    x ^= b + 0x9e3779b97f4a7c15ULL + (h << 6) + (h >> 2);
    return rng(x);
  }

  // xoshiro256++ core step.
  std::uint64_t next_u64() noexcept {
    const std::uint64_t result = rotl(state_[0] + state_[3], 23) + state_[0];
    const std::uint64_t t = state_[1] << 17;
    state_[2] ^= state_[0];
    state_[3] ^= state_[1];
    state_[1] ^= state_[2];
    state_[0] ^= state_[3];
    state_[2] ^= t;
    state_[3] = rotl(state_[3], 45);
    return result;
  }

  // Uniform on the open interval (0,1): the +0.5 offset keeps the result away
  // from both endpoints so callers may take logs without guards.
  double uniform() noexcept {
    return (static_cast<double>(next_u64() >> 11) + 0.5) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) {
    if (!(lo <= hi)) throw std::invalid_argument("rng::uniform: lo > hi");
    return lo + (hi - lo) * uniform();
  }

  // Standard normal via Box-Muller; the paired variate is cached.
  double normal() noexcept {
    if (have_cached_normal_) {
      have_cached_normal_ = false;
      return cached_normal_;
    }
    const double u1 = uniform();
    const double u2 = uniform();
    const double radius = std::sqrt(-2.0 * std::log(u1));
    const double angle = 2.0 * pi() * u2;
    cached_normal_ = radius * std::sin(angle);
    have_cached_normal_ = true;
    return radius * std::cos(angle);
  }

  // Gamma(shape, rate) via Marsaglia-Tsang.  Shapes below 1 use the boost
  // identity Gamma(a) = Gamma(a+1) * U^{1/a}.
  double gamma(double shape, double rate) {
    if (!(shape > 0.0) || !(rate > 0.0))
      throw std::invalid_argument("rng::gamma: shape and rate must be positive");
    if (shape < 1.0) {
      const double boost = std::pow(uniform(), 1.0 / shape);
      return gamma(shape + 1.0, rate) * boost;
    }
    const double d = shape - 1.0 / 3.0;
    const double c = 1.0 / std::sqrt(9.0 * d);
    for (;;) {
      double x, v;
      do {
        x = normal();
        v = 1.0 + c * x;
      } while (v <= 0.0);
      v = v * v * v;
      const double u = uniform();
      if (u < 1.0 - 0.0331 * x * x * x * x) return d * v / rate;
      if (std::log(u) < 0.5 * x * x + d * (1.0 - v + std::log(v))) return d * v / rate;
    }
  }

  // Poisson(mean) by inverting the CDF with a sequential search from zero.
  // One uniform per variate; exact (no approximation step) and fast for the
  // means that arise here (bounded by max rate * max read depth).  Means
  // large enough to underflow exp(-mean) are split into halves, using the
  // fact that independent Poisson counts add.
  std::int64_t poisson(double mean) {
    if (mean < 0.0 || !std::isfinite(mean))
      throw std::invalid_argument("rng::poisson: mean must be finite and >= 0");
    if (mean == 0.0) return 0;
    if (mean > 500.0) {
      const double half = mean / 2.0;
      return poisson(half) + poisson(mean - half);
    }
    const double u = uniform();
    double pmf = std::exp(-mean);
    double cdf = pmf;
    std::int64_t k = 0;
    const auto cap =
        static_cast<std::int64_t>(mean + 12.0 * std::sqrt(mean + 1.0) + 120.0);
    while (u > cdf && k < cap) {
      ++k;
      pmf *= mean / static_cast<double>(k);
      cdf += pmf;
    }
    return k;
  }

  // Uniform integer in [0, n) without modulo bias (rejection sampling).
  std::uint64_t bounded(std::uint64_t n) {
    if (n == 0) throw std::invalid_argument("rng::bounded: n must be positive");
    const std::uint64_t threshold = (0 - n) % n;  // 2^64 mod n
    for (;;) {
      const std::uint64_t x = next_u64();
      if (x >= threshold) return x % n;
    }
  }

  // In-place Fisher-Yates shuffle.
  template <class T>
  void shuffle(std::vector<T>& values) {
    for (std::size_t i = values.size(); i > 1; --i) {
      const auto j = static_cast<std::size_t>(bounded(i));
      std::swap(values[i - 1], values[j]);
    }
  }

  // Uniform random permutation of {0, ..., n-1}.
  std::vector<int> permutation(int n) {
    std::vector<int> order(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) order[static_cast<std::size_t>(i)] = i;
    shuffle(order);
    return order;
  }

 private:
  static constexpr double pi() noexcept { return 3.14159265358979323846; }
  static std::uint64_t rotl(std::uint64_t x, int k) noexcept {
    return (x << k) | (x >> (64 - k));
  }

  std::uint64_t state_[4];
  double cached_normal_ = 0.0;
  bool have_cached_normal_ = false;
};

}  // namespace poismix
