// Small dense linear algebra: just enough for Gower centering and hat-matrix
// projections on study-sized matrices (tens of rows).  Row-major storage,
// cyclic Jacobi eigendecomposition, and modified Gram-Schmidt with column
// pivoting by rejection norm for rank detection.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <stdexcept>
#include <vector>

namespace poismix {

class matrix {
 public:
  matrix() = default;
  matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), a_(rows * cols, fill) {}

  static matrix identity(std::size_t n) {
    matrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
    return m;
  }

  double& operator()(std::size_t i, std::size_t j) { return a_[i * cols_ + j]; }
  double operator()(std::size_t i, std::size_t j) const { return a_[i * cols_ + j]; }

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }

  friend bool operator==(const matrix& x, const matrix& y) {
    return x.rows_ == y.rows_ && x.cols_ == y.cols_ && x.a_ == y.a_;
  }

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> a_;
};

inline matrix mat_mul(const matrix& x, const matrix& y) {
  if (x.cols() != y.rows()) throw std::invalid_argument("mat_mul: shape mismatch");
  matrix out(x.rows(), y.cols());
  for (std::size_t i = 0; i < x.rows(); ++i)
    for (std::size_t k = 0; k < x.cols(); ++k) {
      const double xik = x(i, k);
      if (xik == 0.0) continue;
      for (std::size_t j = 0; j < y.cols(); ++j) out(i, j) += xik * y(k, j);
    }
  return out;
}

inline matrix transpose(const matrix& x) {
  matrix out(x.cols(), x.rows());
  for (std::size_t i = 0; i < x.rows(); ++i)
    for (std::size_t j = 0; j < x.cols(); ++j) out(j, i) = x(i, j);
  return out;
}

inline double frobenius_norm(const matrix& x) {
  double s = 0.0;
  for (std::size_t i = 0; i < x.rows(); ++i)
    for (std::size_t j = 0; j < x.cols(); ++j) s += x(i, j) * x(i, j);
  return std::sqrt(s);
}

struct eigen_result {
  std::vector<double> values;  // ascending
  matrix vectors;              // column j pairs with values[j]
};

// Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.
// Stops when the off-diagonal Frobenius norm falls below 1e-12 times the
// matrix Frobenius norm.  Throws std::domain_error when the input is not
// symmetric to within 1e-10 (relative to the largest entry for matrices
// larger than unit scale).
inline eigen_result sym_eigen(const matrix& m) {
  const std::size_t n = m.rows();
  if (n != m.cols()) throw std::domain_error("sym_eigen: matrix must be square");

  double max_abs = 0.0;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) max_abs = std::max(max_abs, std::abs(m(i, j)));
  const double sym_tol = 1e-10 * std::max(1.0, max_abs);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j)
      if (std::abs(m(i, j) - m(j, i)) > sym_tol)
        throw std::domain_error("sym_eigen: matrix is not symmetric");

  matrix a = m;
  // Work on the exactly symmetrized copy so round-off asymmetry cannot leak
  // into the rotations.
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) {
      const double v = 0.5 * (a(i, j) + a(j, i));
      a(i, j) = v;
      a(j, i) = v;
    }
  matrix v = matrix::identity(n);

  const double norm = frobenius_norm(a);
  const double target = 1e-12 * norm;
  if (norm > 0.0) {
    const int max_sweeps = 100;
    int sweep = 0;
    for (; sweep < max_sweeps; ++sweep) {
      double off = 0.0;
      for (std::size_t p = 0; p < n; ++p)
        for (std::size_t q = p + 1; q < n; ++q) off += 2.0 * a(p, q) * a(p, q);
      if (std::sqrt(off) < target) break;

      for (std::size_t p = 0; p + 1 < n; ++p) {
        for (std::size_t q = p + 1; q < n; ++q) {
          const double apq = a(p, q);
          if (apq == 0.0) continue;
          const double theta = (a(q, q) - a(p, p)) / (2.0 * apq);
          const double t = (theta >= 0.0 ? 1.0 : -1.0) /
                           (std::abs(theta) + std::sqrt(theta * theta + 1.0));
          const double c = 1.0 / std::sqrt(t * t + 1.0);
          const double s = t * c;

          for (std::size_t k = 0; k < n; ++k) {
            const double akp = a(k, p);
            const double akq = a(k, q);
            a(k, p) = c * akp - s * akq;
            a(k, q) = s * akp + c * akq;
          }
          for (std::size_t k = 0; k < n; ++k) {
            const double apk = a(p, k);
            const double aqk = a(q, k);
            a(p, k) = c * apk - s * aqk;
            a(q, k) = s * apk + c * aqk;
          }
          for (std::size_t k = 0; k < n; ++k) {
            const double vkp = v(k, p);
            const double vkq = v(k, q);
            v(k, p) = c * vkp - s * vkq;
            v(k, q) = s * vkp + c * vkq;
          }
        }
      }
    }
    if (sweep == max_sweeps)
      throw std::runtime_error("sym_eigen: Jacobi sweeps did not converge");
  }

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(),
            [&](std::size_t x, std::size_t y) { return a(x, x) < a(y, y); });

  eigen_result out;
  out.values.resize(n);
  out.vectors = matrix(n, n);
  for (std::size_t j = 0; j < n; ++j) {
    out.values[j] = a(order[j], order[j]);
    for (std::size_t i = 0; i < n; ++i) out.vectors(i, j) = v(i, order[j]);
  }
  return out;
}

// Orthonormal basis for the column space of z by modified Gram-Schmidt with
// one re-orthogonalization pass.  Columns whose rejection norm falls to
// rank_tol times their original norm (or that are zero) are dropped, so the
// result has exactly rank(z) columns within that tolerance.
inline matrix mgs_orthonormal(const matrix& z, double rank_tol = 1e-10) {
  const std::size_t n = z.rows();
  const std::size_t p = z.cols();
  std::vector<std::vector<double>> basis;
  basis.reserve(p);

  for (std::size_t j = 0; j < p; ++j) {
    std::vector<double> v(n);
    double norm0 = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      v[i] = z(i, j);
      norm0 += v[i] * v[i];
    }
    norm0 = std::sqrt(norm0);
    if (norm0 == 0.0) continue;

    for (int pass = 0; pass < 2; ++pass) {
      for (const auto& u : basis) {
        double dot = 0.0;
        for (std::size_t i = 0; i < n; ++i) dot += u[i] * v[i];
        for (std::size_t i = 0; i < n; ++i) v[i] -= dot * u[i];
      }
    }

    double norm = 0.0;
    for (std::size_t i = 0; i < n; ++i) norm += v[i] * v[i];
    norm = std::sqrt(norm);
    if (norm <= rank_tol * norm0) continue;
    for (std::size_t i = 0; i < n; ++i) v[i] /= norm;
    basis.push_back(std::move(v));
  }

  matrix u(n, basis.size());
  for (std::size_t j = 0; j < basis.size(); ++j)
    for (std::size_t i = 0; i < n; ++i) u(i, j) = basis[j][i];
  return u;
}

}  // namespace poismix
