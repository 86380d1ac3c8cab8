#include "dprune/linalg.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

namespace dprune {

MatrixD cholesky_lower(const MatrixD& m) {
  if (m.rows() != m.cols()) throw std::invalid_argument("cholesky: matrix must be square");
  const Eigen::Index n = m.rows();
  MatrixD l = MatrixD::Zero(n, n);
  for (Eigen::Index j = 0; j < n; ++j) {
    double diag = m(j, j);
    for (Eigen::Index k = 0; k < j; ++k) diag -= l(j, k) * l(j, k);
    if (!(diag > 0.0)) throw NotPositiveDefinite(static_cast<int>(j), diag);
    const double ljj = std::sqrt(diag);
    l(j, j) = ljj;
    for (Eigen::Index i = j + 1; i < n; ++i) {
      double v = m(i, j);
      for (Eigen::Index k = 0; k < j; ++k) v -= l(i, k) * l(j, k);
      l(i, j) = v / ljj;
    }
  }
  return l;
}

MatrixD solve_lower(const MatrixD& lower, const MatrixD& rhs) {
  const Eigen::Index n = lower.rows();
  MatrixD x = rhs;
  for (Eigen::Index c = 0; c < x.cols(); ++c) {
    for (Eigen::Index i = 0; i < n; ++i) {
      double v = x(i, c);
      for (Eigen::Index k = 0; k < i; ++k) v -= lower(i, k) * x(k, c);
      x(i, c) = v / lower(i, i);
    }
  }
  return x;
}

MatrixD solve_lower_transpose(const MatrixD& lower, const MatrixD& rhs) {
  const Eigen::Index n = lower.rows();
  MatrixD x = rhs;
  for (Eigen::Index c = 0; c < x.cols(); ++c) {
    for (Eigen::Index i = n - 1; i >= 0; --i) {
      double v = x(i, c);
      for (Eigen::Index k = i + 1; k < n; ++k) v -= lower(k, i) * x(k, c);
      x(i, c) = v / lower(i, i);
    }
  }
  return x;
}

namespace {

double off_diagonal_norm(const MatrixD& a) {
  double s = 0.0;
  for (Eigen::Index i = 0; i < a.rows(); ++i)
    for (Eigen::Index j = 0; j < a.cols(); ++j)
      if (i != j) s += a(i, j) * a(i, j);
  return std::sqrt(s);
}

}  // namespace

EigenSolution sym_eigh(const MatrixD& m, int max_sweeps) {
  if (m.rows() != m.cols()) throw std::invalid_argument("sym_eigh: matrix must be square");
  const Eigen::Index n = m.rows();
  MatrixD a = 0.5 * (m + m.transpose());
  MatrixD v = MatrixD::Identity(n, n);
  const double tol = 1e-10 * a.norm();

  double off = off_diagonal_norm(a);
  int sweep = 0;
  while (off > tol) {
    if (sweep++ >= max_sweeps) throw EigenNotConverged(off);
    for (Eigen::Index p = 0; p < n - 1; ++p) {
      for (Eigen::Index q = p + 1; q < n; ++q) {
        const double apq = a(p, q);
        if (apq == 0.0) continue;
        const double theta = (a(q, q) - a(p, p)) / (2.0 * apq);
        const double t = (theta >= 0.0 ? 1.0 : -1.0) / (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0);
        const double s = t * c;
        for (Eigen::Index k = 0; k < n; ++k) {
          const double akp = a(k, p), akq = a(k, q);
          a(k, p) = c * akp - s * akq;
          a(k, q) = s * akp + c * akq;
        }
        for (Eigen::Index k = 0; k < n; ++k) {
          const double apk = a(p, k), aqk = a(q, k);
          a(p, k) = c * apk - s * aqk;
          a(q, k) = s * apk + c * aqk;
        }
        a(p, q) = 0.0;
        a(q, p) = 0.0;
        for (Eigen::Index k = 0; k < n; ++k) {
          const double vkp = v(k, p), vkq = v(k, q);
          v(k, p) = c * vkp - s * vkq;
          v(k, q) = s * vkp + c * vkq;
        }
      }
    }
    off = off_diagonal_norm(a);
  }

  std::vector<Eigen::Index> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](Eigen::Index x, Eigen::Index y) { return a(x, x) > a(y, y); });

  EigenSolution sol{VectorD(n), MatrixD(n, n)};
  for (Eigen::Index k = 0; k < n; ++k) {
    sol.values(k) = a(order[k], order[k]);
    Eigen::VectorXd col = v.col(order[k]);
    Eigen::Index big = 0;
    col.cwiseAbs().maxCoeff(&big);
    if (col(big) < 0.0) col = -col;
    sol.vectors.col(k) = col;
  }
  return sol;
}

}  // namespace dprune
