#pragma once

#include <Eigen/Core>
#include <stdexcept>
#include <string>

#include "dprune/tensor.hpp"

namespace dprune {

using MatrixD = Eigen::MatrixXd;
using VectorD = Eigen::VectorXd;

// Eigen-decomposition with eigenvalues sorted descending; column k of
// `vectors` belongs to `values[k]`.
struct EigenSolution {
  VectorD values;
  MatrixD vectors;
};

class NotPositiveDefinite : public std::runtime_error {
 public:
  NotPositiveDefinite(int pivot, double value)
      : std::runtime_error("cholesky: matrix is not positive definite (pivot " + std::to_string(pivot) +
                           " = " + std::to_string(value) + ")"),
        pivot_(pivot) {}
  int pivot() const { return pivot_; }

 private:
  int pivot_;
};

class EigenNotConverged : public std::runtime_error {
 public:
  explicit EigenNotConverged(double residual)
      : std::runtime_error("sym_eigh: Jacobi sweeps did not converge (off-diagonal norm " +
                           std::to_string(residual) + ")"),
        residual_(residual) {}
  double residual() const { return residual_; }

 private:
  double residual_;
};

// Lower-triangular L with L * L^T = m. Only the lower triangle of m is read.
MatrixD cholesky_lower(const MatrixD& m);

// Full spectrum of the symmetric part of m by cyclic Jacobi rotations.
// Converged when the off-diagonal Frobenius norm drops to 1e-10 * ||m||_F.
EigenSolution sym_eigh(const MatrixD& m, int max_sweeps = 100);

// Solves L * X = B for lower-triangular L.
MatrixD solve_lower(const MatrixD& lower, const MatrixD& rhs);
// Solves L^T * X = B for lower-triangular L.
MatrixD solve_lower_transpose(const MatrixD& lower, const MatrixD& rhs);

template <typename T>
MatrixD to_matrix(const BasicTensor<T>& t) {
  if (t.rank() != 2) throw std::invalid_argument("to_matrix: expected a rank-2 tensor, got " + shape_str(t.shape()));
  MatrixD m(t.dim(0), t.dim(1));
  for (int i = 0; i < t.dim(0); ++i)
    for (int j = 0; j < t.dim(1); ++j) m(i, j) = static_cast<double>(t[static_cast<std::size_t>(i) * t.dim(1) + j]);
  return m;
}

template <typename T>
BasicTensor<T> from_matrix(const MatrixD& m) {
  std::vector<T> data(static_cast<std::size_t>(m.rows()) * m.cols());
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index j = 0; j < m.cols(); ++j) data[i * m.cols() + j] = static_cast<T>(m(i, j));
  return BasicTensor<T>({static_cast<int>(m.rows()), static_cast<int>(m.cols())}, std::move(data));
}

template <typename T>
BasicTensor<T> cholesky_lower(const BasicTensor<T>& m) {
  return from_matrix<T>(cholesky_lower(to_matrix(m)));
}

template <typename T>
EigenSolution sym_eigh(const BasicTensor<T>& m) {
  return sym_eigh(to_matrix(m));
}

}  // namespace dprune
