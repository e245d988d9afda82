// Dense linear-algebra helpers shared by every kalmanid module: error types,
// discrete Lyapunov solves, spectral radius and small matrix utilities.
#pragma once

#include <cmath>
#include <complex>
#include <stdexcept>
#include <string>

#include <Eigen/Dense>

namespace kalmanid {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

// =============================================================================
// Errors
// =============================================================================

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class DimensionMismatch : public Error {
 public:
  using Error::Error;
};

class InvalidArgument : public Error {
 public:
  using Error::Error;
};

class NonFinite : public Error {
 public:
  using Error::Error;
};

class UnstableMatrix : public Error {
 public:
  using Error::Error;
};

class NonConvergence : public Error {
 public:
  using Error::Error;
};

// =============================================================================
// Small utilities
// =============================================================================

inline Matrix symmetrize(const Matrix& M) { return 0.5 * (M + M.transpose()); }

/// Induced 2-norm (largest singular value).
inline double operator_norm(const Matrix& M) {
  if (M.size() == 0) return 0.0;
  if (M.rows() == 1 || M.cols() == 1) return M.norm();
  Eigen::JacobiSVD<Matrix> svd(M);
  return svd.singularValues()(0);
}

inline double min_eigenvalue(const Matrix& S) {
  Eigen::SelfAdjointEigenSolver<Matrix> es(symmetrize(S), Eigen::EigenvaluesOnly);
  return es.eigenvalues()(0);
}

inline bool all_finite(const Matrix& M) { return M.allFinite(); }

inline void require_square(const Matrix& M, const char* what) {
  if (M.rows() != M.cols()) {
    throw DimensionMismatch(std::string(what) + " must be square, got " +
                            std::to_string(M.rows()) + "x" +
                            std::to_string(M.cols()));
  }
}

inline void require_shape(const Matrix& M, Eigen::Index rows, Eigen::Index cols,
                          const char* what) {
  if (M.rows() != rows || M.cols() != cols) {
    throw DimensionMismatch(std::string(what) + ": expected " +
                            std::to_string(rows) + "x" + std::to_string(cols) +
                            ", got " + std::to_string(M.rows()) + "x" +
                            std::to_string(M.cols()));
  }
}

/// Column-major vec(). Gains are flattened this way everywhere.
inline Vector vec(const Matrix& M) {
  return Eigen::Map<const Vector>(M.data(), M.size());
}

inline Matrix unvec(const Vector& v, Eigen::Index rows, Eigen::Index cols) {
  return Eigen::Map<const Matrix>(v.data(), rows, cols);
}

// =============================================================================
// Spectral radius and Lyapunov equations
// =============================================================================

inline double spectral_radius(const Matrix& M) {
  require_square(M, "spectral_radius: M");
  const auto n = M.rows();
  if (n == 0) return 0.0;
  if (n == 1) return std::abs(M(0, 0));
  if (n == 2) {
    // Closed form avoids the general eigen-solver in hot loops.
    const double tr = M(0, 0) + M(1, 1);
    const double det = M(0, 0) * M(1, 1) - M(0, 1) * M(1, 0);
    const std::complex<double> disc = std::sqrt(std::complex<double>(tr * tr - 4.0 * det));
    return std::max(std::abs(0.5 * (tr + disc)), std::abs(0.5 * (tr - disc)));
  }
  Eigen::EigenSolver<Matrix> es(M, /*computeEigenvectors=*/false);
  return es.eigenvalues().cwiseAbs().maxCoeff();
}

/// Stability margin shared by the Lyapunov solvers: rho(M) must stay below
/// 1 - kStabilityMargin.
inline constexpr double kStabilityMargin = 1e-12;

/**
 * Solves the discrete Lyapunov equation P = M P M' + Q.
 *
 * Dense Kronecker formulation (I - M (x) M) vec(P) = vec(Q), intended for
 * the n <= 10 systems handled here. Q must be symmetric; the result is
 * symmetrized.
 * Throws UnstableMatrix when rho(M) >= 1 - 1e-12.
 */
inline Matrix solve_dlyap(const Matrix& M, const Matrix& Q) {
  require_square(M, "solve_dlyap: M");
  require_shape(Q, M.rows(), M.rows(), "solve_dlyap: Q");
  const auto n = M.rows();
  const double rho = spectral_radius(M);
  if (!(rho < 1.0 - kStabilityMargin)) {
    throw UnstableMatrix("solve_dlyap: spectral radius " + std::to_string(rho) +
                         " is not below 1");
  }
  if (n == 1) {
    Matrix P(1, 1);
    P(0, 0) = Q(0, 0) / (1.0 - M(0, 0) * M(0, 0));
    return P;
  }
  const auto n2 = n * n;
  Matrix K = Matrix::Identity(n2, n2);
  // (M (x) M)(i + n j, k + n l) = M(i, k) M(j, l)
  for (Eigen::Index j = 0; j < n; ++j) {
    for (Eigen::Index l = 0; l < n; ++l) {
      const double mjl = M(j, l);
      if (mjl == 0.0) continue;
      K.block(j * n, l * n, n, n) -= mjl * M;
    }
  }
  const Vector p = K.partialPivLu().solve(vec(Q));
  return symmetrize(unvec(p, n, n));
}

/// Adjoint (observability-type) equation X = M' X M + Q.
inline Matrix solve_dlyap_adjoint(const Matrix& M, const Matrix& Q) {
  return solve_dlyap(M.transpose(), Q);
}

/// Residual ||P - M P M' - Q||_F, used by tests and self-checks.
inline double dlyap_residual(const Matrix& M, const Matrix& Q, const Matrix& P) {
  return (P - M * P * M.transpose() - Q).norm();
}

/// Symmetric PSD square root via eigen-decomposition (negative eigenvalues
/// from round-off are clipped to zero).
inline Matrix psd_sqrt(const Matrix& S) {
  Eigen::SelfAdjointEigenSolver<Matrix> es(symmetrize(S));
  const Vector d = es.eigenvalues().cwiseMax(0.0).cwiseSqrt();
  return es.eigenvectors() * d.asDiagonal() * es.eigenvectors().transpose();
}

}  // namespace kalmanid
