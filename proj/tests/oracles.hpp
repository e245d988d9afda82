// Reference computations used only by the tests. None of these go through
// the library routine they are compared against.
#pragma once

#include <cstdint>
#include <functional>
#include <random>
#include <vector>

#include <Eigen/Dense>

namespace kalmanid::oracle {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

/// sum_{i=0}^{terms-1} M^i Q M'^i
inline Matrix lyapunov_series(const Matrix& M, const Matrix& Q, int terms) {
  Matrix P = Matrix::Zero(Q.rows(), Q.cols());
  Matrix Mi = Matrix::Identity(M.rows(), M.cols());
  for (int i = 0; i < terms; ++i) {
    P += Mi * Q * Mi.transpose();
    Mi = Mi * M;
  }
  return P;
}

/// Truncated Taylor series of exp(X).
inline Matrix expm_series(const Matrix& X, int terms = 40) {
  Matrix out = Matrix::Identity(X.rows(), X.cols());
  Matrix term = out;
  for (int k = 1; k < terms; ++k) {
    term = term * X / static_cast<double>(k);
    out += term;
  }
  return out;
}

/// Central differences of a scalar function of a matrix argument; step
/// h_ij = rel * max(1, |X_ij|).
inline Matrix central_difference(const std::function<double(const Matrix&)>& f, const Matrix& X,
                                 double rel = 1e-6) {
  Matrix G(X.rows(), X.cols());
  for (Eigen::Index j = 0; j < X.cols(); ++j) {
    for (Eigen::Index i = 0; i < X.rows(); ++i) {
      const double h = rel * std::max(1.0, std::abs(X(i, j)));
      Matrix Xp = X;
      Matrix Xm = X;
      Xp(i, j) += h;
      Xm(i, j) -= h;
      G(i, j) = (f(Xp) - f(Xm)) / (2.0 * h);
    }
  }
  return G;
}

inline double relative_error(const Matrix& got, const Matrix& ref, double floor = 1e-12) {
  return (got - ref).norm() / std::max({ref.norm(), got.norm(), floor});
}

/// Plain predictor loop written out element by element.
inline std::vector<Vector> residuals_by_hand(const Matrix& A, const Matrix& B, const Matrix& C,
                                             const Vector& x0, const Matrix& L,
                                             const std::vector<Vector>& u,
                                             const std::vector<Vector>& y,
                                             const std::vector<Matrix>* Phi = nullptr,
                                             const Vector* beta = nullptr) {
  std::vector<Vector> r;
  Vector x = x0;
  for (std::size_t k = 0; k < y.size(); ++k) {
    Vector rk = y[k];
    for (Eigen::Index i = 0; i < C.rows(); ++i)
      for (Eigen::Index j = 0; j < C.cols(); ++j) rk(i) -= C(i, j) * x(j);
    Vector next = Vector::Zero(x.size());
    for (Eigen::Index i = 0; i < A.rows(); ++i) {
      for (Eigen::Index j = 0; j < A.cols(); ++j) next(i) += A(i, j) * x(j);
      for (Eigen::Index j = 0; j < B.cols(); ++j) next(i) += B(i, j) * u[k](j);
      for (Eigen::Index j = 0; j < L.cols(); ++j) next(i) += L(i, j) * rk(j);
      if (Phi != nullptr && beta != nullptr) {
        for (Eigen::Index j = 0; j < beta->size(); ++j) next(i) += (*Phi)[k](i, j) * (*beta)(j);
      }
    }
    r.push_back(rk);
    x = next;
  }
  return r;
}

/// Random matrix with spectral radius scaled to `radius`.
inline Matrix random_stable(Eigen::Index n, double radius, std::mt19937_64& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  Matrix M(n, n);
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j < n; ++j) M(i, j) = normal(rng);
  Eigen::EigenSolver<Matrix> es(M, false);
  const double rho = es.eigenvalues().cwiseAbs().maxCoeff();
  return M * (radius / rho);
}

inline Matrix random_matrix(Eigen::Index r, Eigen::Index c, std::mt19937_64& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  Matrix M(r, c);
  for (Eigen::Index i = 0; i < r; ++i)
    for (Eigen::Index j = 0; j < c; ++j) M(i, j) = normal(rng);
  return M;
}

}  // namespace kalmanid::oracle
