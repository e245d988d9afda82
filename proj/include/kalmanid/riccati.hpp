// Steady-state Kalman predictor from physical noise covariances.
#pragma once

#include <cmath>
#include <limits>
#include <string>
#include <utility>

#include "kalmanid/linalg.hpp"
#include "kalmanid/model.hpp"

namespace kalmanid {

struct DareSolution {
  Matrix Sigma;   // steady-state one-step prediction error covariance
  Matrix L_star;  // A Sigma C' S*^{-1}
  Matrix S_star;  // C Sigma C' + R
  int iterations = 0;
};

struct DareOptions {
  double tol = 1e-13;
  // Accept a stalled iteration only once steps are already this small.
  double stall_tol = 1e-11;
  int max_iterations = 1000000;
};

/// Right-hand side of the filter Riccati recursion at Sigma.
inline Matrix riccati_map(const Matrix& A, const Matrix& C, const Matrix& Q, const Matrix& R,
                          const Matrix& Sigma) {
  const Matrix S = C * Sigma * C.transpose() + R;
  const Matrix ASCt = A * Sigma * C.transpose();
  return symmetrize(A * Sigma * A.transpose() + Q - ASCt * S.ldlt().solve(ASCt.transpose()));
}

/// ||Sigma - riccati_map(Sigma)||_F / max(1, ||Sigma||_F)
inline double dare_residual(const Matrix& A, const Matrix& C, const Matrix& Q, const Matrix& R,
                            const Matrix& Sigma) {
  return (Sigma - riccati_map(A, C, Q, R, Sigma)).norm() / std::max(1.0, Sigma.norm());
}

/**
 * Solves the filter DARE by fixed-point iteration of the Riccati recursion
 * from Sigma_0 = Q, stopping once successive iterates agree to
 * tol * max(1, ||Sigma||).
 *
 * Once the step size reaches the round-off floor it can stop shrinking
 * before the 1e-13 target; the iteration then stops at the first step that
 * fails to decrease, provided the step is already below stall_tol.
 */
inline DareSolution solve_dare(const Matrix& A, const Matrix& C, const Matrix& Q, const Matrix& R,
                               const DareOptions& opts = {}) {
  require_square(A, "solve_dare: A");
  const auto n = A.rows();
  require_shape(Q, n, n, "solve_dare: Q");
  if (C.cols() != n) throw DimensionMismatch("solve_dare: C must have n columns");
  require_shape(R, C.rows(), C.rows(), "solve_dare: R");
  if (!(min_eigenvalue(R) > 0.0)) throw InvalidArgument("solve_dare: R must be positive definite");
  if (min_eigenvalue(Q) < -1e-12 * (1.0 + Q.norm())) {
    throw InvalidArgument("solve_dare: Q must be positive semi-definite");
  }

  Matrix Sigma = symmetrize(Q);
  double prev_step = std::numeric_limits<double>::infinity();
  DareSolution out;
  bool converged = false;
  for (int it = 1; it <= opts.max_iterations; ++it) {
    Matrix next = riccati_map(A, C, Q, R, Sigma);
    if (!next.allFinite()) throw NonConvergence("solve_dare: iteration diverged");
    const double step = (next - Sigma).norm();
    const double scale = std::max(1.0, Sigma.norm());
    Sigma = std::move(next);
    out.iterations = it;
    if (step <= opts.tol * scale) {
      converged = true;
      break;
    }
    if (step >= prev_step && step <= opts.stall_tol * scale) {
      converged = true;
      break;
    }
    prev_step = step;
  }
  if (!converged) {
    throw NonConvergence("solve_dare: no convergence after " +
                         std::to_string(opts.max_iterations) + " iterations");
  }

  out.Sigma = Sigma;
  out.S_star = symmetrize(C * Sigma * C.transpose() + R);
  Eigen::LDLT<Matrix> ldlt(out.S_star);
  if (ldlt.info() != Eigen::Success || !(min_eigenvalue(out.S_star) > 0.0)) {
    throw InvalidArgument("solve_dare: innovation covariance is singular");
  }
  out.L_star = ldlt.solve(C * Sigma * A.transpose()).transpose();
  return out;
}

/// Steady-state gain of the predictor for covariances (Q, R). Used to draw
/// random stabilizing gains.
inline Matrix dare_gain(const Matrix& A, const Matrix& C, const Matrix& Q, const Matrix& R) {
  return solve_dare(A, C, Q, R).L_star;
}

/// Converts a physical model (process covariance Q_proc, measurement
/// covariance R) into innovation form.
inline InnovationModel to_innovation_form(const StateSpaceModel& plant, const Matrix& Q_proc,
                                          const Matrix& R) {
  validate(plant);
  const auto sol = solve_dare(plant.A, plant.C, Q_proc, R);
  InnovationModel m{plant, sol.L_star, sol.S_star};
  if (!(spectral_radius(plant.A - sol.L_star * plant.C) < 1.0)) {
    throw NonConvergence("to_innovation_form: DARE gain is not stabilizing");
  }
  return m;
}

}  // namespace kalmanid
