#include <cmath>
#include <random>

#include <gtest/gtest.h>

#include "kalmanid/linalg.hpp"
#include "oracles.hpp"

using namespace kalmanid;

TEST(SolveDlyap, ScalarGeometricSeries) {
  Matrix M(1, 1), Q(1, 1);
  M << 0.9;
  Q << 1.0;
  EXPECT_NEAR(solve_dlyap(M, Q)(0, 0), 5.2631578947, 1e-9);
}

TEST(SolveDlyap, ZeroMatrixReturnsQ) {
  Matrix Q(3, 3);
  Q << 2, 1, 0, 1, 3, 1, 0, 1, 4;
  const Matrix P = solve_dlyap(Matrix::Zero(3, 3), Q);
  EXPECT_LE((P - Q).norm(), 1e-14);
}

TEST(SolveDlyap, AgreesWithSeriesOnRandomStable3x3) {
  std::mt19937_64 rng(7);
  for (int trial = 0; trial < 20; ++trial) {
    const Matrix M = oracle::random_stable(3, 0.8, rng);
    const Matrix G = oracle::random_matrix(3, 3, rng);
    const Matrix Q = G * G.transpose();
    const Matrix P = solve_dlyap(M, Q);
    EXPECT_LE(dlyap_residual(M, Q, P), 1e-10 * std::max(1.0, P.norm()));
    EXPECT_LE((P - oracle::lyapunov_series(M, Q, 200)).norm(), 1e-8);
    EXPECT_EQ(P, P.transpose());
  }
}

TEST(SolveDlyap, NilpotentHandledByLinearSolve) {
  Matrix M(2, 2);
  M << 0, 1, 0, 0;
  const Matrix P = solve_dlyap(M, Matrix::Identity(2, 2));
  // P = I + M M'
  Matrix expected(2, 2);
  expected << 2, 0, 0, 1;
  EXPECT_LE((P - expected).norm(), 1e-14);
}

TEST(SolveDlyap, UnstableThrows) {
  Matrix M(2, 2);
  M << 1.0, 0.0, 0.0, 0.5;
  EXPECT_THROW(solve_dlyap(M, Matrix::Identity(2, 2)), UnstableMatrix);
  M(0, 0) = 1.0 - 1e-13;
  EXPECT_THROW(solve_dlyap(M, Matrix::Identity(2, 2)), UnstableMatrix);
}

TEST(SolveDlyap, DimensionMismatchThrows) {
  EXPECT_THROW(solve_dlyap(Matrix::Zero(2, 3), Matrix::Identity(2, 2)), DimensionMismatch);
  EXPECT_THROW(solve_dlyap(Matrix::Zero(2, 2), Matrix::Identity(3, 3)), DimensionMismatch);
}

TEST(SpectralRadius, Diagonal) {
  Matrix M = Matrix::Zero(2, 2);
  M(0, 0) = 0.5;
  M(1, 1) = -0.9;
  EXPECT_NEAR(spectral_radius(M), 0.9, 1e-12);
}

TEST(SpectralRadius, Nilpotent) {
  Matrix M(2, 2);
  M << 0, 1, 0, 0;
  EXPECT_NEAR(spectral_radius(M), 0.0, 1e-12);
}

TEST(SpectralRadius, ScaledRotation) {
  for (double theta : {0.1, 1.0, 2.5}) {
    for (double r : {0.3, 0.99, 1.7}) {
      Matrix M(2, 2);
      M << std::cos(theta), -std::sin(theta), std::sin(theta), std::cos(theta);
      M *= r;
      EXPECT_NEAR(spectral_radius(M), r, 1e-10);
      // General path (n > 2) through a block-diagonal embedding.
      Matrix big = Matrix::Zero(3, 3);
      big.topLeftCorner(2, 2) = M;
      big(2, 2) = 0.1;
      EXPECT_NEAR(spectral_radius(big), r, 1e-10);
    }
  }
}

TEST(Linalg, OperatorNormAndVec) {
  Matrix M(2, 2);
  M << 3, 0, 0, -4;
  EXPECT_NEAR(operator_norm(M), 4.0, 1e-12);
  Matrix L(2, 3);
  L << 1, 2, 3, 4, 5, 6;
  const Vector v = vec(L);
  EXPECT_EQ(v(1), 4.0);  // column-major
  EXPECT_EQ(unvec(v, 2, 3), L);
}
