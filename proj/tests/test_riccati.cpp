#include <cmath>
#include <random>

#include <gtest/gtest.h>

#include "kalmanid/riccati.hpp"
#include "oracles.hpp"

using namespace kalmanid;

namespace {

Matrix scalar(double v) { return Matrix::Constant(1, 1, v); }

}  // namespace

TEST(SolveDare, ZeroDynamics) {
  const auto sol = solve_dare(scalar(0.0), scalar(1.0), scalar(2.0), scalar(3.0));
  EXPECT_NEAR(sol.Sigma(0, 0), 2.0, 1e-14);
  EXPECT_NEAR(sol.L_star(0, 0), 0.0, 1e-14);
  EXPECT_NEAR(sol.S_star(0, 0), 5.0, 1e-14);
}

TEST(SolveDare, RandomWalkGivesGoldenRatio) {
  const auto sol = solve_dare(scalar(1.0), scalar(1.0), scalar(1.0), scalar(1.0));
  const double phi = (1.0 + std::sqrt(5.0)) / 2.0;
  EXPECT_NEAR(sol.Sigma(0, 0), 1.6180340, 1e-6);
  EXPECT_NEAR(sol.Sigma(0, 0), phi, 1e-12);
  EXPECT_NEAR(sol.L_star(0, 0), phi / (phi + 1.0), 1e-12);
}

TEST(SolveDare, TwoStateParticle) {
  const auto phys = build_two_state(0.1, 0.1);
  const Matrix Q = 100.0 * phys.G * phys.G.transpose();
  const Matrix R = scalar(1.0);
  const auto sol = solve_dare(phys.plant.A, phys.plant.C, Q, R);
  EXPECT_LE(dare_residual(phys.plant.A, phys.plant.C, Q, R, sol.Sigma), 1e-9);
  EXPECT_LT(spectral_radius(phys.plant.A - sol.L_star * phys.plant.C), 1.0);
  EXPECT_GT(min_eigenvalue(sol.Sigma), 0.0);
  // Independent check of the gain formula and S*.
  const Matrix S = phys.plant.C * sol.Sigma * phys.plant.C.transpose() + R;
  const Matrix L = phys.plant.A * sol.Sigma * phys.plant.C.transpose() * S.inverse();
  EXPECT_LE((S - sol.S_star).norm(), 1e-12);
  EXPECT_LE((L - sol.L_star).norm(), 1e-12);
}

TEST(SolveDare, ThreeStateParticle) {
  const auto phys = build_three_state(0.1, 0.1, 0.9);
  Matrix R(2, 2);
  R << 1, 0, 0, 2;
  const Matrix Q = phys.G * phys.G.transpose();
  const auto sol = solve_dare(phys.plant.A, phys.plant.C, Q, R);
  EXPECT_LE(dare_residual(phys.plant.A, phys.plant.C, Q, R, sol.Sigma), 1e-9);
  EXPECT_LT(spectral_radius(phys.plant.A - sol.L_star * phys.plant.C), 1.0);
}

TEST(SolveDare, NoProcessNoiseGivesZeroGain) {
  Matrix A(2, 2);
  A << 0.5, 0.2, 0.0, 0.3;
  Matrix C(1, 2);
  C << 1.0, 0.0;
  const auto sol = solve_dare(A, C, Matrix::Zero(2, 2), scalar(0.7));
  EXPECT_LE(sol.L_star.norm(), 1e-14);
  EXPECT_NEAR(sol.S_star(0, 0), 0.7, 1e-14);
}

TEST(SolveDare, RandomSystemsSatisfyEquation) {
  std::mt19937_64 rng(19);
  for (int trial = 0; trial < 10; ++trial) {
    const Matrix A = oracle::random_stable(3, 1.1, rng);
    const Matrix C = oracle::random_matrix(2, 3, rng);
    const Matrix G = oracle::random_matrix(3, 3, rng);
    const Matrix H = oracle::random_matrix(2, 2, rng);
    const Matrix Q = G * G.transpose();
    const Matrix R = H * H.transpose() + 0.1 * Matrix::Identity(2, 2);
    const auto sol = solve_dare(A, C, Q, R);
    EXPECT_LE(dare_residual(A, C, Q, R, sol.Sigma), 1e-9);
    EXPECT_LT(spectral_radius(A - sol.L_star * C), 1.0);
  }
}

TEST(SolveDare, InvalidCovariances) {
  EXPECT_THROW(solve_dare(scalar(0.5), scalar(1.0), scalar(1.0), scalar(0.0)), InvalidArgument);
  EXPECT_THROW(solve_dare(scalar(0.5), scalar(1.0), scalar(-1.0), scalar(1.0)), InvalidArgument);
  EXPECT_THROW(solve_dare(scalar(0.5), Matrix::Ones(1, 2), scalar(1.0), scalar(1.0)),
               DimensionMismatch);
}

TEST(ToInnovationForm, ResidualsAreWhiteWithCovarianceS) {
  const auto phys = build_three_state(0.1, 0.1, 0.9);
  Matrix R(2, 2);
  R << 1, 0, 0, 2;
  const auto model = to_innovation_form(phys.plant, phys.G * phys.G.transpose(), R);
  const std::size_t N = 100000;
  const auto d = simulate_physical(phys.plant, phys.G, NoiseSpec::gaussian(scalar(1.0), 31),
                                   NoiseSpec::gaussian(R, 32), zero_inputs(1, N + 1));
  const auto pred = predict_states(phys.plant, model.L_star, d);
  // Skip the transient from the zero initial estimate.
  const std::size_t burn = 1000;
  Matrix c0 = Matrix::Zero(2, 2), c1 = Matrix::Zero(2, 2);
  for (std::size_t k = burn; k <= N; ++k) {
    c0 += pred.residuals[k] * pred.residuals[k].transpose();
    c1 += pred.residuals[k] * pred.residuals[k - 1].transpose();
  }
  const double count = static_cast<double>(N - burn + 1);
  c0 /= count;
  c1 /= count;
  EXPECT_LE(operator_norm(c0 - model.S_star), 0.05 * operator_norm(model.S_star));
  // Lag-one correlations within a few standard errors of zero.
  for (int i = 0; i < 2; ++i) {
    for (int j = 0; j < 2; ++j) {
      const double rho = c1(i, j) / std::sqrt(c0(i, i) * c0(j, j));
      EXPECT_LE(std::abs(rho), 5.0 / std::sqrt(count)) << i << "," << j;
    }
  }
}
