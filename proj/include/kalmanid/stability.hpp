// Lyapunov-certificate feasible set of stable gains:
//   P = (A - L C) P (A - L C)' + I,   alpha * trace(P - I) <= 1.
#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <random>
#include <string>
#include <utility>

#include "kalmanid/linalg.hpp"
#include "kalmanid/model.hpp"
#include "kalmanid/riccati.hpp"

namespace kalmanid {

class FeasibleSampleExhausted : public Error {
 public:
  using Error::Error;
};

/// Slack allowed on alpha * trace(P - I) - 1 <= 0.
inline constexpr double kFeasibilitySlack = 1e-12;

struct StabilityCert {
  Matrix P;
  double alpha = 0.0;
  double gamma = 0.0;
  double lambda = 0.0;
};

struct Membership {
  bool feasible = false;
  Matrix P;            // set whenever A - LC is stable
  double value = 0.0;  // alpha * trace(P - I) - 1 (infinity when unstable)
  std::string reason;  // "unstable" or "trace" when infeasible
};

inline Matrix closed_loop(const StateSpaceModel& plant, const Matrix& L) {
  return plant.A - L * plant.C;
}

inline Membership membership(const Matrix& L, const StateSpaceModel& plant, double alpha) {
  if (!(alpha > 0.0)) throw InvalidArgument("membership: alpha must be positive");
  require_shape(L, plant.n(), plant.q(), "membership: L");
  Membership out;
  const Matrix M = closed_loop(plant, L);
  if (!M.allFinite() || !(spectral_radius(M) < 1.0 - kStabilityMargin)) {
    out.value = std::numeric_limits<double>::infinity();
    out.reason = "unstable";
    return out;
  }
  const auto n = plant.n();
  out.P = solve_dlyap(M, Matrix::Identity(n, n));
  out.value = alpha * (out.P.trace() - static_cast<double>(n)) - 1.0;
  out.feasible = out.value <= kFeasibilitySlack;
  if (!out.feasible) out.reason = "trace";
  return out;
}

inline bool is_member(const Matrix& L, const StateSpaceModel& plant, double alpha) {
  return membership(L, plant, alpha).feasible;
}

struct ConstraintEval {
  double value = 0.0;  // g(L) = alpha * trace(P - I) - 1
  Matrix grad;         // dg/dL, n x q
  Matrix P;
};

/**
 * Constraint value and gradient. With M = A - LC, P = M P M' + I and the
 * adjoint Lambda = M' Lambda M + I, the gradient is
 * dg/dL = -2 alpha Lambda M P C'.
 */
inline ConstraintEval constraint_value_grad(const Matrix& L, const StateSpaceModel& plant,
                                            double alpha) {
  require_shape(L, plant.n(), plant.q(), "constraint_value_grad: L");
  const auto n = plant.n();
  const Matrix M = closed_loop(plant, L);
  const Matrix I = Matrix::Identity(n, n);
  ConstraintEval out;
  out.P = solve_dlyap(M, I);
  const Matrix Lambda = solve_dlyap_adjoint(M, I);
  out.value = alpha * (out.P.trace() - static_cast<double>(n)) - 1.0;
  out.grad = -2.0 * alpha * Lambda * M * out.P * plant.C.transpose();
  return out;
}

struct UniformBounds {
  double gamma;
  double lambda;
};

/// Constants of ||(A - LC)^i|| <= gamma lambda^i valid on the whole set.
inline UniformBounds stability_bounds(double alpha) {
  if (!(alpha > 0.0)) throw InvalidArgument("stability_bounds: alpha must be positive");
  return {std::sqrt(1.0 + 1.0 / alpha), 1.0 / std::sqrt(1.0 + alpha)};
}

inline StabilityCert certificate(const Matrix& L, const StateSpaceModel& plant, double alpha) {
  auto m = membership(L, plant, alpha);
  if (m.P.size() == 0) throw UnstableMatrix("certificate: A - LC is unstable");
  const auto b = stability_bounds(alpha);
  return {std::move(m.P), alpha, b.gamma, b.lambda};
}

/// Checks ||(A - LC)^i||_2 <= gamma lambda^i for i = 1..i_max.
inline bool verify_uniform_stability(const Matrix& L, const StateSpaceModel& plant, double gamma,
                                     double lambda, int i_max) {
  if (i_max < 1) throw InvalidArgument("verify_uniform_stability: i_max must be >= 1");
  const Matrix M = closed_loop(plant, L);
  Matrix power = M;
  double bound = gamma;
  for (int i = 1; i <= i_max; ++i) {
    bound *= lambda;
    const double norm = operator_norm(power);
    if (!std::isfinite(norm) || norm > bound * (1.0 + 1e-12)) return false;
    power = power * M;
  }
  return true;
}

// =============================================================================
// Sampling feasible gains
// =============================================================================

inline Matrix standard_normal_matrix(Eigen::Index rows, Eigen::Index cols, std::mt19937_64& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  Matrix M(rows, cols);
  for (Eigen::Index j = 0; j < cols; ++j)
    for (Eigen::Index i = 0; i < rows; ++i) M(i, j) = normal(rng);
  return M;
}

inline constexpr int kMaxSampleRetries = 1000;

/// Steady-state predictor gain for random SPD covariances Q = GG' + 1e-6 I,
/// R = HH' + 1e-6 I, redrawn until it lies in the feasible set.
inline Matrix sample_feasible_gain(const StateSpaceModel& plant, double alpha, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  const auto n = plant.n();
  const auto q = plant.q();
  for (int attempt = 0; attempt < kMaxSampleRetries; ++attempt) {
    const Matrix G = standard_normal_matrix(n, n, rng);
    const Matrix H = standard_normal_matrix(q, q, rng);
    const Matrix Q = G * G.transpose() + 1e-6 * Matrix::Identity(n, n);
    const Matrix R = H * H.transpose() + 1e-6 * Matrix::Identity(q, q);
    Matrix L;
    try {
      L = dare_gain(plant.A, plant.C, Q, R);
    } catch (const Error&) {
      continue;
    }
    if (is_member(L, plant, alpha)) return L;
  }
  throw FeasibleSampleExhausted("sample_feasible_gain: no feasible gain after " +
                                std::to_string(kMaxSampleRetries) + " draws");
}

/// Half-width of a box that contains every feasible gain entry:
/// ||L|| <= (||A|| + gamma) / sigma_min(C).
inline double gain_box_bound(const StateSpaceModel& plant, double alpha) {
  Eigen::JacobiSVD<Matrix> svd(plant.C);
  const double smin = svd.singularValues()(svd.singularValues().size() - 1);
  return (operator_norm(plant.A) + stability_bounds(alpha).gamma) / smin;
}

/// Uniform rejection sampling over the box [lo, hi] (entrywise), restricted
/// to the feasible set.
inline Matrix sample_feasible_gain_box(const StateSpaceModel& plant, double alpha, const Matrix& lo,
                                       const Matrix& hi, std::uint64_t seed,
                                       int max_draws = 1000000) {
  require_shape(lo, plant.n(), plant.q(), "sample_feasible_gain_box: lo");
  require_shape(hi, plant.n(), plant.q(), "sample_feasible_gain_box: hi");
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> uniform(0.0, 1.0);
  Matrix L(plant.n(), plant.q());
  for (int draw = 0; draw < max_draws; ++draw) {
    for (Eigen::Index j = 0; j < L.cols(); ++j)
      for (Eigen::Index i = 0; i < L.rows(); ++i)
        L(i, j) = lo(i, j) + (hi(i, j) - lo(i, j)) * uniform(rng);
    if (is_member(L, plant, alpha)) return L;
  }
  throw FeasibleSampleExhausted("sample_feasible_gain_box: no feasible gain after " +
                                std::to_string(max_draws) + " draws");
}

}  // namespace kalmanid
