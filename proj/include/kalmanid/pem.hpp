// Estimation objectives: finite-sample prediction-error cost with analytic
// gradient and Gauss-Newton curvature, its asymptotic limit, and the
// maximum-likelihood cost of the extended model.
#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "kalmanid/linalg.hpp"
#include "kalmanid/model.hpp"
#include "kalmanid/stability.hpp"

namespace kalmanid {

class SingularRegression : public Error {
 public:
  using Error::Error;
};

/// Everything a prediction-error evaluation needs: the plant, the known
/// state drive d_k (B u_k, plus Phi_k beta for the extended model), the
/// outputs and the weight.
struct PemProblem {
  StateSpaceModel plant;
  Sequence drive;
  Sequence y;
  Matrix W;

  std::size_t N() const { return y.empty() ? 0 : y.size() - 1; }
};

inline void validate_weight(const Matrix& W, Eigen::Index q) {
  require_shape(W, q, q, "weight W");
  if ((W - W.transpose()).cwiseAbs().maxCoeff() > 1e-12 * (1.0 + W.norm()) ||
      !(min_eigenvalue(W) > 0.0)) {
    throw InvalidArgument("weight W must be symmetric positive definite");
  }
}

inline PemProblem make_problem(const StateSpaceModel& plant, const Dataset& data, const Matrix& W) {
  validate(data, plant.p(), plant.q());
  validate_weight(W, plant.q());
  if (data.N() < 1) throw InvalidArgument("prediction-error cost needs N >= 1");
  return {plant, detail::drives(plant.B, data.u), data.y, W};
}

inline PemProblem make_problem(const StateSpaceModel& plant, const ExtendedData& ext,
                               const Vector& beta, const Matrix& W) {
  validate(ext.base, plant.p(), plant.q());
  validate_weight(W, plant.q());
  if (ext.base.N() < 1) throw InvalidArgument("prediction-error cost needs N >= 1");
  if (beta.size() > 0 && ext.Phi.size() != ext.base.y.size()) {
    throw DimensionMismatch("extended data: Phi length does not match samples");
  }
  return {plant, detail::drives(plant.B, ext.base.u, &ext.Phi, &beta), ext.base.y, W};
}

// =============================================================================
// Finite-sample cost
// =============================================================================

struct PemEval {
  double value = 0.0;
  Matrix gradient;     // n x q
  Matrix gn_hessian;   // (nq) x (nq), w.r.t. vec(L)
  Sequence residuals;  // r_0 .. r_N
};

/// V_N(L) = (1/N) sum_{k=1..N} ||y_k - C xhat_k(L)||_W^2
inline double pem_value(const Matrix& L, const PemProblem& prob) {
  require_shape(L, prob.plant.n(), prob.plant.q(), "pem_value: L");
  const auto& plant = prob.plant;
  Vector x = plant.x0;
  double sum = 0.0;
  for (std::size_t k = 0; k < prob.y.size(); ++k) {
    const Vector r = detail::residual(plant.C, x, prob.y[k]);
    if (k >= 1) sum += r.dot(prob.W * r);
    x = detail::advance(plant.A, L, x, prob.drive[k], r);
    if (!x.allFinite()) {
      throw NonFinite("pem_value: predictor diverged at k = " + std::to_string(k));
    }
  }
  if (!std::isfinite(sum)) throw NonFinite("pem_value: cost overflowed");
  return sum / static_cast<double>(prob.N());
}

/**
 * Value, gradient and Gauss-Newton Hessian of V_N by forward sensitivities.
 *
 * Column c = i + n j of S_k holds d xhat_k / d L_ij, with
 * S_{k+1} = (A - LC) S_k + [e_i r_k(j)]_c and S_0 = 0. The residual
 * Jacobian is J_k = -C S_k, so grad = (2/N) sum J_k' W r_k and
 * H = (2/N) sum J_k' W J_k.
 */
inline PemEval pem_eval(const Matrix& L, const PemProblem& prob) {
  const auto& plant = prob.plant;
  const auto n = plant.n();
  const auto q = plant.q();
  require_shape(L, n, q, "pem_eval: L");
  const auto nq = n * q;
  const Matrix M = plant.A - L * plant.C;

  PemEval out;
  out.residuals.reserve(prob.y.size());
  Vector grad = Vector::Zero(nq);
  Matrix H = Matrix::Zero(nq, nq);
  Matrix S = Matrix::Zero(n, nq);
  Matrix J(q, nq);
  Matrix WJ(q, nq);
  Vector x = plant.x0;
  double sum = 0.0;
  for (std::size_t k = 0; k < prob.y.size(); ++k) {
    Vector r = detail::residual(plant.C, x, prob.y[k]);
    if (k >= 1) {
      const Vector Wr = prob.W * r;
      sum += r.dot(Wr);
      J.noalias() = -plant.C * S;
      WJ.noalias() = prob.W * J;
      grad.noalias() += J.transpose() * Wr;
      H.noalias() += J.transpose() * WJ;
    }
    Matrix next = M * S;
    for (Eigen::Index j = 0; j < q; ++j)
      for (Eigen::Index i = 0; i < n; ++i) next(i, i + n * j) += r(j);
    S = std::move(next);
    x = detail::advance(plant.A, L, x, prob.drive[k], r);
    if (!x.allFinite() || !S.allFinite()) {
      throw NonFinite("pem_eval: predictor diverged at k = " + std::to_string(k));
    }
    out.residuals.push_back(std::move(r));
  }
  const double scale = 1.0 / static_cast<double>(prob.N());
  out.value = sum * scale;
  if (!std::isfinite(out.value)) throw NonFinite("pem_eval: cost overflowed");
  out.gradient = unvec(2.0 * scale * grad, n, q);
  out.gn_hessian = symmetrize(2.0 * scale * H);
  return out;
}

inline double pem_value(const Matrix& L, const StateSpaceModel& plant, const Dataset& data,
                        const Matrix& W) {
  return pem_value(L, make_problem(plant, data, W));
}

inline PemEval pem_eval(const Matrix& L, const StateSpaceModel& plant, const Dataset& data,
                        const Matrix& W) {
  return pem_eval(L, make_problem(plant, data, W));
}

// =============================================================================
// Asymptotic cost
// =============================================================================

struct AsymptoticEval {
  Matrix Sigma_bar;  // steady-state covariance of xhat(L) - xhat(L*)
  double V_bar = 0.0;
  Matrix grad_V_bar;
  Matrix D;          // (L - L*) S* - (A - LC) Sigma_bar C'
  Matrix Lambda_W;   // (A - LC)' Lambda_W (A - LC) + C' W C
};

/**
 * Limit objective and its gradient at a stable gain.
 *
 * Sigma_bar = M Sigma_bar M' + (L - L*) S* (L - L*)',
 * V_bar = tr(W (S* + C Sigma_bar C')), grad V_bar = 2 Lambda_W D.
 */
inline AsymptoticEval asymptotic_eval(const Matrix& L, const InnovationModel& model,
                                      const Matrix& W) {
  const auto& plant = model.plant;
  require_shape(L, plant.n(), plant.q(), "asymptotic_eval: L");
  validate_weight(W, plant.q());
  const Matrix M = plant.A - L * plant.C;
  const Matrix dL = L - model.L_star;
  AsymptoticEval out;
  out.Sigma_bar = solve_dlyap(M, symmetrize(dL * model.S_star * dL.transpose()));
  out.V_bar = (W * (model.S_star + plant.C * out.Sigma_bar * plant.C.transpose())).trace();
  out.D = dL * model.S_star - M * out.Sigma_bar * plant.C.transpose();
  out.Lambda_W = solve_dlyap_adjoint(M, symmetrize(plant.C.transpose() * W * plant.C));
  out.grad_V_bar = 2.0 * out.Lambda_W * out.D;
  return out;
}

/// Directional derivative of Sigma_bar along D: the solution of
/// X = M X M' + 2 D D'.
inline Matrix sigma_bar_direction(const Matrix& L, const InnovationModel& model,
                                  const AsymptoticEval& at) {
  const Matrix M = model.plant.A - L * model.plant.C;
  return solve_dlyap(M, symmetrize(2.0 * at.D * at.D.transpose()));
}

// =============================================================================
// Empirical uniform convergence
// =============================================================================

struct ConvergenceRow {
  std::size_t N = 0;
  double sup_value_dev = 0.0;  // seed average of sup_grid |V_N - V_bar|
  double sup_grad_dev = 0.0;   // seed average of sup_grid ||grad V_N - grad V_bar||_F
};

/**
 * For each N, the grid supremum of |V_N - V_bar| and ||grad V_N - grad V_bar||
 * averaged over `n_seeds` innovation datasets (Gaussian with covariance S*,
 * zero input). Datasets for different N are prefixes of one realization per
 * seed.
 */
inline std::vector<ConvergenceRow> empirical_uniform_convergence(
    const InnovationModel& model, const Matrix& W, const std::vector<Matrix>& grid,
    const std::vector<std::size_t>& N_list, int n_seeds, std::uint64_t base_seed) {
  if (grid.empty() || N_list.empty() || n_seeds < 1) {
    throw InvalidArgument("empirical_uniform_convergence: empty grid, N list or seeds");
  }
  std::vector<AsymptoticEval> limits;
  limits.reserve(grid.size());
  for (const auto& L : grid) limits.push_back(asymptotic_eval(L, model, W));

  std::size_t n_max = 0;
  for (auto N : N_list) n_max = std::max(n_max, N);
  std::vector<ConvergenceRow> rows(N_list.size());
  for (std::size_t i = 0; i < N_list.size(); ++i) rows[i].N = N_list[i];

  for (int s = 0; s < n_seeds; ++s) {
    const auto sim = simulate_innovation(
        model, zero_inputs(model.plant.p(), n_max + 1),
        NoiseSpec::gaussian(model.S_star, base_seed + static_cast<std::uint64_t>(s)));
    for (std::size_t i = 0; i < N_list.size(); ++i) {
      Dataset prefix;
      prefix.u.assign(sim.data.u.begin(), sim.data.u.begin() + N_list[i] + 1);
      prefix.y.assign(sim.data.y.begin(), sim.data.y.begin() + N_list[i] + 1);
      const auto prob = make_problem(model.plant, prefix, W);
      double sup_v = 0.0;
      double sup_g = 0.0;
      for (std::size_t g = 0; g < grid.size(); ++g) {
        const auto ev = pem_eval(grid[g], prob);
        sup_v = std::max(sup_v, std::abs(ev.value - limits[g].V_bar));
        sup_g = std::max(sup_g, (ev.gradient - limits[g].grad_V_bar).norm());
      }
      rows[i].sup_value_dev += sup_v / n_seeds;
      rows[i].sup_grad_dev += sup_g / n_seeds;
    }
  }
  return rows;
}

// =============================================================================
// Maximum likelihood with linear regressors
// =============================================================================

struct MleParams {
  Vector beta;
  Matrix L;
  Matrix S;
};

inline double log_det_spd(const Matrix& S) {
  Eigen::LLT<Matrix> llt(S);
  if (llt.info() != Eigen::Success) throw InvalidArgument("log_det_spd: matrix is not positive definite");
  return 2.0 * llt.matrixL().toDenseMatrix().diagonal().array().log().sum();
}

inline void validate_covariance(const Matrix& S, Eigen::Index q) {
  require_shape(S, q, q, "MLE covariance S");
  if ((S - S.transpose()).cwiseAbs().maxCoeff() > 1e-12 * (1.0 + S.norm()) ||
      !(min_eigenvalue(S) > 1e-12)) {
    throw InvalidArgument("MLE covariance S must be symmetric positive definite");
  }
}

/// (1/N) sum_{k=1..N} ||y_k - C xhat_k(theta)||^2_{S^-1} + log det S
inline double mle_value(const MleParams& theta, const StateSpaceModel& plant,
                        const ExtendedData& ext) {
  validate_covariance(theta.S, plant.q());
  const Matrix W = symmetrize(theta.S.inverse());
  return pem_value(theta.L, make_problem(plant, ext, theta.beta, W)) + log_det_spd(theta.S);
}

/// (1/N) sum_{k=1..N} r_k r_k', symmetrized, eigenvalues clamped to >= 1e-10.
inline Matrix residual_covariance(const Sequence& residuals) {
  if (residuals.size() < 2) throw InvalidArgument("residual_covariance: need N >= 1");
  const auto q = residuals.front().size();
  Matrix S = Matrix::Zero(q, q);
  for (std::size_t k = 1; k < residuals.size(); ++k) {
    S.noalias() += residuals[k] * residuals[k].transpose();
  }
  S /= static_cast<double>(residuals.size() - 1);
  Eigen::SelfAdjointEigenSolver<Matrix> es(symmetrize(S));
  const Vector d = es.eigenvalues().cwiseMax(1e-10);
  return symmetrize(es.eigenvectors() * d.asDiagonal() * es.eigenvectors().transpose());
}

struct MlePartialUpdates {
  Vector beta_update;
  Matrix S_update;
};

/**
 * Closed-form block updates at theta.
 *
 * With L fixed the predictor is affine in beta: xhat_k(beta) = xhat_k(0) +
 * Psi_k beta, Psi_{k+1} = (A - LC) Psi_k + Phi_k. The beta update is the
 * S^{-1}-weighted least-squares fit of r_k(0) by C Psi_k beta, solved with a
 * column-pivoted QR on the whitened stack. The S update is the residual
 * covariance at theta.
 */
inline MlePartialUpdates mle_partial_updates(const MleParams& theta, const StateSpaceModel& plant,
                                             const ExtendedData& ext) {
  validate_covariance(theta.S, plant.q());
  const auto n = plant.n();
  const auto q = plant.q();
  const auto nb = theta.beta.size();
  const Matrix W = symmetrize(theta.S.inverse());
  MlePartialUpdates out;

  const auto at_theta = predict_states_extended(plant, theta.beta, theta.L, ext);
  out.S_update = residual_covariance(at_theta.residuals);

  if (nb == 0) {
    out.beta_update = Vector(0);
    return out;
  }
  const auto at_zero = predict_states_extended(plant, Vector::Zero(nb), theta.L, ext);
  const std::size_t N = ext.base.N();
  // Whitening: ||v||^2_{S^-1} = ||U v||^2 with U' U = S^-1.
  const Matrix U = Eigen::LLT<Matrix>(W).matrixU();
  const Matrix M = plant.A - theta.L * plant.C;
  Matrix design(static_cast<Eigen::Index>(N) * q, nb);
  Vector target(static_cast<Eigen::Index>(N) * q);
  Matrix Psi = Matrix::Zero(n, nb);
  for (std::size_t k = 0; k <= N; ++k) {
    if (k >= 1) {
      const auto row = static_cast<Eigen::Index>(k - 1) * q;
      design.middleRows(row, q) = U * plant.C * Psi;
      target.segment(row, q) = U * at_zero.residuals[k];
    }
    Psi = M * Psi + ext.Phi[k];
  }
  Eigen::ColPivHouseholderQR<Matrix> qr(design);
  qr.setThreshold(1e-10);
  if (qr.rank() < nb) {
    throw SingularRegression("mle_partial_updates: regressors are rank deficient (rank " +
                             std::to_string(qr.rank()) + " < " + std::to_string(nb) + ")");
  }
  out.beta_update = qr.solve(target);
  return out;
}

}  // namespace kalmanid
