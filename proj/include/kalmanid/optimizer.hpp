// Stability-constrained prediction-error minimization over the gain L:
// log-barrier interior point with damped Gauss-Newton steps, plus multi-start,
// grid-search and block-coordinate MLE drivers.
#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "kalmanid/linalg.hpp"
#include "kalmanid/model.hpp"
#include "kalmanid/parallel.hpp"
#include "kalmanid/pem.hpp"
#include "kalmanid/stability.hpp"

namespace kalmanid {

class InfeasibleStart : public Error {
 public:
  using Error::Error;
};

class EmptyFeasibleGrid : public Error {
 public:
  using Error::Error;
};

class UnsupportedDimension : public Error {
 public:
  using Error::Error;
};

struct SolveOptions {
  double alpha = 0.02;
  /// Initial barrier weight; 1e-2 * max(1, V_N(L0)) when unset.
  std::optional<double> mu_b_init;
  double mu_b_factor = 0.1;
  double mu_b_min = 1e-8;
  /// Stationarity tolerance; 1e-8 * max(1, V_N(L)) when unset.
  std::optional<double> tol_grad;
  int max_iters = 500;
  double ls_c1 = 1e-4;
  double ls_backtrack = 0.5;
  int ls_max_backtracks = 50;
  /// Levenberg damping floor.
  double reg = 1e-8;
  /// Reject steps whose closed loop has spectral radius >= 1 - this.
  double rho_margin = 1e-9;
  /// Barrier-free Gauss-Newton refinement after the last barrier level.
  bool polish = true;
  int polish_iters = 100;
  bool record_path = false;
};

inline void validate(const SolveOptions& o) {
  if (!(o.alpha > 0.0)) throw InvalidArgument("SolveOptions: alpha must be positive");
  if (!(o.mu_b_factor > 0.0 && o.mu_b_factor < 1.0)) throw InvalidArgument("SolveOptions: 0 < mu_b_factor < 1 required");
  if (!(o.mu_b_min > 0.0)) throw InvalidArgument("SolveOptions: mu_b_min must be positive");
  if (o.tol_grad && !(*o.tol_grad > 0.0)) throw InvalidArgument("SolveOptions: tol_grad must be positive");
  if (!(o.ls_backtrack > 0.0 && o.ls_backtrack < 1.0)) throw InvalidArgument("SolveOptions: 0 < ls_backtrack < 1 required");
  if (o.max_iters < 1) throw InvalidArgument("SolveOptions: max_iters must be >= 1");
}

struct IterateRecord {
  Matrix L;
  double barrier_weight = 0.0;  // 0 during the barrier-free refinement
  double barrier_value = 0.0;   // V_N - mu log(-g)
  double value = 0.0;           // V_N
  double constraint = 0.0;      // g
};

struct FitResult {
  Matrix L_hat;
  double value = 0.0;
  /// Stationarity measure: ||grad V_N|| after a successful refinement, else
  /// ||grad V_N + multiplier grad g|| at the last barrier level.
  double grad_norm = 0.0;
  double tol_grad = 0.0;
  int iterations = 0;
  std::vector<double> barrier_levels;
  bool converged = false;
  double constraint_slack = 0.0;  // g(L_hat)
  double multiplier = 0.0;        // mu_b_min / (-g) at the last barrier level
  bool polished = false;
  double polish_shift = 0.0;      // ||L_polished - L_barrier||_F
  std::string status;
  std::vector<IterateRecord> trace_path;
};

namespace detail {

struct Candidate {
  bool ok = false;
  double value = 0.0;
  double constraint = 0.0;
  double barrier_value = 0.0;
};

inline Candidate evaluate_candidate(const Matrix& L, const PemProblem& prob, double alpha,
                                    double mu, double rho_margin) {
  Candidate c;
  if (!L.allFinite()) return c;
  const Matrix M = prob.plant.A - L * prob.plant.C;
  if (!(spectral_radius(M) < 1.0 - rho_margin)) return c;
  const auto mem = membership(L, prob.plant, alpha);
  if (!(mem.value < 0.0)) return c;
  try {
    c.value = pem_value(L, prob);
  } catch (const NonFinite&) {
    return c;
  }
  c.constraint = mem.value;
  c.barrier_value = c.value - mu * std::log(-mem.value);
  c.ok = std::isfinite(c.barrier_value);
  return c;
}

/// Central-difference Hessian of g w.r.t. vec(L), symmetrized. Falls back
/// to zero when a probe leaves the stable set.
inline Matrix constraint_hessian(const Matrix& L, const StateSpaceModel& plant, double alpha) {
  const auto n = plant.n();
  const auto q = plant.q();
  const auto dim = n * q;
  Matrix H(dim, dim);
  for (Eigen::Index j = 0; j < dim; ++j) {
    const double h = 1e-6 * std::max(1.0, std::abs(L(j % n, j / n)));
    Matrix Lp = L, Lm = L;
    Lp(j % n, j / n) += h;
    Lm(j % n, j / n) -= h;
    const auto gp = membership(Lp, plant, alpha);
    const auto gm = membership(Lm, plant, alpha);
    if (gp.reason == "unstable" || gm.reason == "unstable") return Matrix::Zero(dim, dim);
    H.col(j) = vec(constraint_value_grad(Lp, plant, alpha).grad -
                   constraint_value_grad(Lm, plant, alpha).grad) /
               (2.0 * h);
  }
  return symmetrize(H);
}

inline double tolerance_for(const SolveOptions& opts, double value) {
  return opts.tol_grad ? *opts.tol_grad : 1e-8 * std::max(1.0, value);
}

struct LevelOutcome {
  Matrix L;
  double grad_norm = 0.0;
  bool met_tolerance = false;
  bool out_of_iterations = false;
};

/// Damped Gauss-Newton on V_N - mu log(-g) (mu = 0 drops the barrier but
/// keeps the feasibility filter in the line search).
inline LevelOutcome run_level(const PemProblem& prob, Matrix L, double mu, double tol_floor,
                              bool final_level, const SolveOptions& opts, int& iterations,
                              int iteration_cap, FitResult& result) {
  const auto n = prob.plant.n();
  const auto q = prob.plant.q();
  double reg = opts.reg;
  LevelOutcome out;
  for (;;) {
    const auto ev = pem_eval(L, prob);
    const auto con = constraint_value_grad(L, prob.plant, opts.alpha);
    Matrix grad = ev.gradient;
    Matrix H = ev.gn_hessian;
    if (mu > 0.0) {
      const Vector gg = vec(con.grad);
      grad += (mu / -con.value) * con.grad;
      H.noalias() += (mu / (con.value * con.value)) * gg * gg.transpose();
      H.noalias() += (mu / -con.value) * constraint_hessian(L, prob.plant, opts.alpha);
    }
    const double gnorm = grad.norm();
    const double tol = final_level ? std::max(tol_floor, tolerance_for(opts, ev.value))
                                   : std::max(tolerance_for(opts, ev.value), mu);
    out.L = L;
    out.grad_norm = gnorm;
    if (gnorm <= tol) {
      out.met_tolerance = true;
      return out;
    }
    if (iterations >= iteration_cap) {
      out.out_of_iterations = true;
      return out;
    }
    const double current = ev.value - (mu > 0.0 ? mu * std::log(-con.value) : 0.0);
    const Vector g = vec(grad);
    bool accepted = false;
    while (!accepted && reg <= 1e12) {
      Matrix Hreg = H;
      Hreg.diagonal().array() += reg;
      const Vector step = -Hreg.ldlt().solve(g);
      const double slope = g.dot(step);
      if (!step.allFinite() || !(slope < 0.0)) {
        reg *= 10.0;
        continue;
      }
      double t = 1.0;
      for (int bt = 0; bt <= opts.ls_max_backtracks; ++bt, t *= opts.ls_backtrack) {
        const Matrix cand = L + t * unvec(step, n, q);
        const auto c = evaluate_candidate(cand, prob, opts.alpha, mu, opts.rho_margin);
        if (!c.ok) continue;
        const double noise = 1e-14 * std::max(1.0, std::abs(current));
        if (c.barrier_value <= current + opts.ls_c1 * t * slope + noise &&
            c.barrier_value <= current + noise) {
          L = cand;
          accepted = true;
          if (opts.record_path) {
            result.trace_path.push_back({L, mu, c.barrier_value, c.value, c.constraint});
          }
          break;
        }
      }
      if (accepted) {
        reg = std::max(opts.reg, reg * 0.3);
      } else {
        reg *= 10.0;
      }
    }
    ++iterations;
    if (!accepted) {
      // Stalled: no descent direction survives the line search.
      return out;
    }
  }
}

}  // namespace detail

/**
 * Minimizes V_N(L) subject to L in the alpha-feasible set.
 *
 * Barrier levels mu_b_init, mu_b_init * factor, ..., mu_b_min. Each level runs
 * damped Gauss-Newton on V_N - mu log(-g) with curvature
 * H_GN + mu grad g grad g' / g^2 + reg I and an Armijo backtracking line
 * search that rejects any trial point outside {rho(A - LC) < 1 - 1e-9, g < 0}.
 * When `polish` is set, a final barrier-free refinement is attempted from the
 * last barrier iterate and kept only if it reaches the tolerance.
 */
inline FitResult minimize_pem(const PemProblem& prob, const Matrix& L0, const SolveOptions& opts) {
  validate(opts);
  require_shape(L0, prob.plant.n(), prob.plant.q(), "minimize_pem: L0");
  const auto start = membership(L0, prob.plant, opts.alpha);
  if (!start.feasible || !(start.value < 0.0)) {
    throw InfeasibleStart("minimize_pem: initial gain is not strictly feasible (" +
                          (start.reason.empty() ? std::string("boundary") : start.reason) + ")");
  }
  FitResult result;
  const double V0 = pem_value(L0, prob);
  if (opts.record_path) {
    result.trace_path.push_back({L0, 0.0, std::numeric_limits<double>::quiet_NaN(), V0, start.value});
  }
  const double mu0 = opts.mu_b_init ? *opts.mu_b_init : 1e-2 * std::max(1.0, V0);
  for (double mu = mu0; mu > opts.mu_b_min * (1.0 + 1e-12); mu *= opts.mu_b_factor) {
    result.barrier_levels.push_back(mu);
  }
  result.barrier_levels.push_back(opts.mu_b_min);

  Matrix L = L0;
  int iterations = 0;
  detail::LevelOutcome last;
  bool out_of_iterations = false;
  for (std::size_t i = 0; i < result.barrier_levels.size(); ++i) {
    const double mu = result.barrier_levels[i];
    if (opts.record_path && !result.trace_path.empty()) {
      // Re-anchor the barrier objective at the new level.
      const auto c = detail::evaluate_candidate(L, prob, opts.alpha, mu, 0.0);
      result.trace_path.push_back({L, mu, c.barrier_value, c.value, c.constraint});
    }
    last = detail::run_level(prob, L, mu, 0.0, i + 1 == result.barrier_levels.size(), opts,
                             iterations, opts.max_iters, result);
    L = last.L;
    if (last.out_of_iterations) {
      out_of_iterations = true;
      break;
    }
  }

  const auto con = constraint_value_grad(L, prob.plant, opts.alpha);
  result.L_hat = L;
  result.value = pem_value(L, prob);
  result.tol_grad = detail::tolerance_for(opts, result.value);
  result.grad_norm = last.grad_norm;
  result.constraint_slack = con.value;
  result.multiplier = opts.mu_b_min / -con.value;
  result.converged = last.met_tolerance && result.grad_norm <= result.tol_grad;
  result.status = result.converged ? "converged" : (out_of_iterations ? "max_iterations" : "stalled");

  if (opts.polish && !out_of_iterations) {
    FitResult scratch;
    int polish_iterations = 0;
    const auto pol = detail::run_level(prob, L, 0.0, 0.0, true, opts, polish_iterations,
                                       opts.polish_iters, scratch);
    if (pol.met_tolerance) {
      const double v = pem_value(pol.L, prob);
      const double tol = detail::tolerance_for(opts, v);
      if (pol.grad_norm <= tol) {
        result.polished = true;
        result.polish_shift = (pol.L - L).norm();
        result.L_hat = pol.L;
        result.value = v;
        result.tol_grad = tol;
        result.grad_norm = pol.grad_norm;
        result.constraint_slack = constraint_value_grad(pol.L, prob.plant, opts.alpha).value;
        result.converged = true;
        result.status = "converged";
        iterations += polish_iterations;
        if (opts.record_path) {
          for (auto& rec : scratch.trace_path) result.trace_path.push_back(std::move(rec));
        }
      }
    }
  }
  result.iterations = iterations;
  return result;
}

inline FitResult minimize_pem(const StateSpaceModel& plant, const Dataset& data, const Matrix& W,
                              const Matrix& L0, const SolveOptions& opts) {
  return minimize_pem(make_problem(plant, data, W), L0, opts);
}

/// ||grad V_N(L) + nu grad g(L)|| with nu = multiplier (0 for an interior
/// polished point).
inline double stationarity_residual(const PemProblem& prob, const FitResult& fit, double alpha) {
  const auto ev = pem_eval(fit.L_hat, prob);
  if (fit.polished) return ev.gradient.norm();
  const auto con = constraint_value_grad(fit.L_hat, prob.plant, alpha);
  return (ev.gradient + fit.multiplier * con.grad).norm();
}

// =============================================================================
// Grids
// =============================================================================

/// Tensor grid over vec(L): coordinate c takes counts[c] equispaced values in
/// [vec(lo)_c, vec(hi)_c]. Flat index runs with coordinate 0 fastest.
inline std::vector<Matrix> make_grid(const Matrix& lo, const Matrix& hi,
                                     const std::vector<int>& counts) {
  const auto dim = lo.size();
  if (hi.rows() != lo.rows() || hi.cols() != lo.cols() || static_cast<Eigen::Index>(counts.size()) != dim) {
    throw DimensionMismatch("make_grid: bounds and counts must agree");
  }
  std::size_t total = 1;
  for (int c : counts) {
    if (c < 1) throw InvalidArgument("make_grid: counts must be >= 1");
    total *= static_cast<std::size_t>(c);
  }
  const Vector vlo = vec(lo);
  const Vector vhi = vec(hi);
  std::vector<Matrix> grid;
  grid.reserve(total);
  std::vector<int> idx(dim, 0);
  for (std::size_t flat = 0; flat < total; ++flat) {
    Vector v(dim);
    for (Eigen::Index c = 0; c < dim; ++c) {
      const int m = counts[c];
      v(c) = m == 1 ? 0.5 * (vlo(c) + vhi(c)) : vlo(c) + (vhi(c) - vlo(c)) * idx[c] / (m - 1);
    }
    grid.push_back(unvec(v, lo.rows(), lo.cols()));
    for (Eigen::Index c = 0; c < dim; ++c) {
      if (++idx[c] < counts[c]) break;
      idx[c] = 0;
    }
  }
  return grid;
}

struct Box {
  Matrix lo;
  Matrix hi;
};

/// Bounding box of the alpha-feasible set for n q <= 2, by scanning the
/// a-priori box |L_ij| <= gain_box_bound at the given resolution. The result
/// is padded by one scan step on each side.
inline Box feasible_extent(const StateSpaceModel& plant, double alpha, int resolution = 400) {
  const auto dim = plant.n() * plant.q();
  if (dim > 2) throw UnsupportedDimension("feasible_extent: only n q <= 2 is supported");
  const double b = gain_box_bound(plant, alpha);
  const Matrix lo0 = Matrix::Constant(plant.n(), plant.q(), -b);
  const Matrix hi0 = Matrix::Constant(plant.n(), plant.q(), b);
  const auto grid = make_grid(lo0, hi0, std::vector<int>(dim, resolution));
  Vector vlo = Vector::Constant(dim, std::numeric_limits<double>::infinity());
  Vector vhi = Vector::Constant(dim, -std::numeric_limits<double>::infinity());
  for (const auto& L : grid) {
    if (!is_member(L, plant, alpha)) continue;
    const Vector v = vec(L);
    vlo = vlo.cwiseMin(v);
    vhi = vhi.cwiseMax(v);
  }
  if (!vlo.allFinite()) throw EmptyFeasibleGrid("feasible_extent: no feasible scan point");
  const double step = 2.0 * b / (resolution - 1);
  vlo.array() -= step;
  vhi.array() += step;
  return {unvec(vlo, plant.n(), plant.q()), unvec(vhi, plant.n(), plant.q())};
}

struct GridResult {
  std::size_t best_index = 0;
  Matrix best;
  std::vector<double> values;  // +infinity where skipped
};

/**
 * Evaluates V_N at every stable grid point (or every member of the alpha set
 * when `alpha` is given); the rest get +infinity. Ties go to the lowest flat
 * index.
 */
inline GridResult grid_search(const PemProblem& prob, const std::vector<Matrix>& grid,
                              std::optional<double> alpha = std::nullopt, unsigned threads = 1) {
  if (grid.empty()) throw InvalidArgument("grid_search: empty grid");
  GridResult out;
  out.values.assign(grid.size(), std::numeric_limits<double>::infinity());
  parallel_for(grid.size(), threads, [&](std::size_t i) {
    const auto& L = grid[i];
    const bool admissible = alpha ? is_member(L, prob.plant, *alpha)
                                  : spectral_radius(prob.plant.A - L * prob.plant.C) < 1.0;
    if (!admissible) return;
    try {
      out.values[i] = pem_value(L, prob);
    } catch (const NonFinite&) {
    }
  });
  double best = std::numeric_limits<double>::infinity();
  bool found = false;
  for (std::size_t i = 0; i < grid.size(); ++i) {
    if (out.values[i] < best) {
      best = out.values[i];
      out.best_index = i;
      found = true;
    }
  }
  if (!found) throw EmptyFeasibleGrid("grid_search: no stable grid point");
  out.best = grid[out.best_index];
  return out;
}

inline GridResult grid_search(const StateSpaceModel& plant, const Dataset& data, const Matrix& W,
                              const std::vector<Matrix>& grid,
                              std::optional<double> alpha = std::nullopt) {
  return grid_search(make_problem(plant, data, W), grid, alpha);
}

// =============================================================================
// Multi-start
// =============================================================================

enum class StartSampler { Dare, Box };

struct StartOutcome {
  Matrix L0;
  std::optional<FitResult> fit;
  std::string error;
};

struct Cluster {
  Matrix representative;
  std::vector<std::size_t> members;

  std::size_t count() const { return members.size(); }
};

struct MultiStartResult {
  std::vector<StartOutcome> starts;
  std::vector<Cluster> clusters;
};

struct MultiStartOptions {
  StartSampler sampler = StartSampler::Dare;
  /// Cluster radius relative to (1 + ||L_rep||).
  double cluster_tol = 1e-3;
  unsigned threads = 1;
};

/// Greedy clustering in start order: a solution joins the first cluster
/// whose representative lies within tol (1 + ||rep||), else opens a new one.
inline std::vector<Cluster> cluster_solutions(const std::vector<StartOutcome>& starts, double tol) {
  std::vector<Cluster> clusters;
  for (std::size_t i = 0; i < starts.size(); ++i) {
    if (!starts[i].fit) continue;
    const Matrix& L = starts[i].fit->L_hat;
    bool placed = false;
    for (auto& c : clusters) {
      if ((L - c.representative).norm() <= tol * (1.0 + c.representative.norm())) {
        c.members.push_back(i);
        placed = true;
        break;
      }
    }
    if (!placed) clusters.push_back({L, {i}});
  }
  return clusters;
}

/// Draws the i-th start gain for multi_start.
inline Matrix draw_start(const StateSpaceModel& plant, double alpha, std::uint64_t seed,
                         std::size_t index, StartSampler sampler) {
  const auto s = derive_seed(seed, index);
  if (sampler == StartSampler::Dare) return sample_feasible_gain(plant, alpha, s);
  const double b = gain_box_bound(plant, alpha);
  return sample_feasible_gain_box(plant, alpha, Matrix::Constant(plant.n(), plant.q(), -b),
                                  Matrix::Constant(plant.n(), plant.q(), b), s);
}

/// Runs minimize_pem from n_starts sampled feasible gains. A failing start
/// is recorded with its error message.
inline MultiStartResult multi_start(const PemProblem& prob, int n_starts, std::uint64_t seed,
                                    const SolveOptions& opts, const MultiStartOptions& ms = {}) {
  if (n_starts < 1) throw InvalidArgument("multi_start: n_starts must be >= 1");
  MultiStartResult out;
  out.starts.resize(static_cast<std::size_t>(n_starts));
  parallel_for(out.starts.size(), ms.threads, [&](std::size_t i) {
    auto& slot = out.starts[i];
    try {
      slot.L0 = draw_start(prob.plant, opts.alpha, seed, i, ms.sampler);
      slot.fit = minimize_pem(prob, slot.L0, opts);
    } catch (const Error& e) {
      slot.error = e.what();
    }
  });
  out.clusters = cluster_solutions(out.starts, ms.cluster_tol);
  return out;
}

inline MultiStartResult multi_start(const StateSpaceModel& plant, const Dataset& data,
                                    const Matrix& W, double alpha, int n_starts,
                                    std::uint64_t seed, SolveOptions opts,
                                    const MultiStartOptions& ms = {}) {
  opts.alpha = alpha;
  return multi_start(make_problem(plant, data, W), n_starts, seed, opts, ms);
}

// =============================================================================
// Maximum likelihood: block-coordinate descent over (beta, L, S)
// =============================================================================

struct MleOptions {
  bool update_beta = true;
  bool update_S = true;
  double tol = 1e-8;
  int max_sweeps = 100;
};

struct MleFit {
  MleParams theta;
  std::vector<double> objective;  // J before the first sweep, then after each
  int sweeps = 0;
  bool converged = false;
  FitResult last_gain_fit;
};

/**
 * Alternates (1) the closed-form beta update, (2) a constrained gain fit with
 * W = S^{-1} started at the current L (kept only if it lowers the cost), and
 * (3) the closed-form S update, until the parameter change drops below tol.
 */
inline MleFit minimize_mle(const StateSpaceModel& plant, const ExtendedData& ext, double alpha,
                           const MleParams& theta0, SolveOptions opts, const MleOptions& mle = {}) {
  opts.alpha = alpha;
  validate_covariance(theta0.S, plant.q());
  if (theta0.beta.size() != ext.n_beta() && theta0.beta.size() > 0) {
    throw DimensionMismatch("minimize_mle: beta dimension does not match Phi");
  }
  if (!membership(theta0.L, plant, alpha).feasible) {
    throw InfeasibleStart("minimize_mle: initial gain is not feasible");
  }
  MleFit out;
  out.theta = theta0;
  out.objective.push_back(mle_value(out.theta, plant, ext));
  for (int sweep = 1; sweep <= mle.max_sweeps; ++sweep) {
    const MleParams before = out.theta;
    if (mle.update_beta && out.theta.beta.size() > 0) {
      out.theta.beta = mle_partial_updates(out.theta, plant, ext).beta_update;
    }
    {
      const Matrix W = symmetrize(out.theta.S.inverse());
      const auto prob = make_problem(plant, ext, out.theta.beta, W);
      const double current = pem_value(out.theta.L, prob);
      auto fit = minimize_pem(prob, out.theta.L, opts);
      if (fit.value <= current) out.theta.L = fit.L_hat;
      out.last_gain_fit = std::move(fit);
    }
    if (mle.update_S) {
      out.theta.S = mle_partial_updates(out.theta, plant, ext).S_update;
    }
    out.objective.push_back(mle_value(out.theta, plant, ext));
    out.sweeps = sweep;
    double change = (out.theta.L - before.L).norm() + (out.theta.S - before.S).norm();
    if (out.theta.beta.size() > 0) change += (out.theta.beta - before.beta).norm();
    if (change <= mle.tol) {
      out.converged = true;
      break;
    }
  }
  return out;
}

}  // namespace kalmanid
