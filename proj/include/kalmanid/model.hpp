// LTI plant in innovation form, data generators and the Kalman predictor
// recursion that every objective evaluation runs through.
#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "kalmanid/linalg.hpp"

namespace kalmanid {

using Sequence = std::vector<Vector>;

// =============================================================================
// Domain types
// =============================================================================

/// Known plant matrices and initial state.
struct StateSpaceModel {
  Matrix A;
  Matrix B;
  Matrix C;
  Vector x0;

  Eigen::Index n() const { return A.rows(); }
  Eigen::Index p() const { return B.cols(); }
  Eigen::Index q() const { return C.rows(); }
};

/// Plant plus the true gain and innovation covariance. Used as the data
/// generator and as ground truth.
struct InnovationModel {
  StateSpaceModel plant;
  Matrix L_star;
  Matrix S_star;
};

/// Recorded samples k = 0..N. The estimation costs skip k = 0.
struct Dataset {
  Sequence u;
  Sequence y;

  std::size_t N() const { return y.empty() ? 0 : y.size() - 1; }
};

/// Dataset plus the regressor matrices Phi_k (n x n_beta) of the extended
/// predictor.
struct ExtendedData {
  Dataset base;
  std::vector<Matrix> Phi;

  Eigen::Index n_beta() const { return Phi.empty() ? 0 : Phi.front().cols(); }
};

struct NoiseSpec {
  enum class Kind { Gaussian, Mixture, Zero };

  Kind kind = Kind::Zero;
  Matrix cov;              // Gaussian
  double p_hit = 1.0;      // Mixture
  double sigma2 = 1.0;     // Mixture
  Eigen::Index dim = 0;    // Mixture, Zero
  std::uint64_t seed = 0;

  static NoiseSpec gaussian(Matrix cov, std::uint64_t seed) {
    NoiseSpec s;
    s.kind = Kind::Gaussian;
    s.dim = cov.rows();
    s.cov = std::move(cov);
    s.seed = seed;
    return s;
  }

  /// Each component is N(0, sigma2) with probability p_hit and 0 otherwise.
  static NoiseSpec mixture(double p_hit, double sigma2, Eigen::Index dim,
                           std::uint64_t seed) {
    NoiseSpec s;
    s.kind = Kind::Mixture;
    s.p_hit = p_hit;
    s.sigma2 = sigma2;
    s.dim = dim;
    s.seed = seed;
    return s;
  }

  static NoiseSpec zero(Eigen::Index dim) {
    NoiseSpec s;
    s.kind = Kind::Zero;
    s.dim = dim;
    return s;
  }

  Eigen::Index dimension() const { return kind == Kind::Gaussian ? cov.rows() : dim; }

  /// Analytic E[w_i^2] and E[w_i^4] of a single component (Gaussian uses
  /// the diagonal entry).
  double variance(Eigen::Index i = 0) const {
    switch (kind) {
      case Kind::Gaussian: return cov(i, i);
      case Kind::Mixture: return p_hit * sigma2;
      case Kind::Zero: return 0.0;
    }
    return 0.0;
  }
  double fourth_moment(Eigen::Index i = 0) const {
    switch (kind) {
      case Kind::Gaussian: return 3.0 * cov(i, i) * cov(i, i);
      case Kind::Mixture: return 3.0 * p_hit * sigma2 * sigma2;
      case Kind::Zero: return 0.0;
    }
    return 0.0;
  }
};

// =============================================================================
// Validation
// =============================================================================

inline Matrix observability_matrix(const Matrix& A, const Matrix& C) {
  const auto n = A.rows();
  const auto q = C.rows();
  Matrix O(n * q, n);
  Matrix row = C;
  for (Eigen::Index i = 0; i < n; ++i) {
    O.middleRows(i * q, q) = row;
    row = row * A;
  }
  return O;
}

inline bool is_observable(const Matrix& A, const Matrix& C) {
  Eigen::FullPivLU<Matrix> lu(observability_matrix(A, C));
  lu.setThreshold(1e-10);
  return lu.rank() == A.rows();
}

inline void validate(const StateSpaceModel& m) {
  const auto n = m.A.rows();
  if (n < 1) throw DimensionMismatch("StateSpaceModel: n must be >= 1");
  require_square(m.A, "StateSpaceModel: A");
  if (m.B.rows() != n) throw DimensionMismatch("StateSpaceModel: B must have n rows");
  if (m.C.cols() != n || m.C.rows() < 1) {
    throw DimensionMismatch("StateSpaceModel: C must be q x n with q >= 1");
  }
  if (m.x0.size() != n) throw DimensionMismatch("StateSpaceModel: x0 must have n entries");
  if (!m.A.allFinite() || !m.B.allFinite() || !m.C.allFinite() || !m.x0.allFinite()) {
    throw NonFinite("StateSpaceModel: non-finite entry");
  }
  Eigen::FullPivLU<Matrix> lu(m.C);
  lu.setThreshold(1e-10);
  if (lu.rank() != m.C.rows()) throw InvalidArgument("StateSpaceModel: C is not full row rank");
  if (!is_observable(m.A, m.C)) throw InvalidArgument("StateSpaceModel: (A, C) is not observable");
}

inline void validate(const InnovationModel& m) {
  validate(m.plant);
  require_shape(m.L_star, m.plant.n(), m.plant.q(), "InnovationModel: L_star");
  require_shape(m.S_star, m.plant.q(), m.plant.q(), "InnovationModel: S_star");
  if ((m.S_star - m.S_star.transpose()).cwiseAbs().maxCoeff() > 1e-12 * (1.0 + m.S_star.norm()) ||
      !(min_eigenvalue(m.S_star) > 0.0)) {
    throw InvalidArgument("InnovationModel: S_star must be symmetric positive definite");
  }
  if (!(spectral_radius(m.plant.A - m.L_star * m.plant.C) < 1.0)) {
    throw InvalidArgument("InnovationModel: A - L_star C is not stable");
  }
}

inline void validate(const NoiseSpec& s) {
  switch (s.kind) {
    case NoiseSpec::Kind::Gaussian:
      require_square(s.cov, "NoiseSpec: gaussian covariance");
      if ((s.cov - s.cov.transpose()).cwiseAbs().maxCoeff() > 1e-12 * (1.0 + s.cov.norm()) ||
          min_eigenvalue(s.cov) < -1e-12 * (1.0 + s.cov.norm())) {
        throw InvalidArgument("NoiseSpec: gaussian covariance must be symmetric PSD");
      }
      break;
    case NoiseSpec::Kind::Mixture:
      if (!(s.p_hit > 0.0 && s.p_hit <= 1.0)) throw InvalidArgument("NoiseSpec: mixture needs 0 < p_hit <= 1");
      if (!(s.sigma2 > 0.0)) throw InvalidArgument("NoiseSpec: mixture needs sigma2 > 0");
      if (s.dim < 0) throw InvalidArgument("NoiseSpec: negative dimension");
      break;
    case NoiseSpec::Kind::Zero:
      if (s.dim < 0) throw InvalidArgument("NoiseSpec: negative dimension");
      break;
  }
}

inline void validate(const Dataset& d, Eigen::Index p, Eigen::Index q) {
  if (d.y.empty()) throw DimensionMismatch("Dataset: no samples");
  if (d.u.size() != d.y.size()) {
    throw DimensionMismatch("Dataset: u has " + std::to_string(d.u.size()) +
                            " samples but y has " + std::to_string(d.y.size()));
  }
  for (std::size_t k = 0; k < d.y.size(); ++k) {
    if (d.u[k].size() != p || d.y[k].size() != q) {
      throw DimensionMismatch("Dataset: sample " + std::to_string(k) + " has wrong dimension");
    }
    if (!d.u[k].allFinite() || !d.y[k].allFinite()) {
      throw NonFinite("Dataset: sample " + std::to_string(k) + " is not finite");
    }
  }
}

// =============================================================================
// Noise and input generation
// =============================================================================

/// SplitMix64 mix of (seed, stream): independent seeds for per-start and
/// per-realization generators.
inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) {
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

/// Draws `count` i.i.d. vectors from `spec`. Deterministic per seed within
/// one build.
inline Sequence sample_noise(const NoiseSpec& spec, std::size_t count) {
  validate(spec);
  const auto dim = spec.dimension();
  Sequence out(count, Vector::Zero(dim));
  if (spec.kind == NoiseSpec::Kind::Zero) return out;

  std::mt19937_64 rng(spec.seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  if (spec.kind == NoiseSpec::Kind::Gaussian) {
    const Matrix root = psd_sqrt(spec.cov);
    Vector z(dim);
    for (auto& w : out) {
      for (Eigen::Index i = 0; i < dim; ++i) z(i) = normal(rng);
      w.noalias() = root * z;
    }
    return out;
  }
  std::uniform_real_distribution<double> uniform(0.0, 1.0);
  const double sigma = std::sqrt(spec.sigma2);
  for (auto& w : out) {
    for (Eigen::Index i = 0; i < dim; ++i) {
      const double hit = uniform(rng);
      const double z = normal(rng);
      w(i) = hit < spec.p_hit ? sigma * z : 0.0;
    }
  }
  return out;
}

inline Sequence zero_inputs(Eigen::Index p, std::size_t count) {
  return Sequence(count, Vector::Zero(p));
}

inline Sequence random_inputs(Eigen::Index p, std::size_t count, std::uint64_t seed) {
  return sample_noise(NoiseSpec::gaussian(Matrix::Identity(p, p), seed), count);
}

// =============================================================================
// Predictor recursion
// =============================================================================

namespace detail {

// The generator and the predictor go through these two functions so that
// running the predictor at the generating gain reproduces the generator's
// state sequence bit for bit.
inline Vector residual(const Matrix& C, const Vector& x, const Vector& y) {
  return y - C * x;
}

inline Vector advance(const Matrix& A, const Matrix& L, const Vector& x,
                      const Vector& drive, const Vector& r) {
  Vector next = A * x;
  next += drive;
  next.noalias() += L * r;
  return next;
}

/// drive_k = B u_k (+ Phi_k beta)
inline Sequence drives(const Matrix& B, const Sequence& u,
                       const std::vector<Matrix>* Phi = nullptr,
                       const Vector* beta = nullptr) {
  Sequence d(u.size());
  for (std::size_t k = 0; k < u.size(); ++k) {
    d[k] = B * u[k];
    if (Phi != nullptr && beta != nullptr && beta->size() > 0) d[k].noalias() += (*Phi)[k] * (*beta);
  }
  return d;
}

}  // namespace detail

struct Prediction {
  Sequence xhat;       // xhat_0 .. xhat_N
  Sequence residuals;  // r_0 .. r_N
};

namespace detail {

inline Prediction predict(const StateSpaceModel& plant, const Matrix& L,
                          const Sequence& drive, const Sequence& y) {
  Prediction out;
  out.xhat.reserve(y.size());
  out.residuals.reserve(y.size());
  Vector x = plant.x0;
  for (std::size_t k = 0; k < y.size(); ++k) {
    Vector r = residual(plant.C, x, y[k]);
    if (!x.allFinite() || !r.allFinite()) {
      throw NonFinite("predictor diverged to a non-finite state at k = " + std::to_string(k));
    }
    Vector next = advance(plant.A, L, x, drive[k], r);
    out.xhat.push_back(std::move(x));
    out.residuals.push_back(std::move(r));
    x = std::move(next);
  }
  return out;
}

}  // namespace detail

/// Runs xhat_{k+1} = A xhat_k + B u_k + L (y_k - C xhat_k) from xhat_0 = x0.
/// Throws NonFinite when the recursion overflows; large finite values are
/// returned as-is.
inline Prediction predict_states(const StateSpaceModel& plant, const Matrix& L,
                                 const Dataset& data) {
  require_shape(L, plant.n(), plant.q(), "predict_states: L");
  validate(data, plant.p(), plant.q());
  return detail::predict(plant, L, detail::drives(plant.B, data.u), data.y);
}

/// Predictor with the extra linear term Phi_k beta in the state update.
inline Prediction predict_states_extended(const StateSpaceModel& plant, const Vector& beta,
                                          const Matrix& L, const ExtendedData& ext) {
  require_shape(L, plant.n(), plant.q(), "predict_states_extended: L");
  validate(ext.base, plant.p(), plant.q());
  if (beta.size() > 0) {
    if (ext.Phi.size() != ext.base.y.size()) {
      throw DimensionMismatch("predict_states_extended: Phi length does not match data");
    }
    for (const auto& Phi : ext.Phi) require_shape(Phi, plant.n(), beta.size(), "predict_states_extended: Phi_k");
  }
  return detail::predict(plant, L, detail::drives(plant.B, ext.base.u, &ext.Phi, &beta),
                         ext.base.y);
}

// =============================================================================
// Simulation
// =============================================================================

struct InnovationSimulation {
  Dataset data;
  /// Realized innovations y_k - C x_k. They differ from the raw draws by at
  /// most rounding, and are exactly what the predictor at L_star returns.
  Sequence innovations;
};

namespace detail {

inline InnovationSimulation simulate(const StateSpaceModel& plant, const Matrix& L,
                                     const Sequence& inputs, const Sequence& drive,
                                     const Sequence& draws) {
  InnovationSimulation sim;
  const auto count = inputs.size();
  sim.data.u = inputs;
  sim.data.y.reserve(count);
  sim.innovations.reserve(count);
  Vector x = plant.x0;
  for (std::size_t k = 0; k < count; ++k) {
    Vector y = plant.C * x;
    y += draws[k];
    Vector e = residual(plant.C, x, y);
    if (!y.allFinite() || !e.allFinite()) {
      throw NonFinite("simulate: non-finite sample at k = " + std::to_string(k));
    }
    x = advance(plant.A, L, x, drive[k], e);
    sim.data.y.push_back(std::move(y));
    sim.innovations.push_back(std::move(e));
  }
  return sim;
}

inline void check_inputs(const StateSpaceModel& plant, const Sequence& inputs) {
  if (inputs.empty()) throw DimensionMismatch("simulate: need at least one input sample");
  for (const auto& u : inputs) {
    if (u.size() != plant.p()) throw DimensionMismatch("simulate: input has wrong dimension");
  }
}

}  // namespace detail

/// Generates y_k = C x_k + e_k, x_{k+1} = A x_k + B u_k + L* e_k from x0.
/// N + 1 = inputs.size() samples are produced.
inline InnovationSimulation simulate_innovation(const InnovationModel& model,
                                                const Sequence& inputs,
                                                const NoiseSpec& noise) {
  const auto& plant = model.plant;
  require_shape(model.L_star, plant.n(), plant.q(), "simulate_innovation: L_star");
  detail::check_inputs(plant, inputs);
  if (noise.dimension() != plant.q()) {
    throw DimensionMismatch("simulate_innovation: noise must produce q-vectors");
  }
  const Sequence draws = sample_noise(noise, inputs.size());
  return detail::simulate(plant, model.L_star, inputs, detail::drives(plant.B, inputs), draws);
}

/// Same generator driven by caller-supplied innovation draws.
inline InnovationSimulation simulate_innovation(const InnovationModel& model,
                                                const Sequence& inputs, const Sequence& draws) {
  const auto& plant = model.plant;
  require_shape(model.L_star, plant.n(), plant.q(), "simulate_innovation: L_star");
  detail::check_inputs(plant, inputs);
  if (draws.size() != inputs.size()) throw DimensionMismatch("simulate_innovation: draws length");
  for (const auto& e : draws) {
    if (e.size() != plant.q()) throw DimensionMismatch("simulate_innovation: draws must be q-vectors");
  }
  return detail::simulate(plant, model.L_star, inputs, detail::drives(plant.B, inputs), draws);
}

/// Generator of the extended model with the regressor term Phi_k beta*.
inline InnovationSimulation simulate_extended(const InnovationModel& model, const Vector& beta,
                                              const std::vector<Matrix>& Phi,
                                              const Sequence& inputs, const NoiseSpec& noise) {
  const auto& plant = model.plant;
  detail::check_inputs(plant, inputs);
  if (Phi.size() != inputs.size()) throw DimensionMismatch("simulate_extended: Phi length");
  for (const auto& P : Phi) require_shape(P, plant.n(), beta.size(), "simulate_extended: Phi_k");
  if (noise.dimension() != plant.q()) {
    throw DimensionMismatch("simulate_extended: noise must produce q-vectors");
  }
  const Sequence draws = sample_noise(noise, inputs.size());
  return detail::simulate(plant, model.L_star, inputs,
                          detail::drives(plant.B, inputs, &Phi, &beta), draws);
}

/// Physical-noise simulation: x_{k+1} = A x_k + B u_k + G w_k,
/// y_k = C x_k + v_k.
inline Dataset simulate_physical(const StateSpaceModel& plant, const Matrix& G,
                                 const NoiseSpec& process_noise, const NoiseSpec& meas_noise,
                                 const Sequence& inputs) {
  detail::check_inputs(plant, inputs);
  if (G.rows() != plant.n() || G.cols() != process_noise.dimension()) {
    throw DimensionMismatch("simulate_physical: G must be n x dim(w)");
  }
  if (meas_noise.dimension() != plant.q()) {
    throw DimensionMismatch("simulate_physical: measurement noise must produce q-vectors");
  }
  const Sequence w = sample_noise(process_noise, inputs.size());
  const Sequence v = sample_noise(meas_noise, inputs.size());
  Dataset data;
  data.u = inputs;
  data.y.reserve(inputs.size());
  Vector x = plant.x0;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    Vector y = plant.C * x + v[k];
    if (!y.allFinite()) throw NonFinite("simulate_physical: non-finite sample at k = " + std::to_string(k));
    data.y.push_back(std::move(y));
    x = plant.A * x + plant.B * inputs[k] + G * w[k];
  }
  return data;
}

// =============================================================================
// Particle-with-friction examples
// =============================================================================

struct ParticleDiscretization {
  Matrix A_d;  // 2x2, state [q, qdot]
  Matrix B_f;  // 2x1, force input held constant over the period
};

/// Exact zero-order-hold discretization of qddot = -mu qdot + f.
inline ParticleDiscretization discretize_particle(double mu, double dt) {
  if (!(mu > 0.0) || !(dt > 0.0) || !std::isfinite(mu) || !std::isfinite(dt)) {
    throw InvalidArgument("discretize_particle: mu and dt must be positive");
  }
  const double x = mu * dt;
  const double decay = std::exp(-x);
  // phi = (1 - e^{-mu dt}) / mu, psi = (dt - phi) / mu
  const double phi = -std::expm1(-x) / mu;
  double psi;
  if (x < 1e-3) {
    psi = dt * dt * (0.5 - x / 6.0 + x * x / 24.0 - x * x * x / 120.0);
  } else {
    psi = (dt - phi) / mu;
  }
  ParticleDiscretization out{Matrix(2, 2), Matrix(2, 1)};
  out.A_d << 1.0, phi, 0.0, decay;
  out.B_f << psi, phi;
  return out;
}

/// Plant plus the channel through which process noise enters.
struct PhysicalModel {
  StateSpaceModel plant;
  Matrix G;
};

/// Two-state particle: position measured, random force through B_f.
inline PhysicalModel build_two_state(double mu, double dt) {
  const auto d = discretize_particle(mu, dt);
  PhysicalModel m;
  m.plant.A = d.A_d;
  m.plant.B = d.B_f;
  m.plant.C = Matrix(1, 2);
  m.plant.C << 1.0, 0.0;
  m.plant.x0 = Vector::Zero(2);
  m.G = d.B_f;
  return m;
}

/// Three-state particle with first-order force model f_{k+1} = a_f f_k + w_k.
/// State [q, qdot, f]; outputs are acceleration -mu qdot + f and position q.
/// The known input drives the force state.
inline PhysicalModel build_three_state(double mu, double dt, double a_f) {
  if (!(std::abs(a_f) < 1.0)) throw InvalidArgument("build_three_state: |a_f| must be < 1");
  const auto d = discretize_particle(mu, dt);
  PhysicalModel m;
  m.plant.A = Matrix::Zero(3, 3);
  m.plant.A.topLeftCorner(2, 2) = d.A_d;
  m.plant.A.topRightCorner(2, 1) = d.B_f;
  m.plant.A(2, 2) = a_f;
  m.plant.B = Matrix::Zero(3, 1);
  m.plant.B(2, 0) = 1.0;
  m.plant.C = Matrix(2, 3);
  m.plant.C << 0.0, -mu, 1.0,
               1.0, 0.0, 0.0;
  m.plant.x0 = Vector::Zero(3);
  m.G = Matrix::Zero(3, 1);
  m.G(2, 0) = 1.0;
  return m;
}

}  // namespace kalmanid
