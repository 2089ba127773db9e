#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <random>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <Eigen/Eigenvalues>

#include "otafl/algorithms.hpp"
#include "otafl/common.hpp"
#include "otafl/objectives.hpp"
#include "otafl/rng.hpp"

namespace otafl {

// ---------------------------------------------------------------------------
// Noise floor of SGD with additive channel noise
// ---------------------------------------------------------------------------

/// x_{t+1} = x_t - eta grad F(x_t, xi_t) + w_t on F(x) = (L/2)|x - x*|^2, with
/// Gaussian gradient noise (per-coordinate std sigma) and channel noise
/// w_t ~ N(0, sigma_c^2 I).
struct NoisySgdSpec {
  double L = 1.0;
  double eta = 0.1;
  double sigma = 0.0;
  double sigma_c = 0.0;
  Vector x0 = Vector::Ones(1);
  Vector x_star = Vector::Zero(1);
  std::size_t T = 500;

  void validate() const {
    require(L > 0.0 && std::isfinite(L), "L must be > 0");
    require(eta > 0.0 && eta * L < 1.0, "eta must lie in (0, 1/L)");
    require(sigma >= 0.0 && sigma_c >= 0.0, "noise levels must be >= 0");
    require(x0.size() >= 1 && x0.size() == x_star.size(), "x0 and x* dimensions differ");
  }
};

/// Limit of E|x_t - x*|^2 from below: (eta^2 sigma^2 + sigma_c^2) / (1 - (1 - eta L)^2),
/// multiplied by the dimension since both noises are per coordinate.
inline double lb_rhs(const NoisySgdSpec& spec) {
  spec.validate();
  const double q = 1.0 - spec.eta * spec.L;
  const double per_coord = (spec.eta * spec.eta * spec.sigma * spec.sigma + spec.sigma_c * spec.sigma_c) / (1.0 - q * q);
  return per_coord * static_cast<double>(spec.x0.size());
}

struct MonteCarloEstimate {
  double mean = 0.0;
  double stderr_ = 0.0;
};

/// Monte-Carlo E|x_T - x*|^2 over `reps` independent runs of the recursion.
inline MonteCarloEstimate simulate_noisy_sgd(const NoisySgdSpec& spec, std::size_t reps, Rng& rng) {
  spec.validate();
  require(reps >= 2, "need at least two replications");
  const double q = 1.0 - spec.eta * spec.L;
  require(std::pow(q, static_cast<double>(spec.T)) <= 1e-3, "T too short for the contraction to forget x0");
  std::normal_distribution<double> n01(0.0, 1.0);
  const auto d = spec.x0.size();
  double sum = 0.0;
  double sum_sq = 0.0;
  for (std::size_t r = 0; r < reps; ++r) {
    double err2 = 0.0;
    for (Eigen::Index j = 0; j < d; ++j) {
      double x = spec.x0(j);
      const double xs = spec.x_star(j);
      for (std::size_t t = 0; t < spec.T; ++t) {
        const double g = spec.L * (x - xs) + (spec.sigma > 0.0 ? spec.sigma * n01(rng) : 0.0);
        x = x - spec.eta * g + (spec.sigma_c > 0.0 ? spec.sigma_c * n01(rng) : 0.0);
      }
      err2 += (x - xs) * (x - xs);
    }
    sum += err2;
    sum_sq += err2 * err2;
  }
  const double n = static_cast<double>(reps);
  const double mean = sum / n;
  const double var = std::max(0.0, (sum_sq - n * mean * mean) / (n - 1.0));
  return {mean, std::sqrt(var / n)};
}

// ---------------------------------------------------------------------------
// Fixed point under disjoint power control and unequal local step counts
// ---------------------------------------------------------------------------

/// Quadratic clients running tau_i full-gradient steps, precoded by beta_i and
/// rescaled by beta at the server.
struct DisjointControlSpec {
  QuadraticProblem q;
  double eta = 0.1;
  std::vector<int> tau;
  std::vector<double> beta_i;
  double beta = 1.0;

  std::vector<double> ratios() const {
    std::vector<double> r;
    for (double b : beta_i) r.push_back(b / beta);
    return r;
  }

  void validate() const {
    require(eta > 0.0, "eta must be > 0");
    require(beta != 0.0, "beta must be non-zero");
    require(tau.size() == q.clients() && beta_i.size() == q.clients(), "one tau and beta_i per client required");
    for (int k : tau) require(k >= 1, "tau_i must be >= 1");
  }
};

/// M^n by repeated squaring. Symmetric inputs are re-symmetrized after every
/// product so rounding cannot accumulate an antisymmetric part.
inline Matrix matrix_power(const Matrix& M, long long n) {
  require(M.rows() == M.cols(), "matrix power needs a square matrix");
  require(n >= 0, "matrix power exponent must be >= 0");
  const bool symmetric = (M - M.transpose()).norm() <= 1e-14 * std::max(1.0, M.norm());
  auto tidy = [&](Matrix& A) {
    if (symmetric) A = 0.5 * (A + A.transpose()).eval();
  };
  Matrix result = Matrix::Identity(M.rows(), M.cols());
  Matrix base = M;
  while (n > 0) {
    if (n & 1) {
      result = (result * base).eval();
      tidy(result);
    }
    n >>= 1;
    if (n > 0) {
      base = (base * base).eval();
      tidy(base);
    }
  }
  return result;
}

/// x_{t+1} = A x_t + b, the exact deterministic aggregation map.
struct AffineMap {
  Matrix A;
  Vector b;
};

/// A = I - sum_i r_i K_i H_i and b = sum_i r_i K_i e_i, where
/// K_i = [I - (I - eta H_i)^tau_i] H_i^{-1} and r_i = beta_i / beta.
inline AffineMap aggregation_map(const DisjointControlSpec& spec) {
  spec.validate();
  const auto d = static_cast<Eigen::Index>(spec.q.dim());
  const Matrix I = Matrix::Identity(d, d);
  const auto r = spec.ratios();
  AffineMap map{I, Vector::Zero(d)};
  for (std::size_t i = 0; i < spec.q.clients(); ++i) {
    // K_i H_i = I - (I - eta H_i)^tau and K_i e_i = (K_i H_i) c_i.
    const Matrix KH = I - matrix_power(I - spec.eta * spec.q.H(i), spec.tau[i]);
    map.A -= r[i] * KH;
    map.b += r[i] * (KH * spec.q.local_optimum(i));
  }
  return map;
}

inline double spectral_radius(const Matrix& A) {
  Eigen::EigenSolver<Matrix> es(A, false);
  return es.eigenvalues().cwiseAbs().maxCoeff();
}

/// x_hat = [sum r_i K_i H_i]^{-1} [sum r_i K_i e_i].
inline Vector example1_fixed_point(const DisjointControlSpec& spec) {
  const AffineMap map = aggregation_map(spec);
  const auto d = map.A.rows();
  const Matrix S = Matrix::Identity(d, d) - map.A;
  Eigen::FullPivLU<Matrix> lu(S);
  if (!lu.isInvertible()) throw SingularMatrixError("aggregate step matrix sum r_i K_i H_i is singular");
  Vector x = lu.solve(map.b);
  const double residual = (map.A * x + map.b - x).norm();
  if (residual > 1e-10 * std::max(1.0, x.norm()))
    throw SingularMatrixError("fixed-point residual " + std::to_string(residual) + " exceeds 1e-10");
  return x;
}

/// Iterates the aggregation map T times from x0. Refuses maps that are not
/// contractions.
inline Vector example1_simulate(const DisjointControlSpec& spec, std::size_t T, const Vector& x0) {
  const AffineMap map = aggregation_map(spec);
  require(x0.size() == map.b.size(), "x0 dimension mismatch");
  const double rho = spectral_radius(map.A);
  if (!(rho < 1.0))
    throw DivergenceError("aggregation map has spectral radius " + std::to_string(rho) + " >= 1");
  Vector x = x0;
  for (std::size_t t = 0; t < T; ++t) {
    x = (map.A * x + map.b).eval();
    if (!x.allFinite()) throw DivergenceError("aggregation recursion diverged at round " + std::to_string(t));
  }
  return x;
}

// ---------------------------------------------------------------------------
// Four-term convergence bound for the adaptive algorithm
// ---------------------------------------------------------------------------

/// Inputs of the min_t E|grad F(x_t)|^2 bound. sigma and sigma_c2 are totals
/// over all coordinates (E|noise|^2), not per-coordinate values.
struct BoundInputs {
  double F0_minus_Fstar = 0.0;
  double eta = 0.0;
  double L = 0.0;
  double sigma = 0.0;
  double G = 0.0;
  std::vector<double> alpha;
  std::vector<double> tau_rms;   // sqrt(sum_t (tau_t^i)^2 / T)
  double inv_beta_sq_mean = 0.0;  // (1/T) sum_t 1 / beta_t^2
  double sigma_c2 = 0.0;
  std::size_t m = 1;
  std::size_t T = 1;
};

struct BoundTerms {
  double optimization = 0.0;
  double statistical = 0.0;
  double local_update = 0.0;
  double channel_noise = 0.0;
  double total = 0.0;
};

inline BoundTerms theorem2_bound(const BoundInputs& b) {
  require(b.eta > 0.0 && b.T >= 1, "bound needs eta > 0 and T >= 1");
  require(b.alpha.size() == b.tau_rms.size(), "one tau per client weight required");
  require(b.F0_minus_Fstar >= 0.0 && b.L >= 0.0 && b.sigma >= 0.0 && b.G >= 0.0 && b.sigma_c2 >= 0.0 &&
              b.inv_beta_sq_mean >= 0.0,
          "bound inputs must be non-negative");
  double sum_a2 = 0.0;
  double sum_a2_tau2 = 0.0;
  for (std::size_t i = 0; i < b.alpha.size(); ++i) {
    sum_a2 += b.alpha[i] * b.alpha[i];
    sum_a2_tau2 += b.alpha[i] * b.alpha[i] * b.tau_rms[i] * b.tau_rms[i];
  }
  BoundTerms t;
  t.optimization = 2.0 * b.F0_minus_Fstar / (static_cast<double>(b.T) * b.eta);
  t.statistical = b.L * b.eta * b.sigma * b.sigma * sum_a2;
  t.local_update = static_cast<double>(b.m) * b.L * b.L * b.eta * b.eta * b.G * b.G * sum_a2_tau2;
  t.channel_noise = b.L * b.sigma_c2 * b.inv_beta_sq_mean / b.eta;
  t.total = t.optimization + t.statistical + t.local_update + t.channel_noise;
  return t;
}

/// Realized step counts and scaling factors of a finished run folded into
/// bound inputs. `sigma_c2_total` is d times the per-coordinate variance.
inline BoundInputs bound_inputs_from_trace(const std::vector<RoundRecord>& trace, const std::vector<double>& alpha,
                                           const AssumptionConstants& c, double F0_minus_Fstar, double sigma_c2_total) {
  require(!trace.empty(), "trace is empty");
  BoundInputs b;
  b.F0_minus_Fstar = F0_minus_Fstar;
  b.eta = trace.front().eta;
  b.L = c.L;
  b.sigma = c.sigma;
  b.G = c.G;
  b.alpha = alpha;
  b.m = alpha.size();
  b.T = trace.size();
  b.sigma_c2 = sigma_c2_total;
  b.tau_rms.assign(alpha.size(), 0.0);
  for (const auto& rec : trace) {
    require(rec.tau.size() == alpha.size(), "trace client count differs from alpha");
    for (std::size_t i = 0; i < alpha.size(); ++i) b.tau_rms[i] += static_cast<double>(rec.tau[i]) * rec.tau[i];
    b.inv_beta_sq_mean += 1.0 / (rec.beta * rec.beta);
  }
  for (auto& v : b.tau_rms) v = std::sqrt(v / static_cast<double>(trace.size()));
  b.inv_beta_sq_mean /= static_cast<double>(trace.size());
  return b;
}

}  // namespace otafl
