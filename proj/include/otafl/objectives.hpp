#pragma once

#include <algorithm>
#include <cmath>
#include <concepts>
#include <cstddef>
#include <limits>
#include <memory>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "otafl/common.hpp"
#include "otafl/dataset.hpp"
#include "otafl/rng.hpp"

namespace otafl {

/// Smoothness, stochastic-gradient spread and gradient-norm bound of a
/// federated problem. `sigma` is the total (not per-coordinate) standard
/// deviation of a stochastic gradient. `G` comes from a probe sweep and is an
/// estimate, not a certificate.
struct AssumptionConstants {
  double L = 0.0;
  double sigma = 0.0;
  double G = 0.0;
};

/// A federated objective: m local functions F_i over R^d with weights alpha_i.
template <class P>
concept FederatedObjective = requires(const P& p, std::size_t i, const Vector& x, std::size_t batch, Rng& rng) {
  { p.clients() } -> std::convertible_to<std::size_t>;
  { p.dim() } -> std::convertible_to<std::size_t>;
  { p.alpha() } -> std::convertible_to<const std::vector<double>&>;
  { p.local_value(i, x) } -> std::convertible_to<double>;
  { p.local_gradient(i, x) } -> std::convertible_to<Vector>;
  { p.stochastic_gradient(i, x, batch, rng) } -> std::convertible_to<Vector>;
};

namespace detail {

inline void check_weights(const std::vector<double>& alpha) {
  require(!alpha.empty(), "problem needs at least one client");
  double sum = 0.0;
  for (double a : alpha) {
    require(a > 0.0 && std::isfinite(a), "client weights must be positive");
    sum += a;
  }
  require(std::abs(sum - 1.0) <= 1e-12, "client weights must sum to 1");
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Quadratic family
// ---------------------------------------------------------------------------

/// F_i(x) = 1/2 x'H_i x - e_i'x + 1/2 e_i'H_i^{-1}e_i, so that min F_i = 0 at
/// c_i = H_i^{-1} e_i. Stochastic gradients add isotropic Gaussian noise of
/// per-coordinate standard deviation `gradient_noise_std`.
class QuadraticProblem {
 public:
  QuadraticProblem(std::vector<Matrix> H, std::vector<Vector> e, std::vector<double> alpha,
                   double gradient_noise_std = 0.0, double condition_cap = 1e12)
      : H_(std::move(H)), e_(std::move(e)), alpha_(std::move(alpha)), noise_std_(gradient_noise_std) {
    require(!H_.empty(), "quadratic problem needs at least one client");
    require(H_.size() == e_.size() && H_.size() == alpha_.size(), "H, e and alpha sizes differ");
    require(gradient_noise_std >= 0.0 && std::isfinite(gradient_noise_std), "gradient noise std must be >= 0");
    detail::check_weights(alpha_);
    const auto d = H_.front().rows();
    require(d >= 1, "dimension must be >= 1");
    for (std::size_t i = 0; i < H_.size(); ++i) {
      const Matrix& Hi = H_[i];
      require(Hi.rows() == d && Hi.cols() == d && e_[i].size() == d, "local term dimension mismatch");
      require((Hi - Hi.transpose()).norm() <= 1e-12 * std::max(1.0, Hi.norm()), "H_i must be symmetric");
      Eigen::JacobiSVD<Matrix> svd(Hi);
      const auto& s = svd.singularValues();
      const double smin = s(s.size() - 1);
      if (!(smin > 0.0) || s(0) / smin > condition_cap)
        throw SingularMatrixError("H_" + std::to_string(i) + " is singular or exceeds the condition-number cap");
      Eigen::PartialPivLU<Matrix> lu(Hi);
      local_opt_.push_back(lu.solve(e_[i]));
      offset_.push_back(0.5 * e_[i].dot(local_opt_.back()));
    }
  }

  std::size_t clients() const { return H_.size(); }
  std::size_t dim() const { return static_cast<std::size_t>(H_.front().rows()); }
  const std::vector<double>& alpha() const { return alpha_; }
  const Matrix& H(std::size_t i) const { return H_.at(i); }
  const Vector& e(std::size_t i) const { return e_.at(i); }
  double gradient_noise_std() const { return noise_std_; }

  /// c_i = H_i^{-1} e_i, the minimizer of F_i.
  const Vector& local_optimum(std::size_t i) const { return local_opt_.at(i); }

  Matrix mean_H() const {
    Matrix acc = Matrix::Zero(H_.front().rows(), H_.front().cols());
    for (std::size_t i = 0; i < H_.size(); ++i) acc += alpha_[i] * H_[i];
    return acc;
  }

  Vector mean_e() const {
    Vector acc = Vector::Zero(e_.front().size());
    for (std::size_t i = 0; i < e_.size(); ++i) acc += alpha_[i] * e_[i];
    return acc;
  }

  double local_value(std::size_t i, const Vector& x) const {
    check(i, x);
    return 0.5 * x.dot(H_[i] * x) - e_[i].dot(x) + offset_[i];
  }

  Vector local_gradient(std::size_t i, const Vector& x) const {
    check(i, x);
    return H_[i] * x - e_[i];
  }

  Vector stochastic_gradient(std::size_t i, const Vector& x, std::size_t /*batch*/, Rng& rng) const {
    Vector g = local_gradient(i, x);
    if (noise_std_ > 0.0) {
      std::normal_distribution<double> n01(0.0, 1.0);
      for (Eigen::Index j = 0; j < g.size(); ++j) g(j) += noise_std_ * n01(rng);
    }
    return g;
  }

 private:
  void check(std::size_t i, const Vector& x) const {
    require(i < H_.size(), "client index out of range");
    require(static_cast<std::size_t>(x.size()) == dim(), "model dimension mismatch");
  }

  std::vector<Matrix> H_;
  std::vector<Vector> e_;
  std::vector<double> alpha_;
  double noise_std_;
  std::vector<Vector> local_opt_;
  std::vector<double> offset_;
};

/// x* = Hbar^{-1} ebar with Hbar = sum alpha_i H_i, ebar = sum alpha_i e_i.
inline Vector quadratic_optimum(const QuadraticProblem& q) {
  const Matrix Hbar = q.mean_H();
  const Vector ebar = q.mean_e();
  Eigen::FullPivLU<Matrix> lu(Hbar);
  if (!lu.isInvertible()) throw SingularMatrixError("aggregate curvature matrix is singular");
  Vector x = lu.solve(ebar);
  const double residual = (Hbar * x - ebar).norm();
  if (residual > 1e-10 * ebar.norm())
    throw SingularMatrixError("aggregate curvature matrix is numerically singular (residual " +
                              std::to_string(residual) + ")");
  return x;
}

// ---------------------------------------------------------------------------
// Multiclass logistic regression
// ---------------------------------------------------------------------------

/// Softmax cross-entropy over C classes with optional L2 term (lambda/2)|x|^2.
/// Parameters are laid out as a row-major C x d_f weight block followed by C
/// biases, so dim() = C * (d_f + 1).
class LogisticProblem {
 public:
  LogisticProblem(std::shared_ptr<const Dataset> data, ClientPartition partition, double l2 = 0.0)
      : data_(std::move(data)), part_(std::move(partition)), l2_(l2) {
    require(data_ != nullptr, "logistic problem needs a dataset");
    require(l2_ >= 0.0 && std::isfinite(l2_), "L2 coefficient must be >= 0");
    require(part_.clients() >= 1, "logistic problem needs at least one client");
    for (const auto& idx : part_.indices) {
      require(!idx.empty(), "every client needs at least one sample");
      for (std::size_t n : idx) require(n < data_->size(), "partition index outside dataset");
    }
    if (part_.alpha.empty()) part_.alpha = ClientPartition::weights_from_sizes(part_.indices);
    require(part_.alpha.size() == part_.clients(), "alpha size differs from client count");
    detail::check_weights(part_.alpha);
  }

  std::size_t clients() const { return part_.clients(); }
  std::size_t classes() const { return static_cast<std::size_t>(data_->classes); }
  std::size_t feature_dim() const { return data_->feature_dim(); }
  std::size_t dim() const { return classes() * (feature_dim() + 1); }
  const std::vector<double>& alpha() const { return part_.alpha; }
  const ClientPartition& partition() const { return part_; }
  const Dataset& data() const { return *data_; }
  double l2() const { return l2_; }

  double local_value(std::size_t i, const Vector& x) const {
    check(i, x);
    const auto& idx = part_.indices[i];
    const double loss = accumulate(*data_, idx, x, nullptr);
    return loss / static_cast<double>(idx.size()) + 0.5 * l2_ * x.squaredNorm();
  }

  Vector local_gradient(std::size_t i, const Vector& x) const {
    check(i, x);
    const auto& idx = part_.indices[i];
    Vector g = Vector::Zero(x.size());
    accumulate(*data_, idx, x, &g);
    g /= static_cast<double>(idx.size());
    if (l2_ > 0.0) g += l2_ * x;
    return g;
  }

  /// Mini-batch gradient; the batch is drawn without replacement from client
  /// i's samples.
  Vector stochastic_gradient(std::size_t i, const Vector& x, std::size_t batch, Rng& rng) const {
    check(i, x);
    const auto& idx = part_.indices[i];
    require(batch >= 1 && batch <= idx.size(), "batch size must be in [1, client dataset size]");
    std::vector<std::size_t> pick;
    if (batch == idx.size()) {
      pick = idx;
    } else {
      pick = sample_without_replacement(idx, batch, rng);
    }
    Vector g = Vector::Zero(x.size());
    accumulate(*data_, pick, x, &g);
    g /= static_cast<double>(batch);
    if (l2_ > 0.0) g += l2_ * x;
    return g;
  }

  /// Summed (not averaged) cross-entropy of `rows` of `ds` at x; adds the
  /// summed gradient into *grad when grad is non-null. No L2 term.
  static double accumulate(const Dataset& ds, std::span<const std::size_t> rows, const Vector& x, Vector* grad) {
    const auto C = static_cast<Eigen::Index>(ds.classes);
    const auto df = static_cast<Eigen::Index>(ds.feature_dim());
    require(x.size() == C * (df + 1), "model dimension mismatch");
    using RowMajor = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
    Eigen::Map<const RowMajor> W(x.data(), C, df);
    const auto b = x.tail(C);

    constexpr std::size_t kChunk = 512;
    double loss = 0.0;
    RowMajor A;
    Matrix Z;
    for (std::size_t start = 0; start < rows.size(); start += kChunk) {
      const std::size_t n = std::min(kChunk, rows.size() - start);
      A.resize(static_cast<Eigen::Index>(n), df);
      for (std::size_t r = 0; r < n; ++r)
        A.row(static_cast<Eigen::Index>(r)) = ds.features.row(static_cast<Eigen::Index>(rows[start + r])).cast<double>();
      Z.noalias() = A * W.transpose();
      Z.rowwise() += b.transpose();
      for (std::size_t r = 0; r < n; ++r) {
        const auto ri = static_cast<Eigen::Index>(r);
        const int y = ds.labels[rows[start + r]];
        const double zmax = Z.row(ri).maxCoeff();
        double denom = 0.0;
        for (Eigen::Index c = 0; c < C; ++c) {
          Z(ri, c) = std::exp(Z(ri, c) - zmax);
          denom += Z(ri, c);
        }
        loss += std::log(denom) - std::log(Z(ri, y));
        if (grad != nullptr) {
          Z.row(ri) /= denom;
          Z(ri, y) -= 1.0;
        }
      }
      if (grad != nullptr) {
        Eigen::Map<RowMajor> gW(grad->data(), C, df);
        gW.noalias() += Z.transpose() * A;
        grad->tail(C) += Z.colwise().sum().transpose();
      }
    }
    return loss;
  }

  /// Predicted class of every row; ties go to the lowest class index.
  static std::vector<int> predict(const Dataset& ds, const Vector& x) {
    const auto C = static_cast<Eigen::Index>(ds.classes);
    const auto df = static_cast<Eigen::Index>(ds.feature_dim());
    require(x.size() == C * (df + 1), "model dimension mismatch");
    using RowMajor = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
    Eigen::Map<const RowMajor> W(x.data(), C, df);
    const auto b = x.tail(C);
    std::vector<int> out(ds.size());
    constexpr Eigen::Index kChunk = 1024;
    const auto N = static_cast<Eigen::Index>(ds.size());
    for (Eigen::Index start = 0; start < N; start += kChunk) {
      const Eigen::Index n = std::min(kChunk, N - start);
      Matrix Z = ds.features.middleRows(start, n).cast<double>() * W.transpose();
      Z.rowwise() += b.transpose();
      for (Eigen::Index r = 0; r < n; ++r) {
        Eigen::Index arg = 0;
        Z.row(r).maxCoeff(&arg);
        out[static_cast<std::size_t>(start + r)] = static_cast<int>(arg);
      }
    }
    return out;
  }

 private:
  void check(std::size_t i, const Vector& x) const {
    require(i < part_.clients(), "client index out of range");
    require(static_cast<std::size_t>(x.size()) == dim(), "model dimension mismatch");
  }

  // Batches are small relative to a client's data, so rejection of repeats is
  // cheaper than shuffling the whole index list.
  static std::vector<std::size_t> sample_without_replacement(const std::vector<std::size_t>& pool, std::size_t k,
                                                             Rng& rng) {
    std::vector<std::size_t> out;
    out.reserve(k);
    if (2 * k <= pool.size()) {
      std::uniform_int_distribution<std::size_t> pick(0, pool.size() - 1);
      std::vector<std::size_t> seen;
      seen.reserve(k);
      while (out.size() < k) {
        const std::size_t p = pick(rng);
        if (std::find(seen.begin(), seen.end(), p) != seen.end()) continue;
        seen.push_back(p);
        out.push_back(pool[p]);
      }
    } else {
      std::sample(pool.begin(), pool.end(), std::back_inserter(out), k, rng);
    }
    return out;
  }

  std::shared_ptr<const Dataset> data_;
  ClientPartition part_;
  double l2_;
};

// ---------------------------------------------------------------------------
// Generic operations
// ---------------------------------------------------------------------------

template <FederatedObjective P>
double global_value(const P& problem, const Vector& x) {
  require(static_cast<std::size_t>(x.size()) == problem.dim(), "model dimension mismatch");
  double acc = 0.0;
  for (std::size_t i = 0; i < problem.clients(); ++i) acc += problem.alpha()[i] * problem.local_value(i, x);
  return acc;
}

template <FederatedObjective P>
Vector global_gradient(const P& problem, const Vector& x) {
  require(static_cast<std::size_t>(x.size()) == problem.dim(), "model dimension mismatch");
  Vector acc = Vector::Zero(x.size());
  for (std::size_t i = 0; i < problem.clients(); ++i) acc += problem.alpha()[i] * problem.local_gradient(i, x);
  return acc;
}

template <FederatedObjective P>
Vector local_stochastic_gradient(const P& problem, std::size_t i, const Vector& x, std::size_t batch, Rng& rng) {
  return problem.stochastic_gradient(i, x, batch, rng);
}

/// Where and how densely estimate_constants probes for G (and sigma for the
/// logistic family). Points are anchor + r*u with u a random unit direction
/// and r uniform in [0, radius].
struct ProbeOptions {
  Vector anchor;  // empty means the origin
  double radius = 1.0;
  int points = 64;
  int draws_per_point = 4;
  std::size_t batch = 32;
  std::uint64_t seed = 0;
};

namespace detail {

inline Vector probe_point(const Vector& anchor, double radius, Rng& rng) {
  std::normal_distribution<double> n01(0.0, 1.0);
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  Vector u(anchor.size());
  for (Eigen::Index j = 0; j < u.size(); ++j) u(j) = n01(rng);
  const double norm = u.norm();
  if (norm > 0.0) u /= norm;
  return anchor + radius * u01(rng) * u;
}

template <FederatedObjective P>
double probe_gradient_bound(const P& problem, const ProbeOptions& opt, std::size_t batch) {
  const Vector anchor = opt.anchor.size() == 0 ? Vector::Zero(static_cast<Eigen::Index>(problem.dim())) : opt.anchor;
  require(static_cast<std::size_t>(anchor.size()) == problem.dim(), "probe anchor dimension mismatch");
  Rng rng = make_stream(opt.seed, StreamTag::constant_probe);
  double G = 0.0;
  for (int p = 0; p < opt.points; ++p) {
    const Vector x = p == 0 ? anchor : probe_point(anchor, opt.radius, rng);
    for (std::size_t i = 0; i < problem.clients(); ++i)
      for (int k = 0; k < opt.draws_per_point; ++k)
        G = std::max(G, problem.stochastic_gradient(i, x, batch, rng).norm());
  }
  return G;
}

}  // namespace detail

inline AssumptionConstants estimate_constants(const QuadraticProblem& q, const ProbeOptions& opt = {}) {
  AssumptionConstants c;
  for (std::size_t i = 0; i < q.clients(); ++i) {
    Eigen::JacobiSVD<Matrix> svd(q.H(i));
    c.L = std::max(c.L, svd.singularValues()(0));
  }
  c.sigma = q.gradient_noise_std() * std::sqrt(static_cast<double>(q.dim()));
  c.G = detail::probe_gradient_bound(q, opt, 1);
  return c;
}

/// L uses the softmax-Hessian bound 1/2 * max_n |(a_n, 1)|^2 + lambda. sigma is
/// the largest observed root-mean-square deviation of a mini-batch gradient
/// from the full local gradient across probe points.
inline AssumptionConstants estimate_constants(const LogisticProblem& p, const ProbeOptions& opt = {}) {
  AssumptionConstants c;
  double max_sq = 0.0;
  for (const auto& idx : p.partition().indices)
    for (std::size_t n : idx)
      max_sq = std::max(max_sq, static_cast<double>(p.data().features.row(static_cast<Eigen::Index>(n)).squaredNorm()));
  c.L = 0.5 * (max_sq + 1.0) + p.l2();

  std::size_t batch = opt.batch;
  for (const auto& idx : p.partition().indices) batch = std::min(batch, idx.size());
  c.G = detail::probe_gradient_bound(p, opt, batch);

  const Vector anchor = opt.anchor.size() == 0 ? Vector::Zero(static_cast<Eigen::Index>(p.dim())) : opt.anchor;
  Rng rng = make_stream(opt.seed, StreamTag::constant_probe, 1);
  const int points = std::max(1, std::min(opt.points, 4));
  for (int k = 0; k < points; ++k) {
    const Vector x = k == 0 ? anchor : detail::probe_point(anchor, opt.radius, rng);
    for (std::size_t i = 0; i < p.clients(); ++i) {
      const Vector full = p.local_gradient(i, x);
      double ss = 0.0;
      const int draws = std::max(2, opt.draws_per_point);
      for (int r = 0; r < draws; ++r) ss += (p.stochastic_gradient(i, x, batch, rng) - full).squaredNorm();
      c.sigma = std::max(c.sigma, std::sqrt(ss / draws));
    }
  }
  return c;
}

}  // namespace otafl
