#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <vector>

#include "otafl/oracles.hpp"
#include "otafl/partition.hpp"

namespace otafl {
namespace {

// ---------------------------------------------------------------------------
// Noise floor

TEST(LbRhs, Examples) {
  NoisySgdSpec s;
  s.L = 1.0;
  s.eta = 0.1;
  s.sigma = 1.0;
  s.sigma_c = 0.1;
  EXPECT_NEAR(lb_rhs(s), 0.02 / 0.19, 1e-15);
  NoisySgdSpec quiet = s;
  quiet.sigma = quiet.sigma_c = 0.0;
  EXPECT_EQ(lb_rhs(quiet), 0.0);
  NoisySgdSpec only_c = s;
  only_c.sigma = 0.0;
  NoisySgdSpec doubled = only_c;
  doubled.sigma_c = 0.2;
  EXPECT_NEAR(lb_rhs(doubled), 4.0 * lb_rhs(only_c), 1e-15);
  NoisySgdSpec wide = s;
  wide.x0 = Vector::Ones(3);
  wide.x_star = Vector::Zero(3);
  EXPECT_NEAR(lb_rhs(wide), 3.0 * lb_rhs(s), 1e-15);
}

TEST(LbRhs, RejectsUnstableStep) {
  NoisySgdSpec s;
  s.eta = 1.0;
  EXPECT_THROW(lb_rhs(s), ContractError);
  s.eta = 2.0;
  EXPECT_THROW(lb_rhs(s), ContractError);
}

TEST(SimulateNoisySgd, NoiselessIsDeterministicContraction) {
  NoisySgdSpec s;
  s.L = 2.0;
  s.eta = 0.2;
  s.T = 40;
  s.x0 = Vector::Constant(1, 3.0);
  s.x_star = Vector::Constant(1, 1.0);
  Rng rng(1);
  const auto est = simulate_noisy_sgd(s, 2, rng);
  // x_t - x* loses digits to cancellation once x_t is close to x* = 1.
  EXPECT_NEAR(est.mean, std::pow(0.6, 80) * 4.0, 1e-6 * std::pow(0.6, 80) * 4.0);
  EXPECT_EQ(est.stderr_, 0.0);
}

TEST(SimulateNoisySgd, MatchesFloorAtEqualityCase) {
  NoisySgdSpec s;
  s.L = 1.0;
  s.eta = 0.1;
  s.sigma = 1.0;
  s.sigma_c = 0.1;
  s.T = 500;
  Rng rng = make_stream(7, StreamTag::oracle);
  const auto est = simulate_noisy_sgd(s, 10000, rng);
  EXPECT_NEAR(est.mean, lb_rhs(s), 0.05 * lb_rhs(s));
  EXPECT_GE(est.mean, lb_rhs(s) - 3.0 * est.stderr_);
}

TEST(SimulateNoisySgd, RefusesShortHorizon) {
  NoisySgdSpec s;
  s.eta = 0.01;
  s.T = 10;
  Rng rng(1);
  EXPECT_THROW(simulate_noisy_sgd(s, 10, rng), ContractError);
}

// ---------------------------------------------------------------------------
// Disjoint power control fixed point

DisjointControlSpec two_client_instance() {
  QuadraticProblem q({Matrix::Constant(1, 1, 1.0), Matrix::Constant(1, 1, 2.0)},
                     {Vector::Constant(1, 1.0), Vector::Constant(1, 4.0)}, {0.5, 0.5});
  return DisjointControlSpec{q, 0.1, {1, 5}, {0.5, 0.5}, 1.0};
}

TEST(FixedPoint, TwoClientInstanceMatchesScalarIteration) {
  const auto spec = two_client_instance();
  // Scalar brute force of x <- x - sum r_i (1 - (1 - eta h_i)^tau_i)(x - e_i / h_i).
  const double k1 = 1.0 - std::pow(1.0 - 0.1 * 1.0, 1);
  const double k2 = 1.0 - std::pow(1.0 - 0.1 * 2.0, 5);
  double x = 0.0;
  for (int t = 0; t < 100000; ++t) x = x - 0.5 * k1 * (x - 1.0) - 0.5 * k2 * (x - 2.0);
  const Vector xhat = example1_fixed_point(spec);
  EXPECT_NEAR(xhat(0), x, 1e-10);
  EXPECT_NEAR(xhat(0), (0.5 * k1 * 1.0 + 0.5 * k2 * 2.0) / (0.5 * k1 + 0.5 * k2), 1e-12);
  const Vector xs = quadratic_optimum(spec.q);
  EXPECT_NEAR(xs(0), 5.0 / 3.0, 1e-14);
  EXPECT_GT((xhat - xs).norm(), 1e-6);
}

TEST(FixedPoint, SingleStepWithAlphaRatiosRecoversOptimum) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const auto q = synth_quadratic(4, 3, 2.0, seed);
    DisjointControlSpec spec{q, 0.05, std::vector<int>(4, 1), q.alpha(), 1.0};
    EXPECT_LE((example1_fixed_point(spec) - quadratic_optimum(q)).norm(), 1e-10);
  }
}

TEST(FixedPoint, SimulationConvergesToFixedPoint) {
  Rng rng = make_stream(3, StreamTag::oracle);
  std::uniform_int_distribution<int> mdist(1, 5), ddist(1, 4), tdist(1, 20);
  std::uniform_real_distribution<double> u(0.2, 1.0);
  int checked = 0;
  for (std::uint64_t seed = 0; checked < 50 && seed < 500; ++seed) {
    const auto m = static_cast<std::size_t>(mdist(rng));
    const auto d = static_cast<std::size_t>(ddist(rng));
    const auto q = synth_quadratic(m, d, 1.5, seed);
    DisjointControlSpec spec{q, 0.1, {}, {}, 1.0};
    for (std::size_t i = 0; i < m; ++i) {
      spec.tau.push_back(tdist(rng));
      spec.beta_i.push_back(u(rng) / static_cast<double>(m));
    }
    if (!(spectral_radius(aggregation_map(spec).A) < 1.0)) continue;
    ++checked;
    const Vector xhat = example1_fixed_point(spec);
    Vector x0(static_cast<Eigen::Index>(d));
    std::normal_distribution<double> n01;
    for (auto& v : x0) v = n01(rng);
    const Vector xT = example1_simulate(spec, 10000, x0);
    EXPECT_LE((xT - xhat).cwiseAbs().maxCoeff(), 1e-8) << "seed " << seed;
    EXPECT_LE((example1_simulate(spec, 7, xhat) - xhat).cwiseAbs().maxCoeff(), 1e-12);
  }
  EXPECT_EQ(checked, 50);
}

TEST(FixedPoint, RejectsExpandingMapAndSingularAggregate) {
  auto spec = two_client_instance();
  spec.beta_i = {30.0, 30.0};
  EXPECT_THROW(example1_simulate(spec, 10, Vector::Zero(1)), DivergenceError);
  spec.beta_i = {0.0, 0.0};
  EXPECT_THROW(example1_fixed_point(spec), SingularMatrixError);
  spec.tau = {1};
  EXPECT_THROW(example1_fixed_point(spec), ContractError);
}

TEST(FixedPoint, LongHorizonMatrixPowerStaysAccurate) {
  const auto q = synth_quadratic(3, 4, 1.0, 2);
  DisjointControlSpec spec{q, 0.01, {1000, 10, 300}, {0.3, 0.3, 0.3}, 1.0};
  const Vector xhat = example1_fixed_point(spec);
  const AffineMap map = aggregation_map(spec);
  EXPECT_LE((map.A * xhat + map.b - xhat).norm(), 1e-10);
  // Naive repeated multiplication as an independent reference.
  const Matrix step = Matrix::Identity(4, 4) - 0.01 * q.H(0);
  Matrix naive = Matrix::Identity(4, 4);
  for (int k = 0; k < 1000; ++k) naive = naive * step;
  EXPECT_LE((matrix_power(step, 1000) - naive).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(FixedPoint, MatchesAcpcRoundsWithForcedSteps) {
  const auto q = synth_quadratic(3, 3, 1.0, 5);
  const std::vector<int> taus{1, 4, 9};
  FlSetup s;
  s.power = PowerBudget::uniform(3, 1e12);
  s.round.eta.value = 0.1;
  s.round.forced_taus = taus;
  s.round.beta_rule = BetaRule::fixed;
  s.round.beta_fixed = 1.0;
  DisjointControlSpec spec{q, 0.1, taus, {}, 1.0};
  for (std::size_t i = 0; i < 3; ++i) spec.beta_i.push_back(q.alpha()[i] / taus[i]);
  const Vector x0 = Vector::Ones(3);
  ServerState st{x0};
  for (int t = 0; t < 200; ++t) run_round_acpc(st, q, s);
  EXPECT_LE((st.x - example1_simulate(spec, 200, x0)).cwiseAbs().maxCoeff(), 1e-8);
}

// ---------------------------------------------------------------------------
// Convergence bound

BoundInputs base_inputs() {
  BoundInputs b;
  b.F0_minus_Fstar = 2.0;
  b.eta = 0.1;
  b.L = 3.0;
  b.sigma = 0.5;
  b.G = 4.0;
  b.alpha = {0.25, 0.75};
  b.tau_rms = {2.0, 3.0};
  b.inv_beta_sq_mean = 0.01;
  b.sigma_c2 = 0.2;
  b.m = 2;
  b.T = 100;
  return b;
}

TEST(ConvergenceBound, TermsBySubstitution) {
  const auto t = theorem2_bound(base_inputs());
  EXPECT_NEAR(t.optimization, 2.0 * 2.0 / (100 * 0.1), 1e-15);
  EXPECT_NEAR(t.statistical, 3.0 * 0.1 * 0.25 * (0.0625 + 0.5625), 1e-15);
  EXPECT_NEAR(t.local_update, 2 * 9.0 * 0.01 * 16.0 * (0.0625 * 4 + 0.5625 * 9), 1e-12);
  EXPECT_NEAR(t.channel_noise, 3.0 * 0.2 * 0.01 / 0.1, 1e-15);
  EXPECT_NEAR(t.total, t.optimization + t.statistical + t.local_update + t.channel_noise, 1e-15);
}

TEST(ConvergenceBound, OnlyOptimizationTermDependsOnHorizon) {
  auto b = base_inputs();
  const auto a = theorem2_bound(b);
  b.T = 100000000;
  const auto c = theorem2_bound(b);
  EXPECT_LT(c.optimization, 1e-6 * a.optimization * 100);
  EXPECT_EQ(c.statistical, a.statistical);
  EXPECT_EQ(c.local_update, a.local_update);
  EXPECT_EQ(c.channel_noise, a.channel_noise);
  b.sigma_c2 = 0.0;
  EXPECT_EQ(theorem2_bound(b).channel_noise, 0.0);
}

TEST(ConvergenceBound, HorizonScaling) {
  auto at = [](std::size_t m, std::size_t T) {
    BoundInputs b = base_inputs();
    b.m = m;
    b.T = T;
    b.alpha.assign(m, 1.0 / static_cast<double>(m));
    b.tau_rms.assign(m, 5.0);
    b.eta = std::sqrt(static_cast<double>(m)) / std::sqrt(static_cast<double>(T));
    b.inv_beta_sq_mean = b.eta * b.eta / static_cast<double>(m);
    return theorem2_bound(b);
  };
  for (std::size_t m : {1, 4, 10}) {
    const auto a = at(m, 1000);
    const auto b = at(m, 4000);
    EXPECT_NEAR((b.optimization + b.statistical) / (a.optimization + a.statistical), 0.5, 1e-12);
    EXPECT_NEAR(b.channel_noise / a.channel_noise, 0.5, 1e-12);
    EXPECT_NEAR(b.local_update / a.local_update, 0.25, 1e-12);
  }
}

TEST(ConvergenceBound, RejectsNegativeInputs) {
  auto b = base_inputs();
  b.sigma_c2 = -1.0;
  EXPECT_THROW(theorem2_bound(b), ContractError);
  b = base_inputs();
  b.tau_rms.pop_back();
  EXPECT_THROW(theorem2_bound(b), ContractError);
}

TEST(ConvergenceBound, FromTraceUsesRmsStepsAndHarmonicBeta) {
  std::vector<RoundRecord> trace(2);
  trace[0].eta = 0.1;
  trace[0].beta = 1.0;
  trace[0].tau = {1, 3};
  trace[1].eta = 0.1;
  trace[1].beta = 2.0;
  trace[1].tau = {7, 3};
  const auto b = bound_inputs_from_trace(trace, {0.5, 0.5}, {1.0, 0.1, 2.0}, 5.0, 0.3);
  EXPECT_NEAR(b.tau_rms[0], 5.0, 1e-15);
  EXPECT_NEAR(b.tau_rms[1], 3.0, 1e-15);
  EXPECT_NEAR(b.inv_beta_sq_mean, (1.0 + 0.25) / 2.0, 1e-15);
  EXPECT_EQ(b.T, 2u);
  EXPECT_EQ(b.m, 2u);
}

TEST(ConvergenceBound, DominatesMeasuredGradientOnQuadratics) {
  for (std::uint64_t seed = 0; seed < 4; ++seed) {
    const auto q = synth_quadratic(4, 3, 1.0, seed, 0.2);
    const Vector x0 = Vector::Constant(3, 2.0);
    ProbeOptions probe;
    probe.anchor = quadratic_optimum(q);
    probe.radius = 2.0 * (x0 - probe.anchor).norm() + 1.0;
    const auto c = estimate_constants(q, probe);
    FlSetup s;
    s.power = PowerBudget::uniform(4, 1.0);
    s.channel.sigma_c2 = 0.01;
    s.channel.seed = seed;
    s.seed = seed;
    s.round.eta.value = 0.5 / c.L;
    s.round.tau_max = 5;
    s.round.rounds = 100;
    ServerState st{x0};
    double min_g2 = global_gradient(q, x0).squaredNorm();
    for (std::size_t t = 0; t < s.round.rounds; ++t) {
      run_round_acpc(st, q, s);
      if (t + 1 < s.round.rounds) min_g2 = std::min(min_g2, global_gradient(q, st.x).squaredNorm());
    }
    const double gap = global_value(q, x0) - global_value(q, quadratic_optimum(q));
    const auto b = bound_inputs_from_trace(st.trace, q.alpha(), c, gap, 3.0 * s.channel.sigma_c2);
    EXPECT_LE(min_g2, theorem2_bound(b).total);
  }
}

}  // namespace
}  // namespace otafl
