#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <vector>

#include "otafl/algorithms.hpp"
#include "otafl/partition.hpp"
#include "test_util.hpp"

namespace otafl {
namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

QuadraticProblem scalar_problem(double h, double e, double noise = 0.0) {
  return QuadraticProblem({Matrix::Constant(1, 1, h)}, {Vector::Constant(1, e)}, {1.0}, noise);
}

FlSetup make_setup(std::size_t m, double P, double sigma_c2, std::uint64_t seed = 1) {
  FlSetup s;
  s.power = PowerBudget::uniform(m, P);
  s.channel.sigma_c2 = sigma_c2;
  s.channel.seed = seed;
  s.seed = seed;
  s.round.eta.value = 0.1;
  s.round.tau_max = 10;
  s.round.rounds = 100;
  return s;
}

template <class P>
ServerState run(Algorithm a, const P& problem, const FlSetup& setup, const Vector& x0, std::size_t rounds) {
  ServerState st{x0};
  for (std::size_t t = 0; t < rounds; ++t) run_round(a, st, problem, setup);
  return st;
}

// ---------------------------------------------------------------------------
// local_train

TEST(LocalTrain, OneExactStep) {
  const auto q = synth_quadratic(2, 3, 1.0, 4);
  Rng rng(1);
  const Vector x = Vector::LinSpaced(3, -1, 2);
  const Vector got = local_train(q, 1, x, 0.05, 1, 1, rng);
  EXPECT_LE((got - (x - 0.05 * (q.H(1) * x - q.e(1)))).norm(), 1e-15);
}

TEST(LocalTrain, GeometricRecursionOnScalarQuadratic) {
  const double H = 2.0, e = 3.0, eta = 0.1, x0 = 5.0;
  const auto q = scalar_problem(H, e);
  const double xs = e / H;
  for (int k = 1; k <= 40; ++k) {
    Rng rng(2);
    const double got = local_train(q, 0, Vector::Constant(1, x0), eta, k, 1, rng)(0);
    EXPECT_NEAR(got, xs + std::pow(1.0 - eta * H, k) * (x0 - xs), 1e-12) << "k=" << k;
  }
}

TEST(LocalTrain, MatrixRecursion) {
  const auto q = synth_quadratic(1, 4, 2.0, 9);
  const Vector x0 = Vector::Ones(4);
  const double eta = 0.2;
  Rng rng(0);
  const Vector got = local_train(q, 0, x0, eta, 15, 1, rng);
  Matrix A = Matrix::Identity(4, 4) - eta * q.H(0);
  Matrix Ak = Matrix::Identity(4, 4);
  for (int k = 0; k < 15; ++k) Ak = Ak * A;
  const Vector c = q.local_optimum(0);
  EXPECT_LE((got - (c + Ak * (x0 - c))).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(LocalTrain, DeterministicAndDivergenceNamed) {
  const auto q = scalar_problem(1.0, 0.0, 0.5);
  Rng a(7), b(7);
  EXPECT_EQ(local_train(q, 0, Vector::Ones(1), 0.1, 5, 1, a), local_train(q, 0, Vector::Ones(1), 0.1, 5, 1, b));
  const auto stiff = scalar_problem(1.0, 0.0);
  Rng c(1);
  try {
    local_train(stiff, 0, Vector::Constant(1, 1e300), 1e10, 3, 1, c);
    FAIL() << "expected divergence";
  } catch (const DivergenceError& err) {
    EXPECT_NE(std::string(err.what()).find("local step 1"), std::string::npos) << err.what();
  }
  EXPECT_THROW(local_train(stiff, 0, Vector::Ones(1), 0.1, 0, 1, c), ContractError);
}

// ---------------------------------------------------------------------------
// scale_update

TEST(ScaleUpdate, Examples) {
  const Vector x = Vector::Constant(1, 4.0);
  const auto zero = scale_update(x, x, 3, 0.5, 2.0);
  EXPECT_EQ(zero.delta(0), 0.0);
  EXPECT_EQ(zero.power_used, 0.0);
  const auto u = scale_update(Vector::Constant(1, 10.0), Vector::Zero(1), 5, 0.5, 2.0, 1.0);
  EXPECT_DOUBLE_EQ(u.delta(0), 2.0);
  EXPECT_DOUBLE_EQ(u.power_used, 4.0);
  const auto u2 = scale_update(Vector::Constant(1, 10.0), Vector::Zero(1), 5, 0.5, 2.0, 2.0);
  EXPECT_EQ(u2.delta(0), 1.0);
  EXPECT_EQ(u2.signal, u.signal);
  EXPECT_THROW(scale_update(x, x, 1, 1.0, 1.0, 0.0), ContractError);
  EXPECT_THROW(scale_update(x, x, 1, 1.0, 1.0, -1.0), ContractError);
  EXPECT_THROW(scale_update(x, x, 0, 1.0, 1.0), ContractError);
}

// ---------------------------------------------------------------------------
// select_tau

TEST(SelectTau, UnconstrainedTakesTauMax) {
  const auto q = synth_quadratic(2, 3, 1.0, 1, 0.1);
  Rng rng(3);
  const auto u = select_tau(q, 0, Vector::Ones(3), 0.1, 1.0, 0.5, kInf, 1.0, 17, 1, rng);
  EXPECT_EQ(u.tau, 17);
  EXPECT_FALSE(u.clipped);
}

TEST(SelectTau, StationaryClientUsesNoPower) {
  const auto q = synth_quadratic(2, 3, 1.0, 1);
  Rng rng(3);
  const auto u = select_tau(q, 1, q.local_optimum(1), 0.1, 5.0, 0.5, 1e-6, 1.0, 12, 1, rng);
  EXPECT_EQ(u.tau, 12);
  EXPECT_LE(u.power_used, 1e-24);
}

TEST(SelectTau, MatchesBruteForceOnScalarQuadratic) {
  for (double H : {1.0, -0.8}) {
    const double e = 0.0, eta = 0.05, x0 = 3.0;
    const auto q = scalar_problem(H, e);
    for (double beta : {0.3, 1.0, 2.0, 7.0}) {
      for (double P : {0.01, 0.05, 0.2, 1.0}) {
        for (double h : {0.5, 1.0}) {
          int expected = 0;
          for (int k = 1; k <= 30; ++k) {
            const double diff = (std::pow(1.0 - eta * H, k) - 1.0) * x0;
            const double d = beta * 1.0 / (k * h) * diff;
            if (d * d <= P) expected = k;
          }
          Rng rng(1);
          const auto u = select_tau(q, 0, Vector::Constant(1, x0), eta, beta, 1.0, P, h, 30, 1, rng);
          if (expected == 0) {
            EXPECT_EQ(u.tau, 1);
            EXPECT_TRUE(u.clipped);
            EXPECT_LE(u.power_used, P);
            EXPECT_NEAR(u.power_used, P, 1e-12 * P);
          } else {
            EXPECT_EQ(u.tau, expected) << "beta=" << beta << " P=" << P << " h=" << h;
            EXPECT_FALSE(u.clipped);
          }
        }
      }
    }
  }
}

TEST(SelectTau, KeptTrajectoryEqualsLocalTrainOnSameStream) {
  // Concave curvature makes |x_k - x_0| / k grow with k, so the budget binds
  // strictly inside [1, tau_max] and the replay path is exercised.
  Matrix H = Matrix::Zero(2, 2);
  H.diagonal() << -0.5, -0.3;
  const QuadraticProblem q({H, Matrix::Identity(2, 2)}, {Vector::Ones(2), Vector::Ones(2)}, {0.5, 0.5}, 0.3);
  const Vector x = Vector::Ones(2);
  int interior = 0;
  for (double P = 1e-3; P < 10.0; P *= 1.3) {
    Rng rng = client_stream(5, 0, 2);
    const auto u = select_tau(q, 0, x, 0.1, 3.0, 0.5, P, 1.0, 25, 1, rng);
    if (u.clipped) continue;
    if (u.tau > 1 && u.tau < 25) ++interior;
    Rng again = client_stream(5, 0, 2);
    const Vector x_end = local_train(q, 0, x, 0.1, u.tau, 1, again);
    const auto ref = scale_update(x_end, x, u.tau, 0.5, 3.0);
    EXPECT_EQ(u.delta, ref.delta);
  }
  EXPECT_GE(interior, 3);
}

TEST(SelectTau, MoreBudgetNeverFewerSteps) {
  const auto q = synth_quadratic(2, 5, 1.0, 6, 0.2);
  const Vector x = Vector::Constant(5, 2.0);
  int last = 0;
  for (double P = 1e-4; P < 10.0; P *= 1.5) {
    Rng rng = client_stream(1, 0, 0);
    const auto u = select_tau(q, 0, x, 0.05, 2.0, 0.5, P, 1.0, 40, 1, rng);
    EXPECT_GE(u.tau, last);
    last = u.tau;
  }
}

// ---------------------------------------------------------------------------
// choose_beta

TEST(ChooseBeta, KnownDeltaExample) {
  const std::vector<double> P{4.0}, alpha{1.0}, norms{1.0};
  const std::vector<int> tau{2};
  BetaInputs in{P, alpha, tau, norms};
  EXPECT_DOUBLE_EQ(choose_beta(BetaRule::known_delta, in), 4.0);
}

TEST(ChooseBeta, KnownDeltaSkipsStationaryClients) {
  const std::vector<double> P{1.0, 1.0}, alpha{0.5, 0.5}, norms{0.0, 4.0};
  const std::vector<int> tau{3, 1};
  BetaInputs in{P, alpha, tau, norms};
  // only client 1 binds: beta^2 = 1 * 1 / (4 * 0.25) = 1
  EXPECT_DOUBLE_EQ(choose_beta(BetaRule::known_delta, in), 1.0);
  const std::vector<double> none{0.0, 0.0};
  BetaInputs slack{P, alpha, tau, none};
  EXPECT_EQ(choose_beta(BetaRule::known_delta, slack), kBetaCap);
}

TEST(ChooseBeta, GBoundExampleAndPerClientVariant) {
  const std::vector<double> P{1.0, 3.0}, alpha{0.5, 0.5};
  BetaInputs in{P, alpha, {}, {}, {}, 0.1, 2.0};
  EXPECT_NEAR(choose_beta(BetaRule::g_bound, in), 10.0, 1e-12);
  const std::vector<double> alpha2{0.25, 0.75};
  BetaInputs per{P, alpha2, {}, {}, {}, 0.1, 2.0, GBoundAlpha::per_client};
  // min(1 / 0.0625, 3 / 0.5625) / 0.04 -> sqrt(133.33...)
  EXPECT_NEAR(choose_beta(BetaRule::g_bound, per), std::sqrt((3.0 / 0.5625) / 0.04), 1e-12);
  BetaInputs worst{P, alpha2, {}, {}, {}, 0.1, 2.0};
  EXPECT_NEAR(choose_beta(BetaRule::g_bound, worst), std::sqrt(1.0 / (0.5625 * 0.04)), 1e-12);
}

TEST(ChooseBeta, FixedAndGainAware) {
  const std::vector<double> P{4.0}, alpha{1.0}, norms{1.0}, gains{0.5};
  const std::vector<int> tau{2};
  BetaInputs fixed{P, alpha, tau, norms};
  fixed.fixed = 3.0;
  EXPECT_EQ(choose_beta(BetaRule::fixed, fixed), 3.0);
  BetaInputs faded{P, alpha, tau, norms, gains};
  EXPECT_DOUBLE_EQ(choose_beta(BetaRule::known_delta, faded), 2.0);
  EXPECT_THROW(choose_beta(BetaRule::known_delta, BetaInputs{P, alpha}), ContractError);
}

// ---------------------------------------------------------------------------
// ACPC rounds

TEST(AcpcRound, SingleClientForcedOneStepIsPlainSgd) {
  const auto q = scalar_problem(1.5, 2.0, 0.3);
  FlSetup s = make_setup(1, 1.0, 0.0, 21);
  s.round.forced_tau = 1;
  ServerState st{Vector::Constant(1, -4.0)};
  Vector sgd = st.x;
  for (std::size_t t = 0; t < 1000; ++t) {
    run_round_acpc(st, q, s);
    Rng rng = client_stream(s.seed, 0, t);
    sgd = local_train(q, 0, sgd, 0.1, 1, 1, rng);
    ASSERT_LE(std::abs(st.x(0) - sgd(0)), 1e-12) << "round " << t;
  }
}

TEST(AcpcRound, EqualStepsEqualWeightsAverageNormalizedDeltas) {
  const auto q = synth_quadratic(4, 3, 1.0, 5, 0.1);
  FlSetup s = make_setup(4, 1.0, 0.0, 3);
  s.round.forced_tau = 6;
  const Vector x0 = Vector::Constant(3, 0.5);
  ServerState st{x0};
  run_round_acpc(st, q, s);
  Vector expected = Vector::Zero(3);
  for (std::size_t i = 0; i < 4; ++i) {
    Rng rng = client_stream(s.seed, i, 0);
    expected += q.alpha()[i] * (local_train(q, i, x0, 0.1, 6, 1, rng) - x0) / 6.0;
  }
  EXPECT_LE((st.x - (x0 + expected)).cwiseAbs().maxCoeff(), 1e-12);
  EXPECT_EQ(st.trace.back().clip_count, 0u);
}

TEST(AcpcRound, ChannelNoiseIsUnbiased) {
  const auto q = synth_quadratic(3, 4, 1.0, 5);
  const Vector x0 = Vector::Ones(4);
  FlSetup quiet = make_setup(3, 1.0, 0.0, 8);
  ServerState ref{x0};
  run_round_acpc(ref, q, quiet);
  const double beta = ref.trace[0].beta;
  const double sigma_c2 = 0.04;
  const int reps = 10000;
  Vector mean = Vector::Zero(4);
  for (int r = 0; r < reps; ++r) {
    FlSetup noisy = make_setup(3, 1.0, sigma_c2, 8);
    noisy.channel.seed = 1000 + static_cast<std::uint64_t>(r);
    ServerState st{x0};
    run_round_acpc(st, q, noisy);
    ASSERT_EQ(st.trace[0].beta, beta);
    mean += st.x;
  }
  mean /= reps;
  const double sd = std::sqrt(sigma_c2) / beta;
  for (Eigen::Index j = 0; j < 4; ++j) EXPECT_LE(std::abs(mean(j) - ref.x(j)), 3.0 * sd / std::sqrt(reps));
}

TEST(AcpcRound, PowerSafeUnderEveryRule) {
  const auto q = synth_quadratic(5, 4, 2.0, 3, 0.5);
  for (BetaRule rule : {BetaRule::known_delta, BetaRule::g_bound, BetaRule::fixed}) {
    FlSetup s = make_setup(5, 0.3, 0.01, 4);
    s.round.beta_rule = rule;
    s.round.beta_fixed = 0.5;
    s.G = estimate_constants(q).G;
    s.channel.fading.kind = FadingKind::rayleigh;
    const auto st = run(Algorithm::acpc, q, s, Vector::Ones(4), 30);
    for (const auto& rec : st.trace) {
      EXPECT_EQ(rec.power_violations, 0u);
      for (std::size_t i = 0; i < rec.tau.size(); ++i) EXPECT_LE(rec.power_used[i], rec.power_limit[i]);
    }
  }
}

TEST(AcpcRound, KnownDeltaPutsBindingClientOnSphere) {
  const auto q = synth_quadratic(4, 3, 1.0, 7, 0.2);
  FlSetup s = make_setup(4, 2.0, 0.0, 9);
  ServerState st{Vector::Ones(3)};
  const auto rec = run_round_acpc(st, q, s);
  double top = 0.0;
  for (std::size_t i = 0; i < 4; ++i) {
    EXPECT_EQ(rec.tau[i], s.round.tau_max);
    top = std::max(top, rec.power_used[i]);
  }
  EXPECT_NEAR(top, 2.0, 1e-9);
  EXPECT_LE(top, 2.0);
  EXPECT_EQ(rec.clip_count, 0u);
}

TEST(AcpcRound, InfeasibleFixedBetaFallsBackToClippedSingleStep) {
  const auto q = scalar_problem(1.0, 0.0);
  FlSetup s = make_setup(1, 1e-6, 0.0);
  s.round.beta_rule = BetaRule::fixed;
  s.round.beta_fixed = 1e6;
  ServerState st{Vector::Constant(1, 10.0)};
  const auto rec = run_round_acpc(st, q, s);
  EXPECT_EQ(rec.tau[0], 1);
  EXPECT_EQ(rec.clip_count, 1u);
  EXPECT_EQ(rec.power_violations, 0u);
  EXPECT_NEAR(rec.power_used[0], 1e-6, 1e-18);
}

TEST(AcpcRound, FadingLeavesPreNoiseAggregateBitwiseUnchanged) {
  // Same beta and step counts in both runs: an unbinding budget with a fixed
  // beta, so the gains only enter through the known-CSI precoder.
  const auto q = synth_quadratic(4, 5, 1.0, 2, 0.3);
  FlSetup flat = make_setup(4, kInf, 0.2, 6);
  flat.round.beta_rule = BetaRule::fixed;
  flat.round.beta_fixed = 2.0;
  FlSetup faded = flat;
  faded.channel.fading.kind = FadingKind::rayleigh;
  ServerState a{Vector::Ones(5)}, b{Vector::Ones(5)};
  for (std::size_t t = 0; t < 20; ++t) {
    run_round_acpc(a, q, flat);
    const auto rec = run_round_acpc(b, q, faded);
    EXPECT_NE(rec.gains, std::vector<double>(4, 1.0));
    ASSERT_EQ(a.last_aggregate, b.last_aggregate) << "round " << t;
    ASSERT_EQ(a.x, b.x);
  }
}

TEST(AcpcRound, DeterministicPerSeed) {
  const auto q = synth_quadratic(3, 3, 1.0, 1, 0.4);
  FlSetup s = make_setup(3, 0.5, 0.1, 77);
  s.channel.fading.kind = FadingKind::rayleigh;
  const auto a = run(Algorithm::acpc, q, s, Vector::Zero(3), 15);
  const auto b = run(Algorithm::acpc, q, s, Vector::Zero(3), 15);
  EXPECT_EQ(a.x, b.x);
  for (std::size_t t = 0; t < 15; ++t) {
    EXPECT_EQ(a.trace[t].tau, b.trace[t].tau);
    EXPECT_EQ(a.trace[t].beta, b.trace[t].beta);
  }
}

TEST(AcpcRound, RejectsMismatchedState) {
  const auto q = synth_quadratic(2, 3, 1.0, 1);
  FlSetup s = make_setup(2, 1.0, 0.0);
  ServerState bad{Vector::Zero(2)};
  EXPECT_THROW(run_round_acpc(bad, q, s), ContractError);
  FlSetup short_power = make_setup(3, 1.0, 0.0);
  ServerState st{Vector::Zero(3)};
  EXPECT_THROW(run_round_acpc(st, q, short_power), ContractError);
}

// ---------------------------------------------------------------------------
// Naive and uniform baselines

TEST(NaiveRound, NoiselessEqualsOneStepFedAvg) {
  const auto q = synth_quadratic(3, 2, 1.0, 3, 0.2);
  FlSetup s = make_setup(3, 1.0, 0.0, 5);
  const Vector x0 = Vector::Constant(2, -1.0);
  ServerState st{x0};
  run_round_naive(st, q, s);
  Vector expected = x0;
  for (std::size_t i = 0; i < 3; ++i) {
    Rng rng = client_stream(s.seed, i, 0);
    expected += q.alpha()[i] * (local_train(q, i, x0, 0.1, 1, 1, rng) - x0);
  }
  EXPECT_LE((st.x - expected).cwiseAbs().maxCoeff(), 1e-15);
  EXPECT_EQ(st.trace[0].beta, 1.0);
}

TEST(NaiveRound, NoiseEntersUnscaledAndOverrunsAreCounted) {
  const auto q = scalar_problem(1.0, 0.0);
  FlSetup s = make_setup(1, 1e-8, 0.5, 2);
  ServerState a{Vector::Constant(1, 1.0)};
  run_round_naive(a, q, s);
  EXPECT_EQ(a.trace[0].power_violations, 1u);
  Rng w = noise_stream(s.channel, 0);
  Vector noise = Vector::Zero(1);
  add_channel_noise(noise, 0.5, w);
  EXPECT_NEAR(a.x(0), 1.0 - 0.1 + noise(0), 1e-15);
  EXPECT_NEAR(a.trace[0].noise_sq_norm, noise.squaredNorm(), 1e-15);
}

TEST(NaiveRound, Deterministic) {
  const auto q = synth_quadratic(3, 3, 1.0, 1, 0.4);
  FlSetup s = make_setup(3, 1.0, 0.2, 13);
  EXPECT_EQ(run(Algorithm::naive, q, s, Vector::Zero(3), 20).x, run(Algorithm::naive, q, s, Vector::Zero(3), 20).x);
}

TEST(UniformRound, IdenticalClientsMatchAcpcWithFixedSteps) {
  const auto base = synth_quadratic(1, 3, 1.0, 4, 0.2);
  const QuadraticProblem q({base.H(0), base.H(0), base.H(0)}, {base.e(0), base.e(0), base.e(0)},
                           {1.0 / 3, 1.0 / 3, 1.0 / 3}, 0.2);
  FlSetup s = make_setup(3, 0.5, 0.05, 12);
  s.round.uniform_tau = 5;
  FlSetup acpc = s;
  acpc.round.forced_tau = 5;
  const auto u = run(Algorithm::uniform, q, s, Vector::Ones(3), 30);
  const auto a = run(Algorithm::acpc, q, acpc, Vector::Ones(3), 30);
  EXPECT_LE((u.x - a.x).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(UniformRound, TightestClientSetsCommonBeta) {
  const auto q = synth_quadratic(3, 3, 1.0, 4);
  FlSetup s = make_setup(3, 1.0, 0.0, 2);
  s.round.uniform_tau = 4;
  const Vector x0 = Vector::Ones(3);
  ServerState loose{x0};
  const auto r1 = run_round_uniform(loose, q, s);
  s.power.P[1] = 1e-6;
  ServerState tight{x0};
  const auto r2 = run_round_uniform(tight, q, s);
  EXPECT_LT(r2.beta, r1.beta);
  EXPECT_NEAR(r2.power_used[1], 1e-6, 1e-15);
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_EQ(r2.tau[i], 4);
    EXPECT_LE(r2.power_used[i], r2.power_limit[i]);
    if (i != 1) EXPECT_LT(r2.power_used[i], 1e-5);
  }
  // Noiseless rescaling cancels beta: the model moves identically.
  EXPECT_LE((loose.x - tight.x).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(UniformRound, HomogeneousNoiselessConvergesToOptimum) {
  const auto base = synth_quadratic(1, 3, 1.0, 8);
  const QuadraticProblem q({base.H(0), base.H(0)}, {base.e(0), base.e(0)}, {0.5, 0.5});
  const double L = estimate_constants(q).L;
  FlSetup s = make_setup(2, 1.0, 0.0, 3);
  s.round.eta.value = 0.1 / L;
  const Vector xs = quadratic_optimum(q);
  ServerState st{Vector::Zero(3)};
  std::size_t t = 0;
  while ((st.x - xs).norm() > 1e-6 && t < 1000) {
    run_round_uniform(st, q, s);
    ++t;
  }
  EXPECT_LE((st.x - xs).norm(), 1e-6);
  EXPECT_LE(t, 1000u);
}

TEST(RoundConfig, Validation) {
  RoundConfig rc;
  rc.tau_max = 0;
  EXPECT_THROW(rc.validate(), ContractError);
  rc = {};
  rc.eta.value = 0.0;
  EXPECT_THROW(rc.validate(), ContractError);
  rc = {};
  rc.beta_rule = BetaRule::fixed;
  rc.beta_fixed = -1.0;
  EXPECT_THROW(rc.validate(), ContractError);
  rc = {};
  rc.forced_taus = {1, 0};
  EXPECT_THROW(rc.validate(), ContractError);
}

TEST(EtaSchedule, HorizonScaling) {
  EtaSchedule e{EtaKind::corollary, 0.5};
  EXPECT_DOUBLE_EQ(e.at(4, 100), 0.5 * 2.0 / 10.0);
  EXPECT_DOUBLE_EQ(EtaSchedule{}.at(4, 100), 0.05);
}

}  // namespace
}  // namespace otafl
