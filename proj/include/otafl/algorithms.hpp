#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "otafl/channel.hpp"
#include "otafl/common.hpp"
#include "otafl/objectives.hpp"
#include "otafl/rng.hpp"

namespace otafl {

enum class Algorithm { acpc, naive, uniform };
enum class BetaRule { known_delta, g_bound, fixed };
enum class EtaKind { constant, corollary };

/// Which alpha_i the G-bound rule uses: the largest weight against the
/// smallest budget, or each client's own weight against its own budget.
enum class GBoundAlpha { max, per_client };

/// Learning-rate schedule. `corollary` gives eta = value * sqrt(m) / sqrt(T),
/// constant over the run.
struct EtaSchedule {
  EtaKind kind = EtaKind::constant;
  double value = 0.05;

  double at(std::size_t clients, std::size_t rounds) const {
    if (kind == EtaKind::constant) return value;
    return value * std::sqrt(static_cast<double>(clients)) / std::sqrt(static_cast<double>(rounds));
  }
};

struct RoundConfig {
  EtaSchedule eta;
  BetaRule beta_rule = BetaRule::known_delta;
  double beta_fixed = 1.0;
  GBoundAlpha g_bound_alpha = GBoundAlpha::max;
  int tau_max = 50;
  std::size_t rounds = 200;
  std::size_t batch = 32;
  int forced_tau = 0;   // > 0: ACPC clients take exactly this many steps
  std::vector<int> forced_taus;  // per-client override of forced_tau
  int uniform_tau = 0;  // uniform baseline step count; 0 means tau_max
  // known_delta puts the binding client exactly on its power sphere; the
  // margin keeps rounding from pushing it over.
  double beta_margin = 1e-12;

  void validate() const {
    require(eta.value > 0.0 && std::isfinite(eta.value), "eta must be > 0");
    require(tau_max >= 1, "tau_max must be >= 1");
    require(rounds >= 1, "rounds must be >= 1");
    require(batch >= 1, "batch must be >= 1");
    require(forced_tau >= 0 && uniform_tau >= 0, "step counts must be >= 0");
    require(beta_rule != BetaRule::fixed || (beta_fixed > 0.0 && std::isfinite(beta_fixed)), "fixed beta must be > 0");
    require(beta_margin >= 0.0 && beta_margin < 1.0, "beta margin must be in [0, 1)");
    for (int k : forced_taus) require(k >= 1, "forced step counts must be >= 1");
  }

  bool steps_forced() const { return forced_tau > 0 || !forced_taus.empty(); }
  int forced_steps(std::size_t client) const { return forced_taus.empty() ? forced_tau : forced_taus.at(client); }
};

/// Per-client transmit energy caps |z|^2 <= P_i (constant across rounds).
struct PowerBudget {
  std::vector<double> P;

  static PowerBudget uniform(std::size_t m, double p) { return {std::vector<double>(m, p)}; }
  double min() const { return *std::min_element(P.begin(), P.end()); }
};

struct ClientUpdate {
  Vector delta;           // the transmitted vector delta_t^i
  Vector signal;          // beta_t alpha_i / tau (x_end - x_start): delta before CSI inversion
  int tau = 0;
  double power_used = 0.0;  // |delta|^2
  double csi_gain = 1.0;    // h_t^i the client inverted
  bool clipped = false;     // infeasible even at tau = 1; rescaled onto the power sphere
  double clip_scale = 1.0;
  double raw_sq_norm = 0.0;  // |x_end - x_start|^2
  double max_grad_norm = 0.0;
};

struct RoundRecord {
  std::size_t t = 0;
  double eta = 0.0;
  double beta = 0.0;
  std::vector<int> tau;
  std::vector<double> power_used;
  std::vector<double> power_limit;
  std::vector<double> gains;
  std::size_t clip_count = 0;
  std::size_t power_violations = 0;
  std::size_t gain_clamps = 0;
  double noise_sq_norm = 0.0;
  double max_grad_norm = 0.0;
};

struct ServerState {
  Vector x;
  std::size_t t = 0;
  std::vector<RoundRecord> trace;
  Vector last_aggregate;  // noise-free channel output of the latest round
};

/// Everything a round needs besides the problem and the server state.
struct FlSetup {
  ChannelConfig channel;
  PowerBudget power;
  RoundConfig round;
  std::uint64_t seed = 0;
  double G = 0.0;  // gradient-norm bound for the G-bound beta rule
};

inline Rng client_stream(std::uint64_t seed, std::size_t client, std::size_t round) {
  return make_stream(seed, StreamTag::client_sgd, client, round);
}

// ---------------------------------------------------------------------------
// Client side
// ---------------------------------------------------------------------------

namespace detail {

template <FederatedObjective P, class OnStep>
Vector sgd_steps(const P& problem, std::size_t i, const Vector& x_start, double eta, int tau, std::size_t batch,
                 Rng& rng, double& max_grad_norm, OnStep&& on_step) {
  require(tau >= 1, "local step count must be >= 1");
  Vector x = x_start;
  for (int k = 1; k <= tau; ++k) {
    const Vector g = problem.stochastic_gradient(i, x, batch, rng);
    max_grad_norm = std::max(max_grad_norm, g.norm());
    x.noalias() -= eta * g;
    if (!x.allFinite())
      throw DivergenceError("client " + std::to_string(i) + " diverged at local step " + std::to_string(k));
    on_step(k, x);
  }
  return x;
}

}  // namespace detail

/// tau sequential SGD steps from x_start.
template <FederatedObjective P>
Vector local_train(const P& problem, std::size_t i, const Vector& x_start, double eta, int tau, std::size_t batch,
                   Rng& rng) {
  double max_grad = 0.0;
  return detail::sgd_steps(problem, i, x_start, eta, tau, batch, rng, max_grad, [](int, const Vector&) {});
}

/// delta = beta_t alpha_i / (tau h_i) (x_end - x_start); h_i = 1 is the
/// non-fading precoder.
inline ClientUpdate scale_update(const Vector& x_end, const Vector& x_start, int tau, double alpha_i, double beta_t,
                                 double h_i = 1.0) {
  require(tau >= 1, "tau must be >= 1");
  require(beta_t > 0.0, "beta must be > 0");
  require(h_i > 0.0, "channel gain must be > 0");
  require(x_end.size() == x_start.size(), "model dimension mismatch");
  ClientUpdate u;
  const Vector diff = x_end - x_start;
  const double coef = beta_t * alpha_i / static_cast<double>(tau);
  u.signal = coef * diff;
  u.delta = u.signal / h_i;
  u.tau = tau;
  u.csi_gain = h_i;
  u.power_used = u.delta.squaredNorm();
  u.raw_sq_norm = diff.squaredNorm();
  return u;
}

/// Scales an update onto the power sphere |delta|^2 = limit (from below).
inline void clip_to_power(ClientUpdate& u, double limit) {
  if (u.power_used <= limit) return;
  double scale = std::sqrt(limit / u.power_used);
  for (int guard = 0; guard < 64; ++guard) {
    const double energy = (scale * u.delta).squaredNorm();
    if (energy <= limit) break;
    scale *= 1.0 - 1e-15;
  }
  u.delta *= scale;
  u.signal *= scale;
  u.power_used = u.delta.squaredNorm();
  u.clipped = true;
  u.clip_scale *= scale;
}

/// Squared model displacement after every local step k = 1..K.
struct LocalPath {
  std::vector<double> raw_sq_norms;
  Vector x_final;
  double max_grad_norm = 0.0;
  Rng start_state;  // stream state before the first step, for replay
};

template <FederatedObjective P>
LocalPath explore_local_path(const P& problem, std::size_t i, const Vector& x_start, double eta, int steps,
                             std::size_t batch, Rng& rng) {
  LocalPath path;
  path.start_state = rng;
  path.raw_sq_norms.reserve(static_cast<std::size_t>(steps));
  path.x_final = detail::sgd_steps(problem, i, x_start, eta, steps, batch, rng, path.max_grad_norm,
                                   [&](int, const Vector& x) { path.raw_sq_norms.push_back((x - x_start).squaredNorm()); });
  return path;
}

/// Largest k whose scaled update fits the budget, or 0 when none does.
inline int greedy_tau(std::span<const double> raw_sq_norms, double beta_t, double alpha_i, double limit, double h_i) {
  int best = 0;
  for (std::size_t k = 1; k <= raw_sq_norms.size(); ++k) {
    const double coef = beta_t * alpha_i / (static_cast<double>(k) * h_i);
    if (coef * coef * raw_sq_norms[k - 1] <= limit) best = static_cast<int>(k);
  }
  return best;
}

/// Turns an explored path into the transmitted update for a given beta: keeps
/// the largest feasible step count, replaying the stream from the path's
/// start state when that count is shorter than the path.
template <FederatedObjective P>
ClientUpdate finish_selection(const P& problem, std::size_t i, const Vector& x_start, double eta, double beta_t,
                              double alpha_i, double limit, double h_i, std::size_t batch, const LocalPath& path) {
  const int explored = static_cast<int>(path.raw_sq_norms.size());
  int tau = greedy_tau(path.raw_sq_norms, beta_t, alpha_i, limit, h_i);
  const bool infeasible = tau == 0;
  if (infeasible) tau = 1;

  Vector x_end;
  if (tau == explored) {
    x_end = path.x_final;
  } else {
    Rng replay = path.start_state;
    x_end = local_train(problem, i, x_start, eta, tau, batch, replay);
  }
  ClientUpdate u = scale_update(x_end, x_start, tau, alpha_i, beta_t, h_i);
  u.max_grad_norm = path.max_grad_norm;
  if (infeasible) {
    // Even one step overshoots; the transmitted vector is rescaled rather
    // than following the nominal precoder. Reported through `clipped`.
    clip_to_power(u, limit);
  } else if (!(u.power_used <= limit)) {
    // Feasible in exact arithmetic, over by rounding only.
    clip_to_power(u, limit);
    u.clipped = false;
  }
  return u;
}

/// Greedy adaptive step count: explore tau_max local steps, keep the largest
/// k whose precoded update satisfies |delta|^2 <= P_i. The kept trajectory is
/// exactly local_train(..., k) on the same stream.
template <FederatedObjective P>
ClientUpdate select_tau(const P& problem, std::size_t i, const Vector& x_t, double eta, double beta_t, double alpha_i,
                        double limit, double h_i, int tau_max, std::size_t batch, Rng& rng) {
  require(limit > 0.0, "power limit must be > 0");
  const LocalPath path = explore_local_path(problem, i, x_t, eta, tau_max, batch, rng);
  return finish_selection(problem, i, x_t, eta, beta_t, alpha_i, limit, h_i, batch, path);
}

// ---------------------------------------------------------------------------
// Server-side scaling factor
// ---------------------------------------------------------------------------

struct BetaInputs {
  std::span<const double> P;
  std::span<const double> alpha;
  std::span<const int> tau;             // known_delta: step count behind each raw norm
  std::span<const double> raw_sq_norms;  // known_delta: |x_{t,tau}^i - x_t|^2
  std::span<const double> gains;         // empty means all 1
  double eta = 0.0;
  double G = 0.0;
  GBoundAlpha g_bound_alpha = GBoundAlpha::max;
  double fixed = 1.0;
};

inline constexpr double kBetaCap = 1e150;

/// beta_t from one of the power-control rules.
///  known_delta: beta^2 = min_i P_i tau_i^2 h_i^2 / (|delta_i|^2 alpha_i^2), over
///               clients with non-zero displacement (unscaled delta).
///  g_bound:     beta^2 = P_min h_min^2 / (alpha_max^2 eta^2 G^2), or the
///               per-client minimum of P_i h_i^2 / (alpha_i^2 eta^2 G^2).
///  fixed:       the configured constant.
inline double choose_beta(BetaRule rule, const BetaInputs& in) {
  const std::size_t m = in.P.size();
  require(m >= 1 && in.alpha.size() == m, "beta rule needs one budget and weight per client");
  require(in.gains.empty() || in.gains.size() == m, "gain count differs from client count");
  auto gain = [&](std::size_t i) { return in.gains.empty() ? 1.0 : in.gains[i]; };

  switch (rule) {
    case BetaRule::fixed:
      return in.fixed;
    case BetaRule::known_delta: {
      require(in.tau.size() == m && in.raw_sq_norms.size() == m, "known_delta rule needs tau and |delta| per client");
      double best = std::numeric_limits<double>::infinity();
      for (std::size_t i = 0; i < m; ++i) {
        if (!(in.raw_sq_norms[i] > 0.0)) continue;
        const double tau = in.tau[i];
        const double h = gain(i);
        best = std::min(best, in.P[i] * tau * tau * h * h / (in.raw_sq_norms[i] * in.alpha[i] * in.alpha[i]));
      }
      return std::min(std::sqrt(best), kBetaCap);
    }
    case BetaRule::g_bound: {
      require(in.eta > 0.0, "g_bound rule needs eta > 0");
      const double denom_common = in.eta * in.eta * in.G * in.G;
      if (!(denom_common > 0.0)) return kBetaCap;
      double best = std::numeric_limits<double>::infinity();
      if (in.g_bound_alpha == GBoundAlpha::max) {
        const double a = *std::max_element(in.alpha.begin(), in.alpha.end());
        double pmin = std::numeric_limits<double>::infinity();
        double hmin = std::numeric_limits<double>::infinity();
        for (std::size_t i = 0; i < m; ++i) {
          pmin = std::min(pmin, in.P[i]);
          hmin = std::min(hmin, gain(i));
        }
        best = pmin * hmin * hmin / (a * a * denom_common);
      } else {
        for (std::size_t i = 0; i < m; ++i)
          best = std::min(best, in.P[i] * gain(i) * gain(i) / (in.alpha[i] * in.alpha[i] * denom_common));
      }
      return std::min(std::sqrt(best), kBetaCap);
    }
  }
  throw ContractError("unknown beta rule");
}

// ---------------------------------------------------------------------------
// Rounds
// ---------------------------------------------------------------------------

namespace detail {

template <FederatedObjective P>
void check_round(const ServerState& state, const P& problem, const FlSetup& setup) {
  require(static_cast<std::size_t>(state.x.size()) == problem.dim(), "server model dimension mismatch");
  require(setup.power.P.size() == problem.clients(), "one power budget per client required");
  for (double p : setup.power.P) require(p > 0.0, "power budgets must be > 0");
  setup.round.validate();
  setup.channel.validate();
}

/// Receives the round's transmissions, applies x += scale * y and records the
/// channel side of the round.
inline void receive(ServerState& state, const std::vector<Vector>& inputs, const std::vector<double>& gains,
                    const FlSetup& setup, double scale, RoundRecord& rec) {
  const auto d = static_cast<std::size_t>(state.x.size());
  Vector y = superpose(inputs, gains, d);
  state.last_aggregate = y;
  Vector w = Vector::Zero(static_cast<Eigen::Index>(d));
  Rng noise = noise_stream(setup.channel, state.t);
  add_channel_noise(w, setup.channel.sigma_c2, noise);
  rec.noise_sq_norm = w.squaredNorm();
  y += w;
  state.x += scale * y;
  if (!state.x.allFinite()) throw DivergenceError("global model diverged in round " + std::to_string(state.t));
}

inline void record_update(RoundRecord& rec, const ClientUpdate& u, double limit) {
  rec.tau.push_back(u.tau);
  rec.power_used.push_back(u.power_used);
  rec.power_limit.push_back(limit);
  rec.max_grad_norm = std::max(rec.max_grad_norm, u.max_grad_norm);
  if (u.clipped) ++rec.clip_count;
  if (!(u.power_used <= limit)) ++rec.power_violations;
}

inline void finish_round(ServerState& state, RoundRecord rec) {
  rec.t = state.t;
  state.trace.push_back(std::move(rec));
  ++state.t;
}

}  // namespace detail

/// One round of joint adaptive computation and power control: error-free
/// broadcast, per-client greedy step selection under |delta|^2 <= P_i with
/// precoder beta_t alpha_i / (tau h_i), over-the-air sum, receiver rescaling
/// x_{t+1} = x_t + y / beta_t.
template <FederatedObjective P>
RoundRecord run_round_acpc(ServerState& state, const P& problem, const FlSetup& setup) {
  detail::check_round(state, problem, setup);
  const std::size_t m = problem.clients();
  const RoundConfig& rc = setup.round;
  const double eta = rc.eta.at(m, rc.rounds);
  const auto& alpha = problem.alpha();
  const GainDraw gains = draw_gains(setup.channel, m, state.t);

  RoundRecord rec;
  rec.eta = eta;
  rec.gains = gains.h;
  rec.gain_clamps = gains.clamped;

  std::vector<ClientUpdate> updates;
  updates.reserve(m);
  double beta = 0.0;

  if (rc.steps_forced() || rc.beta_rule == BetaRule::known_delta) {
    // Two phases: clients report |x_{t,tau} - x_t|, the server announces
    // beta_t, then clients scale and transmit.
    require(rc.forced_taus.empty() || rc.forced_taus.size() == m, "one forced step count per client required");
    std::vector<LocalPath> paths;
    std::vector<double> norms;
    std::vector<int> taus;
    for (std::size_t i = 0; i < m; ++i) {
      const int steps = rc.steps_forced() ? rc.forced_steps(i) : rc.tau_max;
      Rng rng = client_stream(setup.seed, i, state.t);
      paths.push_back(explore_local_path(problem, i, state.x, eta, steps, rc.batch, rng));
      norms.push_back(paths.back().raw_sq_norms.back());
      taus.push_back(steps);
    }
    BetaInputs in{setup.power.P, alpha, taus, norms, gains.h, eta, setup.G, rc.g_bound_alpha, rc.beta_fixed};
    beta = choose_beta(rc.beta_rule, in);
    if (rc.beta_rule == BetaRule::known_delta) beta *= 1.0 - rc.beta_margin;
    for (std::size_t i = 0; i < m; ++i) {
      if (rc.steps_forced()) {
        ClientUpdate u = scale_update(paths[i].x_final, state.x, taus[i], alpha[i], beta, gains.h[i]);
        u.max_grad_norm = paths[i].max_grad_norm;
        clip_to_power(u, setup.power.P[i]);
        updates.push_back(std::move(u));
      } else {
        updates.push_back(finish_selection(problem, i, state.x, eta, beta, alpha[i], setup.power.P[i], gains.h[i],
                                           rc.batch, paths[i]));
      }
    }
  } else {
    BetaInputs in{setup.power.P, alpha, {}, {}, gains.h, eta, setup.G, rc.g_bound_alpha, rc.beta_fixed};
    beta = choose_beta(rc.beta_rule, in);
    for (std::size_t i = 0; i < m; ++i) {
      Rng rng = client_stream(setup.seed, i, state.t);
      updates.push_back(
          select_tau(problem, i, state.x, eta, beta, alpha[i], setup.power.P[i], gains.h[i], rc.tau_max, rc.batch, rng));
    }
  }

  rec.beta = beta;
  std::vector<Vector> signals;
  std::vector<double> effective;
  for (std::size_t i = 0; i < m; ++i) {
    detail::record_update(rec, updates[i], setup.power.P[i]);
    if (!(updates[i].power_used <= setup.power.P[i])) throw std::logic_error("ACPC power constraint violated");
    // The channel multiplies the transmitted delta = signal / h by h; with
    // known CSI the received component is (h / h) signal = signal.
    signals.push_back(std::move(updates[i].signal));
    effective.push_back(gains.h[i] / updates[i].csi_gain);
  }
  detail::receive(state, signals, effective, setup, 1.0 / beta, rec);
  detail::finish_round(state, rec);
  return state.trace.back();
}

/// Plain over-the-air FedAvg: one local SGD step, alpha-weighted model
/// differences sent unscaled, x_{t+1} = x_t + sum_i h_i z_i + w. No power
/// control; budget overruns are counted, not prevented.
template <FederatedObjective P>
RoundRecord run_round_naive(ServerState& state, const P& problem, const FlSetup& setup) {
  detail::check_round(state, problem, setup);
  const std::size_t m = problem.clients();
  const RoundConfig& rc = setup.round;
  const double eta = rc.eta.at(m, rc.rounds);
  const GainDraw gains = draw_gains(setup.channel, m, state.t);

  RoundRecord rec;
  rec.eta = eta;
  rec.beta = 1.0;
  rec.gains = gains.h;
  rec.gain_clamps = gains.clamped;

  std::vector<Vector> inputs;
  for (std::size_t i = 0; i < m; ++i) {
    Rng rng = client_stream(setup.seed, i, state.t);
    ClientUpdate u;
    const Vector x1 = detail::sgd_steps(problem, i, state.x, eta, 1, rc.batch, rng, u.max_grad_norm,
                                        [](int, const Vector&) {});
    u.delta = problem.alpha()[i] * (x1 - state.x);
    u.tau = 1;
    u.power_used = u.delta.squaredNorm();
    detail::record_update(rec, u, setup.power.P[i]);
    inputs.push_back(std::move(u.delta));
  }
  detail::receive(state, inputs, gains.h, setup, 1.0, rec);
  detail::finish_round(state, rec);
  return state.trace.back();
}

/// Uniform-scaling baseline: every client runs the same tau steps and uses the
/// same precoder beta_t / (tau h_i); beta_t is set by the worst-case client.
/// The receiver divides by m beta_t, i.e. it averages with equal weights.
template <FederatedObjective P>
RoundRecord run_round_uniform(ServerState& state, const P& problem, const FlSetup& setup) {
  detail::check_round(state, problem, setup);
  const std::size_t m = problem.clients();
  const RoundConfig& rc = setup.round;
  const double eta = rc.eta.at(m, rc.rounds);
  const int tau = rc.uniform_tau > 0 ? rc.uniform_tau : rc.tau_max;
  const GainDraw gains = draw_gains(setup.channel, m, state.t);

  RoundRecord rec;
  rec.eta = eta;
  rec.gains = gains.h;
  rec.gain_clamps = gains.clamped;

  std::vector<LocalPath> paths;
  std::vector<double> norms;
  for (std::size_t i = 0; i < m; ++i) {
    Rng rng = client_stream(setup.seed, i, state.t);
    paths.push_back(explore_local_path(problem, i, state.x, eta, tau, rc.batch, rng));
    norms.push_back(paths.back().raw_sq_norms.back());
  }
  const std::vector<double> ones(m, 1.0);
  const std::vector<int> taus(m, tau);
  BetaInputs in{setup.power.P, ones, taus, norms, gains.h, eta, setup.G, rc.g_bound_alpha, rc.beta_fixed};
  double beta = choose_beta(rc.beta_rule, in);
  if (rc.beta_rule == BetaRule::known_delta) beta *= 1.0 - rc.beta_margin;
  rec.beta = beta;

  std::vector<Vector> signals;
  std::vector<double> effective;
  for (std::size_t i = 0; i < m; ++i) {
    ClientUpdate u = scale_update(paths[i].x_final, state.x, tau, 1.0, beta, gains.h[i]);
    u.max_grad_norm = paths[i].max_grad_norm;
    clip_to_power(u, setup.power.P[i]);
    detail::record_update(rec, u, setup.power.P[i]);
    signals.push_back(std::move(u.signal));
    effective.push_back(gains.h[i] / u.csi_gain);
  }
  detail::receive(state, signals, effective, setup, 1.0 / (static_cast<double>(m) * beta), rec);
  detail::finish_round(state, rec);
  return state.trace.back();
}

template <FederatedObjective P>
RoundRecord run_round(Algorithm algorithm, ServerState& state, const P& problem, const FlSetup& setup) {
  switch (algorithm) {
    case Algorithm::acpc:
      return run_round_acpc(state, problem, setup);
    case Algorithm::naive:
      return run_round_naive(state, problem, setup);
    case Algorithm::uniform:
      return run_round_uniform(state, problem, setup);
  }
  throw ContractError("unknown algorithm");
}

}  // namespace otafl
