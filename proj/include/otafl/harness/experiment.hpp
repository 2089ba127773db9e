#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstddef>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <memory>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "otafl/algorithms.hpp"
#include "otafl/channel.hpp"
#include "otafl/dataset.hpp"
#include "otafl/harness/config.hpp"
#include "otafl/objectives.hpp"
#include "otafl/oracles.hpp"
#include "otafl/partition.hpp"

#ifndef OTAFL_GIT_DESCRIBE
#define OTAFL_GIT_DESCRIBE "unknown"
#endif

namespace otafl::harness {

inline constexpr const char* kTraceSchema = "otafl-trace/1";
inline constexpr const char* kManifestSchema = "otafl-manifest/1";
inline constexpr const char* kSummarySchema = "otafl-summary/1";
inline constexpr const char* kSweepSchema = "otafl-sweep/1";

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

struct Evaluation {
  double loss = 0.0;      // mean cross-entropy, no L2 term
  double accuracy = 0.0;  // top-1
};

inline Evaluation evaluate(const Dataset& test, const Vector& x) {
  if (test.size() == 0) throw ContractError("test set is empty");
  std::vector<std::size_t> rows(test.size());
  std::iota(rows.begin(), rows.end(), std::size_t{0});
  const double n = static_cast<double>(test.size());
  Evaluation e;
  e.loss = LogisticProblem::accumulate(test, rows, x, nullptr) / n;
  const auto pred = LogisticProblem::predict(test, x);
  std::size_t correct = 0;
  for (std::size_t k = 0; k < pred.size(); ++k) correct += pred[k] == test.labels[k] ? 1 : 0;
  e.accuracy = static_cast<double>(correct) / n;
  return e;
}

inline Evaluation evaluate(const LogisticProblem& problem, const Vector& x, const Dataset& test) {
  require(test.feature_dim() == problem.feature_dim() && static_cast<std::size_t>(test.classes) == problem.classes(),
          "test set shape differs from the training problem");
  return evaluate(test, x);
}

struct TrainMetrics {
  double loss = 0.0;
  double grad_norm_sq = 0.0;  // |grad F(x)|^2 of the global objective
};

// One pass per client instead of separate value and gradient sweeps.
inline TrainMetrics train_metrics(const LogisticProblem& p, const Vector& x) {
  require(static_cast<std::size_t>(x.size()) == p.dim(), "model dimension mismatch");
  double value = 0.0;
  Vector grad = Vector::Zero(x.size());
  Vector g(x.size());
  for (std::size_t i = 0; i < p.clients(); ++i) {
    const auto& idx = p.partition().indices[i];
    g.setZero();
    const double loss = LogisticProblem::accumulate(p.data(), idx, x, &g);
    const double w = p.alpha()[i] / static_cast<double>(idx.size());
    value += w * loss;
    grad += w * g;
  }
  if (p.l2() > 0.0) {
    value += 0.5 * p.l2() * x.squaredNorm();
    grad += p.l2() * x;
  }
  return {value, grad.squaredNorm()};
}

inline TrainMetrics train_metrics(const QuadraticProblem& q, const Vector& x) {
  return {global_value(q, x), global_gradient(q, x).squaredNorm()};
}

// ---------------------------------------------------------------------------
// Data
// ---------------------------------------------------------------------------

struct MnistSplits {
  std::shared_ptr<const Dataset> train;
  std::shared_ptr<const Dataset> test;
};

/// Loads both splits once per directory and process.
inline MnistSplits load_mnist_cached(const std::string& dir) {
  static std::map<std::string, MnistSplits> cache;
  if (auto it = cache.find(dir); it != cache.end()) return it->second;
  MnistSplits s{std::make_shared<const Dataset>(load_mnist(dir, true)),
                std::make_shared<const Dataset>(load_mnist(dir, false))};
  cache.emplace(dir, s);
  return s;
}

/// First n samples (all of them when n is 0 or exceeds the size).
inline std::shared_ptr<const Dataset> head(const std::shared_ptr<const Dataset>& ds, std::size_t n) {
  if (n == 0 || n >= ds->size()) return ds;
  auto out = std::make_shared<Dataset>();
  out->features = ds->features.topRows(static_cast<Eigen::Index>(n));
  out->labels.assign(ds->labels.begin(), ds->labels.begin() + static_cast<std::ptrdiff_t>(n));
  out->classes = ds->classes;
  return out;
}

// ---------------------------------------------------------------------------
// Runs
// ---------------------------------------------------------------------------

enum class RunStatus { completed, diverged };

struct TraceRow {
  RoundRecord round;
  std::optional<TrainMetrics> train;  // at x_t, before the round
  std::optional<Evaluation> test;
  double wall_seconds = 0.0;
};

using KeyValues = std::vector<std::pair<std::string, std::string>>;

struct RunResult {
  ExperimentConfig config;
  RunStatus status = RunStatus::completed;
  std::string message;

  std::size_t dim = 0;
  std::size_t clients = 0;
  double power = 0.0;
  double sigma_c2 = 0.0;
  double eta = 0.0;
  AssumptionConstants constants;
  ProbeOptions probe;
  std::vector<double> alpha;
  std::size_t train_size = 0;
  std::size_t test_size = 0;

  std::vector<TraceRow> trace;
  Vector final_x;
  std::optional<TrainMetrics> final_train;
  std::optional<Evaluation> final_test;
  double min_grad_norm_sq = std::numeric_limits<double>::infinity();
  std::optional<BoundTerms> bound;

  KeyValues summary;
  std::string oracle_csv;  // oracle tasks only

  std::optional<std::string> summary_value(const std::string& key) const {
    for (const auto& [k, v] : summary)
      if (k == key) return v;
    return std::nullopt;
  }
  double summary_number(const std::string& key) const {
    const auto v = summary_value(key);
    require(v.has_value(), "summary has no key " + key);
    return std::strtod(v->c_str(), nullptr);
  }
};

namespace detail {

inline std::string fmt(double v) { return format_double(v); }
inline std::string fmt(std::size_t v) { return std::to_string(v); }
inline std::string fmt(bool v) { return v ? "true" : "false"; }

inline std::string join(const Vector& v) {
  std::string s;
  for (Eigen::Index k = 0; k < v.size(); ++k) s += (k ? ";" : "") + fmt(v(k));
  return s;
}

inline std::string join(const std::vector<double>& v) {
  std::string s;
  for (std::size_t k = 0; k < v.size(); ++k) s += (k ? ";" : "") + fmt(v[k]);
  return s;
}

inline FlSetup make_setup(const ExperimentConfig& cfg, const RunResult& r) {
  FlSetup s;
  s.channel.sigma_c2 = r.sigma_c2;
  s.channel.fading.kind = cfg.fading;
  s.channel.fading.scale = cfg.rayleigh_scale;
  s.channel.fading.floor_factor = cfg.gain_floor;
  s.channel.fading.floor_policy = cfg.gain_floor_policy;
  s.channel.seed = cfg.seed;
  s.power = PowerBudget::uniform(r.clients, r.power);
  s.round.eta = {cfg.eta_schedule, cfg.eta};
  s.round.beta_rule = cfg.beta_rule;
  s.round.beta_fixed = cfg.beta_fixed;
  s.round.g_bound_alpha = cfg.g_bound_alpha;
  s.round.tau_max = cfg.tau_max;
  s.round.rounds = cfg.rounds;
  s.round.batch = cfg.batch;
  s.round.uniform_tau = cfg.uniform_tau;
  s.seed = cfg.seed;
  s.G = r.constants.G;
  return s;
}

// Channel noise, budgets and step size shared by every learning task.
inline void resolve_channel(const ExperimentConfig& cfg, RunResult& r) {
  r.power = cfg.power.value_or(static_cast<double>(r.dim));
  r.sigma_c2 = std::isinf(cfg.snr_db) ? 0.0 : sigma_from_snr(cfg.snr_db, r.power, r.dim);
  r.eta = EtaSchedule{cfg.eta_schedule, cfg.eta}.at(r.clients, cfg.rounds);
}

template <FederatedObjective P>
void run_rounds(const ExperimentConfig& cfg, const P& problem, const Vector& x0, const Dataset* test, bool eval_all,
                RunResult& r) {
  const FlSetup setup = make_setup(cfg, r);
  ServerState st{x0, 0, {}, {}};
  const auto start = std::chrono::steady_clock::now();
  for (std::size_t t = 0; t < cfg.rounds; ++t) {
    TraceRow row;
    if (eval_all || t % cfg.eval_every == 0) {
      row.train = train_metrics(problem, st.x);
      r.min_grad_norm_sq = std::min(r.min_grad_norm_sq, row.train->grad_norm_sq);
      if (test != nullptr) row.test = evaluate(*test, st.x);
    }
    try {
      row.round = run_round(cfg.algorithm, st, problem, setup);
    } catch (const DivergenceError& e) {
      r.status = RunStatus::diverged;
      r.message = e.what();
      break;
    }
    row.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    r.trace.push_back(std::move(row));
  }
  r.final_x = st.x;
  if (r.status == RunStatus::completed) {
    r.final_train = train_metrics(problem, st.x);
    if (test != nullptr) r.final_test = evaluate(*test, st.x);
  }
}

inline void learning_summary(RunResult& r) {
  const ExperimentConfig& c = r.config;
  std::size_t clips = 0, violations = 0, clamps = 0, g_exceed = 0;
  double tau_sum = 0.0, max_ratio = 0.0;
  std::size_t tau_n = 0;
  for (const auto& row : r.trace) {
    clips += row.round.clip_count;
    violations += row.round.power_violations;
    clamps += row.round.gain_clamps;
    if (row.round.max_grad_norm > r.constants.G) ++g_exceed;
    for (std::size_t i = 0; i < row.round.tau.size(); ++i) {
      tau_sum += row.round.tau[i];
      ++tau_n;
      max_ratio = std::max(max_ratio, row.round.power_used[i] / row.round.power_limit[i]);
    }
  }
  auto& s = r.summary;
  s = {{"schema", kSummarySchema},
       {"task", task_name(c.task)},
       {"algorithm", algorithm_name(c.algorithm)},
       {"seed", std::to_string(c.seed)},
       {"status", r.status == RunStatus::completed ? "completed" : "diverged"},
       {"message", r.message},
       {"rounds", fmt(c.rounds)},
       {"rounds_completed", fmt(r.trace.size())},
       {"dim", fmt(r.dim)},
       {"power", fmt(r.power)},
       {"sigma_c2", fmt(r.sigma_c2)},
       {"eta", fmt(r.eta)},
       {"L", fmt(r.constants.L)},
       {"sigma", fmt(r.constants.sigma)},
       {"G", fmt(r.constants.G)},
       {"eta_le_inv_L", fmt(r.eta * r.constants.L <= 1.0)},
       {"final_train_loss", r.final_train ? fmt(r.final_train->loss) : ""},
       {"final_grad_norm_sq", r.final_train ? fmt(r.final_train->grad_norm_sq) : ""},
       {"min_grad_norm_sq", std::isfinite(r.min_grad_norm_sq) ? fmt(r.min_grad_norm_sq) : ""},
       {"final_test_loss", r.final_test ? fmt(r.final_test->loss) : ""},
       {"final_test_accuracy", r.final_test ? fmt(r.final_test->accuracy) : ""},
       {"total_clips", fmt(clips)},
       {"total_power_violations", fmt(violations)},
       {"total_gain_clamps", fmt(clamps)},
       {"rounds_grad_above_G", fmt(g_exceed)},
       {"mean_tau", fmt(tau_n ? tau_sum / static_cast<double>(tau_n) : 0.0)},
       {"max_power_ratio", fmt(max_ratio)}};
  if (r.bound) {
    s.push_back({"bound_optimization", fmt(r.bound->optimization)});
    s.push_back({"bound_statistical", fmt(r.bound->statistical)});
    s.push_back({"bound_local_update", fmt(r.bound->local_update)});
    s.push_back({"bound_channel_noise", fmt(r.bound->channel_noise)});
    s.push_back({"bound_total", fmt(r.bound->total)});
    s.push_back({"bound_dominates", fmt(r.min_grad_norm_sq <= r.bound->total)});
  }
}

inline void run_mnist(RunResult& r) {
  const ExperimentConfig& c = r.config;
  const MnistSplits full = load_mnist_cached(c.data_dir);
  const auto train = head(full.train, c.train_limit);
  const auto test = head(full.test, c.test_limit);
  PartitionSpec spec;
  spec.clients = c.clients;
  spec.labels_per_client = c.non_iid_p;
  spec.balance = c.balance;
  spec.dirichlet_gamma = c.dirichlet_gamma;
  spec.seed = c.seed;
  const LogisticProblem problem(train, partition_label_based(*train, spec), c.l2);
  r.dim = problem.dim();
  r.clients = problem.clients();
  r.alpha = problem.alpha();
  r.train_size = train->size();
  r.test_size = test->size();
  resolve_channel(c, r);
  r.probe.batch = c.batch;
  r.probe.seed = c.seed;
  r.constants = estimate_constants(problem, r.probe);
  const Vector x0 = Vector::Zero(static_cast<Eigen::Index>(r.dim));
  run_rounds(c, problem, x0, test.get(), false, r);
}

inline void run_synth(RunResult& r) {
  const ExperimentConfig& c = r.config;
  const QuadraticProblem q = synth_quadratic(c.clients, c.synth_dim, c.synth_heterogeneity, c.seed, c.synth_noise);
  r.dim = q.dim();
  r.clients = q.clients();
  r.alpha = q.alpha();
  resolve_channel(c, r);
  Rng init = make_stream(c.seed, StreamTag::model_init);
  std::normal_distribution<double> n01(0.0, 1.0);
  Vector x0(static_cast<Eigen::Index>(r.dim));
  for (auto& v : x0) v = c.synth_init_scale * n01(init);
  const Vector xs = quadratic_optimum(q);
  r.probe.anchor = xs;
  r.probe.radius = 2.0 * (x0 - xs).norm() + 1.0;
  r.probe.seed = c.seed;
  r.constants = estimate_constants(q, r.probe);
  run_rounds(c, q, x0, nullptr, true, r);
  if (r.status == RunStatus::completed && c.algorithm == Algorithm::acpc) {
    const double gap = global_value(q, x0) - global_value(q, xs);
    const auto b = bound_inputs_from_trace(
        [&] {
          std::vector<RoundRecord> recs;
          for (const auto& row : r.trace) recs.push_back(row.round);
          return recs;
        }(),
        r.alpha, r.constants, std::max(0.0, gap), static_cast<double>(r.dim) * r.sigma_c2);
    r.bound = theorem2_bound(b);
  }
}

// ---------------------------------------------------------------------------
// Oracle tasks

inline void run_oracle_theorem1(RunResult& r) {
  const ExperimentConfig& c = r.config;
  struct Case {
    std::string name;
    double eta, sigma, sigma_c;
  };
  std::vector<Case> cases{{"configured", c.oracle_eta, c.oracle_sigma, c.oracle_sigma_c}};
  for (double frac : {0.1, 0.5, 0.9})
    for (double scale : {0.5, 1.0, 2.0})
      cases.push_back({"grid", frac / c.oracle_L, scale * c.oracle_sigma, scale * c.oracle_sigma_c});

  std::ostringstream csv;
  csv << "case,eta,L,sigma,sigma_c,T,reps,lb_rhs,mc_mean,mc_stderr,rel_err,lower_ok\n";
  std::size_t grid_ok = 0, grid_n = 0;
  double lb0 = 0.0, rel0 = 0.0;
  MonteCarloEstimate mc0;
  for (std::size_t k = 0; k < cases.size(); ++k) {
    const Case& cs = cases[k];
    NoisySgdSpec spec;
    spec.L = c.oracle_L;
    spec.eta = cs.eta;
    spec.sigma = cs.sigma;
    spec.sigma_c = cs.sigma_c;
    spec.T = c.oracle_horizon;
    Rng rng = make_stream(c.seed, StreamTag::oracle, k);
    const double lb = lb_rhs(spec);
    const auto mc = simulate_noisy_sgd(spec, c.oracle_reps, rng);
    const double rel = lb > 0.0 ? std::abs(mc.mean - lb) / lb : std::abs(mc.mean);
    const bool lower_ok = mc.mean >= lb - 3.0 * mc.stderr_;
    if (k == 0) {
      lb0 = lb;
      mc0 = mc;
      rel0 = rel;
    } else {
      ++grid_n;
      grid_ok += lower_ok ? 1 : 0;
    }
    csv << cs.name << ',' << fmt(cs.eta) << ',' << fmt(spec.L) << ',' << fmt(cs.sigma) << ',' << fmt(cs.sigma_c) << ','
        << spec.T << ',' << c.oracle_reps << ',' << fmt(lb) << ',' << fmt(mc.mean) << ',' << fmt(mc.stderr_) << ','
        << fmt(rel) << ',' << fmt(lower_ok) << '\n';
  }
  r.oracle_csv = csv.str();
  r.summary = {{"schema", kSummarySchema},
               {"task", task_name(c.task)},
               {"seed", std::to_string(c.seed)},
               {"status", "completed"},
               {"lb_rhs", fmt(lb0)},
               {"mc_mean", fmt(mc0.mean)},
               {"mc_stderr", fmt(mc0.stderr_)},
               {"rel_err", fmt(rel0)},
               {"within_5pct", fmt(rel0 <= 0.05)},
               {"grid_points", fmt(grid_n)},
               {"grid_lower_ok", fmt(grid_ok)}};
}

}  // namespace detail

/// The two-client instance with unequal step counts: H = (1), (2), e = (1), (4),
/// eta = 0.1, tau = (1, 5), beta_i / beta = (0.5, 0.5).
inline DisjointControlSpec two_client_spec() {
  QuadraticProblem q({Matrix::Constant(1, 1, 1.0), Matrix::Constant(1, 1, 2.0)},
                     {Vector::Constant(1, 1.0), Vector::Constant(1, 4.0)}, {0.5, 0.5});
  return DisjointControlSpec{q, 0.1, {1, 5}, {0.5, 0.5}, 1.0};
}

/// Random instance with m <= 5 clients, d <= 4, tau_i <= 20. May fail the
/// spectral-radius check; callers skip those.
inline DisjointControlSpec random_disjoint_spec(Rng& rng, std::uint64_t problem_seed) {
  std::uniform_int_distribution<int> mdist(1, 5), ddist(1, 4), tdist(1, 20);
  std::uniform_real_distribution<double> u(0.2, 1.0);
  const auto m = static_cast<std::size_t>(mdist(rng));
  const auto d = static_cast<std::size_t>(ddist(rng));
  DisjointControlSpec spec{synth_quadratic(m, d, 1.5, problem_seed), 0.1, {}, {}, 1.0};
  for (std::size_t i = 0; i < m; ++i) {
    spec.tau.push_back(tdist(rng));
    spec.beta_i.push_back(u(rng) / static_cast<double>(m));
  }
  return spec;
}

namespace detail {

inline void run_oracle_example1(RunResult& r) {
  const ExperimentConfig& c = r.config;
  constexpr std::size_t kHorizon = 10000;
  std::ostringstream csv;
  csv << "case,m,d,spectral_radius,x_hat,x_sim,x_star,max_abs_diff,deviation\n";
  auto emit = [&](const std::string& name, const DisjointControlSpec& spec, const Vector& x0) {
    const Vector xhat = example1_fixed_point(spec);
    const Vector xsim = example1_simulate(spec, kHorizon, x0);
    const Vector xs = quadratic_optimum(spec.q);
    const double diff = (xsim - xhat).cwiseAbs().maxCoeff();
    csv << name << ',' << spec.q.clients() << ',' << spec.q.dim() << ',' << fmt(spectral_radius(aggregation_map(spec).A))
        << ',' << join(xhat) << ',' << join(xsim) << ',' << join(xs) << ',' << fmt(diff) << ','
        << fmt((xhat - xs).norm()) << '\n';
    return std::pair{diff, (xhat - xs).norm()};
  };

  const auto [two_diff, two_dev] = emit("two_client", two_client_spec(), Vector::Zero(1));
  Rng rng = make_stream(c.seed, StreamTag::oracle);
  std::normal_distribution<double> n01(0.0, 1.0);
  std::size_t done = 0, skipped = 0;
  double worst = two_diff;
  for (std::uint64_t k = 0; done < c.oracle_instances; ++k) {
    const auto spec = random_disjoint_spec(rng, c.seed * 100003 + k);
    if (!(spectral_radius(aggregation_map(spec).A) < 1.0)) {
      if (++skipped > 100 * std::max<std::size_t>(c.oracle_instances, 1))
        throw std::runtime_error("too few random instances pass the spectral-radius check");
      continue;
    }
    Vector x0(static_cast<Eigen::Index>(spec.q.dim()));
    for (auto& v : x0) v = n01(rng);
    worst = std::max(worst, emit("random_" + std::to_string(done), spec, x0).first);
    ++done;
  }
  r.oracle_csv = csv.str();
  r.summary = {{"schema", kSummarySchema},
               {"task", task_name(c.task)},
               {"seed", std::to_string(c.seed)},
               {"status", "completed"},
               {"horizon", fmt(kHorizon)},
               {"instances", fmt(done)},
               {"skipped_instances", fmt(skipped)},
               {"max_abs_diff", fmt(worst)},
               {"all_within_1e-8", fmt(worst <= 1e-8)},
               {"two_client_deviation", fmt(two_dev)}};
}

inline std::string manifest_text(const RunResult& r) {
  std::ostringstream os;
  os << "# otafl run manifest\n"
     << "schema = " << kManifestSchema << "\n"
     << "trace_schema = " << kTraceSchema << "\n"
     << "git_describe = " << OTAFL_GIT_DESCRIBE << "\n"
     << "\n[config]\n"
     << to_text(r.config);
  const Task t = r.config.task;
  if (t == Task::mnist_logistic || t == Task::synth_quadratic) {
    os << "\n[derived]\n"
       << "dim = " << r.dim << "\n"
       << "clients = " << r.clients << "\n"
       << "power_per_client = " << fmt(r.power) << "\n"
       << "sigma_c2 = " << fmt(r.sigma_c2) << "\n"
       << "eta_effective = " << fmt(r.eta) << "\n"
       << "beta_margin = " << fmt(RoundConfig{}.beta_margin) << "\n"
       << "alpha = " << join(r.alpha) << "\n";
    if (t == Task::mnist_logistic)
      os << "train_size = " << r.train_size << "\n"
         << "test_size = " << r.test_size << "\n"
         << "x0 = zeros\n";
    os << "\n[constants]\n"
       << "L = " << fmt(r.constants.L) << "\n"
       << "sigma = " << fmt(r.constants.sigma) << "\n"
       << "G = " << fmt(r.constants.G) << "\n"
       << "probe_points = " << r.probe.points << "\n"
       << "probe_draws_per_point = " << r.probe.draws_per_point << "\n"
       << "probe_radius = " << fmt(r.probe.radius) << "\n"
       << "probe_batch = " << r.probe.batch << "\n"
       << "probe_anchor = " << (r.probe.anchor.size() ? join(r.probe.anchor) : "zeros") << "\n";
  }
  return os.str();
}

inline std::string trace_csv(const RunResult& r) {
  std::ostringstream os;
  os << "t,train_loss,grad_norm_sq,test_loss,test_accuracy,eta,beta,clip_count,power_violations,gain_clamps,"
        "noise_sq_norm,max_grad_norm,power_limit";
  for (const char* prefix : {"tau_", "power_", "gain_"})
    for (std::size_t i = 0; i < r.clients; ++i) os << ',' << prefix << i;
  os << '\n';
  for (const auto& row : r.trace) {
    const RoundRecord& rec = row.round;
    os << rec.t << ',' << (row.train ? fmt(row.train->loss) : "") << ','
       << (row.train ? fmt(row.train->grad_norm_sq) : "") << ',' << (row.test ? fmt(row.test->loss) : "") << ','
       << (row.test ? fmt(row.test->accuracy) : "") << ',' << fmt(rec.eta) << ',' << fmt(rec.beta) << ','
       << rec.clip_count << ',' << rec.power_violations << ',' << rec.gain_clamps << ',' << fmt(rec.noise_sq_norm)
       << ',' << fmt(rec.max_grad_norm) << ','
       << fmt(*std::min_element(rec.power_limit.begin(), rec.power_limit.end()));
    for (int k : rec.tau) os << ',' << k;
    for (double p : rec.power_used) os << ',' << fmt(p);
    for (double h : rec.gains) os << ',' << fmt(h);
    os << '\n';
  }
  return os.str();
}

inline std::string key_value_csv(const KeyValues& kv) {
  std::string s = "key,value\n";
  for (const auto& [k, v] : kv) {
    // Messages may carry commas; quote them.
    const bool quote = v.find_first_of(",\"\n") != std::string::npos;
    std::string val = v;
    if (quote) {
      std::string q = "\"";
      for (char ch : v) q += ch == '"' ? std::string("\"\"") : std::string(1, ch);
      val = q + "\"";
    }
    s += k + "," + val + "\n";
  }
  return s;
}

inline void write_file(const std::filesystem::path& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << content;
  if (!out) throw std::runtime_error("write failed for " + path.string());
}

}  // namespace detail

/// Writes manifest.txt, summary.csv and, depending on the task, trace.csv +
/// timing.csv or oracle.csv into `dir`.
inline void write_outputs(const RunResult& r, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  detail::write_file(dir / "manifest.txt", detail::manifest_text(r));
  detail::write_file(dir / "summary.csv", detail::key_value_csv(r.summary));
  const Task t = r.config.task;
  if (t == Task::oracle_theorem1 || t == Task::oracle_example1) {
    detail::write_file(dir / "oracle.csv", r.oracle_csv);
    return;
  }
  detail::write_file(dir / "trace.csv", detail::trace_csv(r));
  std::ostringstream timing;
  timing << "t,wall_seconds\n";
  for (const auto& row : r.trace) timing << row.round.t << ',' << detail::fmt(row.wall_seconds) << '\n';
  detail::write_file(dir / "timing.csv", timing.str());
}

/// Runs one experiment and, when cfg.out is set, writes its files. Divergence
/// is reported through the status (the partial trace is kept); a missing
/// dataset or invalid config throws.
inline RunResult run_experiment(const ExperimentConfig& cfg) {
  validate(cfg);
  RunResult r;
  r.config = cfg;
  switch (cfg.task) {
    case Task::mnist_logistic:
      detail::run_mnist(r);
      break;
    case Task::synth_quadratic:
      detail::run_synth(r);
      break;
    case Task::oracle_theorem1:
      detail::run_oracle_theorem1(r);
      break;
    case Task::oracle_example1:
      detail::run_oracle_example1(r);
      break;
  }
  if (cfg.task == Task::mnist_logistic || cfg.task == Task::synth_quadratic) detail::learning_summary(r);
  if (!cfg.out.empty()) write_outputs(r, cfg.out);
  return r;
}

// ---------------------------------------------------------------------------
// Sweeps
// ---------------------------------------------------------------------------

struct SweepAxis {
  std::string key;  // snr_db, non_iid_p, algorithm or seed
  std::vector<std::string> values;
};

struct SweepChild {
  std::vector<std::pair<std::string, std::string>> point;  // axis key -> value
  ExperimentConfig config;
  bool ok = false;  // completed without divergence or error
  std::string status;
  std::string message;
  std::optional<RunResult> result;
};

struct SweepResult {
  std::vector<SweepAxis> axes;
  std::vector<SweepChild> children;
  std::string long_csv;
  std::string table_csv;
};

inline std::string canonical_axis(std::string key) {
  for (auto& ch : key)
    if (ch == '-') ch = '_';
  if (key == "p") return "non_iid_p";
  if (key == "snr") return "snr_db";
  if (key != "snr_db" && key != "non_iid_p" && key != "algorithm" && key != "seed")
    throw ConfigError(key, "not a sweep axis (expected snr_db, non_iid_p, algorithm or seed)");
  return key;
}

namespace detail {

inline double child_metric(const SweepChild& c) {
  const RunResult& r = *c.result;
  if (auto acc = r.summary_value("final_test_accuracy"); acc && !acc->empty()) return std::strtod(acc->c_str(), nullptr);
  return r.summary_number("final_train_loss");
}

inline std::string sweep_long_csv(const SweepResult& s) {
  std::ostringstream os;
  for (const auto& a : s.axes) os << a.key << ',';
  os << "status,final_test_accuracy,final_test_loss,final_train_loss,min_grad_norm_sq,total_clips,"
        "total_power_violations,message\n";
  for (const auto& c : s.children) {
    for (const auto& [k, v] : c.point) os << v << ',';
    auto get = [&](const char* key) -> std::string {
      if (!c.result) return "";
      return c.result->summary_value(key).value_or("");
    };
    std::string msg = c.message;
    std::replace(msg.begin(), msg.end(), ',', ';');
    std::replace(msg.begin(), msg.end(), '\n', ' ');
    os << c.status << ',' << get("final_test_accuracy") << ',' << get("final_test_loss") << ','
       << get("final_train_loss") << ',' << get("min_grad_norm_sq") << ',' << get("total_clips") << ','
       << get("total_power_violations") << ',' << msg << '\n';
  }
  return os.str();
}

// Rows: every axis except snr_db and seed. Columns: one mean/std/n triple per
// SNR value. Failed children are left out of the statistics.
inline std::string sweep_table_csv(const SweepResult& s, const ExperimentConfig& base) {
  std::vector<std::string> row_keys;
  std::vector<std::string> snrs;
  for (const auto& a : s.axes) {
    if (a.key == "snr_db")
      snrs = a.values;
    else if (a.key != "seed")
      row_keys.push_back(a.key);
  }
  if (snrs.empty()) snrs.push_back(format_double(base.snr_db));

  std::vector<std::vector<std::string>> rows;
  std::map<std::vector<std::string>, std::map<std::string, std::vector<double>>> cells;
  for (const auto& c : s.children) {
    std::vector<std::string> key;
    std::string snr = format_double(base.snr_db);
    for (const auto& [k, v] : c.point) {
      if (k == "snr_db") snr = v;
      if (std::find(row_keys.begin(), row_keys.end(), k) != row_keys.end()) key.push_back(v);
    }
    if (std::find(rows.begin(), rows.end(), key) == rows.end()) rows.push_back(key);
    auto& cell = cells[key][snr];
    if (c.ok) cell.push_back(child_metric(c));
  }

  const bool accuracy = base.task == Task::mnist_logistic;
  std::ostringstream os;
  for (const auto& k : row_keys) os << k << ',';
  os << "metric";
  for (const auto& v : snrs) os << ",snr_" << v << "_mean,snr_" << v << "_std,snr_" << v << "_n";
  os << '\n';
  for (const auto& key : rows) {
    for (const auto& v : key) os << v << ',';
    os << (accuracy ? "test_accuracy" : "final_train_loss");
    for (const auto& snr : snrs) {
      const auto& xs = cells[key][snr];
      const double n = static_cast<double>(xs.size());
      if (xs.empty()) {
        os << ",,,0";
        continue;
      }
      const double mean = std::accumulate(xs.begin(), xs.end(), 0.0) / n;
      double ss = 0.0;
      for (double x : xs) ss += (x - mean) * (x - mean);
      const double sd = xs.size() > 1 ? std::sqrt(ss / (n - 1.0)) : 0.0;
      os << ',' << fmt(mean) << ',' << fmt(sd) << ',' << xs.size();
    }
    os << '\n';
  }
  return os.str();
}

}  // namespace detail

/// Runs the cross product of `axes` over `base`, children in order with the
/// first axis varying slowest. A failing child is recorded and the sweep goes
/// on. With base.out set, child i writes to out/runs/<index>_<point>/ and the
/// sweep writes sweep_long.csv and sweep_table.csv.
inline SweepResult sweep(const ExperimentConfig& base, std::vector<SweepAxis> axes) {
  for (auto& a : axes) {
    a.key = canonical_axis(a.key);
    if (a.values.empty()) throw ConfigError(a.key, "sweep axis has no values");
    for (const auto& v : a.values) {
      ExperimentConfig probe = base;
      apply_setting(probe, a.key, v);
      validate(probe);
    }
  }
  for (std::size_t i = 0; i < axes.size(); ++i)
    for (std::size_t j = i + 1; j < axes.size(); ++j)
      if (axes[i].key == axes[j].key) throw ConfigError(axes[i].key, "sweep axis given twice");

  SweepResult s;
  s.axes = axes;
  std::vector<std::size_t> idx(axes.size(), 0);
  std::size_t count = 1;
  for (const auto& a : axes) count *= a.values.size();
  for (std::size_t n = 0; n < count; ++n) {
    SweepChild c;
    c.config = base;
    std::string label = std::to_string(n);
    for (std::size_t k = 0; k < axes.size(); ++k) {
      const std::string& v = axes[k].values[idx[k]];
      apply_setting(c.config, axes[k].key, v);
      c.point.push_back({axes[k].key, v});
      label += "_" + axes[k].key + "=" + v;
    }
    if (!base.out.empty()) c.config.out = (std::filesystem::path(base.out) / "runs" / label).string();
    try {
      c.result = run_experiment(c.config);
      c.ok = c.result->status == RunStatus::completed;
      c.status = c.ok ? "completed" : "diverged";
      c.message = c.result->message;
    } catch (const std::exception& e) {
      c.status = "failed";
      c.message = e.what();
    }
    s.children.push_back(std::move(c));
    for (std::size_t k = axes.size(); k-- > 0;) {
      if (++idx[k] < axes[k].values.size()) break;
      idx[k] = 0;
    }
  }
  s.long_csv = detail::sweep_long_csv(s);
  s.table_csv = detail::sweep_table_csv(s, base);
  if (!base.out.empty()) {
    std::string axes_text;
    for (const auto& a : axes) {
      axes_text += a.key + " =";
      for (std::size_t k = 0; k < a.values.size(); ++k) axes_text += (k ? "," : " ") + a.values[k];
      axes_text += "\n";
    }
    std::filesystem::create_directories(base.out);
    detail::write_file(std::filesystem::path(base.out) / "sweep_long.csv", s.long_csv);
    detail::write_file(std::filesystem::path(base.out) / "sweep_table.csv", s.table_csv);
    detail::write_file(std::filesystem::path(base.out) / "manifest.txt",
                       std::string("# otafl sweep manifest\nschema = ") + kSweepSchema +
                           "\ngit_describe = " + OTAFL_GIT_DESCRIBE + "\n\n[axes]\n" + axes_text + "\n[base]\n" +
                           to_text(base));
  }
  return s;
}

}  // namespace otafl::harness
