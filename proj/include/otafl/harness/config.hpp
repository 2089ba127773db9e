#pragma once

#include <cerrno>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <limits>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "otafl/algorithms.hpp"
#include "otafl/channel.hpp"
#include "otafl/partition.hpp"

namespace otafl::harness {

enum class Task { mnist_logistic, synth_quadratic, oracle_theorem1, oracle_example1 };

/// Bad config text or an invalid value. `line` is 0 when the problem is not
/// tied to a line (flags, validation).
class ConfigError : public std::runtime_error {
 public:
  ConfigError(const std::string& field, const std::string& what, int line = 0)
      : std::runtime_error((line > 0 ? "line " + std::to_string(line) + ": " : std::string()) + field + ": " + what),
        field_(field),
        line_(line) {}
  const std::string& field() const noexcept { return field_; }
  int line() const noexcept { return line_; }

 private:
  std::string field_;
  int line_;
};

struct ExperimentConfig {
  Task task = Task::mnist_logistic;
  Algorithm algorithm = Algorithm::acpc;
  std::size_t clients = 10;
  std::size_t rounds = 200;
  int non_iid_p = 10;
  Balance balance = Balance::equal;
  double dirichlet_gamma = 1.0;
  double snr_db = 20.0;                 // inf: noiseless channel
  std::optional<double> power;          // per-client budget; empty: model dimension
  double eta = 0.05;
  EtaKind eta_schedule = EtaKind::constant;
  BetaRule beta_rule = BetaRule::known_delta;
  double beta_fixed = 1.0;
  GBoundAlpha g_bound_alpha = GBoundAlpha::max;
  int tau_max = 50;
  int uniform_tau = 0;
  std::size_t batch = 32;
  double l2 = 0.0;
  FadingKind fading = FadingKind::none;
  double rayleigh_scale = 1.0;
  double gain_floor = 0.1;
  GainFloorPolicy gain_floor_policy = GainFloorPolicy::clamp;
  std::uint64_t seed = 0;
  std::size_t eval_every = 10;
  std::size_t train_limit = 0;  // 0: whole split
  std::size_t test_limit = 0;
  std::string data_dir;

  std::size_t synth_dim = 10;
  double synth_heterogeneity = 1.0;
  double synth_noise = 0.1;
  double synth_init_scale = 3.0;

  double oracle_L = 1.0;
  double oracle_eta = 0.1;
  double oracle_sigma = 1.0;
  double oracle_sigma_c = 0.1;
  std::size_t oracle_horizon = 500;
  std::size_t oracle_reps = 10000;
  std::size_t oracle_instances = 50;

  std::string out;
};

inline constexpr const char* kDataDirEnv = "OTAFL_MNIST_DIR";

/// Defaults plus the dataset directory from the environment.
inline ExperimentConfig default_config() {
  ExperimentConfig c;
  if (const char* env = std::getenv(kDataDirEnv); env != nullptr) c.data_dir = env;
  return c;
}

namespace detail {

template <class E>
struct EnumName {
  E value;
  const char* name;
};

inline const std::vector<EnumName<Task>>& task_names() {
  static const std::vector<EnumName<Task>> v{{Task::mnist_logistic, "mnist_logistic"},
                                             {Task::synth_quadratic, "synth_quadratic"},
                                             {Task::oracle_theorem1, "oracle_theorem1"},
                                             {Task::oracle_example1, "oracle_example1"}};
  return v;
}
inline const std::vector<EnumName<Algorithm>>& algorithm_names() {
  static const std::vector<EnumName<Algorithm>> v{
      {Algorithm::acpc, "acpc"}, {Algorithm::naive, "naive"}, {Algorithm::uniform, "uniform"}};
  return v;
}
inline const std::vector<EnumName<Balance>>& balance_names() {
  static const std::vector<EnumName<Balance>> v{{Balance::equal, "equal"}, {Balance::dirichlet, "dirichlet"}};
  return v;
}
inline const std::vector<EnumName<EtaKind>>& eta_names() {
  static const std::vector<EnumName<EtaKind>> v{{EtaKind::constant, "constant"}, {EtaKind::corollary, "corollary"}};
  return v;
}
inline const std::vector<EnumName<BetaRule>>& beta_names() {
  static const std::vector<EnumName<BetaRule>> v{
      {BetaRule::known_delta, "known_delta"}, {BetaRule::g_bound, "g_bound"}, {BetaRule::fixed, "fixed"}};
  return v;
}
inline const std::vector<EnumName<GBoundAlpha>>& g_alpha_names() {
  static const std::vector<EnumName<GBoundAlpha>> v{{GBoundAlpha::max, "max"}, {GBoundAlpha::per_client, "per_client"}};
  return v;
}
inline const std::vector<EnumName<FadingKind>>& fading_names() {
  static const std::vector<EnumName<FadingKind>> v{{FadingKind::none, "none"}, {FadingKind::rayleigh, "rayleigh"}};
  return v;
}
inline const std::vector<EnumName<GainFloorPolicy>>& floor_names() {
  static const std::vector<EnumName<GainFloorPolicy>> v{{GainFloorPolicy::clamp, "clamp"},
                                                        {GainFloorPolicy::redraw, "redraw"}};
  return v;
}

template <class E>
std::string enum_to_string(const std::vector<EnumName<E>>& names, E value) {
  for (const auto& n : names)
    if (n.value == value) return n.name;
  return "?";
}

template <class E>
E enum_from_string(const std::vector<EnumName<E>>& names, const std::string& key, const std::string& text) {
  std::string options;
  for (const auto& n : names) {
    if (text == n.name) return n.value;
    options += (options.empty() ? "" : ", ") + std::string(n.name);
  }
  throw ConfigError(key, "unknown value '" + text + "' (expected one of: " + options + ")");
}

inline std::string format_double(double v) {
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

inline double parse_double(const std::string& key, const std::string& text) {
  errno = 0;
  char* end = nullptr;
  const double v = std::strtod(text.c_str(), &end);
  if (text.empty() || end != text.c_str() + text.size() || errno == ERANGE || std::isnan(v))
    throw ConfigError(key, "expected a number, got '" + text + "'");
  return v;
}

inline std::uint64_t parse_unsigned(const std::string& key, const std::string& text) {
  if (text.empty() || text.find_first_not_of("0123456789") != std::string::npos)
    throw ConfigError(key, "expected a non-negative integer, got '" + text + "'");
  errno = 0;
  const unsigned long long v = std::strtoull(text.c_str(), nullptr, 10);
  if (errno == ERANGE) throw ConfigError(key, "value out of range: '" + text + "'");
  return v;
}

inline int parse_int(const std::string& key, const std::string& text) {
  const std::string digits = !text.empty() && text[0] == '-' ? text.substr(1) : text;
  const auto v = parse_unsigned(key, digits);
  if (v > static_cast<std::uint64_t>(std::numeric_limits<int>::max()))
    throw ConfigError(key, "value out of range: '" + text + "'");
  return text[0] == '-' ? -static_cast<int>(v) : static_cast<int>(v);
}

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

}  // namespace detail

/// One configuration key: how to print it and how to set it from text.
struct Knob {
  const char* name;
  std::function<std::string(const ExperimentConfig&)> get;
  std::function<void(ExperimentConfig&, const std::string&)> set;
};

inline const std::vector<Knob>& knobs() {
  using namespace detail;
#define OTAFL_SIZE_KNOB(field)                                                                      \
  Knob{#field, [](const ExperimentConfig& c) { return std::to_string(c.field); },                   \
       [](ExperimentConfig& c, const std::string& v) { c.field = static_cast<std::size_t>(parse_unsigned(#field, v)); }}
#define OTAFL_INT_KNOB(field)                                                     \
  Knob{#field, [](const ExperimentConfig& c) { return std::to_string(c.field); }, \
       [](ExperimentConfig& c, const std::string& v) { c.field = parse_int(#field, v); }}
#define OTAFL_DOUBLE_KNOB(field)                                                 \
  Knob{#field, [](const ExperimentConfig& c) { return format_double(c.field); }, \
       [](ExperimentConfig& c, const std::string& v) { c.field = parse_double(#field, v); }}
#define OTAFL_ENUM_KNOB(field, table)                                                        \
  Knob{#field, [](const ExperimentConfig& c) { return enum_to_string(table(), c.field); },   \
       [](ExperimentConfig& c, const std::string& v) { c.field = enum_from_string(table(), #field, v); }}
#define OTAFL_STRING_KNOB(field) \
  Knob{#field, [](const ExperimentConfig& c) { return c.field; }, [](ExperimentConfig& c, const std::string& v) { c.field = v; }}

  static const std::vector<Knob> table{
      OTAFL_ENUM_KNOB(task, task_names),
      OTAFL_ENUM_KNOB(algorithm, algorithm_names),
      OTAFL_SIZE_KNOB(clients),
      OTAFL_SIZE_KNOB(rounds),
      OTAFL_INT_KNOB(non_iid_p),
      OTAFL_ENUM_KNOB(balance, balance_names),
      OTAFL_DOUBLE_KNOB(dirichlet_gamma),
      OTAFL_DOUBLE_KNOB(snr_db),
      Knob{"power", [](const ExperimentConfig& c) { return c.power ? format_double(*c.power) : std::string("auto"); },
           [](ExperimentConfig& c, const std::string& v) {
             if (v == "auto")
               c.power.reset();
             else
               c.power = parse_double("power", v);
           }},
      OTAFL_DOUBLE_KNOB(eta),
      OTAFL_ENUM_KNOB(eta_schedule, eta_names),
      OTAFL_ENUM_KNOB(beta_rule, beta_names),
      OTAFL_DOUBLE_KNOB(beta_fixed),
      OTAFL_ENUM_KNOB(g_bound_alpha, g_alpha_names),
      OTAFL_INT_KNOB(tau_max),
      OTAFL_INT_KNOB(uniform_tau),
      OTAFL_SIZE_KNOB(batch),
      OTAFL_DOUBLE_KNOB(l2),
      OTAFL_ENUM_KNOB(fading, fading_names),
      OTAFL_DOUBLE_KNOB(rayleigh_scale),
      OTAFL_DOUBLE_KNOB(gain_floor),
      OTAFL_ENUM_KNOB(gain_floor_policy, floor_names),
      Knob{"seed", [](const ExperimentConfig& c) { return std::to_string(c.seed); },
           [](ExperimentConfig& c, const std::string& v) { c.seed = parse_unsigned("seed", v); }},
      OTAFL_SIZE_KNOB(eval_every),
      OTAFL_SIZE_KNOB(train_limit),
      OTAFL_SIZE_KNOB(test_limit),
      OTAFL_STRING_KNOB(data_dir),
      OTAFL_SIZE_KNOB(synth_dim),
      OTAFL_DOUBLE_KNOB(synth_heterogeneity),
      OTAFL_DOUBLE_KNOB(synth_noise),
      OTAFL_DOUBLE_KNOB(synth_init_scale),
      OTAFL_DOUBLE_KNOB(oracle_L),
      OTAFL_DOUBLE_KNOB(oracle_eta),
      OTAFL_DOUBLE_KNOB(oracle_sigma),
      OTAFL_DOUBLE_KNOB(oracle_sigma_c),
      OTAFL_SIZE_KNOB(oracle_horizon),
      OTAFL_SIZE_KNOB(oracle_reps),
      OTAFL_SIZE_KNOB(oracle_instances),
      OTAFL_STRING_KNOB(out),
  };
#undef OTAFL_SIZE_KNOB
#undef OTAFL_INT_KNOB
#undef OTAFL_DOUBLE_KNOB
#undef OTAFL_ENUM_KNOB
#undef OTAFL_STRING_KNOB
  return table;
}

inline const Knob* find_knob(const std::string& key) {
  for (const auto& k : knobs())
    if (key == k.name) return &k;
  return nullptr;
}

/// Sets one key. Dashes are accepted in place of underscores.
inline void apply_setting(ExperimentConfig& cfg, std::string key, const std::string& value, int line = 0) {
  for (auto& ch : key)
    if (ch == '-') ch = '_';
  const Knob* k = find_knob(key);
  if (k == nullptr) throw ConfigError(key, "unknown key", line);
  try {
    k->set(cfg, value);
  } catch (const ConfigError& e) {
    if (line == 0) throw;
    throw ConfigError(e.field(), std::string(e.what()).substr(e.field().size() + 2), line);
  }
}

/// `key = value` lines onto `cfg`. '#' starts a comment; `[section]` headers
/// are accepted and only group keys visually.
inline void parse_config_text(ExperimentConfig& cfg, const std::string& text) {
  std::istringstream in(text);
  std::string raw;
  int line = 0;
  while (std::getline(in, raw)) {
    ++line;
    const auto hash = raw.find('#');
    const std::string s = detail::trim(hash == std::string::npos ? raw : raw.substr(0, hash));
    if (s.empty()) continue;
    if (s.front() == '[') {
      if (s.back() != ']' || s.size() < 3) throw ConfigError("section", "malformed section header '" + s + "'", line);
      continue;
    }
    const auto eq = s.find('=');
    if (eq == std::string::npos) throw ConfigError("syntax", "expected 'key = value', got '" + s + "'", line);
    const std::string key = detail::trim(s.substr(0, eq));
    const std::string value = detail::trim(s.substr(eq + 1));
    if (key.empty()) throw ConfigError("syntax", "empty key", line);
    apply_setting(cfg, key, value, line);
  }
}

inline void load_config_file(ExperimentConfig& cfg, const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("config", "cannot open '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  parse_config_text(cfg, ss.str());
}

/// Resolved configuration, one `key = value` line per knob.
inline std::string to_text(const ExperimentConfig& cfg) {
  std::string out;
  for (const auto& k : knobs()) out += std::string(k.name) + " = " + k.get(cfg) + "\n";
  return out;
}

/// Field-level checks; `classes` bounds the non-IID level.
inline void validate(const ExperimentConfig& c, int classes = 10) {
  auto need = [](bool ok, const char* field, const std::string& what) {
    if (!ok) throw ConfigError(field, what);
  };
  need(c.clients >= 1, "clients", "must be >= 1");
  need(c.rounds >= 1, "rounds", "must be >= 1");
  if (c.task == Task::mnist_logistic)
    need(c.non_iid_p >= 1 && c.non_iid_p <= classes, "non_iid_p",
         "must be in [1, " + std::to_string(classes) + "], got " + std::to_string(c.non_iid_p));
  need(c.dirichlet_gamma > 0.0, "dirichlet_gamma", "must be > 0");
  need(!std::isnan(c.snr_db) && c.snr_db > -std::numeric_limits<double>::infinity(), "snr_db", "must be a number or inf");
  need(!c.power || (*c.power > 0.0 && std::isfinite(*c.power)), "power", "must be > 0 or auto");
  need(c.eta > 0.0 && std::isfinite(c.eta), "eta", "must be > 0");
  need(c.beta_fixed > 0.0 && std::isfinite(c.beta_fixed), "beta_fixed", "must be > 0");
  need(c.tau_max >= 1, "tau_max", "must be >= 1");
  need(c.uniform_tau >= 0, "uniform_tau", "must be >= 0");
  need(c.batch >= 1, "batch", "must be >= 1");
  need(c.l2 >= 0.0, "l2", "must be >= 0");
  need(c.rayleigh_scale > 0.0, "rayleigh_scale", "must be > 0");
  need(c.gain_floor >= 0.0 && c.gain_floor < 1.0, "gain_floor", "must be in [0, 1)");
  need(c.eval_every >= 1, "eval_every", "must be >= 1");
  need(c.synth_dim >= 1, "synth_dim", "must be >= 1");
  need(c.synth_heterogeneity >= 0.0, "synth_heterogeneity", "must be >= 0");
  need(c.synth_noise >= 0.0, "synth_noise", "must be >= 0");
  need(c.oracle_L > 0.0, "oracle_L", "must be > 0");
  need(c.oracle_eta > 0.0 && c.oracle_eta * c.oracle_L < 1.0, "oracle_eta", "must lie in (0, 1/oracle_L)");
  need(c.oracle_sigma >= 0.0, "oracle_sigma", "must be >= 0");
  need(c.oracle_sigma_c >= 0.0, "oracle_sigma_c", "must be >= 0");
  need(c.oracle_reps >= 2, "oracle_reps", "must be >= 2");
  need(c.oracle_horizon >= 1, "oracle_horizon", "must be >= 1");
  if (c.task == Task::mnist_logistic)
    need(!c.data_dir.empty(), "data_dir", std::string("not set (use data_dir or ") + kDataDirEnv + ")");
}

inline std::string task_name(Task t) { return detail::enum_to_string(detail::task_names(), t); }
inline std::string algorithm_name(Algorithm a) { return detail::enum_to_string(detail::algorithm_names(), a); }

}  // namespace otafl::harness
