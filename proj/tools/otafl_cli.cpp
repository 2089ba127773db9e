#include <cstdio>
#include <exception>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "otafl/otafl.hpp"

namespace {

using otafl::harness::ConfigError;
using otafl::harness::ExperimentConfig;

enum Exit { kOk = 0, kConfig = 1, kData = 2, kDiverged = 3, kError = 4 };

// Named flags kept as text so they go through the same parser as file keys.
struct Overrides {
  std::string config;
  std::vector<std::string> sets;
  std::vector<std::pair<const char*, std::optional<std::string>>> named{
      {"task", {}},     {"algorithm", {}}, {"clients", {}},   {"rounds", {}}, {"non_iid_p", {}},
      {"snr_db", {}},   {"power", {}},     {"tau_max", {}},   {"beta_rule", {}}, {"eta", {}},
      {"seed", {}},     {"out", {}}};
  bool quiet = false;

  void attach(CLI::App* app, bool with_task) {
    app->add_option("--config", config, "key = value config file")->check(CLI::ExistingFile);
    for (auto& [key, value] : named) {
      std::string flag = std::string("--") + key;
      for (auto& ch : flag)
        if (ch == '_') ch = '-';
      if (!with_task && std::string(key) == "task") continue;
      app->add_option(flag, value, std::string("set ") + key);
    }
    app->add_option("--set", sets, "extra key=value settings (repeatable)");
    app->add_flag("-q,--quiet", quiet, "only print the final status line");
  }

  // Defaults, then the file, then --set, then named flags.
  ExperimentConfig resolve() const {
    ExperimentConfig cfg = otafl::harness::default_config();
    if (!config.empty()) otafl::harness::load_config_file(cfg, config);
    for (const auto& kv : sets) {
      const auto eq = kv.find('=');
      if (eq == std::string::npos) throw ConfigError("--set", "expected key=value, got '" + kv + "'");
      otafl::harness::apply_setting(cfg, kv.substr(0, eq), kv.substr(eq + 1));
    }
    for (const auto& [key, value] : named)
      if (value) otafl::harness::apply_setting(cfg, key, *value);
    return cfg;
  }
};

void print_summary(const otafl::harness::KeyValues& kv) {
  for (const auto& [k, v] : kv)
    if (!v.empty()) std::cout << k << " = " << v << "\n";
}

int do_run(const ExperimentConfig& cfg, bool quiet) {
  if (!quiet) std::cout << "# resolved configuration\n" << otafl::harness::to_text(cfg) << "\n";
  const auto r = otafl::harness::run_experiment(cfg);
  if (!quiet) print_summary(r.summary);
  if (r.status == otafl::harness::RunStatus::diverged) {
    std::cerr << "otafl: diverged: " << r.message << "\n";
    return kDiverged;
  }
  if (quiet) std::cout << "completed\n";
  return kOk;
}

std::vector<otafl::harness::SweepAxis> parse_axes(const std::vector<std::string>& specs) {
  std::vector<otafl::harness::SweepAxis> axes;
  for (const auto& spec : specs) {
    const auto eq = spec.find('=');
    if (eq == std::string::npos) throw ConfigError("--axis", "expected key=v1,v2,..., got '" + spec + "'");
    otafl::harness::SweepAxis a{spec.substr(0, eq), {}};
    std::string rest = spec.substr(eq + 1);
    std::size_t start = 0;
    while (start <= rest.size()) {
      const auto comma = rest.find(',', start);
      const std::string v = rest.substr(start, comma == std::string::npos ? std::string::npos : comma - start);
      if (!v.empty()) a.values.push_back(v);
      if (comma == std::string::npos) break;
      start = comma + 1;
    }
    axes.push_back(std::move(a));
  }
  return axes;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Over-the-air federated learning experiments"};
  app.require_subcommand(1);

  Overrides run_opts, sweep_opts, oracle_opts;
  auto* run = app.add_subcommand("run", "run one experiment");
  run_opts.attach(run, true);

  auto* sw = app.add_subcommand("sweep", "run the cross product of one or more axes");
  sweep_opts.attach(sw, true);
  std::vector<std::string> axis_specs;
  sw->add_option("--axis", axis_specs, "axis=v1,v2,... with axis in {snr_db, non_iid_p, algorithm, seed}")
      ->required();

  auto* oracle = app.add_subcommand("oracle", "numerical checks of the theory");
  oracle_opts.attach(oracle, false);
  std::string which;
  oracle->add_option("which", which, "theorem1 or example1")
      ->required()
      ->check(CLI::IsMember({"theorem1", "example1"}));

  CLI11_PARSE(app, argc, argv);

  try {
    if (run->parsed()) return do_run(run_opts.resolve(), run_opts.quiet);
    if (oracle->parsed()) {
      ExperimentConfig cfg = oracle_opts.resolve();
      cfg.task = which == "theorem1" ? otafl::harness::Task::oracle_theorem1 : otafl::harness::Task::oracle_example1;
      return do_run(cfg, oracle_opts.quiet);
    }
    const ExperimentConfig base = sweep_opts.resolve();
    const auto result = otafl::harness::sweep(base, parse_axes(axis_specs));
    if (!sweep_opts.quiet) std::cout << result.table_csv;
    std::size_t bad = 0;
    for (const auto& c : result.children) {
      if (c.ok) continue;
      ++bad;
      std::cerr << "otafl: child " << c.status << ": " << c.message << "\n";
    }
    std::cout << result.children.size() - bad << "/" << result.children.size() << " runs completed\n";
    return bad == 0 ? kOk : kDiverged;
  } catch (const ConfigError& e) {
    std::cerr << "otafl: config error: " << e.what() << "\n";
    return kConfig;
  } catch (const otafl::ContractError& e) {
    std::cerr << "otafl: invalid setting: " << e.what() << "\n";
    return kConfig;
  } catch (const otafl::IdxError& e) {
    std::cerr << "otafl: dataset error: " << e.what() << "\n";
    return kData;
  } catch (const std::exception& e) {
    std::cerr << "otafl: error: " << e.what() << "\n";
    return kError;
  }
}
