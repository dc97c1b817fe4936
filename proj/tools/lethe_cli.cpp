#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "lethe/error.hpp"
#include "lethe/harness.hpp"
#include "lethe/metrics.hpp"

namespace {

enum Exit { kOk = 0, kConfig = 2, kAllUf = 3, kRuntime = 4 };

struct Common {
  std::string config_path;
  std::string output_dir;
  std::vector<std::uint64_t> seeds;
  int verbosity = 0;
  std::size_t jobs = 1;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("-c,--config", c.config_path, "experiment config (JSON)")->check(CLI::ExistingFile);
  cmd->add_option("-o,--output-dir", c.output_dir, "override output_dir");
  cmd->add_option("-s,--seed", c.seeds, "override the seed list");
  cmd->add_flag("-v,--verbose", c.verbosity, "progress messages (repeatable)");
  cmd->add_option("-j,--jobs", c.jobs, "seeds run in parallel")->check(CLI::PositiveNumber);
}

lethe::harness::ExperimentConfig load(const Common& c) {
  lethe::harness::ExperimentConfig cfg;
  if (!c.config_path.empty()) cfg = lethe::harness::load_config(c.config_path);
  if (!c.output_dir.empty()) cfg.output_dir = c.output_dir;
  if (!c.seeds.empty()) cfg.seeds = c.seeds;
  cfg.validate();
  return cfg;
}

lethe::harness::RunOptions options(const Common& c) {
  lethe::harness::RunOptions o;
  o.jobs = c.jobs;
  o.verbose = c.verbosity > 0;
  o.log = &std::cerr;
  return o;
}

int outcome(const lethe::harness::ScenarioResult& r) {
  if (r.any_failure()) return kRuntime;
  if (r.all_uf()) return kAllUf;
  return kOk;
}

void print_summary(const lethe::harness::ScenarioResult& r) {
  for (const auto& m : r.methods) {
    for (const auto& s : m.seeds) {
      std::cout << m.method << " seed " << s.seed << ": ";
      if (!s.ok()) {
        std::cout << "failed (" << s.error << ")\n";
        continue;
      }
      std::cout << "u-Acc " << s.rr.a_u << ", t-Acc " << s.t_acc_u;
      if (m.method != "retrain") std::cout << ", RR " << (s.rr.rr ? lethe::metrics::format_double(*s.rr.rr) : "UF");
      std::cout << ", T_U " << s.efficiency.t_u << ", T_P " << s.efficiency.t_p << '\n';
    }
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"LETHE federated unlearning simulator"};
  app.require_subcommand(1);

  Common run_opts, sweep_opts, ablate_opts;
  std::string method_override;
  auto* run = app.add_subcommand("run", "run one experiment");
  add_common(run, run_opts);
  run->add_option("-m,--method", method_override, "override the method");

  std::vector<double> gammas;
  auto* sweep = app.add_subcommand("sweep-gamma", "rounds-to-success versus gamma");
  add_common(sweep, sweep_opts);
  sweep->add_option("-g,--gamma", gammas, "gamma values")->required();

  auto* ablate = app.add_subcommand("ablate", "lethe and variants I-IV");
  add_common(ablate, ablate_opts);

  std::string report_dir;
  auto* rep = app.add_subcommand("report", "rebuild summary.csv from an existing run");
  rep->add_option("dir", report_dir, "run directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kConfig;
  }

  try {
    if (*run) {
      auto cfg = load(run_opts);
      if (!method_override.empty()) cfg.method = lethe::unlearn::parse_method(method_override);
      const auto r = lethe::harness::run_experiment(cfg, options(run_opts));
      print_summary(r);
      return outcome(r);
    }
    if (*sweep) {
      const auto cfg = load(sweep_opts);
      const auto s = lethe::harness::gamma_sweep(cfg, gammas, options(sweep_opts));
      for (const auto& row : s.rows)
        std::cout << "gamma " << row.gamma << ": T_tot " << row.t_tot << ", RR "
                  << (row.rr ? lethe::metrics::format_double(*row.rr) : "UF") << '\n';
      if (s.inconclusive) {
        std::cout << "inconclusive\n";
        return kAllUf;
      }
      return kOk;
    }
    if (*ablate) {
      const auto cfg = load(ablate_opts);
      const auto rows = lethe::harness::ablation_battery(cfg, options(ablate_opts));
      bool all_uf = true;
      for (const auto& row : rows) {
        std::cout << row.variant << ": T_U " << row.t_u << ", RR "
                  << (row.rr ? lethe::metrics::format_double(*row.rr) : "UF") << '\n';
        all_uf = all_uf && !row.rr;
      }
      return all_uf ? kAllUf : kOk;
    }
    const auto r = lethe::harness::report(report_dir);
    print_summary(r);
    return outcome(r);
  } catch (const lethe::ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kConfig;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kRuntime;
  }
}
