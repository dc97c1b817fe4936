#include <filesystem>
#include <fstream>
#include <sstream>

#include "doctest.h"
#include "oracles.hpp"

#include "lethe/error.hpp"
#include "lethe/harness.hpp"

using namespace lethe;
namespace fs = std::filesystem;

namespace {

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / "lethe_harness_test" / name;
  fs::remove_all(p);
  return p;
}

std::vector<std::string> split(const std::string& line) {
  std::vector<std::string> out;
  std::stringstream ss(line);
  std::string cell;
  while (std::getline(ss, cell, ',')) out.push_back(cell);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

}  // namespace

TEST_CASE("config documents: defaults, round trip, strictness") {
  const auto def = harness::config_from_json("{}");
  CHECK(def.seeds == std::vector<std::uint64_t>{2023, 2024, 2025});
  CHECK(def.rectify.gamma == 0.3);
  CHECK(def.architecture().layer_widths == std::vector<std::size_t>{32, 64, 10});
  CHECK(def.pretrain_rounds == 100);
  CHECK(def.t_cont == 50);
  CHECK(def.rectify.unlearn_rounds == 20);
  CHECK(def.rectify.restore_rounds == 10);

  auto c = oracle::tiny_config("x");
  c.rectify.tau_f = 2.5;
  c.clients_per_round = 3;
  const auto back = harness::config_from_json(harness::config_to_json(c));
  CHECK(harness::config_to_json(back) == harness::config_to_json(c));
  CHECK(back.rectify.tau_f == 2.5);

  CHECK(harness::config_from_json(R"({"granularity": {"kind": "sample"}})").rectify.gamma == 1.5);
  CHECK(harness::config_from_json(R"({"granularity": {"kind": "sample"}, "rectify": {"gamma": 0.7}})").rectify.gamma ==
        0.7);

  CHECK_THROWS_AS(harness::config_from_json("{"), ConfigError);
  CHECK_THROWS_AS(harness::config_from_json(R"({"gama": 1})"), ConfigError);
  CHECK_THROWS_AS(harness::config_from_json(R"({"rectify": {"gama": 1}})"), ConfigError);
  CHECK_THROWS_AS(harness::config_from_json(R"({"t_cont": -1})"), ConfigError);
  CHECK_THROWS_AS(harness::config_from_json(R"({"t_cont": "ten"})"), ConfigError);
  CHECK_THROWS_AS(harness::config_from_json(R"({"method": "fedau"})"), ConfigError);
  CHECK_THROWS_AS(harness::config_from_json(R"({"seeds": []})"), ConfigError);
  CHECK_THROWS_AS(harness::config_from_json(R"({"partition": {"alpha": 0}})"), ConfigError);
  CHECK_THROWS_AS(harness::config_from_json(R"({"granularity": {"clients": [10]}})"), ConfigError);
  CHECK_THROWS_AS(harness::config_from_json(R"({"model": {"activation": "gelu"}})"), ConfigError);
  CHECK_THROWS_AS(harness::load_config("/nonexistent/config.json"), ConfigError);
}

TEST_CASE("mean and sample standard deviation") {
  const auto [m, s] = harness::mean_std({1.0, 2.0, 4.0});
  CHECK(*m == doctest::Approx(7.0 / 3.0));
  CHECK(*s == doctest::Approx(std::sqrt(((1 - 7.0 / 3) * (1 - 7.0 / 3) + (2 - 7.0 / 3) * (2 - 7.0 / 3) +
                                         (4 - 7.0 / 3) * (4 - 7.0 / 3)) /
                                        2.0)));
  CHECK_FALSE(harness::mean_std({3.0}).second.has_value());
  CHECK_FALSE(harness::mean_std({}).first.has_value());
}

TEST_CASE("experiment runs are reproducible and re-aggregable") {
  const auto dir_a = scratch("a"), dir_b = scratch("b");
  auto cfg = oracle::tiny_config(dir_a.string());
  const std::vector<unlearn::Method> methods = {unlearn::Method::lethe, unlearn::Method::retrain};
  const auto ra = harness::run_methods(cfg, methods);
  cfg.output_dir = dir_b.string();
  harness::RunOptions two_jobs;
  two_jobs.jobs = 2;
  harness::run_methods(cfg, methods, two_jobs);

  CHECK_FALSE(ra.any_failure());
  CHECK(slurp(dir_a / "summary.csv") == slurp(dir_b / "summary.csv"));
  for (const char* f : {"unlearn.jsonl", "continue.jsonl", "rollback_trace.csv", "alignment_heatmap.csv", "prop1.csv",
                        "w_cont.ckpt"})
    CHECK(slurp(dir_a / "seed_7" / "lethe" / f) == slurp(dir_b / "seed_7" / "lethe" / f));
  CHECK(fs::exists(dir_a / "config.json"));
  CHECK(fs::exists(dir_a / "seed_8" / "partition.json"));

  const auto* lethe = ra.find("lethe");
  REQUIRE(lethe);
  for (const auto& s : lethe->seeds) {
    CHECK(s.audit_retrain_reads == 0);
    CHECK(s.audit_continue_reads == 0);
    CHECK(s.rr.a_c_trace.size() == cfg.t_cont);
    CHECK(s.efficiency.t_u == cfg.rectify.unlearn_rounds);
  }
  const auto* retrain = ra.find("retrain");
  REQUIRE(retrain);
  for (const auto& s : retrain->seeds) {
    CHECK_FALSE(s.rr.rr.has_value());
    CHECK(s.rr.a_u == s.retrain_u_acc);
    CHECK(s.efficiency.t_p == cfg.pretrain_rounds);
  }

  // The stored config reproduces the run.
  auto stored = harness::load_config(dir_a / "config.json");
  stored.output_dir = scratch("c").string();
  harness::run_methods(stored, methods);
  CHECK(slurp(dir_a / "summary.csv") == slurp(fs::path(stored.output_dir) / "summary.csv"));

  // report rebuilds the same summary from the result files.
  const std::string original = slurp(dir_a / "summary.csv");
  fs::remove(dir_a / "summary.csv");
  harness::report(dir_a);
  CHECK(slurp(dir_a / "summary.csv") == original);
}

TEST_CASE("summary mean and std rows match a hand aggregation") {
  const auto dir = scratch("agg");
  auto cfg = oracle::tiny_config(dir.string());
  cfg.seeds = {7, 8, 9};
  harness::run_methods(cfg, {unlearn::Method::lethe});
  std::ifstream in(dir / "summary.csv");
  std::string line;
  std::getline(in, line);
  const auto header = split(line);
  std::vector<std::vector<std::string>> seeds;
  std::vector<std::string> mean, sd;
  while (std::getline(in, line)) {
    const auto cells = split(line);
    if (cells[1] == "mean") mean = cells;
    else if (cells[1] == "std") sd = cells;
    else seeds.push_back(cells);
  }
  REQUIRE(seeds.size() == 3);
  for (std::size_t col = 3; col < header.size(); ++col) {
    std::vector<double> v;
    for (const auto& s : seeds)
      if (!s[col].empty()) v.push_back(std::stod(s[col]));
    CAPTURE(header[col]);
    if (v.empty()) {
      CHECK(mean[col].empty());
      continue;
    }
    const auto [m, s] = harness::mean_std(v);
    CHECK(std::stod(mean[col]) == doctest::Approx(*m).epsilon(1e-15));
    if (v.size() < 2) CHECK(sd[col].empty());
    else CHECK(std::stod(sd[col]) == doctest::Approx(*s).epsilon(1e-12));
  }
}

TEST_CASE("ablation battery without Phase C reports RR 0 for every completed variant") {
  const auto dir = scratch("ablate");
  auto cfg = oracle::tiny_config(dir.string());
  cfg.t_cont = 0;
  cfg.seeds = {7};
  const auto rows = harness::ablation_battery(cfg);
  REQUIRE(rows.size() == 5);
  CHECK(rows[0].variant == "lethe");
  CHECK(rows[4].variant == "variant_IV");
  for (const auto& r : rows)
    if (r.rr) CHECK(*r.rr == 0.0);
  CHECK(fs::exists(dir / "ablation.csv"));
}

TEST_CASE("gamma sweep drops duplicates and writes one row per gamma") {
  const auto dir = scratch("sweep");
  auto cfg = oracle::tiny_config(dir.string());
  cfg.seeds = {7};
  cfg.t_cont = 2;
  std::ostringstream log;
  harness::RunOptions opts;
  opts.log = &log;
  const auto s = harness::gamma_sweep(cfg, {0.3, 1.0, 0.3}, opts);
  CHECK(s.rows.size() == 2);
  CHECK(log.str().find("duplicate gamma") != std::string::npos);
  std::ifstream in(dir / "gamma_sweep.csv");
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) ++n;
  CHECK(n == 3);
  cfg.method = unlearn::Method::retrain;
  CHECK_THROWS_AS(harness::gamma_sweep(cfg, {0.3}), ConfigError);
}

TEST_CASE("a failing seed is recorded and the others proceed") {
  const auto dir = scratch("fail");
  auto cfg = oracle::tiny_config(dir.string());
  cfg.seeds = {7, 8};
  // The probe diverges at this rate; variant I has no probe.
  cfg.rectify.probe_rate = 1e6;
  cfg.rectify.probe_steps = 50;
  const auto r = harness::run_methods(cfg, {unlearn::Method::lethe, unlearn::Method::variant_i});
  const auto* lethe = r.find("lethe");
  const auto* v1 = r.find("variant_I");
  for (const auto& s : lethe->seeds) CHECK_FALSE(s.ok());
  for (const auto& s : v1->seeds) CHECK(s.ok());
  CHECK(r.any_failure());
  CHECK(slurp(dir / "summary.csv").find("lethe,7,failed") != std::string::npos);
}
