#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "lethe/metrics.hpp"
#include "lethe/nn.hpp"
#include "lethe/unlearn.hpp"

namespace lethe::harness {

struct DatasetSpec {
  std::string kind = "synth";  // synth | idx
  std::size_t num_classes = 10;
  std::size_t samples_per_class = 200;  // training samples per class
  std::size_t test_per_class = 50;
  std::size_t feature_dim = 32;
  double spread = 0.1;
  std::string idx_images;
  std::string idx_labels;
};

struct PartitionSpec {
  std::string kind = "dirichlet";  // dirichlet | iid
  double alpha = 0.1;
  std::size_t num_clients = 10;
};

struct GranularitySpec {
  std::string kind = "client";  // client | sample | class
  // Empty: the client with the lower-median shard size.
  std::vector<std::size_t> clients;
  double ratio = 0.1;
  int label = 0;
  bool trigger = true;  // ignored in class mode
  std::size_t trigger_width = 4;
  double trigger_value = 1.0;
  int target_label = 0;
};

struct ExperimentConfig {
  std::string scenario = "desk";
  DatasetSpec dataset;
  PartitionSpec partition;
  GranularitySpec granularity;
  std::vector<std::size_t> hidden = {64};
  nn::Activation activation = nn::Activation::relu;
  unlearn::Method method = unlearn::Method::lethe;
  unlearn::RectifyConfig rectify;
  nn::TrainConfig train{0.01, 0.9, 1, 16, 0};
  std::optional<std::size_t> clients_per_round;
  std::size_t pretrain_rounds = 100;
  std::size_t t_cont = 50;
  std::vector<std::uint64_t> seeds = {2023, 2024, 2025};
  std::string output_dir = "runs/desk";
  std::optional<double> prop1_beta;  // neural diagnostic; secant estimate when unset
  // Extend Phase U until the UF gate clears (capped by rectify.max_unlearn_rounds).
  bool extend_to_gate = false;

  nn::MlpArchitecture architecture() const;
  void validate() const;  // ConfigError
};

// Throws ConfigError on malformed documents, unknown keys or invalid values.
ExperimentConfig config_from_json(const std::string& text);
std::string config_to_json(const ExperimentConfig& config);
ExperimentConfig load_config(const std::filesystem::path& path);

struct SeedResult {
  std::uint64_t seed = 0;
  std::string method;
  std::string error;  // nonempty when the seed failed
  metrics::ResurfacingReport rr;
  double t_acc_u = 0.0;  // after Phase U
  double t_acc_c = 0.0;  // after Phase C
  double retrain_u_acc = 0.0;
  double retrain_t_acc = 0.0;
  metrics::Efficiency efficiency;
  std::optional<double> rollback_weak_fraction;
  std::size_t unlearn_clients = 0;
  std::size_t forget_size = 0;
  std::size_t audit_retrain_reads = 0;
  std::size_t audit_continue_reads = 0;

  bool ok() const { return error.empty(); }
};

struct MethodSummary {
  std::string method;
  std::vector<SeedResult> seeds;
};

struct ScenarioResult {
  std::vector<MethodSummary> methods;

  const MethodSummary* find(const std::string& method) const;
  bool all_uf() const;      // every completed run failed the gate
  bool any_failure() const;  // some seed aborted
};

struct RunOptions {
  std::size_t jobs = 1;  // seeds run in parallel
  bool verbose = false;
  std::ostream* log = nullptr;  // progress and warnings
};

/// Per seed: pretrain on all clients, the retraining reference, then each
/// method followed by Phase C. Writes config.json, seed_<s>/... and
/// summary.csv under cfg.output_dir.
ScenarioResult run_methods(const ExperimentConfig& cfg, const std::vector<unlearn::Method>& methods,
                           const RunOptions& opts = {});
ScenarioResult run_experiment(const ExperimentConfig& cfg, const RunOptions& opts = {});

struct SweepRow {
  double gamma = 0.0;
  double t_u = 0.0;  // means over seeds
  double t_p = 0.0;
  double t_tot = 0.0;
  std::optional<double> rr;
  std::size_t uf_seeds = 0;
  bool cleared = false;  // gate cleared on every seed within the cap
};

struct SweepResult {
  std::vector<SweepRow> rows;
  bool inconclusive = false;
};

// One experiment per distinct gamma (duplicates dropped with a warning), each
// extending Phase U until the gate clears. Writes gamma_sweep.csv.
SweepResult gamma_sweep(const ExperimentConfig& cfg, const std::vector<double>& gammas,
                        const RunOptions& opts = {});

struct AblationRow {
  std::string variant;
  double t_u = 0.0;
  double t_p = 0.0;
  std::optional<double> rr;
  std::size_t uf_seeds = 0;
};

// lethe and variants I-IV on shared pretraining. Writes ablation.csv.
std::vector<AblationRow> ablation_battery(const ExperimentConfig& cfg, const RunOptions& opts = {});

void write_summary(std::ostream& out, const ScenarioResult& result);
// Rebuilds summary.csv from the per-seed result files under `output_dir`.
ScenarioResult report(const std::filesystem::path& output_dir);

// Mean and sample (n - 1) standard deviation; std is empty for fewer than 2 values.
std::pair<std::optional<double>, std::optional<double>> mean_std(const std::vector<double>& values);

}  // namespace lethe::harness
