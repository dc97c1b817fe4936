#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "lethe/data.hpp"
#include "lethe/dataset.hpp"
#include "lethe/nn.hpp"

namespace lethe::fed {

enum class Phase { pretrain, retrain, reshape, rectify, restore, cont };

std::string phase_name(Phase phase);  // "pretrain", ..., "continue"
Phase parse_phase(const std::string& name);  // FormatError on unknown names

struct AggregationWeights {
  std::vector<std::size_t> clients;  // ascending
  std::vector<double> q;             // q_k = n_k / N, same order as clients
};

// Throws InvalidArgument on empty input, duplicate ids or a zero total.
AggregationWeights aggregation_weights(std::span<const std::size_t> clients,
                                       std::span<const std::size_t> sample_counts);

struct ClientUpdate {
  std::size_t client = 0;
  std::size_t num_samples = 0;
  nn::UpdateDelta delta;
};

/// Sum of q_k * delta_k, accumulated in ascending client-id order whatever the
/// submission order. Throws ProtocolError on mismatched delta shapes.
nn::UpdateDelta aggregate(std::vector<ClientUpdate> updates);

/// Client shards over one shared dataset. Every gather is reported to `audit`.
struct ClientPool {
  const LabeledDataset* dataset = nullptr;
  std::vector<std::vector<std::size_t>> shards;
  const AccessAudit* audit = nullptr;

  std::size_t num_clients() const { return shards.size(); }
  ShardView view(std::size_t client) const;

  // Full shards (pretraining), shards minus D_u (retraining, restore, Phase C),
  // shards restricted to D_u (forget stream).
  static ClientPool full(const LabeledDataset& dataset, const data::DatasetPartition& partition,
                         const AccessAudit* audit = nullptr);
  static ClientPool remaining(const LabeledDataset& dataset, const data::DatasetPartition& partition,
                              const AccessAudit* audit = nullptr);
  static ClientPool forget(const LabeledDataset& dataset, const data::DatasetPartition& partition,
                           const AccessAudit* audit = nullptr);
};

struct RoundRecord {
  std::size_t round = 0;
  Phase phase = Phase::pretrain;
  std::vector<std::size_t> participants;
  nn::UpdateDelta delta;  // applied global displacement (not serialized)
  std::vector<double> layer_norms;
  std::optional<double> u_acc;
  std::optional<double> t_acc;
  std::optional<double> probe_loss;
  // Rectify rounds only.
  std::vector<double> sims;
  std::vector<std::string> branches;
  std::vector<std::size_t> forget_participants;
};

std::vector<double> layer_norms(const nn::UpdateDelta& delta);

/// Evaluation sets for the per-round metrics. Either may be null.
struct EvalSets {
  const LabeledDataset* forget = nullptr;
  const LabeledDataset* test = nullptr;
};

struct FederationConfig {
  std::size_t rounds = 1;
  std::optional<std::size_t> clients_per_round;  // nullopt: all filtered clients
  nn::TrainConfig train;
  std::size_t eval_every = 1;  // 0 disables evaluation
  std::uint64_t seed = 0;

  void validate(std::size_t num_clients) const;
};

// Round-seed streams of the training phases.
namespace stream {
inline constexpr std::uint64_t pretrain = 1;
inline constexpr std::uint64_t retrain = 2;
inline constexpr std::uint64_t forget = 3;
inline constexpr std::uint64_t retain = 4;
inline constexpr std::uint64_t restore = 5;
inline constexpr std::uint64_t cont = 6;
}  // namespace stream

// Seed of round `round` in a stream; `stream` separates training phases that
// would otherwise share round numbers.
std::uint64_t round_seed(std::uint64_t seed, std::uint64_t stream, std::size_t round);

/// One FedAvg round: every participant runs local_train from `model` (seeded
/// by derive_seed({round_seed, client})), then the server adds the shard-size
/// weighted mean of their deltas. Participants must be distinct and hold
/// nonempty shards.
std::pair<nn::ModelParams, RoundRecord> fed_round(const nn::ModelParams& model,
                                                  const nn::MlpArchitecture& arch,
                                                  const ClientPool& pool,
                                                  std::span<const std::size_t> participants,
                                                  const nn::TrainConfig& train, std::uint64_t round_seed,
                                                  const nn::Adapter* adapter = nullptr);

struct TrainingRun {
  nn::ModelParams model;
  std::vector<RoundRecord> log;
};

/// cfg.rounds sequential rounds over `client_filter`. Records carry round
/// numbers first_round, first_round + 1, ... and `phase`. With an adapter the
/// clients train and are evaluated on the composite model.
TrainingRun run_training(const nn::ModelParams& initial, const nn::MlpArchitecture& arch,
                         const ClientPool& pool, const FederationConfig& cfg,
                         std::span<const std::size_t> client_filter, Phase phase, std::uint64_t stream,
                         const EvalSets& evals = {}, std::size_t first_round = 0,
                         const nn::Adapter* adapter = nullptr);

// Argmax class per row, lowest index on ties.
std::vector<int> predict(const nn::ModelParams& model, const nn::MlpArchitecture& arch,
                         const Matrix& inputs, const nn::Adapter* adapter = nullptr);

// Fraction of correct argmax predictions. Throws InvalidArgument on an empty set.
double evaluate(const nn::ModelParams& model, const nn::MlpArchitecture& arch,
                const LabeledDataset& eval_set, const nn::Adapter* adapter = nullptr);

// One JSON object per line.
std::string to_jsonl(std::span<const RoundRecord> log);
// Inverse of to_jsonl, without deltas. A record lacking "phase" is a FormatError.
std::vector<RoundRecord> parse_jsonl(const std::string& text);

}  // namespace lethe::fed
