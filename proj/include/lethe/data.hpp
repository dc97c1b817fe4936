#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "lethe/dataset.hpp"

namespace lethe::data {

/// Gaussian class clusters in [0,1]^feature_dim.
///
/// The first ceil(3/4 * feature_dim) coordinates form a "signal" block whose
/// class means are drawn from U(0.1, 0.9); the remaining coordinates have mean
/// 0 for every class, like the empty border of a digit image. Samples are
/// clip(mean + spread * N(0,1), 0, 1). Rows are ordered class by class.
LabeledDataset synth_blobs(std::size_t num_classes, std::size_t samples_per_class,
                           std::size_t feature_dim, double spread, std::uint64_t seed);

// IDX image/label pair (MNIST container). Pixels are scaled to [0,1].
LabeledDataset load_idx(const std::filesystem::path& images_path,
                        const std::filesystem::path& labels_path);

struct TrainTestSplit {
  LabeledDataset train;
  LabeledDataset test;
};

// Moves `test_per_class` random samples of every class into the test split.
TrainTestSplit holdout_split(const LabeledDataset& dataset, std::size_t test_per_class,
                             std::uint64_t seed);

struct DatasetPartition {
  std::vector<std::vector<std::size_t>> client_shards;  // sorted global indices
  std::vector<std::size_t> unlearn_clients;             // sorted; clients holding D_u
  std::vector<std::size_t> unlearn_indices;             // sorted; D_u
  std::uint64_t seed = 0;
  std::optional<double> alpha;  // set for Dirichlet partitions

  std::size_t num_clients() const { return client_shards.size(); }

  // Shard of client k with D_u removed / restricted to D_u.
  std::vector<std::size_t> remaining_shard(std::size_t k) const;
  std::vector<std::size_t> unlearn_shard(std::size_t k) const;
  // Clients with a nonempty remaining shard (C_r).
  std::vector<std::size_t> remaining_clients() const;
  bool is_unlearn_index(std::size_t index) const;

  // Throws InvalidArgument unless shards are disjoint, exhaustive over
  // [0, dataset_size) and D_u lies inside the union.
  void validate(std::size_t dataset_size) const;
};

DatasetPartition partition_dirichlet(const LabeledDataset& dataset, std::size_t num_clients,
                                     double alpha, std::uint64_t seed);
DatasetPartition partition_iid(const LabeledDataset& dataset, std::size_t num_clients,
                               std::uint64_t seed);

struct TriggerSpec {
  std::vector<std::size_t> patch_coords;
  double patch_value = 1.0;
  int target_label = 0;

  void validate(const LabeledDataset& dataset) const;
};

// Default backdoor patch: the last `width` coordinates set to 1.0.
TriggerSpec corner_trigger(std::size_t feature_dim, std::size_t width, int target_label);

// Copy of `dataset` with the patch written and the label set to the target on `indices`.
LabeledDataset apply_trigger(const LabeledDataset& dataset, std::span<const std::size_t> indices,
                             const TriggerSpec& trigger);

enum class GranularityKind { sample, client, klass };

struct Granularity {
  GranularityKind kind = GranularityKind::client;
  double ratio = 0.0;                // sample
  std::vector<std::size_t> clients;  // client
  int label = 0;                     // klass

  static Granularity sample(double ratio) { return {GranularityKind::sample, ratio, {}, 0}; }
  static Granularity client(std::vector<std::size_t> ids) {
    return {GranularityKind::client, 0.0, std::move(ids), 0};
  }
  static Granularity klass(int label) { return {GranularityKind::klass, 0.0, {}, label}; }
};

struct UnlearnTarget {
  LabeledDataset dataset;  // with the trigger applied to D_u
  DatasetPartition partition;
  // D_u members used to measure u-Acc. With a trigger these are the samples
  // whose original label differs from the target (a sample already of the
  // target class says nothing about the backdoor).
  std::vector<std::size_t> forget_eval_indices;
};

/// Marks D_u at the requested granularity and applies the trigger to it, if
/// given. Class mode rejects a trigger.
UnlearnTarget make_unlearn_target(const LabeledDataset& dataset, const DatasetPartition& partition,
                                  const Granularity& granularity,
                                  const std::optional<TriggerSpec>& trigger, std::uint64_t seed);

// {"client_shards": {"0": [...], ...}, "unlearn_clients", "unlearn_indices", "seed", "alpha"}
std::string partition_to_json(const DatasetPartition& partition);
DatasetPartition partition_from_json(const std::string& text);

}  // namespace lethe::data
