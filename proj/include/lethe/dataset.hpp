#pragma once

#include <atomic>
#include <cstddef>
#include <span>
#include <vector>

#include "lethe/matrix.hpp"

namespace lethe {

// Features (one row per sample) with integer class labels.
struct LabeledDataset {
  Matrix features;
  std::vector<int> labels;
  std::size_t num_classes = 0;

  std::size_t size() const { return labels.size(); }
  std::size_t feature_dim() const { return features.cols; }

  // Throws InvalidArgument when labels/rows disagree or a label is out of range.
  void validate() const;

  // Row subset in the given order.
  LabeledDataset subset(std::span<const std::size_t> indices) const;
};

struct Batch {
  Matrix inputs;
  std::vector<int> labels;
};

/// Counts training-path reads of a watched index set.
///
/// The harness watches the unlearning indices and checks that retraining and
/// continued training never gather one of them into a batch. Thread-safe.
class AccessAudit {
 public:
  AccessAudit() = default;
  AccessAudit(std::size_t dataset_size, std::span<const std::size_t> watched);

  void record(std::size_t index) const {
    if (index < watched_.size() && watched_[index]) reads_.fetch_add(1, std::memory_order_relaxed);
  }
  std::size_t reads() const { return reads_.load(std::memory_order_relaxed); }

 private:
  std::vector<bool> watched_;
  mutable std::atomic<std::size_t> reads_{0};
};

// A client's local data: positions into a shared dataset.
struct ShardView {
  const LabeledDataset* dataset = nullptr;
  std::span<const std::size_t> indices;
  const AccessAudit* audit = nullptr;

  std::size_t size() const { return indices.size(); }

  // Gathers shard positions `positions` (offsets into `indices`) into a batch.
  Batch gather(std::span<const std::size_t> positions) const;
  Batch gather_all() const;
};

}  // namespace lethe
