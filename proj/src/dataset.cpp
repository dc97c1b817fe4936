#include "lethe/dataset.hpp"

#include <algorithm>
#include <numeric>
#include <string>

#include "lethe/error.hpp"

namespace lethe {

void LabeledDataset::validate() const {
  if (features.rows != labels.size())
    throw InvalidArgument("dataset: " + std::to_string(features.rows) + " feature rows but " +
                          std::to_string(labels.size()) + " labels");
  for (int y : labels)
    if (y < 0 || static_cast<std::size_t>(y) >= num_classes)
      throw InvalidArgument("dataset: label " + std::to_string(y) + " outside [0, " +
                            std::to_string(num_classes) + ")");
}

LabeledDataset LabeledDataset::subset(std::span<const std::size_t> indices) const {
  LabeledDataset out;
  out.num_classes = num_classes;
  out.features = Matrix(indices.size(), features.cols);
  out.labels.reserve(indices.size());
  for (std::size_t r = 0; r < indices.size(); ++r) {
    const std::size_t src = indices[r];
    if (src >= size()) throw InvalidArgument("dataset subset: index out of range");
    std::copy_n(features.row(src).begin(), features.cols, out.features.row(r).begin());
    out.labels.push_back(labels[src]);
  }
  return out;
}

AccessAudit::AccessAudit(std::size_t dataset_size, std::span<const std::size_t> watched)
    : watched_(dataset_size, false) {
  for (std::size_t i : watched)
    if (i < dataset_size) watched_[i] = true;
}

Batch ShardView::gather(std::span<const std::size_t> positions) const {
  Batch b;
  b.inputs = Matrix(positions.size(), dataset->features.cols);
  b.labels.reserve(positions.size());
  for (std::size_t r = 0; r < positions.size(); ++r) {
    const std::size_t idx = indices[positions[r]];
    if (audit) audit->record(idx);
    const auto src = dataset->features.row(idx);
    std::copy(src.begin(), src.end(), b.inputs.row(r).begin());
    b.labels.push_back(dataset->labels[idx]);
  }
  return b;
}

Batch ShardView::gather_all() const {
  std::vector<std::size_t> all(indices.size());
  std::iota(all.begin(), all.end(), std::size_t{0});
  return gather(all);
}

}  // namespace lethe
