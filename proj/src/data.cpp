#include "lethe/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iterator>
#include <numeric>
#include <string>

#include "json.hpp"

#include "lethe/error.hpp"
#include "lethe/rng.hpp"

namespace lethe::data {

namespace {

std::vector<unsigned char> read_bytes(const std::filesystem::path& path, const std::string& field) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError(field, "cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::uint32_t read_be32(const std::vector<unsigned char>& bytes, std::size_t offset,
                        const std::string& field) {
  if (bytes.size() < offset + 4) throw FormatError(field, "truncated header");
  return (std::uint32_t{bytes[offset]} << 24) | (std::uint32_t{bytes[offset + 1]} << 16) |
         (std::uint32_t{bytes[offset + 2]} << 8) | std::uint32_t{bytes[offset + 3]};
}

std::vector<std::vector<std::size_t>> indices_by_class(const LabeledDataset& dataset) {
  std::vector<std::vector<std::size_t>> out(dataset.num_classes);
  for (std::size_t i = 0; i < dataset.size(); ++i) out[dataset.labels[i]].push_back(i);
  return out;
}

// Integer counts summing to `total`, proportional to `p`. Leftover units go to
// the largest fractional parts, lower index first on ties.
std::vector<std::size_t> largest_remainder(const std::vector<double>& p, std::size_t total) {
  std::vector<std::size_t> counts(p.size());
  std::vector<double> frac(p.size());
  std::size_t assigned = 0;
  for (std::size_t k = 0; k < p.size(); ++k) {
    const double raw = p[k] * static_cast<double>(total);
    counts[k] = std::min(total, static_cast<std::size_t>(std::floor(raw)));
    frac[k] = raw - static_cast<double>(counts[k]);
    assigned += counts[k];
  }
  std::vector<std::size_t> order(p.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return frac[a] > frac[b]; });
  // Floating-point sums of p may be slightly off 1; settle in both directions.
  for (std::size_t i = 0; assigned < total; i = (i + 1) % order.size(), ++assigned) ++counts[order[i]];
  for (std::size_t i = order.size(); assigned > total;) {
    i = (i == 0 ? order.size() : i) - 1;
    if (counts[order[i]] > 0) {
      --counts[order[i]];
      --assigned;
    }
  }
  return counts;
}

bool sorted_contains(const std::vector<std::size_t>& v, std::size_t x) {
  return std::binary_search(v.begin(), v.end(), x);
}

}  // namespace

LabeledDataset synth_blobs(std::size_t num_classes, std::size_t samples_per_class,
                           std::size_t feature_dim, double spread, std::uint64_t seed) {
  if (num_classes == 0 || samples_per_class == 0 || feature_dim == 0)
    throw InvalidArgument("synth_blobs: counts must be >= 1");
  if (!(spread > 0.0)) throw InvalidArgument("synth_blobs: spread must be > 0");

  Rng rng(seed);
  const std::size_t signal = (3 * feature_dim + 3) / 4;
  Matrix means(num_classes, feature_dim);
  for (std::size_t c = 0; c < num_classes; ++c)
    for (std::size_t j = 0; j < signal; ++j) means(c, j) = rng.uniform(0.1, 0.9);

  LabeledDataset ds;
  ds.num_classes = num_classes;
  ds.features = Matrix(num_classes * samples_per_class, feature_dim);
  ds.labels.reserve(num_classes * samples_per_class);
  std::size_t r = 0;
  for (std::size_t c = 0; c < num_classes; ++c) {
    for (std::size_t i = 0; i < samples_per_class; ++i, ++r) {
      for (std::size_t j = 0; j < feature_dim; ++j)
        ds.features(r, j) = std::clamp(means(c, j) + spread * rng.normal(), 0.0, 1.0);
      ds.labels.push_back(static_cast<int>(c));
    }
  }
  return ds;
}

LabeledDataset load_idx(const std::filesystem::path& images_path,
                        const std::filesystem::path& labels_path) {
  const auto img = read_bytes(images_path, "images");
  const auto lab = read_bytes(labels_path, "labels");

  const std::uint32_t img_magic = read_be32(img, 0, "images");
  if (img_magic != 0x00000803u) throw FormatError("images", "bad magic number " + std::to_string(img_magic));
  const std::uint32_t lab_magic = read_be32(lab, 0, "labels");
  if (lab_magic != 0x00000801u) throw FormatError("labels", "bad magic number " + std::to_string(lab_magic));

  const std::size_t n = read_be32(img, 4, "images");
  const std::size_t rows = read_be32(img, 8, "images");
  const std::size_t cols = read_be32(img, 12, "images");
  const std::size_t n_labels = read_be32(lab, 4, "labels");
  if (n_labels != n)
    throw FormatError("labels", "count " + std::to_string(n_labels) + " does not match " +
                                    std::to_string(n) + " images");
  const std::size_t dim = rows * cols;
  if (img.size() < 16 + n * dim) throw FormatError("images", "truncated pixel data");
  if (lab.size() < 8 + n) throw FormatError("labels", "truncated label data");

  LabeledDataset ds;
  ds.features = Matrix(n, dim);
  for (std::size_t k = 0; k < n * dim; ++k) ds.features.data[k] = img[16 + k] / 255.0;
  int top = -1;
  for (std::size_t i = 0; i < n; ++i) {
    ds.labels.push_back(lab[8 + i]);
    top = std::max(top, ds.labels.back());
  }
  ds.num_classes = static_cast<std::size_t>(top + 1);
  return ds;
}

TrainTestSplit holdout_split(const LabeledDataset& dataset, std::size_t test_per_class,
                             std::uint64_t seed) {
  dataset.validate();
  Rng rng(seed);
  std::vector<std::size_t> train_idx, test_idx;
  for (auto& members : indices_by_class(dataset)) {
    if (members.size() <= test_per_class)
      throw InvalidArgument("holdout_split: a class has too few samples for the test split");
    rng.shuffle(members);
    test_idx.insert(test_idx.end(), members.begin(), members.begin() + static_cast<std::ptrdiff_t>(test_per_class));
    train_idx.insert(train_idx.end(), members.begin() + static_cast<std::ptrdiff_t>(test_per_class), members.end());
  }
  std::sort(train_idx.begin(), train_idx.end());
  std::sort(test_idx.begin(), test_idx.end());
  return {dataset.subset(train_idx), dataset.subset(test_idx)};
}

std::vector<std::size_t> DatasetPartition::remaining_shard(std::size_t k) const {
  std::vector<std::size_t> out;
  for (std::size_t i : client_shards.at(k))
    if (!sorted_contains(unlearn_indices, i)) out.push_back(i);
  return out;
}

std::vector<std::size_t> DatasetPartition::unlearn_shard(std::size_t k) const {
  std::vector<std::size_t> out;
  for (std::size_t i : client_shards.at(k))
    if (sorted_contains(unlearn_indices, i)) out.push_back(i);
  return out;
}

std::vector<std::size_t> DatasetPartition::remaining_clients() const {
  std::vector<std::size_t> out;
  for (std::size_t k = 0; k < client_shards.size(); ++k)
    if (!remaining_shard(k).empty()) out.push_back(k);
  return out;
}

bool DatasetPartition::is_unlearn_index(std::size_t index) const {
  return sorted_contains(unlearn_indices, index);
}

void DatasetPartition::validate(std::size_t dataset_size) const {
  std::vector<int> owner(dataset_size, -1);
  for (std::size_t k = 0; k < client_shards.size(); ++k) {
    for (std::size_t i : client_shards[k]) {
      if (i >= dataset_size) throw InvalidArgument("partition: index out of range");
      if (owner[i] != -1) throw InvalidArgument("partition: index " + std::to_string(i) + " in two shards");
      owner[i] = static_cast<int>(k);
    }
  }
  if (std::find(owner.begin(), owner.end(), -1) != owner.end())
    throw InvalidArgument("partition: shards do not cover the dataset");
  for (std::size_t i : unlearn_indices)
    if (i >= dataset_size) throw InvalidArgument("partition: unlearning index out of range");
  if (!std::is_sorted(unlearn_indices.begin(), unlearn_indices.end()))
    throw InvalidArgument("partition: unlearning indices must be sorted");
}

DatasetPartition partition_dirichlet(const LabeledDataset& dataset, std::size_t num_clients,
                                     double alpha, std::uint64_t seed) {
  if (num_clients < 2) throw InvalidArgument("partition_dirichlet: need at least 2 clients");
  if (!(alpha > 0.0)) throw InvalidArgument("partition_dirichlet: alpha must be > 0");
  dataset.validate();
  if (dataset.size() < num_clients) throw PartitionError("partition_dirichlet: fewer samples than clients");

  Rng rng(seed);
  const auto by_class = indices_by_class(dataset);
  constexpr int max_attempts = 100;
  for (int attempt = 0; attempt < max_attempts; ++attempt) {
    std::vector<std::vector<std::size_t>> shards(num_clients);
    for (auto members : by_class) {
      if (members.empty()) continue;
      rng.shuffle(members);
      const auto counts = largest_remainder(sample_dirichlet(rng, num_clients, alpha), members.size());
      std::size_t pos = 0;
      for (std::size_t k = 0; k < num_clients; ++k) {
        shards[k].insert(shards[k].end(), members.begin() + static_cast<std::ptrdiff_t>(pos),
                         members.begin() + static_cast<std::ptrdiff_t>(pos + counts[k]));
        pos += counts[k];
      }
    }
    if (std::any_of(shards.begin(), shards.end(), [](const auto& s) { return s.empty(); })) continue;
    for (auto& s : shards) std::sort(s.begin(), s.end());
    DatasetPartition p;
    p.client_shards = std::move(shards);
    p.seed = seed;
    p.alpha = alpha;
    return p;
  }
  throw PartitionError("partition_dirichlet: no draw with all shards nonempty after " +
                       std::to_string(max_attempts) + " attempts");
}

DatasetPartition partition_iid(const LabeledDataset& dataset, std::size_t num_clients,
                               std::uint64_t seed) {
  if (num_clients < 2) throw InvalidArgument("partition_iid: need at least 2 clients");
  dataset.validate();
  if (num_clients > dataset.size()) throw InvalidArgument("partition_iid: more clients than samples");

  Rng rng(seed);
  std::vector<std::vector<std::size_t>> shards(num_clients);
  // Deal each shuffled class round-robin, continuing the rotation across
  // classes so totals and per-class counts both stay within one.
  std::size_t next = 0;
  for (auto members : indices_by_class(dataset)) {
    rng.shuffle(members);
    for (std::size_t i : members) {
      shards[next].push_back(i);
      next = (next + 1) % num_clients;
    }
  }
  for (auto& s : shards) std::sort(s.begin(), s.end());
  DatasetPartition p;
  p.client_shards = std::move(shards);
  p.seed = seed;
  return p;
}

void TriggerSpec::validate(const LabeledDataset& dataset) const {
  if (patch_coords.empty()) throw InvalidArgument("trigger: empty patch");
  for (std::size_t c : patch_coords)
    if (c >= dataset.feature_dim()) throw InvalidArgument("trigger: patch coordinate out of range");
  if (target_label < 0 || static_cast<std::size_t>(target_label) >= dataset.num_classes)
    throw InvalidArgument("trigger: target label out of range");
}

TriggerSpec corner_trigger(std::size_t feature_dim, std::size_t width, int target_label) {
  if (width == 0 || width > feature_dim) throw InvalidArgument("trigger: bad patch width");
  TriggerSpec t;
  for (std::size_t j = feature_dim - width; j < feature_dim; ++j) t.patch_coords.push_back(j);
  t.target_label = target_label;
  return t;
}

LabeledDataset apply_trigger(const LabeledDataset& dataset, std::span<const std::size_t> indices,
                             const TriggerSpec& trigger) {
  trigger.validate(dataset);
  LabeledDataset out = dataset;
  for (std::size_t i : indices) {
    if (i >= out.size()) throw InvalidArgument("trigger: index out of range");
    for (std::size_t c : trigger.patch_coords) out.features(i, c) = trigger.patch_value;
    out.labels[i] = trigger.target_label;
  }
  return out;
}

UnlearnTarget make_unlearn_target(const LabeledDataset& dataset, const DatasetPartition& partition,
                                  const Granularity& granularity,
                                  const std::optional<TriggerSpec>& trigger, std::uint64_t seed) {
  dataset.validate();
  partition.validate(dataset.size());
  std::vector<std::size_t> selected;
  switch (granularity.kind) {
    case GranularityKind::sample: {
      if (!(granularity.ratio > 0.0 && granularity.ratio < 1.0))
        throw InvalidArgument("unlearn target: ratio must be in (0, 1)");
      const auto count = static_cast<std::size_t>(std::llround(granularity.ratio * static_cast<double>(dataset.size())));
      std::vector<std::size_t> all(dataset.size());
      std::iota(all.begin(), all.end(), std::size_t{0});
      Rng rng(seed);
      rng.shuffle(all);
      selected.assign(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(count));
      break;
    }
    case GranularityKind::client:
      for (std::size_t k : granularity.clients) {
        if (k >= partition.num_clients()) throw InvalidArgument("unlearn target: client id " + std::to_string(k) + " out of range");
        selected.insert(selected.end(), partition.client_shards[k].begin(), partition.client_shards[k].end());
      }
      break;
    case GranularityKind::klass:
      if (trigger) throw InvalidArgument("unlearn target: class mode takes no trigger");
      if (granularity.label < 0 || static_cast<std::size_t>(granularity.label) >= dataset.num_classes)
        throw InvalidArgument("unlearn target: class label out of range");
      for (std::size_t i = 0; i < dataset.size(); ++i)
        if (dataset.labels[i] == granularity.label) selected.push_back(i);
      break;
  }
  std::sort(selected.begin(), selected.end());
  selected.erase(std::unique(selected.begin(), selected.end()), selected.end());
  if (selected.empty()) throw InvalidArgument("unlearn target: empty selection");

  UnlearnTarget out;
  out.partition = partition;
  out.partition.unlearn_indices = selected;
  out.partition.unlearn_clients.clear();
  for (std::size_t k = 0; k < partition.num_clients(); ++k)
    if (!out.partition.unlearn_shard(k).empty()) out.partition.unlearn_clients.push_back(k);

  if (trigger) {
    out.dataset = apply_trigger(dataset, selected, *trigger);
    for (std::size_t i : selected)
      if (dataset.labels[i] != trigger->target_label) out.forget_eval_indices.push_back(i);
  } else {
    out.dataset = dataset;
    out.forget_eval_indices = selected;
  }
  return out;
}

std::string partition_to_json(const DatasetPartition& partition) {
  nlohmann::ordered_json j;
  nlohmann::ordered_json shards = nlohmann::ordered_json::object();
  for (std::size_t k = 0; k < partition.client_shards.size(); ++k) shards[std::to_string(k)] = partition.client_shards[k];
  j["client_shards"] = shards;
  j["unlearn_clients"] = partition.unlearn_clients;
  j["unlearn_indices"] = partition.unlearn_indices;
  j["seed"] = partition.seed;
  j["alpha"] = partition.alpha ? nlohmann::ordered_json(*partition.alpha) : nlohmann::ordered_json(nullptr);
  return j.dump();
}

DatasetPartition partition_from_json(const std::string& text) {
  DatasetPartition p;
  try {
    const auto j = nlohmann::json::parse(text);
    const auto& shards = j.at("client_shards");
    p.client_shards.resize(shards.size());
    for (const auto& [key, value] : shards.items()) {
      const std::size_t k = std::stoul(key);
      if (k >= p.client_shards.size()) throw FormatError("client_shards", "client ids must be 0..K-1");
      p.client_shards[k] = value.get<std::vector<std::size_t>>();
    }
    p.unlearn_clients = j.at("unlearn_clients").get<std::vector<std::size_t>>();
    p.unlearn_indices = j.at("unlearn_indices").get<std::vector<std::size_t>>();
    p.seed = j.at("seed").get<std::uint64_t>();
    if (j.contains("alpha") && !j.at("alpha").is_null()) p.alpha = j.at("alpha").get<double>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("partition", e.what());
  } catch (const std::invalid_argument& e) {
    throw FormatError("client_shards", std::string("bad client id: ") + e.what());
  } catch (const std::out_of_range& e) {
    throw FormatError("client_shards", std::string("bad client id: ") + e.what());
  }
  return p;
}

}  // namespace lethe::data
