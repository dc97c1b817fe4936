#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "lethe/dataset.hpp"
#include "lethe/matrix.hpp"

namespace lethe::nn {

enum class Activation { relu, tanh };

struct MlpArchitecture {
  std::vector<std::size_t> layer_widths;  // input, hidden..., output
  Activation activation = Activation::relu;

  std::size_t num_layers() const { return layer_widths.size() - 1; }
  std::size_t input_dim() const { return layer_widths.front(); }
  std::size_t num_classes() const { return layer_widths.back(); }
  void validate() const;
};

// One dense layer: z = x * weight + bias, weight is fan_in x fan_out.
struct LayerParams {
  Matrix weight;
  std::vector<double> bias;

  std::size_t size() const { return weight.data.size() + bias.size(); }
  bool operator==(const LayerParams&) const = default;
};

struct ModelParams {
  std::vector<LayerParams> layers;
  bool operator==(const ModelParams&) const = default;
};

using LayerVector = std::vector<double>;

/// Layer-indexed parameter displacement. Each layer vector holds the weight
/// (row-major) followed by the bias, the same layout `flatten` produces.
struct UpdateDelta {
  std::vector<LayerVector> layers;

  static UpdateDelta zeros_like(const ModelParams& params);

  std::size_t num_layers() const { return layers.size(); }
  void add_scaled(const UpdateDelta& other, double scale);
  UpdateDelta scaled(double scale) const;
  // All layers concatenated.
  std::vector<double> concat() const;
  bool same_shape(const UpdateDelta& other) const;
  bool operator==(const UpdateDelta&) const = default;
};

struct TrainConfig {
  double learning_rate = 0.001;
  double momentum = 0.9;
  std::size_t local_epochs = 1;
  std::size_t batch_size = 64;
  std::uint64_t seed = 0;

  // Throws ConfigError.
  void validate() const;
};

/// Residual bottleneck h <- h + up(ReLU(down(h))) applied to the output of
/// backbone layer `insertion_point` (a hidden layer). down is width x rank,
/// up is rank x width.
struct Adapter {
  Matrix down;
  Matrix up;
  std::size_t rank = 0;
  std::size_t insertion_point = 0;

  void validate(const MlpArchitecture& arch) const;
  bool operator==(const Adapter&) const = default;
};

struct AdapterGrad {
  Matrix down;
  Matrix up;
};

// Glorot-uniform weights in [-a, a], a = sqrt(6 / (fan_in + fan_out)); zero biases.
ModelParams init_params(const MlpArchitecture& arch, std::uint64_t seed);

// Glorot-uniform `down`, zero `up`: attaching it is a forward no-op. Default
// insertion point is the last hidden layer.
Adapter make_adapter(const MlpArchitecture& arch, std::size_t rank, std::uint64_t seed,
                     std::optional<std::size_t> insertion_point = std::nullopt);

void check_shapes(const ModelParams& params, const MlpArchitecture& arch);

std::vector<LayerVector> flatten(const ModelParams& params);
ModelParams unflatten(std::span<const LayerVector> layers, const MlpArchitecture& arch);

UpdateDelta difference(const ModelParams& after, const ModelParams& before);
ModelParams apply_delta(const ModelParams& params, const UpdateDelta& delta, double scale = 1.0);

double dot(std::span<const double> a, std::span<const double> b);
double norm(std::span<const double> a);

struct ForwardCache {
  std::vector<Matrix> layer_inputs;  // input to each layer (after any adapter)
  std::vector<Matrix> pre_activations;  // hidden layers only
  Matrix adapter_in;
  Matrix adapter_pre;
  Matrix adapter_hidden;
};

struct ForwardResult {
  Matrix logits;
  ForwardCache cache;
};

ForwardResult forward(const ModelParams& params, const MlpArchitecture& arch, const Matrix& inputs,
                      const Adapter* adapter = nullptr);

// Mean softmax cross-entropy of the batch.
double loss(const ModelParams& params, const MlpArchitecture& arch, const Batch& batch,
            const Adapter* adapter = nullptr);

struct LossGrad {
  double loss = 0.0;
  UpdateDelta grad;
};

struct CompositeLossGrad {
  double loss = 0.0;
  UpdateDelta backbone;
  AdapterGrad adapter;
};

LossGrad loss_and_grad(const ModelParams& params, const MlpArchitecture& arch, const Batch& batch);
// Gradients for the backbone and the adapter of the composite model.
CompositeLossGrad loss_and_grad(const ModelParams& params, const MlpArchitecture& arch,
                                const Batch& batch, const Adapter& adapter);

struct LocalTrainResult {
  ModelParams params;
  UpdateDelta delta;  // params - input params
};

/// E epochs of mini-batch SGD with momentum over `shard`.
///
/// The shard order is reshuffled every epoch from `cfg.seed`; batches are
/// consecutive slices of the shuffled order (the last one may be short).
/// Momentum state lives only for this call. With `adapter` set, the adapter
/// sits in the forward path but only the backbone is updated.
LocalTrainResult local_train(const ModelParams& params, const MlpArchitecture& arch,
                             const ShardView& shard, const TrainConfig& cfg,
                             const Adapter* adapter = nullptr);

// params + rate * grad
ModelParams sgd_ascent_step(const ModelParams& params, const UpdateDelta& grad, double rate);

}  // namespace lethe::nn
