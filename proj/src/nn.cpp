#include "lethe/nn.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "lethe/error.hpp"
#include "lethe/rng.hpp"

namespace lethe::nn {

namespace {

// a (n x k) * b (k x m)
Matrix matmul(const Matrix& a, const Matrix& b) {
  Matrix out(a.rows, b.cols);
  for (std::size_t i = 0; i < a.rows; ++i) {
    double* o = out.data.data() + i * out.cols;
    for (std::size_t p = 0; p < a.cols; ++p) {
      const double av = a.data[i * a.cols + p];
      const double* br = b.data.data() + p * b.cols;
      for (std::size_t j = 0; j < b.cols; ++j) o[j] += av * br[j];
    }
  }
  return out;
}

// a^T (k x n) * b (n x m), a is n x k
Matrix matmul_tn(const Matrix& a, const Matrix& b) {
  Matrix out(a.cols, b.cols);
  for (std::size_t i = 0; i < a.rows; ++i) {
    const double* ar = a.data.data() + i * a.cols;
    const double* br = b.data.data() + i * b.cols;
    for (std::size_t p = 0; p < a.cols; ++p) {
      const double av = ar[p];
      double* o = out.data.data() + p * out.cols;
      for (std::size_t j = 0; j < b.cols; ++j) o[j] += av * br[j];
    }
  }
  return out;
}

// a (n x m) * b^T (m x k), b is k x m
Matrix matmul_nt(const Matrix& a, const Matrix& b) {
  Matrix out(a.rows, b.rows);
  for (std::size_t i = 0; i < a.rows; ++i) {
    const double* ar = a.data.data() + i * a.cols;
    for (std::size_t j = 0; j < b.rows; ++j) {
      const double* br = b.data.data() + j * b.cols;
      double s = 0.0;
      for (std::size_t p = 0; p < a.cols; ++p) s += ar[p] * br[p];
      out.data[i * out.cols + j] = s;
    }
  }
  return out;
}

double relu(double z) { return z > 0.0 ? z : 0.0; }

void fill_uniform(Matrix& m, Rng& rng, double limit) {
  for (double& v : m.data) v = rng.uniform(-limit, limit);
}

LayerVector flatten_layer(const LayerParams& layer) {
  LayerVector v;
  v.reserve(layer.size());
  v.insert(v.end(), layer.weight.data.begin(), layer.weight.data.end());
  v.insert(v.end(), layer.bias.begin(), layer.bias.end());
  return v;
}

void check_batch(const MlpArchitecture& arch, const Batch& batch) {
  if (batch.labels.empty()) throw InvalidArgument("loss: empty batch");
  if (batch.inputs.rows != batch.labels.size())
    throw InvalidArgument("loss: inputs/labels row mismatch");
  for (int y : batch.labels)
    if (y < 0 || static_cast<std::size_t>(y) >= arch.num_classes())
      throw InvalidArgument("loss: label " + std::to_string(y) + " out of range");
}

// Mean cross-entropy and d(loss)/d(logits).
double softmax_cross_entropy(const Matrix& logits, const std::vector<int>& labels, Matrix* dlogits) {
  const std::size_t n = logits.rows;
  const std::size_t c = logits.cols;
  if (dlogits) *dlogits = Matrix(n, c);
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const auto row = logits.row(i);
    const double top = *std::max_element(row.begin(), row.end());
    double sum = 0.0;
    for (double z : row) sum += std::exp(z - top);
    const double log_sum = std::log(sum) + top;
    total += log_sum - row[labels[i]];
    if (dlogits) {
      auto g = dlogits->row(i);
      for (std::size_t j = 0; j < c; ++j) g[j] = std::exp(row[j] - log_sum) / static_cast<double>(n);
      g[labels[i]] -= 1.0 / static_cast<double>(n);
    }
  }
  return total / static_cast<double>(n);
}

struct Backward {
  UpdateDelta backbone;
  AdapterGrad adapter;
};

Backward backward(const ModelParams& params, const MlpArchitecture& arch, const ForwardCache& cache,
                  Matrix g, const Adapter* adapter) {
  const std::size_t L = arch.num_layers();
  Backward out;
  out.backbone.layers.resize(L);
  for (std::size_t l = L; l-- > 0;) {
    const LayerParams& layer = params.layers[l];
    const Matrix gw = matmul_tn(cache.layer_inputs[l], g);
    LayerVector& gv = out.backbone.layers[l];
    gv.assign(gw.data.begin(), gw.data.end());
    gv.resize(layer.size(), 0.0);
    double* gb = gv.data() + gw.data.size();
    for (std::size_t i = 0; i < g.rows; ++i)
      for (std::size_t j = 0; j < g.cols; ++j) gb[j] += g(i, j);
    if (l == 0) break;

    Matrix gh = matmul_nt(g, layer.weight);
    if (adapter && adapter->insertion_point == l - 1) {
      out.adapter.up = matmul_tn(cache.adapter_hidden, gh);
      Matrix gp = matmul_nt(gh, adapter->up);
      for (std::size_t k = 0; k < gp.data.size(); ++k)
        if (!(cache.adapter_pre.data[k] > 0.0)) gp.data[k] = 0.0;
      out.adapter.down = matmul_tn(cache.adapter_in, gp);
      const Matrix back = matmul_nt(gp, adapter->down);
      for (std::size_t k = 0; k < gh.data.size(); ++k) gh.data[k] += back.data[k];
    }
    const Matrix& z = cache.pre_activations[l - 1];
    if (arch.activation == Activation::relu) {
      for (std::size_t k = 0; k < gh.data.size(); ++k)
        if (!(z.data[k] > 0.0)) gh.data[k] = 0.0;
    } else {
      for (std::size_t k = 0; k < gh.data.size(); ++k) {
        const double t = std::tanh(z.data[k]);
        gh.data[k] *= 1.0 - t * t;
      }
    }
    g = std::move(gh);
  }
  return out;
}

void check_delta_shape(const ModelParams& params, const UpdateDelta& delta) {
  if (delta.layers.size() != params.layers.size())
    throw InvalidArgument("delta has " + std::to_string(delta.layers.size()) + " layers, model has " +
                          std::to_string(params.layers.size()));
  for (std::size_t l = 0; l < params.layers.size(); ++l)
    if (delta.layers[l].size() != params.layers[l].size())
      throw InvalidArgument("delta layer " + std::to_string(l) + " size mismatch");
}

}  // namespace

void MlpArchitecture::validate() const {
  if (layer_widths.size() < 2) throw InvalidArgument("architecture needs at least 2 widths");
  for (std::size_t w : layer_widths)
    if (w == 0) throw InvalidArgument("architecture has a zero-width layer");
}

UpdateDelta UpdateDelta::zeros_like(const ModelParams& params) {
  UpdateDelta d;
  d.layers.reserve(params.layers.size());
  for (const auto& layer : params.layers) d.layers.emplace_back(layer.size(), 0.0);
  return d;
}

void UpdateDelta::add_scaled(const UpdateDelta& other, double scale) {
  if (!same_shape(other)) throw ProtocolError("update deltas differ in shape");
  for (std::size_t l = 0; l < layers.size(); ++l)
    for (std::size_t i = 0; i < layers[l].size(); ++i) layers[l][i] += scale * other.layers[l][i];
}

UpdateDelta UpdateDelta::scaled(double scale) const {
  UpdateDelta out = *this;
  for (auto& layer : out.layers)
    for (double& v : layer) v *= scale;
  return out;
}

std::vector<double> UpdateDelta::concat() const {
  std::vector<double> out;
  for (const auto& layer : layers) out.insert(out.end(), layer.begin(), layer.end());
  return out;
}

bool UpdateDelta::same_shape(const UpdateDelta& other) const {
  if (layers.size() != other.layers.size()) return false;
  for (std::size_t l = 0; l < layers.size(); ++l)
    if (layers[l].size() != other.layers[l].size()) return false;
  return true;
}

void TrainConfig::validate() const {
  if (!(learning_rate > 0.0) || !std::isfinite(learning_rate))
    throw ConfigError("learning_rate must be > 0");
  if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("momentum must be in [0, 1)");
  if (local_epochs < 1) throw ConfigError("local_epochs must be >= 1");
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
}

void Adapter::validate(const MlpArchitecture& arch) const {
  if (insertion_point + 1 >= arch.num_layers())
    throw InvalidArgument("adapter insertion point must be a hidden layer");
  const std::size_t width = arch.layer_widths[insertion_point + 1];
  if (rank < 1 || rank > width) throw InvalidArgument("adapter rank must be in [1, hidden width]");
  if (down.rows != width || down.cols != rank || up.rows != rank || up.cols != width)
    throw InvalidArgument("adapter matrices do not match width/rank");
}

ModelParams init_params(const MlpArchitecture& arch, std::uint64_t seed) {
  arch.validate();
  Rng rng(seed);
  ModelParams params;
  for (std::size_t l = 0; l < arch.num_layers(); ++l) {
    const std::size_t fan_in = arch.layer_widths[l];
    const std::size_t fan_out = arch.layer_widths[l + 1];
    LayerParams layer{Matrix(fan_in, fan_out), std::vector<double>(fan_out, 0.0)};
    fill_uniform(layer.weight, rng, std::sqrt(6.0 / static_cast<double>(fan_in + fan_out)));
    params.layers.push_back(std::move(layer));
  }
  return params;
}

Adapter make_adapter(const MlpArchitecture& arch, std::size_t rank, std::uint64_t seed,
                     std::optional<std::size_t> insertion_point) {
  arch.validate();
  if (arch.num_layers() < 2) throw InvalidArgument("adapter needs a hidden layer");
  Adapter a;
  a.rank = rank;
  a.insertion_point = insertion_point.value_or(arch.num_layers() - 2);
  if (a.insertion_point + 1 >= arch.num_layers())
    throw InvalidArgument("adapter insertion point must be a hidden layer");
  const std::size_t width = arch.layer_widths[a.insertion_point + 1];
  if (rank < 1 || rank > width) throw InvalidArgument("adapter rank must be in [1, hidden width]");
  a.down = Matrix(width, rank);
  a.up = Matrix(rank, width);
  Rng rng(seed);
  fill_uniform(a.down, rng, std::sqrt(6.0 / static_cast<double>(width + rank)));
  return a;
}

void check_shapes(const ModelParams& params, const MlpArchitecture& arch) {
  if (params.layers.size() != arch.num_layers())
    throw InvalidArgument("model has " + std::to_string(params.layers.size()) +
                          " layers, architecture expects " + std::to_string(arch.num_layers()));
  for (std::size_t l = 0; l < params.layers.size(); ++l) {
    const auto& layer = params.layers[l];
    if (layer.weight.rows != arch.layer_widths[l] || layer.weight.cols != arch.layer_widths[l + 1] ||
        layer.bias.size() != arch.layer_widths[l + 1] ||
        layer.weight.data.size() != layer.weight.rows * layer.weight.cols)
      throw InvalidArgument("layer " + std::to_string(l) + " shape mismatch");
  }
}

std::vector<LayerVector> flatten(const ModelParams& params) {
  std::vector<LayerVector> out;
  out.reserve(params.layers.size());
  for (const auto& layer : params.layers) out.push_back(flatten_layer(layer));
  return out;
}

ModelParams unflatten(std::span<const LayerVector> layers, const MlpArchitecture& arch) {
  if (layers.size() != arch.num_layers()) throw InvalidArgument("unflatten: layer count mismatch");
  ModelParams params;
  for (std::size_t l = 0; l < layers.size(); ++l) {
    const std::size_t fan_in = arch.layer_widths[l];
    const std::size_t fan_out = arch.layer_widths[l + 1];
    if (layers[l].size() != fan_in * fan_out + fan_out)
      throw InvalidArgument("unflatten: layer " + std::to_string(l) + " size mismatch");
    LayerParams layer{Matrix(fan_in, fan_out), {}};
    std::copy_n(layers[l].begin(), fan_in * fan_out, layer.weight.data.begin());
    layer.bias.assign(layers[l].begin() + static_cast<std::ptrdiff_t>(fan_in * fan_out), layers[l].end());
    params.layers.push_back(std::move(layer));
  }
  return params;
}

UpdateDelta difference(const ModelParams& after, const ModelParams& before) {
  if (after.layers.size() != before.layers.size()) throw InvalidArgument("difference: layer count mismatch");
  UpdateDelta d;
  for (std::size_t l = 0; l < after.layers.size(); ++l) {
    LayerVector a = flatten_layer(after.layers[l]);
    const LayerVector b = flatten_layer(before.layers[l]);
    if (a.size() != b.size()) throw InvalidArgument("difference: layer shape mismatch");
    for (std::size_t i = 0; i < a.size(); ++i) a[i] -= b[i];
    d.layers.push_back(std::move(a));
  }
  return d;
}

ModelParams apply_delta(const ModelParams& params, const UpdateDelta& delta, double scale) {
  check_delta_shape(params, delta);
  ModelParams out = params;
  for (std::size_t l = 0; l < out.layers.size(); ++l) {
    auto& w = out.layers[l].weight.data;
    auto& b = out.layers[l].bias;
    const LayerVector& d = delta.layers[l];
    for (std::size_t i = 0; i < w.size(); ++i) w[i] += scale * d[i];
    for (std::size_t j = 0; j < b.size(); ++j) b[j] += scale * d[w.size() + j];
  }
  return out;
}

double dot(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw InvalidArgument("dot: length mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

double norm(std::span<const double> a) { return std::sqrt(dot(a, a)); }

ForwardResult forward(const ModelParams& params, const MlpArchitecture& arch, const Matrix& inputs,
                      const Adapter* adapter) {
  check_shapes(params, arch);
  if (inputs.cols != arch.input_dim())
    throw InvalidArgument("forward: input has " + std::to_string(inputs.cols) + " columns, expected " +
                          std::to_string(arch.input_dim()));
  if (adapter) adapter->validate(arch);

  const std::size_t L = arch.num_layers();
  ForwardResult res;
  ForwardCache& cache = res.cache;
  cache.layer_inputs.push_back(inputs);
  for (std::size_t l = 0; l < L; ++l) {
    const LayerParams& layer = params.layers[l];
    Matrix z = matmul(cache.layer_inputs.back(), layer.weight);
    for (std::size_t i = 0; i < z.rows; ++i) {
      auto row = z.row(i);
      for (std::size_t j = 0; j < z.cols; ++j) row[j] += layer.bias[j];
    }
    if (l + 1 == L) {
      res.logits = std::move(z);
      break;
    }
    Matrix h(z.rows, z.cols);
    for (std::size_t k = 0; k < z.data.size(); ++k)
      h.data[k] = arch.activation == Activation::relu ? relu(z.data[k]) : std::tanh(z.data[k]);
    cache.pre_activations.push_back(std::move(z));
    if (adapter && adapter->insertion_point == l) {
      cache.adapter_in = h;
      cache.adapter_pre = matmul(h, adapter->down);
      cache.adapter_hidden = Matrix(cache.adapter_pre.rows, cache.adapter_pre.cols);
      for (std::size_t k = 0; k < cache.adapter_pre.data.size(); ++k)
        cache.adapter_hidden.data[k] = relu(cache.adapter_pre.data[k]);
      const Matrix residual = matmul(cache.adapter_hidden, adapter->up);
      for (std::size_t k = 0; k < h.data.size(); ++k) h.data[k] += residual.data[k];
    }
    cache.layer_inputs.push_back(std::move(h));
  }
  return res;
}

double loss(const ModelParams& params, const MlpArchitecture& arch, const Batch& batch,
            const Adapter* adapter) {
  check_batch(arch, batch);
  const ForwardResult fw = forward(params, arch, batch.inputs, adapter);
  return softmax_cross_entropy(fw.logits, batch.labels, nullptr);
}

LossGrad loss_and_grad(const ModelParams& params, const MlpArchitecture& arch, const Batch& batch) {
  check_batch(arch, batch);
  const ForwardResult fw = forward(params, arch, batch.inputs);
  Matrix g;
  LossGrad out;
  out.loss = softmax_cross_entropy(fw.logits, batch.labels, &g);
  out.grad = backward(params, arch, fw.cache, std::move(g), nullptr).backbone;
  return out;
}

CompositeLossGrad loss_and_grad(const ModelParams& params, const MlpArchitecture& arch,
                                const Batch& batch, const Adapter& adapter) {
  check_batch(arch, batch);
  const ForwardResult fw = forward(params, arch, batch.inputs, &adapter);
  Matrix g;
  CompositeLossGrad out;
  out.loss = softmax_cross_entropy(fw.logits, batch.labels, &g);
  Backward b = backward(params, arch, fw.cache, std::move(g), &adapter);
  out.backbone = std::move(b.backbone);
  out.adapter = std::move(b.adapter);
  return out;
}

LocalTrainResult local_train(const ModelParams& params, const MlpArchitecture& arch,
                             const ShardView& shard, const TrainConfig& cfg, const Adapter* adapter) {
  cfg.validate();
  if (shard.size() == 0 || shard.dataset == nullptr) throw InvalidArgument("local_train: empty shard");
  check_shapes(params, arch);

  Rng rng(cfg.seed);
  std::vector<std::size_t> order(shard.size());
  std::iota(order.begin(), order.end(), std::size_t{0});

  ModelParams w = params;
  UpdateDelta velocity = UpdateDelta::zeros_like(params);
  for (std::size_t epoch = 0; epoch < cfg.local_epochs; ++epoch) {
    rng.shuffle(order);
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t stop = std::min(order.size(), start + cfg.batch_size);
      const Batch batch = shard.gather(std::span<const std::size_t>(order).subspan(start, stop - start));
      const UpdateDelta grad =
          adapter ? loss_and_grad(w, arch, batch, *adapter).backbone : loss_and_grad(w, arch, batch).grad;
      for (std::size_t l = 0; l < w.layers.size(); ++l) {
        auto& wd = w.layers[l].weight.data;
        auto& bd = w.layers[l].bias;
        LayerVector& v = velocity.layers[l];
        const LayerVector& g = grad.layers[l];
        for (std::size_t i = 0; i < v.size(); ++i) {
          v[i] = cfg.momentum * v[i] + g[i];
          double& p = i < wd.size() ? wd[i] : bd[i - wd.size()];
          p -= cfg.learning_rate * v[i];
        }
      }
    }
  }
  LocalTrainResult res;
  res.delta = difference(w, params);
  res.params = std::move(w);
  return res;
}

ModelParams sgd_ascent_step(const ModelParams& params, const UpdateDelta& grad, double rate) {
  return apply_delta(params, grad, rate);
}

}  // namespace lethe::nn
