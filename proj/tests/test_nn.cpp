#include <cmath>

#include "doctest.h"
#include "oracles.hpp"

#include "lethe/error.hpp"
#include "lethe/nn.hpp"

using namespace lethe;

TEST_CASE("backprop matches central differences on random MLPs") {
  Rng rng(11);
  for (int trial = 0; trial < 100; ++trial) {
    std::size_t redrawn = 0;
    const auto in = oracle::random_fd_instance(rng, redrawn);
    const auto analytic = nn::loss_and_grad(in.params, in.arch, in.batch).grad.concat();
    const auto numeric = oracle::numeric_gradient(in.params, in.arch, in.batch);
    CAPTURE(trial);
    CHECK(oracle::relative_error(analytic, numeric) < 1e-5);
  }
}

TEST_CASE("composite gradient matches central differences") {
  Rng rng(12);
  for (int trial = 0; trial < 20; ++trial) {
    nn::MlpArchitecture arch{{4, 6, 5, 3}, trial % 2 ? nn::Activation::tanh : nn::Activation::relu};
    const auto params = oracle::random_params(rng, arch);
    auto adapter = nn::make_adapter(arch, 2, rng.next_u64(), trial % 2);
    for (double& u : adapter.up.data) u = 0.3 * rng.normal();
    const Batch batch = oracle::random_batch(rng, arch, 5);
    const auto g = nn::loss_and_grad(params, arch, batch, adapter);

    const double h = 1e-5;
    std::vector<double> numeric, analytic = g.backbone.concat();
    auto flat = nn::flatten(params);
    for (auto& layer : flat)
      for (double& w : layer) {
        const double s = w;
        w = s + h;
        const double up = nn::loss(nn::unflatten(flat, arch), arch, batch, &adapter);
        w = s - h;
        const double dn = nn::loss(nn::unflatten(flat, arch), arch, batch, &adapter);
        w = s;
        numeric.push_back((up - dn) / (2 * h));
      }
    for (Matrix* m : {&adapter.down, &adapter.up})
      for (double& w : m->data) {
        const double s = w;
        w = s + h;
        const double up = nn::loss(params, arch, batch, &adapter);
        w = s - h;
        const double dn = nn::loss(params, arch, batch, &adapter);
        w = s;
        numeric.push_back((up - dn) / (2 * h));
      }
    analytic.insert(analytic.end(), g.adapter.down.data.begin(), g.adapter.down.data.end());
    analytic.insert(analytic.end(), g.adapter.up.data.begin(), g.adapter.up.data.end());
    CAPTURE(trial);
    CHECK(oracle::relative_error(analytic, numeric) < 1e-5);
  }
}

TEST_CASE("2-4-3 forward pass by hand") {
  nn::MlpArchitecture arch{{2, 4, 3}, nn::Activation::relu};
  nn::ModelParams p;
  nn::LayerParams l0{Matrix(2, 4), {0.1, -0.2, 0.0, 0.5}};
  l0.weight.data = {1, -1, 0.5, 0, 2, 1, -0.5, -1};
  nn::LayerParams l1{Matrix(4, 3), {0.0, 1.0, -1.0}};
  l1.weight.data = {1, 0, 0, 0, 1, 0, 0, 0, 1, 1, 1, 1};
  p.layers = {l0, l1};
  Matrix x(1, 2);
  x.data = {1.0, 0.5};
  // z1 = [1+1+0.1, -1+0.5-0.2, 0.5-0.25, 0-0.5+0.5] = [2.1, -0.7, 0.25, 0]
  // h  = [2.1, 0, 0.25, 0]
  // z2 = [2.1, 0+1, 0.25-1] = [2.1, 1, -0.75]
  const auto out = nn::forward(p, arch, x).logits;
  CHECK(out(0, 0) == doctest::Approx(2.1).epsilon(1e-15));
  CHECK(out(0, 1) == doctest::Approx(1.0).epsilon(1e-15));
  CHECK(out(0, 2) == doctest::Approx(-0.75).epsilon(1e-15));
}

TEST_CASE("all-zero weights give loss ln C") {
  for (std::size_t C : {2u, 3u, 10u}) {
    nn::MlpArchitecture arch{{5, 7, C}, nn::Activation::relu};
    auto p = nn::init_params(arch, 1);
    for (auto& l : p.layers) {
      std::fill(l.weight.data.begin(), l.weight.data.end(), 0.0);
      std::fill(l.bias.begin(), l.bias.end(), 0.0);
    }
    Rng rng(C);
    CHECK(nn::loss(p, arch, oracle::random_batch(rng, arch, 9)) == doctest::Approx(std::log(double(C))));
  }
}

TEST_CASE("a duplicated batch has the same mean loss and gradient") {
  Rng rng(5);
  nn::MlpArchitecture arch{{3, 8, 4}, nn::Activation::tanh};
  const auto p = nn::init_params(arch, 2);
  const Batch b = oracle::random_batch(rng, arch, 6);
  Batch bb = b;
  bb.inputs.rows *= 2;
  bb.inputs.data.insert(bb.inputs.data.end(), b.inputs.data.begin(), b.inputs.data.end());
  bb.labels.insert(bb.labels.end(), b.labels.begin(), b.labels.end());
  const auto g1 = nn::loss_and_grad(p, arch, b);
  const auto g2 = nn::loss_and_grad(p, arch, bb);
  CHECK(g1.loss == doctest::Approx(g2.loss).epsilon(1e-14));
  CHECK(oracle::relative_error(g1.grad.concat(), g2.grad.concat()) < 1e-14);
}

TEST_CASE("one full-batch local step is a plain gradient step") {
  Rng rng(9);
  nn::MlpArchitecture arch{{4, 6, 3}, nn::Activation::relu};
  LabeledDataset ds;
  const Batch b = oracle::random_batch(rng, arch, 10);
  ds.features = b.inputs;
  ds.labels = b.labels;
  ds.num_classes = 3;
  std::vector<std::size_t> idx(10);
  for (std::size_t i = 0; i < 10; ++i) idx[i] = i;
  const ShardView shard{&ds, idx, nullptr};
  const auto p = nn::init_params(arch, 4);

  nn::TrainConfig cfg{0.05, 0.9, 1, 10, 3};
  const auto res = nn::local_train(p, arch, shard, cfg);
  // Momentum starts at zero, so the first step is -lr * g whatever the order.
  const auto g = nn::loss_and_grad(p, arch, shard.gather_all()).grad;
  auto expected = p;
  for (std::size_t l = 0; l < p.layers.size(); ++l) {
    auto& L = expected.layers[l];
    const std::size_t nw = L.weight.data.size();
    for (std::size_t i = 0; i < nw; ++i) L.weight.data[i] -= cfg.learning_rate * g.layers[l][i];
    for (std::size_t i = 0; i < L.bias.size(); ++i) L.bias[i] -= cfg.learning_rate * g.layers[l][nw + i];
  }
  // Batch order differs from the gather order, so allow for summation order.
  CHECK(oracle::relative_error(nn::flatten(res.params)[0], nn::flatten(expected)[0]) < 1e-13);
  CHECK(oracle::relative_error(res.delta.concat(), g.scaled(-cfg.learning_rate).concat()) < 1e-9);
}

TEST_CASE("local training is deterministic in its seed") {
  Rng rng(1);
  nn::MlpArchitecture arch{{4, 6, 3}, nn::Activation::relu};
  LabeledDataset ds;
  const Batch b = oracle::random_batch(rng, arch, 40);
  ds.features = b.inputs;
  ds.labels = b.labels;
  ds.num_classes = 3;
  std::vector<std::size_t> idx(40);
  for (std::size_t i = 0; i < 40; ++i) idx[i] = i;
  const ShardView shard{&ds, idx, nullptr};
  const auto p = nn::init_params(arch, 4);
  nn::TrainConfig cfg{0.05, 0.9, 2, 8, 77};
  CHECK(nn::local_train(p, arch, shard, cfg).params == nn::local_train(p, arch, shard, cfg).params);
  cfg.seed = 78;
  CHECK_FALSE(nn::local_train(p, arch, shard, cfg).params == nn::local_train(p, arch, shard, {0.05, 0.9, 2, 8, 77}).params);
}

TEST_CASE("flatten, difference and apply_delta") {
  nn::MlpArchitecture arch{{3, 5, 2}, nn::Activation::relu};
  const auto a = nn::init_params(arch, 1);
  const auto b = nn::init_params(arch, 2);
  CHECK(nn::unflatten(nn::flatten(a), arch) == a);
  const auto d = nn::difference(b, a);
  CHECK(d.num_layers() == 2);
  CHECK(d.layers[0].size() == 3 * 5 + 5);
  const auto back = nn::apply_delta(a, d);
  CHECK(oracle::relative_error(nn::flatten(back)[0], nn::flatten(b)[0]) < 1e-15);
  CHECK(nn::apply_delta(a, nn::UpdateDelta::zeros_like(a)) == a);
}

TEST_CASE("shape and config validation") {
  nn::MlpArchitecture arch{{3, 5, 2}, nn::Activation::relu};
  auto p = nn::init_params(arch, 1);
  p.layers[0].bias.pop_back();
  CHECK_THROWS_AS(nn::check_shapes(p, arch), InvalidArgument);
  CHECK_THROWS_AS(nn::make_adapter(arch, 6, 0), InvalidArgument);
  CHECK_THROWS_AS(nn::make_adapter(nn::MlpArchitecture{{3, 2}, nn::Activation::relu}, 1, 0), InvalidArgument);
  nn::TrainConfig bad{0.0, 0.9, 1, 16, 0};
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = {0.1, 0.9, 1, 0, 0};
  CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("initialisation stays inside the Glorot bound") {
  nn::MlpArchitecture arch{{30, 20, 10}, nn::Activation::relu};
  const auto p = nn::init_params(arch, 3);
  const double a0 = std::sqrt(6.0 / 50.0);
  for (double w : p.layers[0].weight.data) CHECK(std::abs(w) <= a0);
  for (double b : p.layers[0].bias) CHECK(b == 0.0);
  CHECK(nn::init_params(arch, 3) == p);
}
