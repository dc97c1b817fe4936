#include <algorithm>
#include <numeric>

#include "doctest.h"
#include "oracles.hpp"

#include "lethe/data.hpp"
#include "lethe/error.hpp"
#include "lethe/fed.hpp"

using namespace lethe;

namespace {

nn::UpdateDelta random_delta(Rng& rng, const std::vector<std::size_t>& sizes) {
  nn::UpdateDelta d;
  for (std::size_t n : sizes) d.layers.push_back(oracle::random_vector(rng, n));
  return d;
}

struct Fixture {
  LabeledDataset ds = data::synth_blobs(4, 50, 10, 0.1, 3);
  data::DatasetPartition part = data::partition_dirichlet(ds, 5, 1.0, 4);
  nn::MlpArchitecture arch{{10, 12, 4}, nn::Activation::relu};
};

}  // namespace

TEST_CASE("aggregation weights are n_k / N in ascending client order") {
  const std::vector<std::size_t> clients = {4, 1, 2};
  const std::vector<std::size_t> counts = {10, 30, 60};
  const auto w = fed::aggregation_weights(clients, counts);
  CHECK(w.clients == std::vector<std::size_t>{1, 2, 4});
  CHECK(w.q[0] == doctest::Approx(0.3));
  CHECK(w.q[1] == doctest::Approx(0.6));
  CHECK(w.q[2] == doctest::Approx(0.1));
  CHECK(std::accumulate(w.q.begin(), w.q.end(), 0.0) == doctest::Approx(1.0));
  const std::vector<std::size_t> dup = {1, 1}, two = {1, 1}, zero = {0, 0};
  const std::vector<std::size_t> two_ids = {1, 2};
  CHECK_THROWS_AS(fed::aggregation_weights(dup, two), InvalidArgument);
  CHECK_THROWS_AS(fed::aggregation_weights(two_ids, zero), InvalidArgument);
}

TEST_CASE("aggregate equals a brute-force weighted sum") {
  Rng rng(3);
  for (int trial = 0; trial < 50; ++trial) {
    const std::vector<std::size_t> sizes = {6, 3, 4};
    std::vector<fed::ClientUpdate> ups;
    std::size_t total = 0;
    const std::size_t K = 1 + rng.uniform_index(6);
    for (std::size_t k = 0; k < K; ++k) {
      const std::size_t n = 1 + rng.uniform_index(100);
      total += n;
      ups.push_back({k, n, random_delta(rng, sizes)});
    }
    const auto agg = fed::aggregate(ups);
    for (std::size_t l = 0; l < sizes.size(); ++l)
      for (std::size_t i = 0; i < sizes[l]; ++i) {
        double s = 0.0;
        for (const auto& u : ups) s += double(u.num_samples) / double(total) * u.delta.layers[l][i];
        CHECK(agg.layers[l][i] == doctest::Approx(s).epsilon(1e-12));
      }
  }
}

TEST_CASE("equal-weight opposite deltas cancel exactly") {
  Rng rng(8);
  const auto d = random_delta(rng, {5, 7});
  const auto agg = fed::aggregate({{0, 20, d}, {1, 20, d.scaled(-1.0)}});
  for (const auto& layer : agg.layers)
    for (double v : layer) CHECK(v == 0.0);
}

TEST_CASE("aggregation is invariant to submission order, bit for bit") {
  Rng rng(21);
  std::vector<fed::ClientUpdate> ups;
  for (std::size_t k = 0; k < 6; ++k) ups.push_back({k * 3, 1 + rng.uniform_index(50), random_delta(rng, {9, 4})});
  const auto ref = fed::aggregate(ups);
  for (int p = 0; p < 20; ++p) {
    rng.shuffle(ups);
    CHECK(fed::aggregate(ups) == ref);
  }
}

TEST_CASE("mismatched deltas are a protocol error") {
  Rng rng(1);
  CHECK_THROWS_AS(fed::aggregate({{0, 1, random_delta(rng, {3})}, {1, 1, random_delta(rng, {4})}}), ProtocolError);
  CHECK_THROWS_AS(fed::aggregate({}), InvalidArgument);
}

TEST_CASE("a single-participant round reproduces that client's local training") {
  Fixture f;
  const auto pool = fed::ClientPool::full(f.ds, f.part);
  const auto w0 = nn::init_params(f.arch, 1);
  const nn::TrainConfig train{0.05, 0.9, 1, 8, 0};
  const std::vector<std::size_t> one = {2};
  const auto [w1, rec] = fed::fed_round(w0, f.arch, pool, one, train, 99);
  nn::TrainConfig local = train;
  local.seed = derive_seed({99, 2});
  const auto expected = nn::local_train(w0, f.arch, pool.view(2), local).params;
  CHECK(oracle::relative_error(nn::flatten(w1)[0], nn::flatten(expected)[0]) < 1e-15);
  CHECK(rec.participants == one);
  CHECK(rec.layer_norms.size() == 2);
}

TEST_CASE("fed_round rejects bad participants") {
  Fixture f;
  const auto pool = fed::ClientPool::full(f.ds, f.part);
  const auto w0 = nn::init_params(f.arch, 1);
  const nn::TrainConfig train{0.05, 0.9, 1, 8, 0};
  const std::vector<std::size_t> none, unknown = {9};
  CHECK_THROWS_AS(fed::fed_round(w0, f.arch, pool, none, train, 1), InvalidArgument);
  CHECK_THROWS_AS(fed::fed_round(w0, f.arch, pool, unknown, train, 1), InvalidArgument);
}

TEST_CASE("client pools split shards around D_u and report to the audit") {
  Fixture f;
  const auto t = data::make_unlearn_target(f.ds, f.part, data::Granularity::sample(0.2), std::nullopt, 3);
  const AccessAudit audit(t.dataset.size(), t.partition.unlearn_indices);
  const auto remaining = fed::ClientPool::remaining(t.dataset, t.partition, &audit);
  const auto forget = fed::ClientPool::forget(t.dataset, t.partition, &audit);
  std::size_t r = 0, u = 0;
  for (std::size_t k = 0; k < 5; ++k) {
    remaining.view(k).gather_all();
    r += remaining.view(k).size();
    u += forget.view(k).size();
  }
  CHECK(audit.reads() == 0);
  CHECK(r + u == t.dataset.size());
  CHECK(u == t.partition.unlearn_indices.size());
  for (std::size_t k = 0; k < 5; ++k) forget.view(k).gather_all();
  CHECK(audit.reads() == u);
}

TEST_CASE("run_training is deterministic and tags its rounds") {
  Fixture f;
  const auto pool = fed::ClientPool::full(f.ds, f.part);
  fed::FederationConfig cfg;
  cfg.rounds = 4;
  cfg.clients_per_round = 3;
  cfg.train = {0.05, 0.9, 1, 8, 0};
  cfg.seed = 12;
  const std::vector<std::size_t> all = {0, 1, 2, 3, 4};
  const fed::EvalSets evals{&f.ds, &f.ds};
  const auto a = fed::run_training(nn::init_params(f.arch, 1), f.arch, pool, cfg, all, fed::Phase::restore,
                                   fed::stream::restore, evals, 40);
  const auto b = fed::run_training(nn::init_params(f.arch, 1), f.arch, pool, cfg, all, fed::Phase::restore,
                                   fed::stream::restore, evals, 40);
  CHECK(a.model == b.model);
  REQUIRE(a.log.size() == 4);
  for (std::size_t i = 0; i < 4; ++i) {
    CHECK(a.log[i].round == 40 + i);
    CHECK(a.log[i].phase == fed::Phase::restore);
    CHECK(a.log[i].participants.size() == 3);
    CHECK(a.log[i].participants == b.log[i].participants);
    CHECK(a.log[i].u_acc.has_value());
  }
  cfg.clients_per_round = 6;
  CHECK_THROWS_AS(fed::run_training(nn::init_params(f.arch, 1), f.arch, pool, cfg, all, fed::Phase::restore,
                                    fed::stream::restore),
                  ConfigError);
}

TEST_CASE("prediction breaks ties towards the lowest class") {
  nn::MlpArchitecture arch{{2, 3}, nn::Activation::relu};
  nn::ModelParams p;
  p.layers.push_back({Matrix(2, 3), {0.5, 0.5, 0.1}});
  Matrix x(2, 2);
  CHECK(fed::predict(p, arch, x) == std::vector<int>{0, 0});
  p.layers[0].bias = {0.1, 0.7, 0.7};
  CHECK(fed::predict(p, arch, x) == std::vector<int>{1, 1});
  LabeledDataset ds;
  ds.features = x;
  ds.labels = {1, 2};
  ds.num_classes = 3;
  CHECK(fed::evaluate(p, arch, ds) == 0.5);
  LabeledDataset empty;
  empty.features = Matrix(0, 2);
  empty.num_classes = 3;
  CHECK_THROWS_AS(fed::evaluate(p, arch, empty), InvalidArgument);
}

TEST_CASE("round logs round-trip through JSONL") {
  fed::RoundRecord r;
  r.round = 7;
  r.phase = fed::Phase::rectify;
  r.participants = {1, 3};
  r.layer_norms = {0.25, 1.0 / 3.0};
  r.u_acc = 0.125;
  r.sims = {-0.5, 2.0};
  r.branches = {"negate_forget", "retain_minus_forget"};
  r.forget_participants = {3};
  fed::RoundRecord c;
  c.round = 8;
  c.phase = fed::Phase::cont;
  const std::vector<fed::RoundRecord> log = {r, c};
  const auto back = fed::parse_jsonl(fed::to_jsonl(log));
  REQUIRE(back.size() == 2);
  CHECK(back[0].round == 7);
  CHECK(back[0].phase == fed::Phase::rectify);
  CHECK(back[0].layer_norms == r.layer_norms);
  CHECK(back[0].u_acc == r.u_acc);
  CHECK_FALSE(back[0].t_acc.has_value());
  CHECK(back[0].branches == r.branches);
  CHECK(back[0].forget_participants == r.forget_participants);
  CHECK(back[1].phase == fed::Phase::cont);
  CHECK(fed::phase_name(fed::Phase::cont) == "continue");
  CHECK_THROWS_AS(fed::parse_jsonl("{\"round\": 1}\n"), FormatError);
  CHECK_THROWS_AS(fed::parse_phase("warmup"), FormatError);
}

TEST_CASE("round seeds separate streams and rounds") {
  CHECK(fed::round_seed(1, fed::stream::retain, 3) == fed::round_seed(1, fed::stream::retain, 3));
  CHECK(fed::round_seed(1, fed::stream::retain, 3) != fed::round_seed(1, fed::stream::forget, 3));
  CHECK(fed::round_seed(1, fed::stream::retain, 3) != fed::round_seed(1, fed::stream::retain, 4));
  CHECK(fed::round_seed(1, fed::stream::retain, 3) != fed::round_seed(2, fed::stream::retain, 3));
}
