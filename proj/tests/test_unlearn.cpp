#include "doctest.h"
#include "oracles.hpp"

#include "lethe/data.hpp"
#include "lethe/error.hpp"
#include "lethe/unlearn.hpp"

using namespace lethe;

namespace {

struct Scene {
  nn::MlpArchitecture arch{{12, 16, 4}, nn::Activation::relu};
  LabeledDataset train;
  LabeledDataset forget_eval;
  data::DatasetPartition part;
  nn::ModelParams w_pre;
  unlearn::UnlearnContext ctx;

  Scene() {
    const auto ds = data::synth_blobs(4, 60, 12, 0.1, 5);
    const auto p = data::partition_dirichlet(ds, 4, 0.5, 6);
    auto t = data::make_unlearn_target(ds, p, data::Granularity::client({1}), data::corner_trigger(12, 3, 0), 7);
    forget_eval = t.dataset.subset(t.forget_eval_indices);
    train = std::move(t.dataset);
    part = std::move(t.partition);
    ctx.arch = &arch;
    ctx.dataset = &train;
    ctx.partition = &part;
    ctx.evals = {&forget_eval, nullptr};
    ctx.train = {0.05, 0.9, 1, 16, 0};
    ctx.seed = 3;
    ctx.first_round = 20;
    ctx.retrain_rounds = 5;
    fed::FederationConfig cfg;
    cfg.rounds = 20;
    cfg.train = ctx.train;
    cfg.seed = 3;
    const std::vector<std::size_t> all = {0, 1, 2, 3};
    w_pre = fed::run_training(unlearn::initial_model(arch, 3), arch, fed::ClientPool::full(train, part), cfg, all,
                              fed::Phase::pretrain, fed::stream::pretrain)
                .model;
  }
};

unlearn::RectifyConfig small_rectify() {
  unlearn::RectifyConfig rc;
  rc.unlearn_rounds = 3;
  rc.restore_rounds = 2;
  rc.probe_steps = 4;
  return rc;
}

}  // namespace

TEST_CASE("negation branch: exact first-order forgetting and retain preservation") {
  const auto st = oracle::prop2_suite(101, 1000);
  CHECK(st.negate_cases == 1000);
  CHECK(st.negate_forget_exact);
  CHECK(st.negate_retain_nonneg);
}

TEST_CASE("subtraction branch with gamma at or above the threshold never helps the forget set") {
  const auto st = oracle::prop2_suite(202, 1000);
  CHECK(st.subtract_cases == 1000);
  CHECK(st.subtract_worst <= 1e-12);
}

TEST_CASE("rectify branch selection per layer") {
  nn::UpdateDelta du{{{1.0, 0.0}, {1.0, 1.0}, {0.0, 0.0}}};
  nn::UpdateDelta dr{{{2.0, 1.0}, {-1.0, 0.0}, {3.0, 4.0}}};
  const auto dual = unlearn::make_dual_stream(du, dr);
  CHECK(dual.sims == std::vector<double>{2.0, -1.0, 0.0});

  const auto r = unlearn::rectify(dual, 0.5);
  CHECK(r.branches[0] == unlearn::kBranchSubtract);
  CHECK(r.delta.layers[0] == std::vector<double>{1.5, 1.0});
  CHECK(r.branches[1] == unlearn::kBranchNegate);
  CHECK(r.delta.layers[1] == std::vector<double>{-1.0, -1.0});
  CHECK(r.branches[2] == unlearn::kBranchPassthrough);
  CHECK(r.delta.layers[2] == dr.layers[2]);

  const auto none = unlearn::rectify(dual, 0.5, unlearn::RectifyMode::none);
  CHECK(none.delta == dr);
  const auto always = unlearn::rectify(dual, 0.5, unlearn::RectifyMode::unconditional);
  CHECK(always.delta.layers[1] == std::vector<double>{-1.5, -0.5});

  const auto floor = unlearn::rectify(dual, 0.5, unlearn::RectifyMode::conditional, true);
  CHECK(floor.gammas[0] == 2.0);
  CHECK(nn::dot(du.layers[0], floor.delta.layers[0]) <= 0.0);

  CHECK_THROWS_AS(unlearn::make_dual_stream(nn::UpdateDelta{{{1.0}}}, nn::UpdateDelta{{{1.0, 2.0}}}), InvalidArgument);
}

TEST_CASE("attach then detach is a forward no-op") {
  Rng rng(4);
  for (int trial = 0; trial < 10; ++trial) {
    const auto arch = oracle::random_arch(rng);
    const auto p = nn::init_params(arch, rng.next_u64());
    auto ad = nn::make_adapter(arch, 1, rng.next_u64());
    const Matrix x = oracle::random_batch(rng, arch, 100).inputs;
    const Matrix bare = nn::forward(p, arch, x).logits;
    CHECK(nn::forward(p, arch, x, &ad).logits == bare);  // zero `up`
    for (double& u : ad.up.data) u = rng.normal();
    const auto composite = unlearn::attach(p, ad);
    const auto back = unlearn::detach(composite);
    CHECK(back == p);
    CHECK(nn::forward(back, arch, x).logits == bare);
  }
}

TEST_CASE("probe ascent raises the forget loss and reports divergence") {
  Scene s;
  const ShardView fv{&s.train, s.part.unlearn_indices, nullptr};
  const Batch fb = fv.gather_all();
  const auto ad = nn::make_adapter(s.arch, 4, 9);
  const auto probe = unlearn::train_probe(s.w_pre, s.arch, ad, fb, 10, 0.05);
  CHECK(probe.loss_after > probe.loss_before);
  CHECK(probe.loss_before == doctest::Approx(nn::loss(s.w_pre, s.arch, fb)));
  CHECK_THROWS_AS(unlearn::train_probe(s.w_pre, s.arch, ad, fb, 200, 1e4), ProbeDivergence);
}

TEST_CASE("lethe pipeline log structure") {
  Scene s;
  const auto rc = small_rectify();
  const auto res = unlearn::lethe_unlearn(s.w_pre, s.ctx, rc);
  REQUIRE(res.log.size() == 1 + 3 + 2);
  CHECK(res.log[0].phase == fed::Phase::reshape);
  CHECK(res.log[0].round == 20);
  CHECK(res.log[0].probe_loss.has_value());
  for (int i = 1; i <= 3; ++i) {
    CHECK(res.log[i].phase == fed::Phase::rectify);
    CHECK(res.log[i].forget_participants == s.part.unlearn_clients);
    CHECK(res.log[i].branches.size() == 2);
    for (std::size_t k : res.log[i].participants) CHECK(k != 1);  // client 1 left entirely
  }
  CHECK(res.log[4].phase == fed::Phase::restore);
  CHECK(res.log[5].round == 25);
  CHECK_FALSE(res.adapter.has_value());
  CHECK(res.unlearn_rounds == 3);
  CHECK(res.restore_rounds == 2);
  CHECK(metrics::efficiency_report(res.log).t_u == 3);
  CHECK(metrics::efficiency_report(res.log).t_p == 2);

  const auto again = unlearn::lethe_unlearn(s.w_pre, s.ctx, rc);
  CHECK(again.model == res.model);
}

TEST_CASE("variants differ only where they should") {
  Scene s;
  const auto rc = small_rectify();
  const auto v1 = unlearn::run_method(unlearn::Method::variant_i, s.w_pre, s.ctx, rc);
  CHECK(v1.log.front().phase == fed::Phase::rectify);  // no reshape step
  const auto v2 = unlearn::run_method(unlearn::Method::variant_ii, s.w_pre, s.ctx, rc);
  for (const auto& r : v2.log)
    for (const auto& b : r.branches) CHECK(b == unlearn::kBranchRetainOnly);
  const auto v3 = unlearn::run_method(unlearn::Method::variant_iii, s.w_pre, s.ctx, rc);
  for (const auto& r : v3.log)
    for (const auto& b : r.branches) CHECK(b != unlearn::kBranchNegate);
  const auto v4 = unlearn::run_method(unlearn::Method::variant_iv, s.w_pre, s.ctx, rc);
  CHECK(v4.adapter.has_value());
}

TEST_CASE("tau_f stops Phase U early") {
  Scene s;
  auto rc = small_rectify();
  rc.unlearn_rounds = 10;
  rc.tau_f = 0.0;  // any forget loss clears it
  const auto res = unlearn::lethe_unlearn(s.w_pre, s.ctx, rc);
  CHECK(res.unlearn_rounds == 1);
}

TEST_CASE("extension keeps rectifying until the u-Acc target or the cap") {
  Scene s;
  auto rc = small_rectify();
  rc.unlearn_rounds = 1;
  rc.gamma = 0.0;
  rc.extend_until_u_acc = -1.0;  // unreachable
  rc.max_unlearn_rounds = 4;
  CHECK(unlearn::lethe_unlearn(s.w_pre, s.ctx, rc).unlearn_rounds == 4);
}

TEST_CASE("baselines") {
  Scene s;
  const auto rc = small_rectify();
  const AccessAudit audit(s.train.size(), s.part.unlearn_indices);
  auto ctx = s.ctx;
  ctx.audit = &audit;

  const auto retrain = unlearn::baseline_unlearn(unlearn::Method::retrain, s.w_pre, ctx, rc);
  CHECK(retrain.log.size() == 5);
  CHECK(retrain.log.front().phase == fed::Phase::retrain);
  CHECK(audit.reads() == 0);
  CHECK(metrics::efficiency_report(retrain.log).t_p == 5);

  const auto neg = unlearn::baseline_unlearn(unlearn::Method::weight_negation, s.w_pre, ctx, rc);
  CHECK(metrics::efficiency_report(neg.log).t_u == 0);
  CHECK(neg.log.front().forget_participants.empty());

  const auto ga = unlearn::baseline_unlearn(unlearn::Method::grad_ascent, s.w_pre, ctx, rc);
  CHECK(metrics::efficiency_report(ga.log).t_u == 3);
  CHECK(audit.reads() == 0);

  CHECK_THROWS_AS(unlearn::baseline_unlearn(unlearn::Method::lethe, s.w_pre, ctx, rc), InvalidArgument);
}

TEST_CASE("first-layer negation flips weights and bias only") {
  nn::MlpArchitecture arch{{3, 4, 2}, nn::Activation::relu};
  auto p = nn::init_params(arch, 2);
  p.layers[0].bias = {0.1, -0.2, 0.3, 0.0};
  const auto n = unlearn::negate_first_layer(p);
  for (std::size_t i = 0; i < p.layers[0].weight.data.size(); ++i)
    CHECK(n.layers[0].weight.data[i] == -p.layers[0].weight.data[i]);
  for (std::size_t i = 0; i < 4; ++i) CHECK(n.layers[0].bias[i] == -p.layers[0].bias[i]);
  CHECK(n.layers[1] == p.layers[1]);
}

TEST_CASE("continued training never touches D_u") {
  Scene s;
  const AccessAudit audit(s.train.size(), s.part.unlearn_indices);
  auto ctx = s.ctx;
  ctx.audit = &audit;
  const auto run = unlearn::continue_training(s.w_pre, ctx, 4);
  CHECK(run.log.size() == 4);
  for (const auto& r : run.log) {
    CHECK(r.phase == fed::Phase::cont);
    CHECK(r.u_acc.has_value());
  }
  CHECK(audit.reads() == 0);
}

TEST_CASE("method names and config validation") {
  for (auto m : {unlearn::Method::lethe, unlearn::Method::variant_i, unlearn::Method::variant_ii,
                 unlearn::Method::variant_iii, unlearn::Method::variant_iv, unlearn::Method::retrain,
                 unlearn::Method::grad_ascent, unlearn::Method::weight_negation})
    CHECK(unlearn::parse_method(unlearn::method_name(m)) == m);
  CHECK_THROWS_AS(unlearn::parse_method("fedau"), ConfigError);
  unlearn::RectifyConfig rc;
  rc.gamma = -1;
  CHECK_THROWS_AS(rc.validate(), ConfigError);
  rc = {};
  rc.uf_gate = 0.5;
  CHECK_THROWS_AS(rc.validate(), ConfigError);
}
