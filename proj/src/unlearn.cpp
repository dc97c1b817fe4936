#include "lethe/unlearn.hpp"

#include <algorithm>
#include <cmath>

#include "lethe/error.hpp"
#include "lethe/rng.hpp"

namespace lethe::unlearn {

namespace {

constexpr double kDivergenceLoss = 1e6;
constexpr std::uint64_t kInitTag = 0x1A17;
constexpr std::uint64_t kAdapterTag = 0xADA9;

struct MethodName {
  Method method;
  const char* name;
};
constexpr MethodName kMethodNames[] = {
    {Method::lethe, "lethe"},           {Method::variant_i, "variant_I"},
    {Method::variant_ii, "variant_II"}, {Method::variant_iii, "variant_III"},
    {Method::variant_iv, "variant_IV"}, {Method::retrain, "retrain"},
    {Method::grad_ascent, "grad_ascent"}, {Method::weight_negation, "weight_negation"},
};

void check_context(const UnlearnContext& ctx) {
  if (!ctx.arch || !ctx.dataset || !ctx.partition) throw InvalidArgument("unlearn: incomplete context");
  if (ctx.partition->unlearn_indices.empty()) throw InvalidArgument("unlearn: empty unlearning set");
}

std::vector<std::size_t> forget_clients(const fed::ClientPool& pool) {
  std::vector<std::size_t> out;
  for (std::size_t k = 0; k < pool.num_clients(); ++k)
    if (!pool.shards[k].empty()) out.push_back(k);
  return out;
}

// Forget-stream displacement aggregated over the clients holding D_u,
// weighted by how much of D_u each holds.
nn::UpdateDelta aggregated_forget_stream(const nn::ModelParams& model, const UnlearnContext& ctx,
                                         const fed::ClientPool& forget_pool,
                                         std::span<const std::size_t> clients, const nn::Adapter* adapter,
                                         std::uint64_t round_seed) {
  std::vector<fed::ClientUpdate> updates;
  for (std::size_t k : clients) {
    nn::TrainConfig local = ctx.train;
    local.seed = derive_seed({round_seed, k});
    updates.push_back({k, forget_pool.shards[k].size(),
                       forget_stream(model, *ctx.arch, adapter, forget_pool.view(k), local)});
  }
  return fed::aggregate(std::move(updates));
}

std::vector<std::size_t> sample_participants(const std::vector<std::size_t>& eligible,
                                             std::optional<std::size_t> per_round, std::uint64_t round_seed) {
  std::vector<std::size_t> chosen = eligible;
  if (per_round && *per_round < eligible.size()) {
    Rng rng(derive_seed({round_seed, 0xB5ULL}));
    rng.shuffle(chosen);
    chosen.resize(*per_round);
    std::sort(chosen.begin(), chosen.end());
  }
  return chosen;
}

void evaluate_into(fed::RoundRecord& rec, const nn::ModelParams& model, const UnlearnContext& ctx,
                   const nn::Adapter* adapter) {
  if (ctx.evals.forget) rec.u_acc = fed::evaluate(model, *ctx.arch, *ctx.evals.forget, adapter);
  if (ctx.evals.test) rec.t_acc = fed::evaluate(model, *ctx.arch, *ctx.evals.test, adapter);
}

fed::FederationConfig fed_config(const UnlearnContext& ctx, std::size_t rounds) {
  fed::FederationConfig cfg;
  cfg.rounds = rounds;
  cfg.clients_per_round = ctx.clients_per_round;
  cfg.train = ctx.train;
  cfg.eval_every = 1;
  cfg.seed = ctx.seed;
  return cfg;
}

// Phase 3 / baseline fine-tuning: FedAvg on C_r.
void restore(UnlearnResult& res, const UnlearnContext& ctx, std::size_t rounds, std::size_t first_round,
             const nn::Adapter* adapter) {
  const fed::ClientPool pool = fed::ClientPool::remaining(*ctx.dataset, *ctx.partition, ctx.audit);
  const auto clients = ctx.partition->remaining_clients();
  fed::TrainingRun run = fed::run_training(res.model, *ctx.arch, pool, fed_config(ctx, rounds), clients,
                                           fed::Phase::restore, fed::stream::restore, ctx.evals,
                                           first_round, adapter);
  res.model = std::move(run.model);
  res.restore_rounds = rounds;
  for (auto& r : run.log) res.log.push_back(std::move(r));
}

bool should_continue(const RectifyConfig& cfg, std::size_t done, const fed::RoundRecord& last) {
  if (!cfg.extend_until_u_acc) return done < cfg.unlearn_rounds;
  if (done >= cfg.max_unlearn_rounds) return false;
  if (done < cfg.unlearn_rounds) return true;
  return !(last.u_acc && *last.u_acc <= *cfg.extend_until_u_acc);
}

}  // namespace

CompositeModel attach(const nn::ModelParams& backbone, const nn::Adapter& adapter) {
  return {backbone, adapter};
}

nn::ModelParams detach(const CompositeModel& model) { return model.backbone; }

void RectifyConfig::validate() const {
  if (!(gamma >= 0.0) || !std::isfinite(gamma)) throw ConfigError("gamma must be >= 0");
  if (!(probe_rate > 0.0)) throw ConfigError("probe_rate must be > 0");
  if (adapter_rank < 1) throw ConfigError("adapter_rank must be >= 1");
  if (!(uf_gate >= 1.0)) throw ConfigError("uf_gate must be >= 1");
  if (!(uf_min_abs >= 0.0)) throw ConfigError("uf_min_abs must be >= 0");
  if (extend_until_u_acc && max_unlearn_rounds < unlearn_rounds)
    throw ConfigError("max_unlearn_rounds must be >= unlearn_rounds");
}

DualStream make_dual_stream(nn::UpdateDelta forget, nn::UpdateDelta retain) {
  if (!forget.same_shape(retain)) throw InvalidArgument("dual stream: delta shapes differ");
  DualStream d{std::move(forget), std::move(retain), {}};
  for (std::size_t l = 0; l < d.forget.layers.size(); ++l)
    d.sims.push_back(nn::dot(d.retain.layers[l], d.forget.layers[l]));
  return d;
}

Rectified rectify(const DualStream& dual, double gamma, RectifyMode mode, bool adaptive_floor) {
  if (!dual.forget.same_shape(dual.retain) || dual.sims.size() != dual.forget.layers.size())
    throw InvalidArgument("rectify: shape mismatch");
  Rectified out;
  const std::size_t L = dual.forget.layers.size();
  out.delta.layers.resize(L);
  for (std::size_t l = 0; l < L; ++l) {
    const nn::LayerVector& du = dual.forget.layers[l];
    const nn::LayerVector& dr = dual.retain.layers[l];
    nn::LayerVector& dst = out.delta.layers[l];
    const double sim = dual.sims[l];
    const double du_sq = nn::dot(du, du);
    double g = gamma;
    if (mode == RectifyMode::none) {
      dst = dr;
      out.branches.emplace_back(kBranchRetainOnly);
    } else if (du_sq == 0.0) {
      dst = dr;
      out.branches.emplace_back(kBranchPassthrough);
    } else if (mode == RectifyMode::unconditional || sim > 0.0) {
      if (adaptive_floor && sim > 0.0) g = std::max(gamma, sim / du_sq);
      dst.resize(du.size());
      for (std::size_t i = 0; i < du.size(); ++i) dst[i] = dr[i] - g * du[i];
      out.branches.emplace_back(kBranchSubtract);
    } else {
      dst.resize(du.size());
      for (std::size_t i = 0; i < du.size(); ++i) dst[i] = -du[i];
      out.branches.emplace_back(kBranchNegate);
    }
    out.gammas.push_back(g);
  }
  return out;
}

ProbeResult train_probe(const nn::ModelParams& model, const nn::MlpArchitecture& arch,
                        const nn::Adapter& adapter, const Batch& forget_batch, std::size_t steps,
                        double rate) {
  if (forget_batch.labels.empty()) throw InvalidArgument("train_probe: empty forget set");
  if (!(rate > 0.0)) throw InvalidArgument("train_probe: rate must be > 0");
  ProbeResult res{adapter, nn::loss(model, arch, forget_batch, &adapter), 0.0};
  double current = res.loss_before;
  for (std::size_t s = 0; s < steps; ++s) {
    const nn::CompositeLossGrad g = nn::loss_and_grad(model, arch, forget_batch, res.adapter);
    for (std::size_t i = 0; i < g.adapter.down.data.size(); ++i)
      res.adapter.down.data[i] += rate * g.adapter.down.data[i];
    for (std::size_t i = 0; i < g.adapter.up.data.size(); ++i) res.adapter.up.data[i] += rate * g.adapter.up.data[i];
    current = nn::loss(model, arch, forget_batch, &res.adapter);
    if (!std::isfinite(current) || current > kDivergenceLoss)
      throw ProbeDivergence("probe loss reached " + std::to_string(current) + " after " +
                            std::to_string(s + 1) + " ascent steps");
  }
  res.loss_after = current;
  return res;
}

nn::UpdateDelta forget_stream(const nn::ModelParams& model, const nn::MlpArchitecture& arch,
                              const nn::Adapter* adapter, const ShardView& forget_data,
                              const nn::TrainConfig& train) {
  return nn::local_train(model, arch, forget_data, train, adapter).delta;
}

std::string method_name(Method m) {
  for (const auto& e : kMethodNames)
    if (e.method == m) return e.name;
  return "unknown";
}

Method parse_method(const std::string& name) {
  for (const auto& e : kMethodNames)
    if (name == e.name) return e.method;
  throw ConfigError("unknown method '" + name + "'");
}

UnlearnResult lethe_unlearn(const nn::ModelParams& pretrained, const UnlearnContext& ctx,
                            const RectifyConfig& cfg, Method variant) {
  check_context(ctx);
  cfg.validate();
  ctx.train.validate();
  const nn::MlpArchitecture& arch = *ctx.arch;

  UnlearnResult res;
  res.model = pretrained;
  if (cfg.unlearn_rounds == 0 && cfg.restore_rounds == 0 && !cfg.extend_until_u_acc) return res;

  const fed::ClientPool forget_pool = fed::ClientPool::forget(*ctx.dataset, *ctx.partition);
  const fed::ClientPool retain_pool = fed::ClientPool::remaining(*ctx.dataset, *ctx.partition, ctx.audit);
  const auto unlearners = forget_clients(forget_pool);
  const auto remaining = ctx.partition->remaining_clients();
  const Batch forget_batch = ShardView{ctx.dataset, ctx.partition->unlearn_indices, nullptr}.gather_all();
  std::size_t round = ctx.first_round;

  // Phase 1: Reshape.
  std::optional<nn::Adapter> adapter;
  if (variant != Method::variant_i) {
    const nn::Adapter init = nn::make_adapter(arch, cfg.adapter_rank, derive_seed({ctx.seed, kAdapterTag}));
    res.probe = train_probe(res.model, arch, init, forget_batch, cfg.probe_steps, cfg.probe_rate);
    adapter = res.probe->adapter;
    fed::RoundRecord rec;
    rec.round = round++;
    rec.phase = fed::Phase::reshape;
    rec.forget_participants = unlearners;
    rec.probe_loss = res.probe->loss_after;
    res.log.push_back(std::move(rec));
  }
  const nn::Adapter* probe = adapter ? &*adapter : nullptr;
  const nn::Adapter* eval_adapter = variant == Method::variant_iv ? probe : nullptr;

  const RectifyMode mode = variant == Method::variant_ii    ? RectifyMode::none
                           : variant == Method::variant_iii ? RectifyMode::unconditional
                                                            : RectifyMode::conditional;

  // Phase 2: Rectify.
  std::size_t done = 0;
  fed::RoundRecord last;
  while (should_continue(cfg, done, last)) {
    if (remaining.empty()) throw InvalidArgument("unlearn: no remaining clients");
    const nn::UpdateDelta du = aggregated_forget_stream(res.model, ctx, forget_pool, unlearners, probe,
                                                        fed::round_seed(ctx.seed, fed::stream::forget, round));
    const std::uint64_t rs = fed::round_seed(ctx.seed, fed::stream::retain, round);
    const auto chosen = sample_participants(remaining, ctx.clients_per_round, rs);
    auto [retained_model, retained] = fed::fed_round(res.model, arch, retain_pool, chosen, ctx.train, rs, probe);
    (void)retained_model;

    const DualStream dual = make_dual_stream(du, retained.delta);
    Rectified rect = rectify(dual, cfg.gamma, mode, cfg.adaptive_gamma_floor);
    res.model = nn::apply_delta(res.model, rect.delta);

    fed::RoundRecord rec;
    rec.round = round++;
    rec.phase = fed::Phase::rectify;
    rec.participants = std::move(retained.participants);
    rec.forget_participants = unlearners;
    rec.delta = std::move(rect.delta);
    rec.layer_norms = fed::layer_norms(rec.delta);
    rec.sims = dual.sims;
    rec.branches = std::move(rect.branches);
    evaluate_into(rec, res.model, ctx, eval_adapter);
    last = rec;
    res.log.push_back(std::move(rec));
    ++done;
    if (cfg.tau_f && nn::loss(res.model, arch, forget_batch) > *cfg.tau_f) break;
  }
  res.unlearn_rounds = done;

  // Phase 3: Restore.
  if (variant == Method::variant_iv) res.adapter = adapter;
  restore(res, ctx, cfg.restore_rounds, round, eval_adapter);
  return res;
}

UnlearnResult baseline_unlearn(Method method, const nn::ModelParams& pretrained,
                               const UnlearnContext& ctx, const RectifyConfig& cfg) {
  check_context(ctx);
  cfg.validate();
  ctx.train.validate();
  UnlearnResult res;
  res.model = pretrained;
  std::size_t round = ctx.first_round;

  switch (method) {
    case Method::retrain: {
      const fed::ClientPool pool = fed::ClientPool::remaining(*ctx.dataset, *ctx.partition, ctx.audit);
      fed::TrainingRun run = fed::run_training(
          initial_model(*ctx.arch, ctx.seed), *ctx.arch, pool, fed_config(ctx, ctx.retrain_rounds),
          ctx.partition->remaining_clients(), fed::Phase::retrain, fed::stream::retrain, ctx.evals, round);
      res.model = std::move(run.model);
      res.log = std::move(run.log);
      res.restore_rounds = ctx.retrain_rounds;
      return res;
    }
    case Method::grad_ascent: {
      const fed::ClientPool forget_pool = fed::ClientPool::forget(*ctx.dataset, *ctx.partition);
      const auto unlearners = forget_clients(forget_pool);
      std::size_t done = 0;
      fed::RoundRecord last;
      while (should_continue(cfg, done, last)) {
        const nn::UpdateDelta du = aggregated_forget_stream(
            res.model, ctx, forget_pool, unlearners, nullptr, fed::round_seed(ctx.seed, fed::stream::forget, round));
        fed::RoundRecord rec;
        rec.round = round++;
        rec.phase = fed::Phase::rectify;
        rec.forget_participants = unlearners;
        rec.delta = du.scaled(-1.0);
        rec.layer_norms = fed::layer_norms(rec.delta);
        rec.branches.assign(du.num_layers(), kBranchNegate);
        res.model = nn::apply_delta(res.model, rec.delta);
        evaluate_into(rec, res.model, ctx, nullptr);
        last = rec;
        res.log.push_back(std::move(rec));
        ++done;
      }
      res.unlearn_rounds = done;
      break;
    }
    case Method::weight_negation: {
      const nn::ModelParams negated = negate_first_layer(res.model);
      fed::RoundRecord rec;
      rec.round = round++;
      rec.phase = fed::Phase::rectify;
      rec.delta = nn::difference(negated, res.model);
      rec.layer_norms = fed::layer_norms(rec.delta);
      res.model = negated;
      evaluate_into(rec, res.model, ctx, nullptr);
      res.log.push_back(std::move(rec));
      break;
    }
    default:
      throw InvalidArgument("baseline_unlearn: " + method_name(method) + " is not a baseline");
  }
  restore(res, ctx, cfg.restore_rounds, round, nullptr);
  return res;
}

UnlearnResult run_method(Method method, const nn::ModelParams& pretrained, const UnlearnContext& ctx,
                         const RectifyConfig& cfg) {
  switch (method) {
    case Method::retrain:
    case Method::grad_ascent:
    case Method::weight_negation:
      return baseline_unlearn(method, pretrained, ctx, cfg);
    default:
      return lethe_unlearn(pretrained, ctx, cfg, method);
  }
}

fed::TrainingRun continue_training(const nn::ModelParams& model, const UnlearnContext& ctx,
                                   std::size_t rounds, const nn::Adapter* adapter) {
  check_context(ctx);
  const fed::ClientPool pool = fed::ClientPool::remaining(*ctx.dataset, *ctx.partition, ctx.audit);
  return fed::run_training(model, *ctx.arch, pool, fed_config(ctx, rounds), ctx.partition->remaining_clients(),
                           fed::Phase::cont, fed::stream::cont, ctx.evals, ctx.first_round, adapter);
}

nn::ModelParams initial_model(const nn::MlpArchitecture& arch, std::uint64_t seed) {
  return nn::init_params(arch, derive_seed({seed, kInitTag}));
}

nn::ModelParams negate_first_layer(const nn::ModelParams& model) {
  if (model.layers.empty()) throw InvalidArgument("negate_first_layer: empty model");
  nn::ModelParams out = model;
  for (double& w : out.layers[0].weight.data) w = -w;
  for (double& b : out.layers[0].bias) b = -b;
  return out;
}

}  // namespace lethe::unlearn
