#include "lethe/fed.hpp"

#include <algorithm>
#include <numeric>
#include <sstream>

#include "json.hpp"

#include "lethe/error.hpp"
#include "lethe/rng.hpp"

namespace lethe::fed {

namespace {

constexpr const char* kPhaseNames[] = {"pretrain", "retrain", "reshape", "rectify", "restore", "continue"};

ClientPool make_pool(const LabeledDataset& dataset, const data::DatasetPartition& partition,
                     const AccessAudit* audit, int which) {
  ClientPool pool;
  pool.dataset = &dataset;
  pool.audit = audit;
  for (std::size_t k = 0; k < partition.num_clients(); ++k) {
    if (which == 0) pool.shards.push_back(partition.client_shards[k]);
    else if (which == 1) pool.shards.push_back(partition.remaining_shard(k));
    else pool.shards.push_back(partition.unlearn_shard(k));
  }
  return pool;
}

}  // namespace

std::string phase_name(Phase phase) { return kPhaseNames[static_cast<int>(phase)]; }

Phase parse_phase(const std::string& name) {
  for (int i = 0; i < 6; ++i)
    if (name == kPhaseNames[i]) return static_cast<Phase>(i);
  throw FormatError("phase", "unknown phase tag '" + name + "'");
}

AggregationWeights aggregation_weights(std::span<const std::size_t> clients,
                                       std::span<const std::size_t> sample_counts) {
  if (clients.empty()) throw InvalidArgument("aggregation: no participants");
  if (clients.size() != sample_counts.size()) throw InvalidArgument("aggregation: count list length mismatch");
  std::vector<std::size_t> order(clients.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return clients[a] < clients[b]; });
  AggregationWeights w;
  std::size_t total = 0;
  for (std::size_t i : order) {
    if (!w.clients.empty() && w.clients.back() == clients[i])
      throw InvalidArgument("aggregation: duplicate client " + std::to_string(clients[i]));
    w.clients.push_back(clients[i]);
    total += sample_counts[i];
  }
  if (total == 0) throw InvalidArgument("aggregation: participants hold no samples");
  for (std::size_t i : order) w.q.push_back(static_cast<double>(sample_counts[i]) / static_cast<double>(total));
  return w;
}

nn::UpdateDelta aggregate(std::vector<ClientUpdate> updates) {
  if (updates.empty()) throw InvalidArgument("aggregation: no updates");
  std::sort(updates.begin(), updates.end(),
            [](const ClientUpdate& a, const ClientUpdate& b) { return a.client < b.client; });
  std::vector<std::size_t> ids, counts;
  for (const auto& u : updates) {
    ids.push_back(u.client);
    counts.push_back(u.num_samples);
    if (!u.delta.same_shape(updates.front().delta))
      throw ProtocolError("aggregation: client " + std::to_string(u.client) + " sent a delta of a different shape");
  }
  const AggregationWeights w = aggregation_weights(ids, counts);
  nn::UpdateDelta out;
  out.layers.reserve(updates.front().delta.layers.size());
  for (const auto& layer : updates.front().delta.layers) out.layers.emplace_back(layer.size(), 0.0);
  for (std::size_t i = 0; i < updates.size(); ++i) out.add_scaled(updates[i].delta, w.q[i]);
  return out;
}

ShardView ClientPool::view(std::size_t client) const {
  return ShardView{dataset, shards.at(client), audit};
}

ClientPool ClientPool::full(const LabeledDataset& dataset, const data::DatasetPartition& partition,
                            const AccessAudit* audit) {
  return make_pool(dataset, partition, audit, 0);
}

ClientPool ClientPool::remaining(const LabeledDataset& dataset, const data::DatasetPartition& partition,
                                 const AccessAudit* audit) {
  return make_pool(dataset, partition, audit, 1);
}

ClientPool ClientPool::forget(const LabeledDataset& dataset, const data::DatasetPartition& partition,
                              const AccessAudit* audit) {
  return make_pool(dataset, partition, audit, 2);
}

std::vector<double> layer_norms(const nn::UpdateDelta& delta) {
  std::vector<double> out;
  for (const auto& layer : delta.layers) out.push_back(nn::norm(layer));
  return out;
}

void FederationConfig::validate(std::size_t num_clients) const {
  train.validate();
  if (clients_per_round && (*clients_per_round == 0 || *clients_per_round > num_clients))
    throw ConfigError("clients_per_round must be in [1, K]");
}

std::uint64_t round_seed(std::uint64_t seed, std::uint64_t stream, std::size_t round) {
  return derive_seed({seed, stream, round});
}

std::pair<nn::ModelParams, RoundRecord> fed_round(const nn::ModelParams& model,
                                                  const nn::MlpArchitecture& arch,
                                                  const ClientPool& pool,
                                                  std::span<const std::size_t> participants,
                                                  const nn::TrainConfig& train, std::uint64_t seed,
                                                  const nn::Adapter* adapter) {
  if (participants.empty()) throw InvalidArgument("fed_round: no participants");
  std::vector<ClientUpdate> updates;
  for (std::size_t k : participants) {
    if (k >= pool.num_clients()) throw InvalidArgument("fed_round: unknown client " + std::to_string(k));
    const ShardView shard = pool.view(k);
    if (shard.size() == 0) throw InvalidArgument("fed_round: client " + std::to_string(k) + " has no data");
    nn::TrainConfig local = train;
    local.seed = derive_seed({seed, k});
    updates.push_back({k, shard.size(), nn::local_train(model, arch, shard, local, adapter).delta});
  }
  RoundRecord rec;
  rec.participants.assign(participants.begin(), participants.end());
  std::sort(rec.participants.begin(), rec.participants.end());
  rec.delta = aggregate(std::move(updates));
  rec.layer_norms = layer_norms(rec.delta);
  return {nn::apply_delta(model, rec.delta), std::move(rec)};
}

TrainingRun run_training(const nn::ModelParams& initial, const nn::MlpArchitecture& arch,
                         const ClientPool& pool, const FederationConfig& cfg,
                         std::span<const std::size_t> client_filter, Phase phase, std::uint64_t stream,
                         const EvalSets& evals, std::size_t first_round, const nn::Adapter* adapter) {
  cfg.validate(pool.num_clients());
  TrainingRun run{initial, {}};
  if (cfg.rounds == 0) return run;
  if (client_filter.empty()) throw InvalidArgument("run_training: empty client filter");
  std::vector<std::size_t> eligible(client_filter.begin(), client_filter.end());
  std::sort(eligible.begin(), eligible.end());

  for (std::size_t t = 0; t < cfg.rounds; ++t) {
    const std::size_t round = first_round + t;
    const std::uint64_t rs = round_seed(cfg.seed, stream, round);
    std::vector<std::size_t> chosen = eligible;
    if (cfg.clients_per_round && *cfg.clients_per_round < eligible.size()) {
      Rng rng(derive_seed({rs, 0xB5ULL}));
      rng.shuffle(chosen);
      chosen.resize(*cfg.clients_per_round);
      std::sort(chosen.begin(), chosen.end());
    }
    auto [next, rec] = fed_round(run.model, arch, pool, chosen, cfg.train, rs, adapter);
    run.model = std::move(next);
    rec.round = round;
    rec.phase = phase;
    const bool eval_now = cfg.eval_every > 0 && ((t + 1) % cfg.eval_every == 0 || t + 1 == cfg.rounds);
    if (eval_now) {
      if (evals.forget) rec.u_acc = evaluate(run.model, arch, *evals.forget, adapter);
      if (evals.test) rec.t_acc = evaluate(run.model, arch, *evals.test, adapter);
    }
    run.log.push_back(std::move(rec));
  }
  return run;
}

std::vector<int> predict(const nn::ModelParams& model, const nn::MlpArchitecture& arch,
                         const Matrix& inputs, const nn::Adapter* adapter) {
  const Matrix logits = nn::forward(model, arch, inputs, adapter).logits;
  std::vector<int> out(logits.rows);
  for (std::size_t i = 0; i < logits.rows; ++i) {
    const auto row = logits.row(i);
    // max_element returns the first maximum: lowest index wins ties.
    out[i] = static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin());
  }
  return out;
}

double evaluate(const nn::ModelParams& model, const nn::MlpArchitecture& arch,
                const LabeledDataset& eval_set, const nn::Adapter* adapter) {
  if (eval_set.size() == 0) throw InvalidArgument("evaluate: empty evaluation set");
  const auto pred = predict(model, arch, eval_set.features, adapter);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) correct += pred[i] == eval_set.labels[i];
  return static_cast<double>(correct) / static_cast<double>(pred.size());
}

std::string to_jsonl(std::span<const RoundRecord> log) {
  std::ostringstream out;
  for (const auto& r : log) {
    nlohmann::ordered_json j;
    j["round"] = r.round;
    j["phase"] = phase_name(r.phase);
    j["participants"] = r.participants;
    j["layer_norms"] = r.layer_norms;
    if (r.u_acc) j["u_acc"] = *r.u_acc;
    if (r.t_acc) j["t_acc"] = *r.t_acc;
    if (r.probe_loss) j["probe_loss"] = *r.probe_loss;
    if (!r.sims.empty()) j["sims"] = r.sims;
    if (!r.branches.empty()) j["branches"] = r.branches;
    if (!r.forget_participants.empty()) j["forget_participants"] = r.forget_participants;
    out << j.dump() << '\n';
  }
  return out.str();
}

std::vector<RoundRecord> parse_jsonl(const std::string& text) {
  std::vector<RoundRecord> log;
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw FormatError("line " + std::to_string(lineno), e.what());
    }
    if (!j.contains("phase") || !j["phase"].is_string())
      throw FormatError("phase", "round record on line " + std::to_string(lineno) + " has no phase tag");
    try {
      RoundRecord r;
      r.phase = parse_phase(j["phase"].get<std::string>());
      r.round = j.at("round").get<std::size_t>();
      r.participants = j.value("participants", std::vector<std::size_t>{});
      r.layer_norms = j.value("layer_norms", std::vector<double>{});
      if (j.contains("u_acc")) r.u_acc = j["u_acc"].get<double>();
      if (j.contains("t_acc")) r.t_acc = j["t_acc"].get<double>();
      if (j.contains("probe_loss")) r.probe_loss = j["probe_loss"].get<double>();
      r.sims = j.value("sims", std::vector<double>{});
      r.branches = j.value("branches", std::vector<std::string>{});
      r.forget_participants = j.value("forget_participants", std::vector<std::size_t>{});
      log.push_back(std::move(r));
    } catch (const nlohmann::json::exception& e) {
      throw FormatError("line " + std::to_string(lineno), e.what());
    }
  }
  return log;
}

}  // namespace lethe::fed
