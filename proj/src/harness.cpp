#include "lethe/harness.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <fstream>
#include <mutex>
#include <sstream>
#include <thread>

#include "json.hpp"

#include "lethe/checkpoint.hpp"
#include "lethe/data.hpp"
#include "lethe/error.hpp"
#include "lethe/fed.hpp"
#include "lethe/rng.hpp"

namespace lethe::harness {

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

namespace {

// ---- config parsing -------------------------------------------------------

void check_keys(const json& j, std::initializer_list<const char*> allowed, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + ": expected an object");
  for (const auto& [key, value] : j.items()) {
    (void)value;
    if (std::none_of(allowed.begin(), allowed.end(), [&](const char* a) { return key == a; }))
      throw ConfigError(where + ": unknown key '" + key + "'");
  }
}

template <class T>
void read(const json& j, const char* key, T& dst, const std::string& where) {
  if (!j.contains(key)) return;
  const json& v = j.at(key);
  if constexpr (std::is_same_v<T, bool>) {
    if (!v.is_boolean()) throw ConfigError(where + "." + key + ": expected true or false");
  } else if constexpr (std::is_unsigned_v<T>) {
    if (!v.is_number_unsigned()) throw ConfigError(where + "." + key + ": expected a non-negative integer");
  } else if constexpr (std::is_integral_v<T>) {
    if (!v.is_number_integer()) throw ConfigError(where + "." + key + ": expected an integer");
  } else if constexpr (std::is_floating_point_v<T>) {
    if (!v.is_number()) throw ConfigError(where + "." + key + ": expected a number");
  }
  try {
    dst = v.get<T>();
  } catch (const json::exception& e) {
    throw ConfigError(where + "." + key + ": " + e.what());
  }
}

template <class T>
void read_optional(const json& j, const char* key, std::optional<T>& dst, const std::string& where) {
  if (!j.contains(key) || j.at(key).is_null()) return;
  T v{};
  read(j, key, v, where);
  dst = v;
}

template <class T>
json optional_json(const std::optional<T>& v) {
  return v ? json(*v) : json(nullptr);
}

// ---- small helpers --------------------------------------------------------

std::string fmt(double v) { return metrics::format_double(v); }

std::string fmt_opt(const std::optional<double>& v) { return v ? fmt(*v) : ""; }

void write_file(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
}

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

class Logger {
 public:
  explicit Logger(const RunOptions& opts) : opts_(opts) {}
  void info(const std::string& msg) const {
    if (opts_.verbose) emit(msg);
  }
  void warn(const std::string& msg) const { emit("warning: " + msg); }

 private:
  void emit(const std::string& msg) const {
    if (!opts_.log) return;
    std::lock_guard<std::mutex> lock(mu_);
    *opts_.log << msg << '\n';
  }
  const RunOptions& opts_;
  mutable std::mutex mu_;
};

std::vector<double> flat_params(const nn::ModelParams& p) {
  std::vector<double> out;
  for (const auto& layer : nn::flatten(p)) out.insert(out.end(), layer.begin(), layer.end());
  return out;
}

// Lower-median shard size, lowest client id on ties.
std::size_t median_client(const data::DatasetPartition& partition) {
  std::vector<std::size_t> order(partition.num_clients());
  for (std::size_t k = 0; k < order.size(); ++k) order[k] = k;
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return partition.client_shards[a].size() < partition.client_shards[b].size();
  });
  return order[(order.size() - 1) / 2];
}

// ---- per-seed pipeline ----------------------------------------------------

struct Scenario {
  LabeledDataset train;  // trigger applied
  LabeledDataset test;
  LabeledDataset forget_eval;
  data::DatasetPartition partition;
};

Scenario build_scenario(const ExperimentConfig& cfg, std::uint64_t seed) {
  const DatasetSpec& ds = cfg.dataset;
  LabeledDataset all;
  if (ds.kind == "synth") {
    all = data::synth_blobs(ds.num_classes, ds.samples_per_class + ds.test_per_class, ds.feature_dim, ds.spread, seed);
  } else {
    all = data::load_idx(ds.idx_images, ds.idx_labels);
  }
  data::TrainTestSplit split = data::holdout_split(all, ds.test_per_class, derive_seed({seed, 1}));
  const data::DatasetPartition part =
      cfg.partition.kind == "iid"
          ? data::partition_iid(split.train, cfg.partition.num_clients, derive_seed({seed, 2}))
          : data::partition_dirichlet(split.train, cfg.partition.num_clients, cfg.partition.alpha,
                                      derive_seed({seed, 2}));

  const GranularitySpec& g = cfg.granularity;
  data::Granularity gran;
  if (g.kind == "client") {
    gran = data::Granularity::client(g.clients.empty() ? std::vector<std::size_t>{median_client(part)} : g.clients);
  } else if (g.kind == "sample") {
    gran = data::Granularity::sample(g.ratio);
  } else {
    gran = data::Granularity::klass(g.label);
  }
  std::optional<data::TriggerSpec> trigger;
  if (g.trigger && g.kind != "class") {
    trigger = data::corner_trigger(split.train.feature_dim(), g.trigger_width, g.target_label);
    trigger->patch_value = g.trigger_value;
  }
  data::UnlearnTarget target = data::make_unlearn_target(split.train, part, gran, trigger, derive_seed({seed, 3}));
  if (target.forget_eval_indices.empty()) throw InvalidArgument("unlearning set has no evaluable samples");

  Scenario s;
  s.forget_eval = target.dataset.subset(target.forget_eval_indices);
  s.train = std::move(target.dataset);
  s.test = std::move(split.test);
  s.partition = std::move(target.partition);
  return s;
}

json result_to_json(const SeedResult& r) {
  json j;
  j["seed"] = r.seed;
  j["method"] = r.method;
  j["error"] = r.error;
  j["a_pre"] = r.rr.a_pre;
  j["a_u"] = r.rr.a_u;
  j["a_c_trace"] = r.rr.a_c_trace;
  j["a_c"] = r.rr.a_c;
  j["a_c_final"] = r.rr.a_c_final;
  j["rr"] = optional_json(r.rr.rr);
  j["uf"] = r.rr.uf;
  j["t_acc_u"] = r.t_acc_u;
  j["t_acc_c"] = r.t_acc_c;
  j["retrain_u_acc"] = r.retrain_u_acc;
  j["retrain_t_acc"] = r.retrain_t_acc;
  j["t_u"] = r.efficiency.t_u;
  j["t_p"] = r.efficiency.t_p;
  j["t_tot"] = r.efficiency.t_tot;
  j["rollback_weak_fraction"] = optional_json(r.rollback_weak_fraction);
  j["unlearn_clients"] = r.unlearn_clients;
  j["forget_size"] = r.forget_size;
  j["audit_retrain_reads"] = r.audit_retrain_reads;
  j["audit_continue_reads"] = r.audit_continue_reads;
  return j;
}

SeedResult result_from_json(const nlohmann::json& j) {
  SeedResult r;
  r.seed = j.at("seed").get<std::uint64_t>();
  r.method = j.at("method").get<std::string>();
  r.error = j.at("error").get<std::string>();
  r.rr.a_pre = j.at("a_pre").get<double>();
  r.rr.a_u = j.at("a_u").get<double>();
  r.rr.a_c_trace = j.at("a_c_trace").get<std::vector<double>>();
  r.rr.a_c = j.at("a_c").get<double>();
  r.rr.a_c_final = j.at("a_c_final").get<double>();
  if (!j.at("rr").is_null()) r.rr.rr = j.at("rr").get<double>();
  r.rr.uf = j.at("uf").get<bool>();
  r.t_acc_u = j.at("t_acc_u").get<double>();
  r.t_acc_c = j.at("t_acc_c").get<double>();
  r.retrain_u_acc = j.at("retrain_u_acc").get<double>();
  r.retrain_t_acc = j.at("retrain_t_acc").get<double>();
  r.efficiency.t_u = j.at("t_u").get<std::size_t>();
  r.efficiency.t_p = j.at("t_p").get<std::size_t>();
  r.efficiency.t_tot = j.at("t_tot").get<std::size_t>();
  if (!j.at("rollback_weak_fraction").is_null())
    r.rollback_weak_fraction = j.at("rollback_weak_fraction").get<double>();
  r.unlearn_clients = j.at("unlearn_clients").get<std::size_t>();
  r.forget_size = j.at("forget_size").get<std::size_t>();
  r.audit_retrain_reads = j.at("audit_retrain_reads").get<std::size_t>();
  r.audit_continue_reads = j.at("audit_continue_reads").get<std::size_t>();
  r.rr.t_u_rounds = r.efficiency.t_u;
  r.rr.t_p_rounds = r.efficiency.t_p;
  return r;
}

// Phase-C diagnostics: alignment heatmap, rollback trace and the
// (non-certified) smoothness bound check.
void phase_c_diagnostics(const ExperimentConfig& cfg, const nn::MlpArchitecture& arch, const Scenario& sc,
                         const nn::ModelParams& w_pre, const nn::ModelParams& w_un,
                         const fed::TrainingRun& cont, const nn::Adapter* adapter, std::uint64_t seed,
                         const fs::path& dir, SeedResult& res) {
  const ShardView forget_view{&sc.train, sc.partition.unlearn_indices, nullptr};
  const Batch forget_batch = forget_view.gather_all();

  nn::TrainConfig ref_cfg = cfg.train;
  ref_cfg.seed = derive_seed({seed, 4});
  const nn::UpdateDelta reference = nn::local_train(w_pre, arch, forget_view, ref_cfg).delta;
  {
    std::ofstream out(dir / "alignment_heatmap.csv");
    metrics::write_alignment_heatmap(out, metrics::correlation_trace(cont.log, reference));
  }

  if (nn::norm(nn::difference(w_pre, w_un).concat()) > 0.0) {
    const metrics::RollbackTrace rb = metrics::rollback_cosine(cont.log, w_pre, w_un);
    res.rollback_weak_fraction = rb.weak_fraction();
    std::ofstream out(dir / "rollback_trace.csv");
    metrics::write_rollback_trace(out, rb);
  }

  if (cont.log.empty()) return;
  const double eta = cfg.train.learning_rate;
  std::vector<double> losses;
  std::vector<std::vector<double>> grads, points;
  nn::ModelParams w = w_un;
  losses.push_back(nn::loss(w, arch, forget_batch, adapter));
  for (const auto& rec : cont.log) {
    points.push_back(flat_params(w));
    grads.push_back(rec.delta.scaled(-1.0 / eta).concat());
    w = nn::apply_delta(w, rec.delta);
    losses.push_back(nn::loss(w, arch, forget_batch, adapter));
  }
  double beta = cfg.prop1_beta.value_or(metrics::secant_beta(grads, points));
  if (!(beta > 0.0)) beta = 1.0;
  const auto g_u = nn::loss_and_grad(w_pre, arch, forget_batch).grad.concat();
  std::ofstream out(dir / "prop1.csv");
  metrics::write_prop1(out, metrics::prop1_bound_check(losses, g_u, grads, eta, beta, false));
}

std::vector<SeedResult> run_seed(const ExperimentConfig& cfg, std::uint64_t seed,
                                 const std::vector<unlearn::Method>& methods, const Logger& log) {
  std::vector<SeedResult> results(methods.size());
  for (std::size_t m = 0; m < methods.size(); ++m) {
    results[m].seed = seed;
    results[m].method = unlearn::method_name(methods[m]);
  }
  const fs::path seed_dir = fs::path(cfg.output_dir) / ("seed_" + std::to_string(seed));

  try {
    fs::create_directories(seed_dir);
    const nn::MlpArchitecture arch = cfg.architecture();
    const Scenario sc = build_scenario(cfg, seed);
    write_file(seed_dir / "partition.json", data::partition_to_json(sc.partition));

    unlearn::UnlearnContext ctx;
    ctx.arch = &arch;
    ctx.dataset = &sc.train;
    ctx.partition = &sc.partition;
    ctx.evals = {&sc.forget_eval, &sc.test};
    ctx.train = cfg.train;
    ctx.clients_per_round = cfg.clients_per_round;
    ctx.seed = seed;
    ctx.retrain_rounds = cfg.pretrain_rounds;

    // Pretraining on every client, D_u included.
    log.info("seed " + std::to_string(seed) + ": pretraining");
    fed::FederationConfig pre_cfg;
    pre_cfg.rounds = cfg.pretrain_rounds;
    pre_cfg.clients_per_round = cfg.clients_per_round;
    pre_cfg.train = cfg.train;
    pre_cfg.eval_every = cfg.pretrain_rounds;
    pre_cfg.seed = seed;
    std::vector<std::size_t> everyone(sc.partition.num_clients());
    for (std::size_t k = 0; k < everyone.size(); ++k) everyone[k] = k;
    const fed::TrainingRun pre =
        fed::run_training(unlearn::initial_model(arch, seed), arch, fed::ClientPool::full(sc.train, sc.partition),
                          pre_cfg, everyone, fed::Phase::pretrain, fed::stream::pretrain, ctx.evals);
    const nn::ModelParams& w_pre = pre.model;
    write_file(seed_dir / "pretrain.jsonl", fed::to_jsonl(pre.log));
    save_checkpoint(seed_dir / "w_pre.ckpt", w_pre);
    const double a_pre = fed::evaluate(w_pre, arch, sc.forget_eval);

    // Retraining reference on D_r only, audited.
    log.info("seed " + std::to_string(seed) + ": retraining reference");
    const AccessAudit retrain_audit(sc.train.size(), sc.partition.unlearn_indices);
    unlearn::UnlearnContext retrain_ctx = ctx;
    retrain_ctx.audit = &retrain_audit;
    const unlearn::UnlearnResult retrained =
        unlearn::baseline_unlearn(unlearn::Method::retrain, w_pre, retrain_ctx, cfg.rectify);
    write_file(seed_dir / "retrain.jsonl", fed::to_jsonl(retrained.log));
    save_checkpoint(seed_dir / "w_retrain.ckpt", retrained.model);
    const double ref_u = fed::evaluate(retrained.model, arch, sc.forget_eval);
    const double ref_t = fed::evaluate(retrained.model, arch, sc.test);
    const metrics::UfGate gate{cfg.rectify.uf_gate, cfg.rectify.uf_min_abs};

    for (std::size_t m = 0; m < methods.size(); ++m) {
      SeedResult& res = results[m];
      res.retrain_u_acc = ref_u;
      res.retrain_t_acc = ref_t;
      res.audit_retrain_reads = retrain_audit.reads();
      res.unlearn_clients = sc.partition.unlearn_clients.size();
      res.forget_size = sc.partition.unlearn_indices.size();
      try {
        const fs::path dir = seed_dir / res.method;
        fs::create_directories(dir);
        log.info("seed " + std::to_string(seed) + ": " + res.method);

        if (methods[m] == unlearn::Method::retrain) {
          res.rr.a_pre = a_pre;
          res.rr.a_u = ref_u;
          res.t_acc_u = res.t_acc_c = ref_t;
          res.efficiency = metrics::efficiency_report(retrained.log);
          res.rr.t_u_rounds = res.efficiency.t_u;
          res.rr.t_p_rounds = res.efficiency.t_p;
          write_file(dir / "result.json", result_to_json(res).dump(2) + "\n");
          continue;
        }

        unlearn::RectifyConfig rc = cfg.rectify;
        if (cfg.extend_to_gate) rc.extend_until_u_acc = std::max(ref_u + gate.min_abs, gate.multiple * ref_u);
        unlearn::UnlearnContext uctx = ctx;
        uctx.first_round = cfg.pretrain_rounds;
        const unlearn::UnlearnResult un = unlearn::run_method(methods[m], w_pre, uctx, rc);
        const nn::Adapter* adapter = un.adapter ? &*un.adapter : nullptr;
        write_file(dir / "unlearn.jsonl", fed::to_jsonl(un.log));
        save_checkpoint(dir / "w_un.ckpt", un.model);
        res.rr.a_u = fed::evaluate(un.model, arch, sc.forget_eval, adapter);
        res.t_acc_u = fed::evaluate(un.model, arch, sc.test, adapter);
        res.efficiency = metrics::efficiency_report(un.log);

        // Phase C, audited.
        const AccessAudit cont_audit(sc.train.size(), sc.partition.unlearn_indices);
        unlearn::UnlearnContext cctx = ctx;
        cctx.audit = &cont_audit;
        cctx.first_round = un.log.empty() ? cfg.pretrain_rounds : un.log.back().round + 1;
        const fed::TrainingRun cont = unlearn::continue_training(un.model, cctx, cfg.t_cont, adapter);
        res.audit_continue_reads = cont_audit.reads();
        write_file(dir / "continue.jsonl", fed::to_jsonl(cont.log));
        save_checkpoint(dir / "w_cont.ckpt", cont.model);
        res.t_acc_c = fed::evaluate(cont.model, arch, sc.test, adapter);

        std::vector<double> trace;
        for (const auto& r : cont.log) trace.push_back(r.u_acc.value_or(res.rr.a_u));
        if (trace.empty()) trace.push_back(res.rr.a_u);
        res.rr = metrics::resurfacing_rate(a_pre, res.rr.a_u, trace, ref_u, gate);
        res.rr.t_u_rounds = res.efficiency.t_u;
        res.rr.t_p_rounds = res.efficiency.t_p;
        {
          std::ofstream out(dir / "rr_report.csv");
          const metrics::RrRow row{res.method, cfg.scenario, res.rr};
          metrics::write_rr_report(out, std::span<const metrics::RrRow>(&row, 1));
        }
        phase_c_diagnostics(cfg, arch, sc, w_pre, un.model, cont, adapter, seed, dir, res);
        write_file(dir / "result.json", result_to_json(res).dump(2) + "\n");
      } catch (const std::exception& e) {
        res.error = e.what();
        log.warn("seed " + std::to_string(seed) + " " + res.method + " failed: " + e.what());
        write_file(seed_dir / res.method / "result.json", result_to_json(res).dump(2) + "\n");
      }
    }
  } catch (const std::exception& e) {
    log.warn("seed " + std::to_string(seed) + " failed: " + e.what());
    for (auto& r : results)
      if (r.error.empty()) r.error = e.what();
  }
  return results;
}

void write_top_level(const ExperimentConfig& cfg, const ScenarioResult& result) {
  const fs::path root(cfg.output_dir);
  {
    std::ofstream out(root / "summary.csv");
    write_summary(out, result);
  }
  std::vector<metrics::RrRow> rows;
  for (const auto& m : result.methods)
    for (const auto& s : m.seeds)
      if (s.ok() && s.method != "retrain")
        rows.push_back({s.method, cfg.scenario + "@seed_" + std::to_string(s.seed), s.rr});
  std::ofstream out(root / "rr_report.csv");
  metrics::write_rr_report(out, rows);
}

std::string activation_name(nn::Activation a) { return a == nn::Activation::relu ? "relu" : "tanh"; }

}  // namespace

// ---- config ---------------------------------------------------------------

nn::MlpArchitecture ExperimentConfig::architecture() const {
  nn::MlpArchitecture arch;
  arch.layer_widths.push_back(dataset.feature_dim);
  arch.layer_widths.insert(arch.layer_widths.end(), hidden.begin(), hidden.end());
  arch.layer_widths.push_back(dataset.num_classes);
  arch.activation = activation;
  return arch;
}

void ExperimentConfig::validate() const {
  if (seeds.empty()) throw ConfigError("seeds must be nonempty");
  if (dataset.kind != "synth" && dataset.kind != "idx") throw ConfigError("dataset.kind must be synth or idx");
  if (dataset.kind == "idx" && (dataset.idx_images.empty() || dataset.idx_labels.empty()))
    throw ConfigError("dataset: idx needs idx_images and idx_labels");
  if (dataset.kind == "synth" && (dataset.num_classes < 2 || dataset.samples_per_class == 0 ||
                                  dataset.feature_dim == 0 || !(dataset.spread > 0.0)))
    throw ConfigError("dataset: invalid synth parameters");
  if (partition.kind != "dirichlet" && partition.kind != "iid")
    throw ConfigError("partition.kind must be dirichlet or iid");
  if (partition.num_clients < 2) throw ConfigError("partition.num_clients must be >= 2");
  if (partition.kind == "dirichlet" && !(partition.alpha > 0.0)) throw ConfigError("partition.alpha must be > 0");
  const auto& g = granularity;
  if (g.kind != "client" && g.kind != "sample" && g.kind != "class")
    throw ConfigError("granularity.kind must be client, sample or class");
  if (g.kind == "sample" && !(g.ratio > 0.0 && g.ratio < 1.0)) throw ConfigError("granularity.ratio must be in (0, 1)");
  for (std::size_t k : g.clients)
    if (k >= partition.num_clients) throw ConfigError("granularity.clients: id out of range");
  if (g.target_label < 0 || (dataset.kind == "synth" && static_cast<std::size_t>(g.target_label) >= dataset.num_classes))
    throw ConfigError("granularity.target_label out of range");
  if (g.trigger && (g.trigger_width == 0 || (dataset.kind == "synth" && g.trigger_width > dataset.feature_dim)))
    throw ConfigError("granularity.trigger_width out of range");
  if (hidden.empty()) throw ConfigError("model.hidden needs at least one layer");
  for (std::size_t h : hidden)
    if (h == 0) throw ConfigError("model.hidden widths must be >= 1");
  if (rectify.adapter_rank > hidden.back()) throw ConfigError("rectify.adapter_rank exceeds the hidden width");
  if (clients_per_round && (*clients_per_round == 0 || *clients_per_round > partition.num_clients))
    throw ConfigError("clients_per_round must be in [1, num_clients]");
  if (pretrain_rounds == 0) throw ConfigError("pretrain_rounds must be >= 1");
  if (prop1_beta && !(*prop1_beta > 0.0)) throw ConfigError("prop1_beta must be > 0");
  if (output_dir.empty()) throw ConfigError("output_dir must be set");
  train.validate();
  rectify.validate();
}

ExperimentConfig config_from_json(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  const json doc = json(j);
  ExperimentConfig c;
  check_keys(doc, {"scenario", "dataset", "partition", "granularity", "model", "method", "rectify", "train",
                   "clients_per_round", "pretrain_rounds", "t_cont", "seeds", "output_dir", "prop1_beta",
                   "extend_to_gate"},
             "config");
  read(doc, "scenario", c.scenario, "config");
  if (doc.contains("dataset")) {
    const json& d = doc["dataset"];
    check_keys(d, {"kind", "num_classes", "samples_per_class", "test_per_class", "feature_dim", "spread",
                   "idx_images", "idx_labels"},
               "dataset");
    read(d, "kind", c.dataset.kind, "dataset");
    read(d, "num_classes", c.dataset.num_classes, "dataset");
    read(d, "samples_per_class", c.dataset.samples_per_class, "dataset");
    read(d, "test_per_class", c.dataset.test_per_class, "dataset");
    read(d, "feature_dim", c.dataset.feature_dim, "dataset");
    read(d, "spread", c.dataset.spread, "dataset");
    read(d, "idx_images", c.dataset.idx_images, "dataset");
    read(d, "idx_labels", c.dataset.idx_labels, "dataset");
  }
  if (doc.contains("partition")) {
    const json& p = doc["partition"];
    check_keys(p, {"kind", "alpha", "num_clients"}, "partition");
    read(p, "kind", c.partition.kind, "partition");
    read(p, "alpha", c.partition.alpha, "partition");
    read(p, "num_clients", c.partition.num_clients, "partition");
  }
  if (doc.contains("granularity")) {
    const json& g = doc["granularity"];
    check_keys(g, {"kind", "clients", "ratio", "label", "trigger", "trigger_width", "trigger_value", "target_label"},
               "granularity");
    read(g, "kind", c.granularity.kind, "granularity");
    read(g, "clients", c.granularity.clients, "granularity");
    read(g, "ratio", c.granularity.ratio, "granularity");
    read(g, "label", c.granularity.label, "granularity");
    read(g, "trigger", c.granularity.trigger, "granularity");
    read(g, "trigger_width", c.granularity.trigger_width, "granularity");
    read(g, "trigger_value", c.granularity.trigger_value, "granularity");
    read(g, "target_label", c.granularity.target_label, "granularity");
  }
  if (doc.contains("model")) {
    const json& m = doc["model"];
    check_keys(m, {"hidden", "activation"}, "model");
    read(m, "hidden", c.hidden, "model");
    std::string act = activation_name(c.activation);
    read(m, "activation", act, "model");
    if (act == "relu") c.activation = nn::Activation::relu;
    else if (act == "tanh") c.activation = nn::Activation::tanh;
    else throw ConfigError("model.activation must be relu or tanh");
  }
  if (doc.contains("method")) {
    std::string name;
    read(doc, "method", name, "config");
    c.method = unlearn::parse_method(name);
  }
  // Paper defaults: gamma 1.5 for sample-level unlearning, 0.3 otherwise.
  c.rectify.gamma = c.granularity.kind == "sample" ? 1.5 : 0.3;
  if (doc.contains("rectify")) {
    const json& r = doc["rectify"];
    check_keys(r, {"gamma", "unlearn_rounds", "restore_rounds", "probe_steps", "probe_rate", "adapter_rank", "tau_f",
                   "uf_gate", "uf_min_abs", "adaptive_gamma_floor", "max_unlearn_rounds"},
               "rectify");
    read(r, "gamma", c.rectify.gamma, "rectify");
    read(r, "unlearn_rounds", c.rectify.unlearn_rounds, "rectify");
    read(r, "restore_rounds", c.rectify.restore_rounds, "rectify");
    read(r, "probe_steps", c.rectify.probe_steps, "rectify");
    read(r, "probe_rate", c.rectify.probe_rate, "rectify");
    read(r, "adapter_rank", c.rectify.adapter_rank, "rectify");
    read_optional(r, "tau_f", c.rectify.tau_f, "rectify");
    read(r, "uf_gate", c.rectify.uf_gate, "rectify");
    read(r, "uf_min_abs", c.rectify.uf_min_abs, "rectify");
    read(r, "adaptive_gamma_floor", c.rectify.adaptive_gamma_floor, "rectify");
    read(r, "max_unlearn_rounds", c.rectify.max_unlearn_rounds, "rectify");
  }
  if (doc.contains("train")) {
    const json& t = doc["train"];
    check_keys(t, {"learning_rate", "momentum", "local_epochs", "batch_size"}, "train");
    read(t, "learning_rate", c.train.learning_rate, "train");
    read(t, "momentum", c.train.momentum, "train");
    read(t, "local_epochs", c.train.local_epochs, "train");
    read(t, "batch_size", c.train.batch_size, "train");
  }
  read_optional(doc, "clients_per_round", c.clients_per_round, "config");
  read(doc, "pretrain_rounds", c.pretrain_rounds, "config");
  read(doc, "t_cont", c.t_cont, "config");
  read(doc, "seeds", c.seeds, "config");
  read(doc, "output_dir", c.output_dir, "config");
  read_optional(doc, "prop1_beta", c.prop1_beta, "config");
  read(doc, "extend_to_gate", c.extend_to_gate, "config");
  c.validate();
  return c;
}

std::string config_to_json(const ExperimentConfig& c) {
  json j;
  j["scenario"] = c.scenario;
  j["dataset"] = {{"kind", c.dataset.kind},
                  {"num_classes", c.dataset.num_classes},
                  {"samples_per_class", c.dataset.samples_per_class},
                  {"test_per_class", c.dataset.test_per_class},
                  {"feature_dim", c.dataset.feature_dim},
                  {"spread", c.dataset.spread},
                  {"idx_images", c.dataset.idx_images},
                  {"idx_labels", c.dataset.idx_labels}};
  j["partition"] = {{"kind", c.partition.kind}, {"alpha", c.partition.alpha}, {"num_clients", c.partition.num_clients}};
  j["granularity"] = {{"kind", c.granularity.kind},
                      {"clients", c.granularity.clients},
                      {"ratio", c.granularity.ratio},
                      {"label", c.granularity.label},
                      {"trigger", c.granularity.trigger},
                      {"trigger_width", c.granularity.trigger_width},
                      {"trigger_value", c.granularity.trigger_value},
                      {"target_label", c.granularity.target_label}};
  j["model"] = {{"hidden", c.hidden}, {"activation", activation_name(c.activation)}};
  j["method"] = unlearn::method_name(c.method);
  j["rectify"] = {{"gamma", c.rectify.gamma},
                  {"unlearn_rounds", c.rectify.unlearn_rounds},
                  {"restore_rounds", c.rectify.restore_rounds},
                  {"probe_steps", c.rectify.probe_steps},
                  {"probe_rate", c.rectify.probe_rate},
                  {"adapter_rank", c.rectify.adapter_rank},
                  {"tau_f", optional_json(c.rectify.tau_f)},
                  {"uf_gate", c.rectify.uf_gate},
                  {"uf_min_abs", c.rectify.uf_min_abs},
                  {"adaptive_gamma_floor", c.rectify.adaptive_gamma_floor},
                  {"max_unlearn_rounds", c.rectify.max_unlearn_rounds}};
  j["train"] = {{"learning_rate", c.train.learning_rate},
                {"momentum", c.train.momentum},
                {"local_epochs", c.train.local_epochs},
                {"batch_size", c.train.batch_size}};
  j["clients_per_round"] = optional_json(c.clients_per_round);
  j["pretrain_rounds"] = c.pretrain_rounds;
  j["t_cont"] = c.t_cont;
  j["seeds"] = c.seeds;
  j["output_dir"] = c.output_dir;
  j["prop1_beta"] = optional_json(c.prop1_beta);
  j["extend_to_gate"] = c.extend_to_gate;
  return j.dump(2) + "\n";
}

ExperimentConfig load_config(const fs::path& path) {
  std::string text;
  try {
    text = read_file(path);
  } catch (const std::runtime_error& e) {
    throw ConfigError(e.what());
  }
  return config_from_json(text);
}

// ---- results --------------------------------------------------------------

const MethodSummary* ScenarioResult::find(const std::string& method) const {
  for (const auto& m : methods)
    if (m.method == method) return &m;
  return nullptr;
}

bool ScenarioResult::all_uf() const {
  bool any = false;
  for (const auto& m : methods) {
    for (const auto& s : m.seeds) {
      if (!s.ok() || s.method == "retrain") continue;
      any = true;
      if (!s.rr.uf) return false;
    }
  }
  return any;
}

bool ScenarioResult::any_failure() const {
  for (const auto& m : methods)
    for (const auto& s : m.seeds)
      if (!s.ok()) return true;
  return false;
}

std::pair<std::optional<double>, std::optional<double>> mean_std(const std::vector<double>& values) {
  if (values.empty()) return {};
  double sum = 0.0;
  for (double v : values) sum += v;
  const double mean = sum / static_cast<double>(values.size());
  if (values.size() < 2) return {mean, std::nullopt};
  double ss = 0.0;
  for (double v : values) ss += (v - mean) * (v - mean);
  return {mean, std::sqrt(ss / static_cast<double>(values.size() - 1))};
}

void write_summary(std::ostream& out, const ScenarioResult& result) {
  out << "method,seed,status,a_pre,a_u,a_c_max,a_c_final,rr,uf,t_acc_u,t_acc_c,retrain_u_acc,retrain_t_acc,"
         "t_u,t_p,t_tot,rollback_weak_fraction,audit_retrain_reads,audit_continue_reads\n";
  using Getter = std::optional<double> (*)(const SeedResult&);
  static const Getter columns[] = {
      [](const SeedResult& s) -> std::optional<double> { return s.rr.a_pre; },
      [](const SeedResult& s) -> std::optional<double> { return s.rr.a_u; },
      [](const SeedResult& s) -> std::optional<double> { return s.rr.a_c; },
      [](const SeedResult& s) -> std::optional<double> { return s.rr.a_c_final; },
      [](const SeedResult& s) -> std::optional<double> { return s.rr.rr; },
      [](const SeedResult& s) -> std::optional<double> { return s.rr.uf ? 1.0 : 0.0; },
      [](const SeedResult& s) -> std::optional<double> { return s.t_acc_u; },
      [](const SeedResult& s) -> std::optional<double> { return s.t_acc_c; },
      [](const SeedResult& s) -> std::optional<double> { return s.retrain_u_acc; },
      [](const SeedResult& s) -> std::optional<double> { return s.retrain_t_acc; },
      [](const SeedResult& s) -> std::optional<double> { return static_cast<double>(s.efficiency.t_u); },
      [](const SeedResult& s) -> std::optional<double> { return static_cast<double>(s.efficiency.t_p); },
      [](const SeedResult& s) -> std::optional<double> { return static_cast<double>(s.efficiency.t_tot); },
      [](const SeedResult& s) -> std::optional<double> { return s.rollback_weak_fraction; },
      [](const SeedResult& s) -> std::optional<double> { return static_cast<double>(s.audit_retrain_reads); },
      [](const SeedResult& s) -> std::optional<double> { return static_cast<double>(s.audit_continue_reads); },
  };
  for (const auto& m : result.methods) {
    for (const auto& s : m.seeds) {
      out << m.method << ',' << s.seed << ',' << (s.ok() ? "ok" : "failed");
      for (const Getter g : columns) out << ',' << (s.ok() ? fmt_opt(g(s)) : "");
      out << '\n';
    }
    std::vector<std::pair<std::optional<double>, std::optional<double>>> stats;
    for (const Getter g : columns) {
      std::vector<double> vals;
      for (const auto& s : m.seeds)
        if (s.ok())
          if (const auto v = g(s)) vals.push_back(*v);
      stats.push_back(mean_std(vals));
    }
    out << m.method << ",mean,";
    for (const auto& st : stats) out << ',' << fmt_opt(st.first);
    out << '\n' << m.method << ",std,";
    for (const auto& st : stats) out << ',' << fmt_opt(st.second);
    out << '\n';
  }
}

ScenarioResult run_methods(const ExperimentConfig& cfg, const std::vector<unlearn::Method>& methods,
                           const RunOptions& opts) {
  cfg.validate();
  if (methods.empty()) throw ConfigError("no methods to run");
  const Logger log(opts);
  fs::create_directories(cfg.output_dir);
  write_file(fs::path(cfg.output_dir) / "config.json", config_to_json(cfg));

  std::vector<std::vector<SeedResult>> per_seed(cfg.seeds.size());
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < cfg.seeds.size(); i = next++) per_seed[i] = run_seed(cfg, cfg.seeds[i], methods, log);
  };
  const std::size_t jobs = std::max<std::size_t>(1, std::min(opts.jobs, cfg.seeds.size()));
  if (jobs == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t j = 0; j < jobs; ++j) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }

  ScenarioResult result;
  for (std::size_t m = 0; m < methods.size(); ++m) {
    MethodSummary ms{unlearn::method_name(methods[m]), {}};
    for (const auto& seed_results : per_seed) ms.seeds.push_back(seed_results[m]);
    result.methods.push_back(std::move(ms));
  }
  write_top_level(cfg, result);
  return result;
}

ScenarioResult run_experiment(const ExperimentConfig& cfg, const RunOptions& opts) {
  return run_methods(cfg, {cfg.method}, opts);
}

SweepResult gamma_sweep(const ExperimentConfig& cfg, const std::vector<double>& gammas, const RunOptions& opts) {
  if (cfg.method != unlearn::Method::lethe) throw ConfigError("gamma sweep requires method = lethe");
  if (gammas.empty()) throw ConfigError("gamma sweep needs at least one gamma");
  const Logger log(opts);
  std::vector<double> distinct;
  for (double g : gammas) {
    if (std::find(distinct.begin(), distinct.end(), g) != distinct.end()) {
      log.warn("duplicate gamma " + fmt(g) + " ignored");
      continue;
    }
    distinct.push_back(g);
  }

  SweepResult sweep;
  sweep.inconclusive = true;
  for (double g : distinct) {
    ExperimentConfig c = cfg;
    c.rectify.gamma = g;
    c.extend_to_gate = true;
    char name[64];
    std::snprintf(name, sizeof name, "gamma_%g", g);
    c.output_dir = (fs::path(cfg.output_dir) / name).string();
    const ScenarioResult r = run_experiment(c, opts);

    SweepRow row;
    row.gamma = g;
    std::vector<double> tu, tp, rr;
    std::size_t ok = 0;
    for (const auto& s : r.methods.front().seeds) {
      if (!s.ok()) continue;
      ++ok;
      tu.push_back(static_cast<double>(s.efficiency.t_u));
      tp.push_back(static_cast<double>(s.efficiency.t_p));
      if (s.rr.uf) ++row.uf_seeds;
      else rr.push_back(*s.rr.rr);
    }
    row.t_u = mean_std(tu).first.value_or(0.0);
    row.t_p = mean_std(tp).first.value_or(0.0);
    row.t_tot = row.t_u + row.t_p;
    row.rr = mean_std(rr).first;
    row.cleared = ok > 0 && row.uf_seeds == 0;
    if (row.cleared) sweep.inconclusive = false;
    sweep.rows.push_back(row);
  }
  if (sweep.inconclusive) log.warn("gamma sweep inconclusive: no gamma cleared the UF gate within the round cap");

  fs::create_directories(cfg.output_dir);
  std::ofstream out(fs::path(cfg.output_dir) / "gamma_sweep.csv");
  out << "gamma,t_u,t_p,t_tot,rr,uf_seeds,cleared\n";
  for (const auto& r : sweep.rows)
    out << fmt(r.gamma) << ',' << fmt(r.t_u) << ',' << fmt(r.t_p) << ',' << fmt(r.t_tot) << ',' << fmt_opt(r.rr)
        << ',' << r.uf_seeds << ',' << (r.cleared ? 1 : 0) << '\n';
  return sweep;
}

std::vector<AblationRow> ablation_battery(const ExperimentConfig& cfg, const RunOptions& opts) {
  using unlearn::Method;
  const std::vector<Method> variants = {Method::lethe, Method::variant_i, Method::variant_ii, Method::variant_iii,
                                        Method::variant_iv};
  const ScenarioResult r = run_methods(cfg, variants, opts);
  std::vector<AblationRow> rows;
  for (const auto& m : r.methods) {
    AblationRow row;
    row.variant = m.method;
    std::vector<double> tu, tp, rr;
    for (const auto& s : m.seeds) {
      if (!s.ok()) continue;
      tu.push_back(static_cast<double>(s.efficiency.t_u));
      tp.push_back(static_cast<double>(s.efficiency.t_p));
      if (s.rr.uf) ++row.uf_seeds;
      else rr.push_back(*s.rr.rr);
    }
    row.t_u = mean_std(tu).first.value_or(0.0);
    row.t_p = mean_std(tp).first.value_or(0.0);
    row.rr = mean_std(rr).first;
    rows.push_back(row);
  }
  std::ofstream out(fs::path(cfg.output_dir) / "ablation.csv");
  out << "variant,t_u,t_p,rr,uf_seeds,rr_or_uf\n";
  for (const auto& row : rows)
    out << row.variant << ',' << fmt(row.t_u) << ',' << fmt(row.t_p) << ',' << fmt_opt(row.rr) << ','
        << row.uf_seeds << ',' << (row.rr ? fmt(*row.rr) : "UF") << '\n';
  return rows;
}

ScenarioResult report(const fs::path& output_dir) {
  if (!fs::is_directory(output_dir)) throw ConfigError("no run directory at " + output_dir.string());
  std::vector<fs::path> seed_dirs;
  for (const auto& e : fs::directory_iterator(output_dir))
    if (e.is_directory() && e.path().filename().string().rfind("seed_", 0) == 0) seed_dirs.push_back(e.path());
  // Numeric seed order.
  std::sort(seed_dirs.begin(), seed_dirs.end(), [](const fs::path& a, const fs::path& b) {
    return std::stoull(a.filename().string().substr(5)) < std::stoull(b.filename().string().substr(5));
  });

  std::vector<std::string> order;
  const fs::path cfg_path = output_dir / "config.json";
  std::string scenario = "desk";
  if (fs::exists(cfg_path)) {
    const auto j = nlohmann::json::parse(read_file(cfg_path));
    scenario = j.value("scenario", scenario);
  }

  ScenarioResult result;
  for (const auto& sd : seed_dirs) {
    std::vector<fs::path> method_dirs;
    for (const auto& e : fs::directory_iterator(sd))
      if (e.is_directory() && fs::exists(e.path() / "result.json")) method_dirs.push_back(e.path());
    std::sort(method_dirs.begin(), method_dirs.end());
    for (const auto& md : method_dirs) {
      SeedResult r;
      try {
        r = result_from_json(nlohmann::json::parse(read_file(md / "result.json")));
      } catch (const nlohmann::json::exception& e) {
        throw FormatError((md / "result.json").string(), e.what());
      }
      MethodSummary* ms = nullptr;
      for (auto& m : result.methods)
        if (m.method == r.method) ms = &m;
      if (!ms) {
        result.methods.push_back({r.method, {}});
        ms = &result.methods.back();
      }
      ms->seeds.push_back(std::move(r));
    }
  }
  // Keep the method order the run used (the order in config.json's method
  // list is not stored, so fall back to the canonical method order).
  std::sort(result.methods.begin(), result.methods.end(), [](const MethodSummary& a, const MethodSummary& b) {
    return static_cast<int>(unlearn::parse_method(a.method)) < static_cast<int>(unlearn::parse_method(b.method));
  });
  ExperimentConfig cfg;
  cfg.scenario = scenario;
  cfg.output_dir = output_dir.string();
  write_top_level(cfg, result);
  return result;
}

}  // namespace lethe::harness
