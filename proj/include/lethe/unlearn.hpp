#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "lethe/data.hpp"
#include "lethe/dataset.hpp"
#include "lethe/fed.hpp"
#include "lethe/nn.hpp"

namespace lethe::unlearn {

/// Backbone plus an optional residual adapter.
struct CompositeModel {
  nn::ModelParams backbone;
  std::optional<nn::Adapter> adapter;

  const nn::Adapter* adapter_ptr() const { return adapter ? &*adapter : nullptr; }
};

CompositeModel attach(const nn::ModelParams& backbone, const nn::Adapter& adapter);
nn::ModelParams detach(const CompositeModel& model);

struct RectifyConfig {
  double gamma = 0.3;
  std::size_t unlearn_rounds = 20;  // T_U
  std::size_t restore_rounds = 10;  // R
  std::size_t probe_steps = 20;
  double probe_rate = 1e-2;
  std::size_t adapter_rank = 4;
  // Phase U ends early once the forget-set loss of the backbone exceeds tau_f.
  std::optional<double> tau_f;
  // UF gate: u-Acc above max(ref + uf_min_abs, uf_gate * ref) is a failure.
  double uf_gate = 3.0;
  double uf_min_abs = 0.05;
  // Per-layer gamma floor <du, dr> / |du|^2 on the positive branch.
  bool adaptive_gamma_floor = false;
  // When set, rectify rounds continue past unlearn_rounds until the forget
  // u-Acc is at or below this value, up to max_unlearn_rounds in total.
  std::optional<double> extend_until_u_acc;
  std::size_t max_unlearn_rounds = 100;

  void validate() const;  // ConfigError
};

struct DualStream {
  nn::UpdateDelta forget;  // du
  nn::UpdateDelta retain;  // dr
  std::vector<double> sims;  // <dr, du> per layer
};

DualStream make_dual_stream(nn::UpdateDelta forget, nn::UpdateDelta retain);

enum class RectifyMode { conditional, none, unconditional };

inline constexpr const char* kBranchSubtract = "retain_minus_forget";
inline constexpr const char* kBranchNegate = "negate_forget";
inline constexpr const char* kBranchPassthrough = "retain_passthrough";  // du = 0
inline constexpr const char* kBranchRetainOnly = "retain_only";          // no rectification

struct Rectified {
  nn::UpdateDelta delta;
  std::vector<std::string> branches;
  std::vector<double> gammas;  // effective per-layer gamma
};

/// Per layer: dr - gamma * du if sim > 0, otherwise -du. A layer whose du is
/// exactly zero passes dr through. `unconditional` always subtracts, `none`
/// returns dr.
Rectified rectify(const DualStream& dual, double gamma, RectifyMode mode = RectifyMode::conditional,
                  bool adaptive_floor = false);

struct ProbeResult {
  nn::Adapter adapter;
  double loss_before = 0.0;
  double loss_after = 0.0;
};

/// `steps` full-batch ascent steps on the adapter only. Throws ProbeDivergence
/// when the loss exceeds 1e6 or stops being finite.
ProbeResult train_probe(const nn::ModelParams& model, const nn::MlpArchitecture& arch,
                        const nn::Adapter& adapter, const Batch& forget_batch, std::size_t steps,
                        double rate);

// Backbone displacement of one local_train pass on the composite model.
nn::UpdateDelta forget_stream(const nn::ModelParams& model, const nn::MlpArchitecture& arch,
                              const nn::Adapter* adapter, const ShardView& forget_data,
                              const nn::TrainConfig& train);

enum class Method {
  lethe,
  variant_i,    // no adapter
  variant_ii,   // no rectification
  variant_iii,  // unconditional subtraction
  variant_iv,   // adapter kept through restore and Phase C
  retrain,
  grad_ascent,
  weight_negation,
};

std::string method_name(Method m);
Method parse_method(const std::string& name);  // ConfigError on unknown names

/// Everything an unlearning method needs besides the model.
struct UnlearnContext {
  const nn::MlpArchitecture* arch = nullptr;
  const LabeledDataset* dataset = nullptr;  // training data, trigger applied
  const data::DatasetPartition* partition = nullptr;
  const AccessAudit* audit = nullptr;  // attached to every remaining-data pool
  fed::EvalSets evals;
  nn::TrainConfig train;
  std::optional<std::size_t> clients_per_round;
  std::uint64_t seed = 0;
  std::size_t first_round = 0;
  std::size_t retrain_rounds = 100;  // retrain baseline only
};

struct UnlearnResult {
  nn::ModelParams model;                // w_un (backbone)
  std::optional<nn::Adapter> adapter;   // variant IV keeps it
  std::vector<fed::RoundRecord> log;
  std::size_t unlearn_rounds = 0;
  std::size_t restore_rounds = 0;
  std::optional<ProbeResult> probe;
};

/// Reshape (probe), Rectify (dual-stream rounds) and Restore (FedAvg on C_r).
UnlearnResult lethe_unlearn(const nn::ModelParams& pretrained, const UnlearnContext& ctx,
                            const RectifyConfig& cfg, Method variant = Method::lethe);

// retrain, grad_ascent or weight_negation.
UnlearnResult baseline_unlearn(Method method, const nn::ModelParams& pretrained,
                               const UnlearnContext& ctx, const RectifyConfig& cfg);

// Dispatches on `method`.
UnlearnResult run_method(Method method, const nn::ModelParams& pretrained, const UnlearnContext& ctx,
                         const RectifyConfig& cfg);

/// Phase C: plain FedAvg on C_r for `rounds` rounds with per-round evaluation.
fed::TrainingRun continue_training(const nn::ModelParams& model, const UnlearnContext& ctx,
                                   std::size_t rounds, const nn::Adapter* adapter = nullptr);

// Shared starting point w_0 of pretraining and the retrain reference.
nn::ModelParams initial_model(const nn::MlpArchitecture& arch, std::uint64_t seed);

// Flips the sign of the first layer's weights and bias.
nn::ModelParams negate_first_layer(const nn::ModelParams& model);

}  // namespace lethe::unlearn
