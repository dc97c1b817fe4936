#pragma once

#include <cstddef>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "lethe/fed.hpp"
#include "lethe/nn.hpp"

namespace lethe::metrics {

// Shortest round-trip decimal form ("%.17g"); the CSV writers all use it.
std::string format_double(double v);

/// u-Acc failure gate relative to the retraining reference:
/// a_u > max(ref + min_abs, multiple * ref).
struct UfGate {
  double multiple = 3.0;
  double min_abs = 0.05;
};

struct ResurfacingReport {
  double a_pre = 0.0;
  double a_u = 0.0;
  std::vector<double> a_c_trace;
  double a_c = 0.0;        // max of the trace
  double a_c_final = 0.0;  // last entry
  std::optional<double> rr;  // percent; absent when uf
  bool uf = false;
  std::size_t t_u_rounds = 0;
  std::size_t t_p_rounds = 0;
};

/// rr = max(0, max(trace) - a_u) / (a_pre - a_u) * 100. Marked UF (and rr left
/// empty) when a_u fails the gate or a_pre <= a_u. Throws InvalidArgument on
/// an empty trace.
ResurfacingReport resurfacing_rate(double a_pre, double a_u, std::span<const double> a_c_trace,
                                   double retrain_ref_u_acc, UfGate gate = {});

struct Cosine {
  double value = 0.0;
  bool undefined = false;  // a zero vector; value is 0
};

Cosine cosine(std::span<const double> a, std::span<const double> b);

struct AlignmentTrace {
  std::vector<std::vector<double>> cos;       // [round][layer]
  std::vector<std::vector<bool>> undefined;   // [round][layer]
  std::vector<double> time_average;           // per layer
};

/// Per-round, per-layer cosine between each round's delta and a fixed
/// reference delta (the forget-stream displacement at w_pre).
AlignmentTrace correlation_trace(std::span<const nn::UpdateDelta> round_deltas,
                                 const nn::UpdateDelta& reference);
AlignmentTrace correlation_trace(std::span<const fed::RoundRecord> log, const nn::UpdateDelta& reference);

struct RollbackTrace {
  std::vector<double> cos;
  std::vector<bool> weak;  // cos < threshold
  std::vector<bool> undefined;

  double weak_fraction() const;
};

/// cos(delta_t, w_pre - w_un) over all parameters. Throws InvalidArgument when
/// w_pre == w_un.
RollbackTrace rollback_cosine(std::span<const nn::UpdateDelta> round_deltas, const nn::ModelParams& w_pre,
                              const nn::ModelParams& w_un, double threshold = 0.1);
RollbackTrace rollback_cosine(std::span<const fed::RoundRecord> log, const nn::ModelParams& w_pre,
                              const nn::ModelParams& w_un, double threshold = 0.1);

struct Prop1Bound {
  double beta = 0.0;
  double G = 0.0;
  double rho = 0.0;
  double eta = 0.0;
  std::size_t T = 0;
  double l0 = 0.0;  // L_u(w_pre)

  // l0 - eta * rho * t + beta * eta^2 * G^2 * t^2 / 2
  double bound_value(double t) const;
  // 2 rho / (beta eta G^2); +inf when G = 0.
  double critical_T() const;
};

struct Prop1Row {
  std::size_t t = 0;
  double empirical = 0.0;  // L_u(w_t)
  double bound = 0.0;      // with rho, G estimated from rounds s < t
  double rho = 0.0;
  double G = 0.0;
  bool holds = false;              // empirical <= bound + tol
  bool certified_decrease = false;  // bound(t) < l0, i.e. 0 < t < critical_T
  bool empirical_decrease = false;  // empirical < l0
};

struct Prop1Check {
  Prop1Bound bound;  // final estimates over the whole trace
  std::vector<Prop1Row> rows;
  bool all_hold = false;
  // Every certified-decrease step also decreased empirically.
  bool decrease_region_contained = false;
  bool certified = false;  // false for neural runs (beta is an estimate)
};

/// loss_trace[t] = L_u(w_t) for t = 0..T; phase_c_grads[t] = gradient of L_r
/// at w_t for t = 0..T-1. rho is the running mean of <g_u, g_r(s)> and G the
/// running max of |g_r(s)|, both over s < t.
Prop1Check prop1_bound_check(std::span<const double> loss_trace, std::span<const double> grad_u_at_pre,
                             std::span<const std::vector<double>> phase_c_grads, double eta, double beta,
                             bool certified, double tol = 1e-9);

/// Secant smoothness estimate max_t |g(t+1) - g(t)| / |w(t+1) - w(t)|.
double secant_beta(std::span<const std::vector<double>> grads, std::span<const std::vector<double>> points);

struct Efficiency {
  std::size_t t_u = 0;
  std::size_t t_p = 0;
  std::size_t t_tot = 0;
};

/// T_U counts rectify rounds in which unlearning clients took part; T_P counts
/// restore and retrain rounds.
Efficiency efficiency_report(std::span<const fed::RoundRecord> log);
// Same over a JSONL log; a record without a phase tag is a FormatError.
Efficiency efficiency_report_jsonl(const std::string& jsonl);

struct RrRow {
  std::string method;
  std::string scenario;
  ResurfacingReport report;
};

void write_rr_report(std::ostream& out, std::span<const RrRow> rows);
void write_alignment_heatmap(std::ostream& out, const AlignmentTrace& trace);
void write_rollback_trace(std::ostream& out, const RollbackTrace& trace);
void write_prop1(std::ostream& out, const Prop1Check& check);

}  // namespace lethe::metrics
