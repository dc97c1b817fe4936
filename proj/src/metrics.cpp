#include "lethe/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>

#include "lethe/error.hpp"

namespace lethe::metrics {

namespace {

std::vector<nn::UpdateDelta> deltas_of(std::span<const fed::RoundRecord> log) {
  std::vector<nn::UpdateDelta> out;
  out.reserve(log.size());
  for (const auto& r : log) out.push_back(r.delta);
  return out;
}

}  // namespace

std::string format_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

ResurfacingReport resurfacing_rate(double a_pre, double a_u, std::span<const double> a_c_trace,
                                   double retrain_ref_u_acc, UfGate gate) {
  if (a_c_trace.empty()) throw InvalidArgument("resurfacing_rate: empty Phase-C trace");
  ResurfacingReport r;
  r.a_pre = a_pre;
  r.a_u = a_u;
  r.a_c_trace.assign(a_c_trace.begin(), a_c_trace.end());
  r.a_c = *std::max_element(a_c_trace.begin(), a_c_trace.end());
  r.a_c_final = a_c_trace.back();
  const double limit = std::max(retrain_ref_u_acc + gate.min_abs, gate.multiple * retrain_ref_u_acc);
  r.uf = a_u > limit || a_pre <= a_u;
  if (!r.uf) r.rr = std::max(0.0, r.a_c - a_u) / (a_pre - a_u) * 100.0;
  return r;
}

Cosine cosine(std::span<const double> a, std::span<const double> b) {
  const double na = nn::norm(a);
  const double nb = nn::norm(b);
  if (na == 0.0 || nb == 0.0) return {0.0, true};
  return {std::clamp(nn::dot(a, b) / (na * nb), -1.0, 1.0), false};
}

AlignmentTrace correlation_trace(std::span<const nn::UpdateDelta> round_deltas,
                                 const nn::UpdateDelta& reference) {
  AlignmentTrace out;
  const std::size_t L = reference.num_layers();
  out.time_average.assign(L, 0.0);
  for (const auto& d : round_deltas) {
    if (!d.same_shape(reference)) throw InvalidArgument("correlation_trace: delta shape differs from reference");
    std::vector<double> row;
    std::vector<bool> undef;
    for (std::size_t l = 0; l < L; ++l) {
      const Cosine c = cosine(d.layers[l], reference.layers[l]);
      row.push_back(c.value);
      undef.push_back(c.undefined);
    }
    out.cos.push_back(std::move(row));
    out.undefined.push_back(std::move(undef));
  }
  if (!out.cos.empty()) {
    for (std::size_t l = 0; l < L; ++l) {
      double s = 0.0;
      for (const auto& row : out.cos) s += row[l];
      out.time_average[l] = s / static_cast<double>(out.cos.size());
    }
  }
  return out;
}

AlignmentTrace correlation_trace(std::span<const fed::RoundRecord> log, const nn::UpdateDelta& reference) {
  const auto d = deltas_of(log);
  return correlation_trace(d, reference);
}

double RollbackTrace::weak_fraction() const {
  if (weak.empty()) return 0.0;
  return static_cast<double>(std::count(weak.begin(), weak.end(), true)) / static_cast<double>(weak.size());
}

RollbackTrace rollback_cosine(std::span<const nn::UpdateDelta> round_deltas, const nn::ModelParams& w_pre,
                              const nn::ModelParams& w_un, double threshold) {
  const nn::UpdateDelta rollback = nn::difference(w_pre, w_un);
  const std::vector<double> rb = rollback.concat();
  if (nn::norm(rb) == 0.0) throw InvalidArgument("rollback_cosine: w_pre equals w_un");
  RollbackTrace out;
  for (const auto& d : round_deltas) {
    if (!d.same_shape(rollback)) throw InvalidArgument("rollback_cosine: delta shape mismatch");
    const Cosine c = cosine(d.concat(), rb);
    out.cos.push_back(c.value);
    out.undefined.push_back(c.undefined);
    out.weak.push_back(c.value < threshold);
  }
  return out;
}

RollbackTrace rollback_cosine(std::span<const fed::RoundRecord> log, const nn::ModelParams& w_pre,
                              const nn::ModelParams& w_un, double threshold) {
  const auto d = deltas_of(log);
  return rollback_cosine(d, w_pre, w_un, threshold);
}

double Prop1Bound::bound_value(double t) const {
  return l0 - eta * rho * t + beta * eta * eta * G * G * t * t / 2.0;
}

double Prop1Bound::critical_T() const {
  if (G == 0.0) return std::numeric_limits<double>::infinity();
  return 2.0 * rho / (beta * eta * G * G);
}

Prop1Check prop1_bound_check(std::span<const double> loss_trace, std::span<const double> grad_u_at_pre,
                             std::span<const std::vector<double>> phase_c_grads, double eta, double beta,
                             bool certified, double tol) {
  if (loss_trace.empty()) throw InvalidArgument("prop1_bound_check: empty loss trace");
  if (phase_c_grads.size() + 1 < loss_trace.size())
    throw InvalidArgument("prop1_bound_check: need a gradient for every step of the trace");
  if (!(eta > 0.0) || !(beta > 0.0)) throw InvalidArgument("prop1_bound_check: eta and beta must be > 0");

  Prop1Check out;
  out.certified = certified;
  const std::size_t T = loss_trace.size() - 1;
  const double l0 = loss_trace[0];
  double align_sum = 0.0;
  double g_max = 0.0;
  out.all_hold = true;
  out.decrease_region_contained = true;
  for (std::size_t t = 0; t <= T; ++t) {
    Prop1Bound b{beta, g_max, t > 0 ? align_sum / static_cast<double>(t) : 0.0, eta, t, l0};
    Prop1Row row;
    row.t = t;
    row.empirical = loss_trace[t];
    row.rho = b.rho;
    row.G = b.G;
    row.bound = b.bound_value(static_cast<double>(t));
    row.holds = row.empirical <= row.bound + tol;
    row.certified_decrease = t > 0 && row.bound < l0;
    row.empirical_decrease = row.empirical < l0;
    out.all_hold = out.all_hold && row.holds;
    if (row.certified_decrease && !row.empirical_decrease) out.decrease_region_contained = false;
    out.rows.push_back(row);
    if (t < T) {
      const auto& g = phase_c_grads[t];
      if (g.size() != grad_u_at_pre.size()) throw InvalidArgument("prop1_bound_check: gradient length mismatch");
      align_sum += nn::dot(grad_u_at_pre, g);
      g_max = std::max(g_max, nn::norm(g));
    }
  }
  out.bound = Prop1Bound{beta, g_max, T > 0 ? align_sum / static_cast<double>(T) : 0.0, eta, T, l0};
  return out;
}

double secant_beta(std::span<const std::vector<double>> grads, std::span<const std::vector<double>> points) {
  if (grads.size() != points.size()) throw InvalidArgument("secant_beta: length mismatch");
  double beta = 0.0;
  for (std::size_t t = 0; t + 1 < grads.size(); ++t) {
    double dg = 0.0, dw = 0.0;
    for (std::size_t i = 0; i < grads[t].size(); ++i) {
      dg += (grads[t + 1][i] - grads[t][i]) * (grads[t + 1][i] - grads[t][i]);
      dw += (points[t + 1][i] - points[t][i]) * (points[t + 1][i] - points[t][i]);
    }
    if (dw > 0.0) beta = std::max(beta, std::sqrt(dg / dw));
  }
  return beta;
}

Efficiency efficiency_report(std::span<const fed::RoundRecord> log) {
  Efficiency e;
  for (const auto& r : log) {
    if (r.phase == fed::Phase::rectify && !r.forget_participants.empty()) ++e.t_u;
    if (r.phase == fed::Phase::restore || r.phase == fed::Phase::retrain) ++e.t_p;
  }
  e.t_tot = e.t_u + e.t_p;
  return e;
}

Efficiency efficiency_report_jsonl(const std::string& jsonl) {
  const auto log = fed::parse_jsonl(jsonl);
  return efficiency_report(log);
}

void write_rr_report(std::ostream& out, std::span<const RrRow> rows) {
  out << "method,scenario,a_pre,a_u,a_c_max,a_c_final,rr,uf,t_u,t_p\n";
  for (const auto& row : rows) {
    const auto& r = row.report;
    out << row.method << ',' << row.scenario << ',' << format_double(r.a_pre) << ',' << format_double(r.a_u)
        << ',' << format_double(r.a_c) << ',' << format_double(r.a_c_final) << ','
        << (r.rr ? format_double(*r.rr) : "") << ',' << (r.uf ? 1 : 0) << ',' << r.t_u_rounds << ','
        << r.t_p_rounds << '\n';
  }
}

void write_alignment_heatmap(std::ostream& out, const AlignmentTrace& trace) {
  out << "round,layer,cos,undefined\n";
  for (std::size_t t = 0; t < trace.cos.size(); ++t)
    for (std::size_t l = 0; l < trace.cos[t].size(); ++l)
      out << t << ',' << l << ',' << format_double(trace.cos[t][l]) << ',' << (trace.undefined[t][l] ? 1 : 0) << '\n';
  for (std::size_t l = 0; l < trace.time_average.size(); ++l)
    out << "mean," << l << ',' << format_double(trace.time_average[l]) << ",0\n";
}

void write_rollback_trace(std::ostream& out, const RollbackTrace& trace) {
  out << "round,cos,weak_rollback\n";
  for (std::size_t t = 0; t < trace.cos.size(); ++t)
    out << t << ',' << format_double(trace.cos[t]) << ',' << (trace.weak[t] ? 1 : 0) << '\n';
}

void write_prop1(std::ostream& out, const Prop1Check& check) {
  out << "t,empirical,bound,rho,G,holds,certified\n";
  for (const auto& r : check.rows)
    out << r.t << ',' << format_double(r.empirical) << ',' << format_double(r.bound) << ','
        << format_double(r.rho) << ',' << format_double(r.G) << ',' << (r.holds ? 1 : 0) << ','
        << (check.certified ? 1 : 0) << '\n';
}

}  // namespace lethe::metrics
