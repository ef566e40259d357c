#include "mxacl/grad_align.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

namespace mxacl {
namespace {

double norm(std::span<const double> v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  return std::sqrt(s);
}

std::vector<std::optional<Tensor>> capture(const Tape& tape, const ParamScope& scope) {
  std::vector<std::optional<Tensor>> out;
  out.reserve(scope.params.size());
  for (const Parameter* p : scope.params) out.push_back(tape.param_grad(*p));
  return out;
}

std::vector<double> flatten(const std::vector<std::optional<Tensor>>& grads, const ParamScope& scope) {
  std::vector<double> flat;
  flat.reserve(scope.numel());
  for (std::size_t i = 0; i < grads.size(); ++i) {
    if (grads[i]) {
      flat.insert(flat.end(), grads[i]->data().begin(), grads[i]->data().end());
    } else {
      flat.insert(flat.end(), scope.params[i]->value.size(), 0.0);
    }
  }
  return flat;
}

}  // namespace

std::vector<double> flatten_grads(const Tape& tape, const ParamScope& scope, bool missing_as_zero) {
  const auto grads = capture(tape, scope);
  if (!missing_as_zero) {
    for (std::size_t i = 0; i < grads.size(); ++i) {
      if (!grads[i]) throw ValidationError("flatten_grads: no gradient for " + scope.params[i]->name);
    }
  }
  return flatten(grads, scope);
}

Angle grad_angle(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw ValidationError("grad_angle: length mismatch");
  const double na = norm(a), nb = norm(b);
  if (!(na > 1e-12) || !(nb > 1e-12)) throw NumericError("grad_angle: zero-norm gradient");
  double dot = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) dot += a[i] * b[i];
  Angle r;
  r.cos_gamma = std::clamp(dot / (na * nb), -1.0, 1.0);
  r.gamma_deg = std::acos(r.cos_gamma) * 180.0 / std::numbers::pi;
  return r;
}

double acl_grad_gate(double gamma_deg, double lambda, double threshold_deg) {
  return gamma_deg <= threshold_deg ? lambda : 0.0;
}

GatedGrads gated_step_grads(Tape& tape, Var ce, Var acl, double lambda, double threshold_deg,
                            const ParamScope& scope) {
  if (&ce.tape() != &tape || &acl.tape() != &tape) throw ValidationError("gated_step_grads: losses on another tape");
  if (tape.backward_done()) throw ValidationError("gated_step_grads: tape already ran backward");
  if (!(lambda >= 0.0 && lambda <= 1.0)) throw ValidationError("gated_step_grads: lambda must be in [0, 1]");

  tape.backward(ce);
  const auto ce_grads = capture(tape, scope);
  for (std::size_t i = 0; i < ce_grads.size(); ++i) {
    if (!ce_grads[i]) throw ValidationError("gated_step_grads: CE loss does not reach " + scope.params[i]->name);
  }
  tape.reset_grads();
  tape.backward(acl);
  const auto acl_grads = capture(tape, scope);

  GatedGrads out;
  GradReport& r = out.report;
  r.param_scope = scope.id;
  r.g_ce = flatten(ce_grads, scope);
  r.g_acl = flatten(acl_grads, scope);
  r.angle_defined = norm(r.g_ce) > 1e-12 && norm(r.g_acl) > 1e-12;
  if (r.angle_defined) {
    const Angle a = grad_angle(r.g_ce, r.g_acl);
    r.cos_gamma = a.cos_gamma;
    r.gamma_deg = a.gamma_deg;
    r.lambda_prime = acl_grad_gate(a.gamma_deg, lambda, threshold_deg);
    r.gated = a.gamma_deg > threshold_deg;
  } else {
    r.lambda_prime = lambda;
  }

  out.grads.reserve(ce_grads.size());
  const double lp = r.lambda_prime;
  for (std::size_t i = 0; i < ce_grads.size(); ++i) {
    Tensor g = *ce_grads[i];
    if (lp != 0.0 && acl_grads[i]) {
      const Tensor& a = *acl_grads[i];
      for (std::size_t j = 0; j < g.size(); ++j) g[j] = (1.0 - lp) * g[j] + lp * a[j];
    } else if (lp != 0.0) {
      for (double& v : g.data()) v = (1.0 - lp) * v;
    }
    out.grads.push_back(std::move(g));
  }
  return out;
}

AngleHistogram angle_histogram(std::span<const GradReport> reports, std::size_t bins) {
  if (reports.empty()) throw ValidationError("angle_histogram: no reports");
  if (bins == 0) throw ValidationError("angle_histogram: bins must be positive");
  AngleHistogram h;
  h.bin_width = 180.0 / static_cast<double>(bins);
  h.counts.assign(bins, 0);
  h.n_reports = reports.size();
  std::size_t gated = 0;
  double sum = 0.0;
  for (const GradReport& r : reports) {
    gated += r.gated ? 1 : 0;
    if (!r.angle_defined) continue;
    const double g = r.gamma_deg;
    if (!(g >= 0.0 && g <= 180.0)) throw ValidationError("angle_histogram: angle outside [0, 180]");
    const auto b = std::min(bins - 1, static_cast<std::size_t>(g / h.bin_width));
    ++h.counts[b];
    if (h.n_angles == 0) h.min = h.max = g;
    h.min = std::min(h.min, g);
    h.max = std::max(h.max, g);
    sum += g;
    ++h.n_angles;
  }
  if (h.n_angles > 0) {
    h.mean = sum / static_cast<double>(h.n_angles);
    double ss = 0.0;
    for (const GradReport& r : reports)
      if (r.angle_defined) ss += (r.gamma_deg - h.mean) * (r.gamma_deg - h.mean);
    h.stddev = std::sqrt(ss / static_cast<double>(h.n_angles));
  }
  h.gated_fraction = static_cast<double>(gated) / static_cast<double>(h.n_reports);
  return h;
}

nlohmann::json AngleHistogram::to_json() const {
  return {{"bin_width_deg", bin_width}, {"counts", counts}, {"n_reports", n_reports}, {"n_angles", n_angles},
          {"mean_deg", mean},          {"std_deg", stddev}, {"min_deg", min},         {"max_deg", max},
          {"gated_fraction", gated_fraction}};
}

void AngleHistogram::write_csv(std::ostream& os) const {
  os << "bin_lo,bin_hi,count\n";
  for (std::size_t i = 0; i < counts.size(); ++i) {
    os << bin_width * static_cast<double>(i) << ',' << bin_width * static_cast<double>(i + 1) << ',' << counts[i]
       << '\n';
  }
}

nlohmann::json AngleRecord::to_json() const {
  nlohmann::json j{{"step", step},
                   {"stage", stage},
                   {"exit_layer", exit_layer},
                   {"cos_gamma", nullptr},
                   {"gamma_deg", nullptr},
                   {"gated", gated},
                   {"lambda_prime", lambda_prime},
                   {"loss_ce", loss_ce},
                   {"loss_acl", loss_acl}};
  if (angle_defined) {
    j["cos_gamma"] = cos_gamma;
    j["gamma_deg"] = gamma_deg;
  }
  return j;
}

AngleRecord AngleRecord::from_json(const nlohmann::json& j) {
  AngleRecord r;
  try {
    r.step = j.at("step").get<std::size_t>();
    r.stage = j.at("stage").get<int>();
    r.exit_layer = j.at("exit_layer").get<std::size_t>();
    r.angle_defined = !j.at("gamma_deg").is_null();
    if (r.angle_defined) {
      r.cos_gamma = j.at("cos_gamma").get<double>();
      r.gamma_deg = j.at("gamma_deg").get<double>();
    }
    r.gated = j.at("gated").get<bool>();
    r.lambda_prime = j.at("lambda_prime").get<double>();
    r.loss_ce = j.at("loss_ce").get<double>();
    r.loss_acl = j.at("loss_acl").get<double>();
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("angle record: ") + e.what());
  }
  return r;
}

GradReport report_from_record(const AngleRecord& r) {
  GradReport g;
  g.angle_defined = r.angle_defined;
  g.cos_gamma = r.cos_gamma;
  g.gamma_deg = r.gamma_deg;
  g.gated = r.gated;
  g.lambda_prime = r.lambda_prime;
  return g;
}

}  // namespace mxacl
