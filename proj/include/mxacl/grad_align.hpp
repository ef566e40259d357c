#pragma once

#include <array>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mxacl/model.hpp"

namespace mxacl {

/// Concatenates the gradients of `scope` in registration order, each row-major.
/// A parameter the last backward pass did not reach is an error unless
/// `missing_as_zero` is set.
std::vector<double> flatten_grads(const Tape& tape, const ParamScope& scope, bool missing_as_zero = false);

struct Angle {
  double cos_gamma = 0.0;
  double gamma_deg = 0.0;
};

/// Throws ValidationError on length mismatch and NumericError when either norm is below 1e-12.
Angle grad_angle(std::span<const double> a, std::span<const double> b);

/// lambda when gamma <= threshold, else 0.
double acl_grad_gate(double gamma_deg, double lambda, double threshold_deg);

struct GradReport {
  std::vector<double> g_ce;
  std::vector<double> g_acl;
  /// False when either gradient has zero norm; the gate then keeps lambda.
  bool angle_defined = false;
  double cos_gamma = 0.0;
  double gamma_deg = 0.0;
  bool gated = false;
  double lambda_prime = 0.0;
  std::string param_scope;
};

struct GatedGrads {
  GradReport report;
  /// One tensor per scope parameter: (1 - lambda') g_ce + lambda' g_acl, or an exact copy of g_ce when lambda' = 0.
  std::vector<Tensor> grads;
};

/// Two backward passes over the same forward graph, one per objective.
/// `ce` and `acl` must live on `tape`, which must not have run backward yet.
GatedGrads gated_step_grads(Tape& tape, Var ce, Var acl, double lambda, double threshold_deg, const ParamScope& scope);

struct AngleHistogram {
  double bin_width = 5.0;
  std::vector<std::size_t> counts;
  std::size_t n_reports = 0;
  std::size_t n_angles = 0;  ///< reports with a defined angle
  double mean = 0.0;
  double stddev = 0.0;  ///< population
  double min = 0.0;
  double max = 0.0;
  double gated_fraction = 0.0;

  nlohmann::json to_json() const;
  /// "bin_lo,bin_hi,count" rows.
  void write_csv(std::ostream& os) const;
};

/// Fixed-width bins over [0, 180]; 180 falls in the last bin. Throws on an empty stream.
AngleHistogram angle_histogram(std::span<const GradReport> reports, std::size_t bins = 36);

/// One line of the angle log.
struct AngleRecord {
  std::size_t step = 0;
  int stage = 0;
  std::size_t exit_layer = 0;
  bool angle_defined = false;
  double cos_gamma = 0.0;
  double gamma_deg = 0.0;
  bool gated = false;
  double lambda_prime = 0.0;
  double loss_ce = 0.0;
  double loss_acl = 0.0;

  /// Undefined angles are written as null.
  nlohmann::json to_json() const;
  static AngleRecord from_json(const nlohmann::json& j);
};

/// Reconstructs the report fields needed by angle_histogram from logged records.
GradReport report_from_record(const AngleRecord& r);

}  // namespace mxacl
