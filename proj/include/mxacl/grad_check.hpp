#pragma once

#include <functional>

#include "mxacl/tape.hpp"

namespace mxacl {

/// Scalar-valued function of one tensor, expressed on a tape.
using TapeFn = std::function<Var(Tape&, Var)>;

struct GradCheckResult {
  bool pass = false;
  double max_rel_error = 0.0;
  std::size_t worst_index = 0;
  Tensor analytic;
  Tensor numeric;
};

/// Compares the tape gradient of `f` at `point` with central differences
/// (f(x + h e_j) - f(x - h e_j)) / 2h. Relative error per coordinate is
/// |a - b| / max(1, |a|, |b|). Throws NumericError when f is non-finite at a
/// perturbed point.
GradCheckResult grad_check(const TapeFn& f, const Tensor& point, double step = 1e-5, double tol = 1e-4);

/// Central-difference gradient alone (no tape gradient). Useful as an oracle.
Tensor numeric_gradient(const TapeFn& f, const Tensor& point, double step = 1e-5);

}  // namespace mxacl
