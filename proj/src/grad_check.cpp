#include "mxacl/grad_check.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace mxacl {
namespace {

double eval_at(const TapeFn& f, const Tensor& x) {
  Tape tape(false);
  Var out = f(tape, tape.constant(x));
  const double v = out.value().item();
  if (!std::isfinite(v)) throw NumericError("grad_check: non-finite function value at perturbed point");
  return v;
}

}  // namespace

Tensor numeric_gradient(const TapeFn& f, const Tensor& point, double step) {
  Tensor g(point.shape());
  Tensor x = point;
  for (std::size_t j = 0; j < x.size(); ++j) {
    const double orig = x[j];
    x[j] = orig + step;
    const double up = eval_at(f, x);
    x[j] = orig - step;
    const double down = eval_at(f, x);
    x[j] = orig;
    g[j] = (up - down) / (2.0 * step);
  }
  return g;
}

GradCheckResult grad_check(const TapeFn& f, const Tensor& point, double step, double tol) {
  GradCheckResult r;
  {
    Tape tape;
    Var x = tape.leaf(point);
    Var out = f(tape, x);
    tape.backward(out);
    r.analytic = tape.grad(x);
  }
  r.numeric = numeric_gradient(f, point, step);
  for (std::size_t j = 0; j < point.size(); ++j) {
    const double a = r.analytic[j], b = r.numeric[j];
    const double rel = std::abs(a - b) / std::max({1.0, std::abs(a), std::abs(b)});
    if (rel > r.max_rel_error) {
      r.max_rel_error = rel;
      r.worst_index = j;
    }
  }
  r.pass = r.max_rel_error <= tol;
  return r;
}

}  // namespace mxacl
