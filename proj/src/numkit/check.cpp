#include "sswm/numkit/check.hpp"

#include <cmath>

namespace sswm::numkit {

namespace {

double eval_at(const ScalarFn& fn, const Tensor& point) {
  ParamStore ps;
  ParamId pid = ps.add("p", point);
  Graph g;
  Var loss = fn(g, g.param(ps, pid));
  const Tensor& lv = g.value(loss);
  if (lv.numel() != 1) fail("finite_diff_check: fn must produce a scalar");
  return lv.item();
}

}  // namespace

double finite_diff_check(const ScalarFn& fn, const Tensor& at, double step) {
  if (step <= 0.0) fail("finite_diff_check: step must be positive");
  const double base1 = eval_at(fn, at);
  const double base2 = eval_at(fn, at);
  if (base1 != base2) fail("finite_diff_check: fn is not deterministic");

  ParamStore ps;
  ParamId pid = ps.add("p", at);
  Graph g;
  Var p = g.param(ps, pid);
  Var loss = fn(g, p);
  g.backward(loss);
  GradRecord rec = g.grads_for(ps);
  const Tensor& analytic = rec.grads[0];

  double max_rel = 0.0;
  for (int64_t i = 0; i < at.numel(); ++i) {
    Tensor plus = at;
    plus.set(i, at.at(i) + step);
    Tensor minus = at;
    minus.set(i, at.at(i) - step);
    const double numeric = (eval_at(fn, plus) - eval_at(fn, minus)) / (2.0 * step);
    const double rel =
        std::abs(analytic.at(i) - numeric) / std::max(1e-8, std::abs(numeric));
    max_rel = std::max(max_rel, rel);
  }
  return max_rel;
}

}  // namespace sswm::numkit
