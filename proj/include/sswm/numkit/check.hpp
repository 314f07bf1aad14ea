#pragma once

#include <functional>

#include "sswm/numkit/graph.hpp"

namespace sswm::numkit {

// Builds a scalar expression of one parameter tensor.
using ScalarFn = std::function<Var(Graph&, Var)>;

// Central-difference gradient check. Builds the expression once for the analytic
// gradient (reverse pass) and re-evaluates it forward-only at perturbed points.
// Returns max over coordinates of |analytic - central| / max(1e-8, |central|).
// Rejects non-deterministic functions (two base evaluations that differ).
double finite_diff_check(const ScalarFn& fn, const Tensor& at, double step);

}  // namespace sswm::numkit
