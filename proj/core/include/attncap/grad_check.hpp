#pragma once

#include <functional>
#include <span>

#include "attncap/ops.hpp"

namespace attncap {

// Scalar-valued function of a list of tensors, evaluated on a fresh tape.
using ScalarFn = std::function<Tensor(Tape&, std::span<const Tensor>)>;

struct GradCheckResult {
  double max_rel_error = 0.0;
  bool passed = false;
};

// Central-difference check of reverse-mode gradients. Every coordinate of
// every requires_grad input is perturbed by +-eps; the relative error is
// |analytic - numeric| / max(1, |analytic|, |numeric|).
GradCheckResult grad_check(const ScalarFn& f, std::span<const Tensor> inputs,
                           double eps, double tol);

}  // namespace attncap
