#pragma once

#include <functional>

#include "gklab/compute/tape.hpp"

namespace gklab::compute {

/// Builds a scalar from the input value on the given tape.
using ScalarFn = std::function<ValueId(Tape&, ValueId)>;

/// Max over coordinates of |analytic − numeric| / max(|analytic|, |numeric|, 1e-12),
/// with numeric gradients from central differences of half-width `eps`.
double grad_check(const ScalarFn& f, const Tensor& x, double eps = 1e-5);

/// Same comparison against a caller-supplied analytic gradient.
double grad_check_against(const ScalarFn& f, const Tensor& x, const Tensor& analytic,
                          double eps = 1e-5);

/// Central-difference gradient of f at x.
Tensor numeric_gradient(const ScalarFn& f, const Tensor& x, double eps = 1e-5);

}  // namespace gklab::compute
