#include "gklab/compute/grad_check.hpp"

#include <algorithm>
#include <cmath>

namespace gklab::compute {

namespace {

double eval_scalar(const ScalarFn& f, const Tensor& x) {
  Tape tape;
  const ValueId in = tape.leaf(x);
  const ValueId out = f(tape, in);
  const Tensor& v = tape.value(out);
  if (v.size() != 1) {
    throw ContractError("grad_check: function output has shape " + to_string(v.shape()) +
                        ", expected a scalar");
  }
  return v[0];
}

}  // namespace

Tensor numeric_gradient(const ScalarFn& f, const Tensor& x, double eps) {
  Tensor g(x.shape());
  Tensor probe = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    probe[i] = x[i] + eps;
    const double up = eval_scalar(f, probe);
    probe[i] = x[i] - eps;
    const double down = eval_scalar(f, probe);
    probe[i] = x[i];
    g[i] = (up - down) / (2.0 * eps);
  }
  return g;
}

double grad_check_against(const ScalarFn& f, const Tensor& x, const Tensor& analytic, double eps) {
  if (analytic.shape() != x.shape()) {
    throw ShapeError("grad_check: gradient shape " + to_string(analytic.shape()) +
                     " differs from input shape " + to_string(x.shape()));
  }
  const Tensor numeric = numeric_gradient(f, x, eps);
  double worst = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double a = analytic[i], n = numeric[i];
    const double denom = std::max({std::abs(a), std::abs(n), 1e-12});
    worst = std::max(worst, std::abs(a - n) / denom);
  }
  return worst;
}

double grad_check(const ScalarFn& f, const Tensor& x, double eps) {
  Tape tape;
  const ValueId in = tape.leaf(x);
  const ValueId out = f(tape, in);
  if (tape.value(out).size() != 1) {
    throw ContractError("grad_check: function output has shape " +
                        to_string(tape.value(out).shape()) + ", expected a scalar");
  }
  const ValueId wanted[] = {in};
  const Tensor analytic = tape.backward(out, wanted).at(in);
  return grad_check_against(f, x, analytic, eps);
}

}  // namespace gklab::compute
