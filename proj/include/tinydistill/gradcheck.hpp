#pragma once

#include <algorithm>
#include <cmath>

#include "tinydistill/tensor.hpp"

namespace tinydistill {

// Central-difference gradient verification. `f` is a deterministic scalar
// function (Tensor<double>, Tape<double>*) -> Tensor<double>; when the tape is
// null it must evaluate gradient-free. Returns the maximum relative error
// between the tape gradient and (f(x+h e_i) - f(x-h e_i)) / 2h, with
// denominator max(|analytic|, |numeric|, 1e-8).
template <class F>
double grad_check(F&& f, Tensor<double> x, double h) {
  if (!(h > 0.0)) throw contract_error("grad_check: step h must be positive");
  x.set_requires_grad(true);
  x.zero_grad();
  Tape<double> tape;
  Tensor<double> y = f(x, &tape);
  if (y.numel() != 1) {
    throw contract_error("grad_check: function value has shape " + shape_str(y.shape()) +
                         ", expected a scalar");
  }
  tape.backward(y);
  std::vector<double> analytic(x.grad(), x.grad() + x.numel());

  Tensor<double> probe = x.clone();
  probe.set_requires_grad(false);
  double max_rel = 0.0;
  for (std::int64_t i = 0; i < probe.numel(); ++i) {
    const double orig = probe.data()[i];
    probe.data()[i] = orig + h;
    const double fp = f(probe, nullptr).item();
    probe.data()[i] = orig - h;
    const double fm = f(probe, nullptr).item();
    probe.data()[i] = orig;
    const double numeric = (fp - fm) / (2.0 * h);
    const double denom = std::max({std::abs(analytic[i]), std::abs(numeric), 1e-8});
    max_rel = std::max(max_rel, std::abs(analytic[i] - numeric) / denom);
  }
  return max_rel;
}

}  // namespace tinydistill
