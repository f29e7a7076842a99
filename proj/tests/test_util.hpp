#pragma once

// Shared helpers for the test suites: central finite differences against the
// tape gradients, and a relative-error measure that degrades to absolute
// error near zero.

#include <cmath>
#include <functional>
#include <vector>

#include "gats/tensor.hpp"

namespace testutil {

inline double rel_err(double a, double b) {
  return std::abs(a - b) / std::max({1.0, std::abs(a), std::abs(b)});
}

// Central finite difference of `eval` with respect to element `i` of `p`.
// `eval` must recompute the scalar from current parameter values.
inline double fd_grad(gats::Tensor& p, std::size_t i,
                      const std::function<double()>& eval, double h = 1e-6) {
  gats::NoGradGuard ng;
  double orig = p.mutable_data()[i];
  p.mutable_data()[i] = orig + h;
  double fp = eval();
  p.mutable_data()[i] = orig - h;
  double fm = eval();
  p.mutable_data()[i] = orig;
  return (fp - fm) / (2.0 * h);
}

// Runs backward on `make_loss` once, then compares every parameter's tape
// gradient against central differences. Returns the max relative error.
inline double max_grad_err(std::vector<gats::Tensor> params,
                           const std::function<gats::Tensor()>& make_loss,
                           double h = 1e-6) {
  for (auto& p : params) p.zero_grad();
  gats::Tape tape;
  double max_err = 0.0;
  {
    gats::Tape::Scope scope(tape);
    gats::Tensor loss = make_loss();
    gats::backward(loss);
  }
  auto eval = [&] { return make_loss().item(); };
  for (auto& p : params) {
    for (std::size_t i = 0; i < p.numel(); ++i) {
      double fd = fd_grad(p, i, eval, h);
      max_err = std::max(max_err, rel_err(fd, p.grad()[i]));
    }
  }
  return max_err;
}

}  // namespace testutil
