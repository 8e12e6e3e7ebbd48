#pragma once

#include <algorithm>
#include <cmath>
#include <functional>

#include "lvm/tensor.hpp"

namespace lvm {

/// Compares the taped gradient of a scalar-valued function against central
/// finite differences, element by element. Returns the maximum relative
/// error max |analytic - fd| / max(|analytic|, |fd|, 1e-8). The function must
/// be deterministic; run at 64-bit for trustworthy results.
template <typename S, typename F>
double finite_diff_check(F&& f, Tensor<S> x, double h) {
  x.set_requires_grad(true);
  x.zero_grad();
  Tape<S> tape;
  {
    TapeScope<S> scope(&tape);
    Tensor<S> loss = f(x);
    if (loss.numel() != 1) shape_error("finite_diff_check: f must return a scalar");
    tape.backward(loss);
  }
  const std::vector<S> analytic = x.grad_view();

  auto eval = [&](const Tensor<S>& probe) -> double {
    TapeScope<S> off(nullptr);
    return static_cast<double>(f(probe).item());
  };

  double max_rel = 0.0;
  for (std::int64_t i = 0; i < x.numel(); ++i) {
    const S original = x.value()[static_cast<std::size_t>(i)];
    x.value()[static_cast<std::size_t>(i)] = original + static_cast<S>(h);
    const double f_plus = eval(x);
    x.value()[static_cast<std::size_t>(i)] = original - static_cast<S>(h);
    const double f_minus = eval(x);
    x.value()[static_cast<std::size_t>(i)] = original;

    const double fd = (f_plus - f_minus) / (2.0 * h);
    const double a = static_cast<double>(analytic[static_cast<std::size_t>(i)]);
    const double rel = std::abs(a - fd) / std::max({std::abs(a), std::abs(fd), 1e-8});
    max_rel = std::max(max_rel, rel);
  }
  return max_rel;
}

}  // namespace lvm
