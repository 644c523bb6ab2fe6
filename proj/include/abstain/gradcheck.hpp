#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>

#include "abstain/autodiff.hpp"

namespace abstain::ad {

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t worst_index = 0;
  Tensor analytic;
  Tensor numeric;
};

/// Compares reverse-mode gradients of a scalar function against central differences.
/// `f` receives a leaf on a fresh tape and must return a scalar node on that tape.
/// Error per coordinate is |analytic - numeric| / max(1, |analytic|, |numeric|).
inline GradCheckResult grad_check(const std::function<Var(Var)>& f, const Tensor& x, double step = 1e-5) {
  GradCheckResult r;
  {
    Tape tape;
    auto leaf = tape.leaf(x);
    auto y = f(leaf);
    if (!std::isfinite(y.item())) throw NumericError("grad_check: non-finite function value", 0);
    tape.backward(y);
    r.analytic = leaf.grad();
  }
  auto eval = [&](const Tensor& at) {
    Tape tape;
    return f(tape.leaf(at, false)).item();
  };
  r.numeric = Tensor(x.shape());
  Tensor probe = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    probe[i] = x[i] + step;
    const double fp = eval(probe);
    probe[i] = x[i] - step;
    const double fm = eval(probe);
    probe[i] = x[i];
    const double num = (fp - fm) / (2.0 * step);
    const double ana = r.analytic[i];
    if (!std::isfinite(num) || !std::isfinite(ana)) throw NumericError("grad_check: non-finite derivative", i);
    r.numeric[i] = num;
    const double err = std::fabs(ana - num) / std::max({1.0, std::fabs(ana), std::fabs(num)});
    if (err > r.max_rel_error) {
      r.max_rel_error = err;
      r.worst_index = i;
    }
  }
  return r;
}

}  // namespace abstain::ad
