#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <span>
#include <vector>

#include "gradprom/tape.hpp"
#include "gradprom/tensor.hpp"

namespace gradprom {

// Builds a scalar loss on the given tape from the (already registered)
// variable tensor.
using ScalarFn = std::function<Tensor(Tape&, const Tensor&)>;

struct GradCheckResult {
  double max_rel_err = 0.0;
  std::size_t checked = 0;
  std::size_t excluded = 0;  // relu-kink crossings skipped
};

// Central-difference check of Tape::backward for the scalar function f at
// `point`. Relative error uses a max(1, |analytic|) denominator. A sampled
// element is excluded when its +/-step evaluations land on different sides
// of a relu kink (the function is not differentiable across the kink, so
// the comparison is meaningless there).
inline GradCheckResult grad_check_detail(const ScalarFn& f, const Tensor& point, double step,
                                         std::span<const std::size_t> indices = {}) {
  if (step <= 0.0) throw std::invalid_argument("grad_check: step must be positive");

  Tape tape;
  Tensor x = tape.param(point);
  Tensor loss = f(tape, x);
  GradientMap grads = tape.backward(loss);
  const Tensor& analytic = grads.at(x.node());

  // Activation pattern of one evaluation: sign bit per relu input element.
  auto eval = [&](const Tensor& p, std::vector<bool>& pattern) {
    Tape t;
    Tensor xp = t.param(p);
    Tensor l = f(t, xp);
    pattern = t.relu_sign_pattern();
    return l.item();
  };

  std::vector<std::size_t> all;
  if (indices.empty()) {
    all.resize(point.numel());
    for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
    indices = all;
  }

  GradCheckResult result;
  std::vector<double> base(point.data().begin(), point.data().end());
  for (std::size_t i : indices) {
    std::vector<double> plus = base, minus = base;
    plus[i] += step;
    minus[i] -= step;
    std::vector<bool> pat_plus, pat_minus;
    const double f_plus = eval(Tensor(point.shape(), std::move(plus)), pat_plus);
    const double f_minus = eval(Tensor(point.shape(), std::move(minus)), pat_minus);
    if (pat_plus != pat_minus) {
      ++result.excluded;
      continue;
    }
    const double numeric = (f_plus - f_minus) / (2.0 * step);
    const double ana = analytic[i];
    const double rel = std::fabs(numeric - ana) / std::max(1.0, std::fabs(ana));
    result.max_rel_err = std::max(result.max_rel_err, rel);
    ++result.checked;
  }
  return result;
}

inline double grad_check(const ScalarFn& f, const Tensor& point, double step) {
  return grad_check_detail(f, point, step).max_rel_err;
}

}  // namespace gradprom
