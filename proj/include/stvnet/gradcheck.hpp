#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include "stvnet/autograd.hpp"
#include "stvnet/rng.hpp"

namespace stvnet {

struct GradCheckReport {
  double max_rel_error = 0;
  std::size_t checked = 0;
};

// Compares reverse-mode gradients with central differences.
//
// `loss` builds the scalar objective on a fresh tape from the current values
// of `params`. Each checked coordinate contributes
//   |analytic - numeric| / max(|analytic|, |numeric|, floor).
// The floor keeps round-off in the difference quotient (about eps*|loss|/h)
// from dominating coordinates whose true gradient is zero.
// With `fraction` < 1 a seeded random subset of coordinates is checked
// (at least one per parameter tensor).
template <class T, class LossFn>
GradCheckReport finite_diff_check(LossFn&& loss, const std::vector<Parameter<T>*>& params, T h,
                                  double fraction = 1.0, std::uint64_t seed = 0, double floor = 1e-8) {
  for (auto* p : params) p->zero_grad();
  {
    Tape<T> tape;
    Var<T> l = loss(tape);
    tape.backward(l);
  }
  auto evaluate = [&] {
    Tape<T> tape;
    return loss(tape).value()[0];
  };

  Rng rng(seed);
  GradCheckReport report;
  for (auto* p : params) {
    const std::size_t n = p->value.size();
    std::vector<std::size_t> coords;
    if (fraction >= 1.0) {
      coords.resize(n);
      for (std::size_t i = 0; i < n; ++i) coords[i] = i;
    } else {
      for (std::size_t i = 0; i < n; ++i)
        if (rng.bernoulli(fraction)) coords.push_back(i);
      if (coords.empty()) coords.push_back(static_cast<std::size_t>(rng.below(n)));
    }
    for (std::size_t i : coords) {
      const T saved = p->value[i];
      p->value[i] = saved + h;
      const T plus = evaluate();
      p->value[i] = saved - h;
      const T minus = evaluate();
      p->value[i] = saved;
      const double numeric = (double(plus) - double(minus)) / (2.0 * double(h));
      const double analytic = p->grad[i];
      const double denom = std::max({std::abs(analytic), std::abs(numeric), floor});
      report.max_rel_error = std::max(report.max_rel_error, std::abs(analytic - numeric) / denom);
      ++report.checked;
    }
  }
  return report;
}

}  // namespace stvnet
