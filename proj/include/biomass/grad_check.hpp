#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <string>
#include <vector>

#include "biomass/tensor.hpp"

namespace biomass {

struct GradCheckReport {
  double max_rel_err = 0.0;
  double tol = 0.0;
  std::size_t worst_param = 0;
  std::size_t worst_index = 0;
  std::size_t checked_entries = 0;
  bool passed = false;
};

// Compares reverse-mode gradients of a scalar function against central
// finite differences over every entry of every parameter. The finite
// difference side re-evaluates the forward function and never touches the
// tape, so the two routes stay independent.
//
// The per-entry error is |ad - fd| / max(|ad|, |fd|, denom_floor): relative
// for entries above the floor, absolute below it, where relative error is
// dominated by difference noise.
//
// f must be deterministic (run blocks in eval mode or with a fixed rng
// snapshot) and twice differentiable at the probe point.
template <class T, class F>
GradCheckReport grad_check(F&& f, std::vector<Tensor<T>> params, double step, double tol,
                           double denom_floor = 1.0) {
  if (!(step > 0.0)) throw ConfigError("grad_check step must be > 0");
  for (auto& p : params) p.zero_grad();
  Tensor<T> y = f();
  if (y.numel() != 1) throw ShapeError("grad_check expects a scalar function");
  if (!std::isfinite(static_cast<double>(y.item()))) {
    throw NumericError("grad_check: non-finite function value at probe point");
  }
  y.backward();

  std::vector<std::vector<double>> analytic(params.size());
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    analytic[pi].resize(params[pi].numel(), 0.0);
    if (params[pi].has_grad()) {
      auto g = params[pi].grad();
      for (std::size_t i = 0; i < g.size(); ++i) analytic[pi][i] = static_cast<double>(g[i]);
    }
  }

  GradCheckReport report;
  report.tol = tol;
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    auto vals = params[pi].data_mut();
    for (std::size_t i = 0; i < vals.size(); ++i) {
      const T saved = vals[i];
      vals[i] = saved + static_cast<T>(step);
      const double fp = static_cast<double>(f().item());
      vals[i] = saved - static_cast<T>(step);
      const double fm = static_cast<double>(f().item());
      vals[i] = saved;
      if (!std::isfinite(fp) || !std::isfinite(fm)) {
        throw NumericError("grad_check: non-finite function value during probing");
      }
      const double fd = (fp - fm) / (2.0 * step);
      const double ad = analytic[pi][i];
      const double rel =
          std::abs(ad - fd) / std::max({std::abs(ad), std::abs(fd), denom_floor});
      ++report.checked_entries;
      if (rel > report.max_rel_err) {
        report.max_rel_err = rel;
        report.worst_param = pi;
        report.worst_index = i;
      }
    }
  }
  report.passed = report.max_rel_err <= tol;
  return report;
}

}  // namespace biomass
