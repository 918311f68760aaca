#pragma once

#include <algorithm>
#include <cmath>
#include <functional>

#include "defdet/tensor.hpp"

namespace defdet {

/// Central-difference gradient of a scalar function, one element at a time.
inline Tensor finite_diff_grad(const std::function<double(const Tensor&)>& f,
                               const Tensor& at, double eps) {
  if (eps <= 0.0) throw ShapeError("finite_diff_grad: eps must be > 0");
  Tensor grad = at.zeros_like();
  Tensor probe = at;
  for (std::size_t i = 0; i < probe.numel(); ++i) {
    const double saved = probe.data[i];
    probe.data[i] = saved + eps;
    const double fp = f(probe);
    probe.data[i] = saved - eps;
    const double fm = f(probe);
    probe.data[i] = saved;
    grad.data[i] = (fp - fm) / (2.0 * eps);
  }
  return grad;
}

/// Same, perturbing a raw parameter buffer in place.
inline std::vector<double> finite_diff_grad_span(const std::function<double()>& f,
                                                 double* x, std::size_t n,
                                                 double eps) {
  std::vector<double> grad(n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    const double saved = x[i];
    x[i] = saved + eps;
    const double fp = f();
    x[i] = saved - eps;
    const double fm = f();
    x[i] = saved;
    grad[i] = (fp - fm) / (2.0 * eps);
  }
  return grad;
}

/// Relative error with an absolute floor: |a-n| / max(|a|, |n|, floor).
/// With floor = 1e-3, err < 1e-4 is equivalent to the pass rule
/// |a-n| <= 1e-4 * max(|a|,|n|) with a 1e-7 absolute allowance.
inline double rel_err(double analytic, double numeric, double floor_ = 1e-3) {
  const double denom = std::max({std::fabs(analytic), std::fabs(numeric), floor_});
  return std::fabs(analytic - numeric) / denom;
}

inline double max_rel_err(const std::vector<double>& analytic,
                          const std::vector<double>& numeric,
                          double floor_ = 1e-3) {
  double worst = 0.0;
  for (std::size_t i = 0; i < analytic.size(); ++i) {
    worst = std::max(worst, rel_err(analytic[i], numeric[i], floor_));
  }
  return worst;
}

inline double max_rel_err(const Tensor& analytic, const Tensor& numeric,
                          double floor_ = 1e-3) {
  check_same_shape("max_rel_err", analytic, numeric);
  return max_rel_err(analytic.data, numeric.data, floor_);
}

}  // namespace defdet
