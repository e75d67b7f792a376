#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "m3bs/numerics/tensor.hpp"

namespace m3bs::nn {

struct GradCheckResult {
  double max_rel_error = 0.0;
  double max_abs_error = 0.0;
};

// Relative error with a small floor on the denominator so that entries whose
// true gradient is ~0 are judged on absolute agreement.
inline double relative_error(double a, double b, double floor = 1e-6) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

// Compares the reverse-mode gradient of `loss_fn` with respect to each
// tensor in `params` with central differences of step h.  loss_fn must
// rebuild its graph on every call and return a scalar.
inline GradCheckResult finite_difference_check(const std::function<Tensor<double>()>& loss_fn,
                                               const std::vector<Tensor<double>>& params, double h = 1e-4) {
  for (auto p : params) p.zero_grad();
  backward(loss_fn());
  GradCheckResult res;
  for (auto p : params) {
    const auto g = std::as_const(p).grad();
    std::vector<double> analytic(g.begin(), g.end());
    auto w = p.data();
    for (std::size_t i = 0; i < w.size(); ++i) {
      const double orig = w[i];
      double plus = 0.0, minus = 0.0;
      {
        NoGradGuard guard;
        w[i] = orig + h;
        plus = loss_fn().item();
        w[i] = orig - h;
        minus = loss_fn().item();
      }
      w[i] = orig;
      const double numeric = (plus - minus) / (2.0 * h);
      res.max_rel_error = std::max(res.max_rel_error, relative_error(analytic[i], numeric));
      res.max_abs_error = std::max(res.max_abs_error, std::abs(analytic[i] - numeric));
    }
  }
  return res;
}

inline GradCheckResult finite_difference_check(const std::function<Tensor<double>()>& loss_fn,
                                               const Tensor<double>& param, double h = 1e-4) {
  return finite_difference_check(loss_fn, std::vector<Tensor<double>>{param}, h);
}

}  // namespace m3bs::nn
