#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "m3bs/errors.hpp"
#include "m3bs/numerics/tensor.hpp"

namespace m3bs::nn {

template <typename T>
using GradList = std::vector<std::vector<T>>;

// Copies the current gradients of `params` (zero where absent).
template <typename T>
GradList<T> collect_grads(const ParamList<T>& params) {
  GradList<T> out;
  out.reserve(params.size());
  for (auto* p : params) {
    const auto g = std::as_const(*p).grad();
    out.emplace_back(g.begin(), g.end());
  }
  return out;
}

namespace detail {
template <typename T>
void check_grad_shapes(const ParamList<T>& params, const GradList<T>& grads, const char* who) {
  if (params.size() != grads.size()) throw ShapeError(std::string(who) + ": parameter/gradient count mismatch");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (params[i]->numel() != grads[i].size()) {
      throw ShapeError(std::string(who) + ": gradient " + std::to_string(i) + " size mismatch");
    }
  }
}
}  // namespace detail

template <typename T>
void sgd_step(const ParamList<T>& params, const GradList<T>& grads, double lr) {
  if (!(lr >= 0.0)) throw ValidationError("sgd learning rate must be non-negative");
  detail::check_grad_shapes(params, grads, "sgd_step");
  const T step = static_cast<T>(lr);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto w = params[i]->data();
    for (std::size_t j = 0; j < w.size(); ++j) w[j] -= step * grads[i][j];
  }
}

template <typename T>
void sgd_step(const ParamList<T>& params, double lr) {
  sgd_step(params, collect_grads(params), lr);
}

// Adam moments plus an exponentially decayed learning rate.
template <typename T>
struct AdamState {
  GradList<T> m, v;
  std::int64_t step = 0;
  double lr = 1e-3;
  double gamma = 1.0;  // per-epoch decay factor in (0, 1]
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;

  AdamState() = default;
  AdamState(const ParamList<T>& params, double lr_, double gamma_ = 1.0) : lr(lr_), gamma(gamma_) {
    if (!(lr_ >= 0.0)) throw ValidationError("adam learning rate must be non-negative");
    if (!(gamma_ > 0.0 && gamma_ <= 1.0)) throw ValidationError("decay factor must be in (0, 1]");
    for (auto* p : params) {
      m.emplace_back(p->numel(), T(0));
      v.emplace_back(p->numel(), T(0));
    }
  }

  void decay() { lr *= gamma; }
};

template <typename T>
void adam_step(const ParamList<T>& params, const GradList<T>& grads, AdamState<T>& st) {
  detail::check_grad_shapes(params, grads, "adam_step");
  if (st.m.size() != params.size()) throw ShapeError("adam_step: optimizer state does not match parameters");
  ++st.step;
  const double bc1 = 1.0 - std::pow(st.beta1, static_cast<double>(st.step));
  const double bc2 = 1.0 - std::pow(st.beta2, static_cast<double>(st.step));
  const T b1 = static_cast<T>(st.beta1), b2 = static_cast<T>(st.beta2);
  const T step_size = static_cast<T>(st.lr / bc1);
  const T inv_bc2 = static_cast<T>(1.0 / bc2);
  const T eps = static_cast<T>(st.eps);
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (st.m[i].size() != grads[i].size()) throw ShapeError("adam_step: moment size mismatch");
    auto w = params[i]->data();
    auto& m = st.m[i];
    auto& v = st.v[i];
    const auto& g = grads[i];
    for (std::size_t j = 0; j < w.size(); ++j) {
      m[j] = b1 * m[j] + (T(1) - b1) * g[j];
      v[j] = b2 * v[j] + (T(1) - b2) * g[j] * g[j];
      w[j] -= step_size * m[j] / (std::sqrt(v[j] * inv_bc2) + eps);
    }
  }
}

template <typename T>
void adam_step(const ParamList<T>& params, AdamState<T>& st) {
  adam_step(params, collect_grads(params), st);
}

}  // namespace m3bs::nn
