#pragma once

#include <cmath>
#include <string>

#include "m3bs/errors.hpp"
#include "m3bs/numerics/ops.hpp"
#include "m3bs/numerics/tensor.hpp"

namespace m3bs::objective {

using nn::Tensor;

// Learnable task weights lambda = exp(-s); s = 0 gives lambda = 1.
template <typename T>
struct LossWeights {
  Tensor<T> s_bs = Tensor<T>({1}, T(0), true);
  Tensor<T> s_cls = Tensor<T>({1}, T(0), true);

  T lambda_bs() const { return std::exp(-s_bs.item()); }
  T lambda_cls() const { return std::exp(-s_cls.item()); }
  nn::ParamList<T> parameters() { return {&s_bs, &s_cls}; }

  LossWeights clone() const {
    LossWeights c;
    c.s_bs = s_bs.clone();
    c.s_cls = s_cls.clone();
    return c;
  }
};

template <typename T>
Tensor<T> static_weighted_loss(const Tensor<T>& l_bs, const Tensor<T>& l_cls, double lambda_bs, double lambda_cls) {
  if (!(lambda_bs >= 0.0) || !(lambda_cls >= 0.0)) throw ValidationError("static loss weights must be nonnegative");
  return nn::add(nn::scale(l_bs, static_cast<T>(lambda_bs)), nn::scale(l_cls, static_cast<T>(lambda_cls)));
}

// lambda_bs * L_bs + lambda_cls * L_cls + log sqrt(1 / lambda_bs) + log sqrt(1 / lambda_cls)
template <typename T>
Tensor<T> uncertainty_loss(const Tensor<T>& l_bs, const Tensor<T>& l_cls, const LossWeights<T>& w) {
  const auto term = [](const Tensor<T>& loss, const Tensor<T>& s) {
    return nn::add(nn::mul(nn::exp(nn::neg(s)), loss), nn::scale(s, T(0.5)));
  };
  return nn::add(term(l_bs, w.s_bs), term(l_cls, w.s_cls));
}

enum class Weighting { Uncertainty, Static, ClsOnly };

inline Weighting parse_weighting(const std::string& name) {
  if (name == "uncertainty") return Weighting::Uncertainty;
  if (name == "static") return Weighting::Static;
  if (name == "cls_only") return Weighting::ClsOnly;
  throw ValidationError("unknown weighting '" + name + "' (expected uncertainty, static or cls_only)");
}

inline std::string to_string(Weighting w) {
  switch (w) {
    case Weighting::Uncertainty: return "uncertainty";
    case Weighting::Static: return "static";
    case Weighting::ClsOnly: return "cls_only";
  }
  return "?";
}

}  // namespace m3bs::objective
