#pragma once

// Differentiable operations on nn::Tensor.  Only what the band-selection
// pipeline needs: no general broadcasting.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "m3bs/errors.hpp"
#include "m3bs/numerics/rng.hpp"
#include "m3bs/numerics/tensor.hpp"

namespace m3bs::nn {

namespace detail {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapMat = Eigen::Map<RowMat<T>>;
template <typename T>
using MapConstMat = Eigen::Map<const RowMat<T>>;

template <typename T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": " + to_string(a.shape()) + " vs " + to_string(b.shape()));
  }
}

template <typename T>
std::vector<T>& grad_of(const std::shared_ptr<Node<T>>& n) {
  n->ensure_grad();
  return n->grad;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Linear algebra

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw ShapeError("matmul: " + to_string(a.shape()) + " x " + to_string(b.shape()));
  }
  const auto m = static_cast<Eigen::Index>(a.dim(0));
  const auto k = static_cast<Eigen::Index>(a.dim(1));
  const auto n = static_cast<Eigen::Index>(b.dim(1));
  std::vector<T> out(static_cast<std::size_t>(m * n));
  detail::MapMat<T>(out.data(), m, n).noalias() =
      detail::MapConstMat<T>(a.data().data(), m, k) * detail::MapConstMat<T>(b.data().data(), k, n);
  return Tensor<T>::make_result(
      {a.dim(0), b.dim(1)}, std::move(out), {a.node(), b.node()}, [m, k, n](Node<T>& self) {
        auto& pa = self.parents[0];
        auto& pb = self.parents[1];
        detail::MapConstMat<T> g(self.grad.data(), m, n);
        if (pa->requires_grad) {
          detail::MapMat<T>(detail::grad_of(pa).data(), m, k).noalias() +=
              g * detail::MapConstMat<T>(pb->value.data(), k, n).transpose();
        }
        if (pb->requires_grad) {
          detail::MapMat<T>(detail::grad_of(pb).data(), k, n).noalias() +=
              detail::MapConstMat<T>(pa->value.data(), m, k).transpose() * g;
        }
      });
}

// ---------------------------------------------------------------------------
// Elementwise arithmetic

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a, b, "add");
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
  return Tensor<T>::make_result(a.shape(), std::move(out), {a.node(), b.node()}, [](Node<T>& self) {
    for (auto& p : self.parents) {
      if (!p->requires_grad) continue;
      auto& g = detail::grad_of(p);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
  });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a, b, "sub");
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] - b[i];
  return Tensor<T>::make_result(a.shape(), std::move(out), {a.node(), b.node()}, [](Node<T>& self) {
    const T sign[2] = {T(1), T(-1)};
    for (std::size_t k = 0; k < 2; ++k) {
      auto& p = self.parents[k];
      if (!p->requires_grad) continue;
      auto& g = detail::grad_of(p);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += sign[k] * self.grad[i];
    }
  });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a, b, "mul");
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
  return Tensor<T>::make_result(a.shape(), std::move(out), {a.node(), b.node()}, [](Node<T>& self) {
    auto& pa = self.parents[0];
    auto& pb = self.parents[1];
    if (pa->requires_grad) {
      auto& g = detail::grad_of(pa);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * pb->value[i];
    }
    if (pb->requires_grad) {
      auto& g = detail::grad_of(pb);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * pa->value[i];
    }
  });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T factor) {
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = factor * a[i];
  return Tensor<T>::make_result(a.shape(), std::move(out), {a.node()}, [factor](Node<T>& self) {
    auto& g = detail::grad_of(self.parents[0]);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += factor * self.grad[i];
  });
}

template <typename T>
Tensor<T> neg(const Tensor<T>& a) {
  return scale(a, T(-1));
}

// Sum of scalars/tensors of equal shape.
template <typename T>
Tensor<T> add_n(const std::vector<Tensor<T>>& terms) {
  if (terms.empty()) throw ValidationError("add_n: no terms");
  Tensor<T> acc = terms.front();
  for (std::size_t i = 1; i < terms.size(); ++i) acc = add(acc, terms[i]);
  return acc;
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape) {
  if (numel_of(shape) != a.numel()) {
    throw ShapeError("reshape " + to_string(a.shape()) + " -> " + to_string(shape));
  }
  std::vector<T> out(a.values());
  return Tensor<T>::make_result(std::move(shape), std::move(out), {a.node()}, [](Node<T>& self) {
    auto& g = detail::grad_of(self.parents[0]);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
  });
}

// ---------------------------------------------------------------------------
// Reductions

template <typename T>
Tensor<T> sum(const Tensor<T>& a) {
  T s = T(0);
  for (T v : a.data()) s += v;
  return Tensor<T>::make_result({1}, {s}, {a.node()}, [](Node<T>& self) {
    auto& g = detail::grad_of(self.parents[0]);
    for (auto& x : g) x += self.grad[0];
  });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& a) {
  return scale(sum(a), T(1) / static_cast<T>(a.numel()));
}

// Column means of a matrix: [n, d] -> [1, d].
template <typename T>
Tensor<T> mean_rows(const Tensor<T>& x) {
  if (x.rank() != 2) throw ShapeError("mean_rows expects a matrix, got " + to_string(x.shape()));
  const std::size_t n = x.dim(0), d = x.dim(1);
  std::vector<T> out(d, T(0));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j) out[j] += x[i * d + j];
  const T inv = T(1) / static_cast<T>(n);
  for (auto& v : out) v *= inv;
  return Tensor<T>::make_result({1, d}, std::move(out), {x.node()}, [n, d, inv](Node<T>& self) {
    auto& g = detail::grad_of(self.parents[0]);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < d; ++j) g[i * d + j] += inv * self.grad[j];
  });
}

// Elementwise mean of equally shaped tensors.
template <typename T>
Tensor<T> average(const std::vector<Tensor<T>>& items) {
  if (items.empty()) throw ValidationError("average: no tensors");
  const Shape shape = items.front().shape();
  std::vector<T> out(items.front().numel(), T(0));
  std::vector<std::shared_ptr<Node<T>>> parents;
  for (const auto& t : items) {
    if (t.shape() != shape) throw ShapeError("average: mixed shapes");
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += t[i];
    parents.push_back(t.node());
  }
  const T inv = T(1) / static_cast<T>(items.size());
  for (auto& v : out) v *= inv;
  return Tensor<T>::make_result(shape, std::move(out), std::move(parents), [inv](Node<T>& self) {
    for (auto& p : self.parents) {
      if (!p->requires_grad) continue;
      auto& g = detail::grad_of(p);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += inv * self.grad[i];
    }
  });
}

// Linear combination sum_b coeffs[b] * bases[b]; gradients reach both.
template <typename T>
Tensor<T> combine(const std::vector<Tensor<T>>& bases, const Tensor<T>& coeffs) {
  if (bases.empty() || coeffs.numel() != bases.size()) {
    throw ShapeError("combine: " + std::to_string(bases.size()) + " bases, " +
                     std::to_string(coeffs.numel()) + " coefficients");
  }
  const Shape shape = bases.front().shape();
  std::vector<T> out(bases.front().numel(), T(0));
  std::vector<std::shared_ptr<Node<T>>> parents{coeffs.node()};
  for (std::size_t b = 0; b < bases.size(); ++b) {
    if (bases[b].shape() != shape) throw ShapeError("combine: mixed basis shapes");
    const T c = coeffs[b];
    const auto src = bases[b].data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += c * src[i];
    parents.push_back(bases[b].node());
  }
  return Tensor<T>::make_result(shape, std::move(out), std::move(parents), [](Node<T>& self) {
    auto& pc = self.parents[0];
    const std::size_t nb = self.parents.size() - 1;
    for (std::size_t b = 0; b < nb; ++b) {
      auto& pb = self.parents[b + 1];
      if (pc->requires_grad) {
        T dot = T(0);
        for (std::size_t i = 0; i < self.grad.size(); ++i) dot += self.grad[i] * pb->value[i];
        detail::grad_of(pc)[b] += dot;
      }
      if (pb->requires_grad) {
        const T c = pc->value[b];
        auto& g = detail::grad_of(pb);
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += c * self.grad[i];
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Activations

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
  std::vector<T> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] > T(0) ? x[i] : T(0);
  return Tensor<T>::make_result(x.shape(), std::move(out), {x.node()}, [](Node<T>& self) {
    auto& p = self.parents[0];
    auto& g = detail::grad_of(p);
    for (std::size_t i = 0; i < g.size(); ++i)
      if (p->value[i] > T(0)) g[i] += self.grad[i];
  });
}

// Logistic function, kept strictly inside (0, 1) even when saturated.
template <typename T>
T sigmoid_value(T v) {
  const T y = v >= T(0) ? T(1) / (T(1) + std::exp(-v)) : std::exp(v) / (T(1) + std::exp(v));
  return std::clamp(y, std::numeric_limits<T>::min(), T(1) - std::numeric_limits<T>::epsilon() / T(2));
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  std::vector<T> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = sigmoid_value(x[i]);
  return Tensor<T>::make_result(x.shape(), std::move(out), {x.node()}, [](Node<T>& self) {
    auto& g = detail::grad_of(self.parents[0]);
    for (std::size_t i = 0; i < g.size(); ++i) {
      const T y = self.value[i];
      g[i] += self.grad[i] * y * (T(1) - y);
    }
  });
}

template <typename T>
Tensor<T> exp(const Tensor<T>& x) {
  std::vector<T> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::exp(x[i]);
  return Tensor<T>::make_result(x.shape(), std::move(out), {x.node()}, [](Node<T>& self) {
    auto& g = detail::grad_of(self.parents[0]);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * self.value[i];
  });
}

// Row-wise softmax of a matrix [B, C].
template <typename T>
Tensor<T> softmax(const Tensor<T>& x) {
  if (x.rank() != 2) throw ShapeError("softmax expects [B, C], got " + to_string(x.shape()));
  const std::size_t rows = x.dim(0), cols = x.dim(1);
  std::vector<T> out(x.numel());
  for (std::size_t r = 0; r < rows; ++r) {
    const T* in = x.data().data() + r * cols;
    T* o = out.data() + r * cols;
    const T mx = *std::max_element(in, in + cols);
    T z = T(0);
    for (std::size_t c = 0; c < cols; ++c) z += (o[c] = std::exp(in[c] - mx));
    for (std::size_t c = 0; c < cols; ++c) o[c] /= z;
  }
  return Tensor<T>::make_result(x.shape(), std::move(out), {x.node()}, [rows, cols](Node<T>& self) {
    auto& g = detail::grad_of(self.parents[0]);
    for (std::size_t r = 0; r < rows; ++r) {
      const T* y = self.value.data() + r * cols;
      const T* gy = self.grad.data() + r * cols;
      T dot = T(0);
      for (std::size_t c = 0; c < cols; ++c) dot += y[c] * gy[c];
      for (std::size_t c = 0; c < cols; ++c) g[r * cols + c] += y[c] * (gy[c] - dot);
    }
  });
}

// ---------------------------------------------------------------------------
// Losses

// Mean over the batch of -log softmax(logits)[label].  Labels are 1-based
// class ids in [1, C].
template <typename T>
Tensor<T> softmax_cross_entropy(const Tensor<T>& logits, std::span<const int> labels) {
  if (logits.rank() != 2) throw ShapeError("cross entropy expects [B, C] logits");
  const std::size_t rows = logits.dim(0), cols = logits.dim(1);
  if (labels.size() != rows) throw ShapeError("cross entropy: label count != batch size");
  std::vector<T> prob(logits.numel());
  std::vector<int> target(labels.begin(), labels.end());
  T loss = T(0);
  for (std::size_t r = 0; r < rows; ++r) {
    if (target[r] < 1 || static_cast<std::size_t>(target[r]) > cols) {
      throw ValidationError("label " + std::to_string(target[r]) + " outside [1, " +
                            std::to_string(cols) + "]");
    }
    const T* in = logits.data().data() + r * cols;
    T* p = prob.data() + r * cols;
    const T mx = *std::max_element(in, in + cols);
    T z = T(0);
    for (std::size_t c = 0; c < cols; ++c) z += (p[c] = std::exp(in[c] - mx));
    for (std::size_t c = 0; c < cols; ++c) p[c] /= z;
    loss += -(in[target[r] - 1] - mx - std::log(z));
  }
  loss /= static_cast<T>(rows);
  return Tensor<T>::make_result(
      {1}, {loss}, {logits.node()},
      [prob = std::move(prob), target = std::move(target), rows, cols](Node<T>& self) {
        auto& g = detail::grad_of(self.parents[0]);
        const T s = self.grad[0] / static_cast<T>(rows);
        for (std::size_t r = 0; r < rows; ++r) {
          for (std::size_t c = 0; c < cols; ++c) {
            const T onehot = static_cast<std::size_t>(target[r] - 1) == c ? T(1) : T(0);
            g[r * cols + c] += s * (prob[r * cols + c] - onehot);
          }
        }
      });
}

inline constexpr double kBceClamp = 1e-7;

// -(1/n) sum [t log p + (1-t) log(1-p)] with p clamped to [eps, 1-eps].
template <typename T>
Tensor<T> binary_cross_entropy(const Tensor<T>& pred, std::span<const T> target) {
  if (target.size() != pred.numel()) {
    throw ShapeError("binary cross entropy: " + std::to_string(pred.numel()) + " predictions, " +
                     std::to_string(target.size()) + " targets");
  }
  const T eps = static_cast<T>(kBceClamp);
  std::vector<T> tgt(target.begin(), target.end());
  T loss = T(0);
  for (std::size_t i = 0; i < tgt.size(); ++i) {
    if (tgt[i] != T(0) && tgt[i] != T(1)) throw ValidationError("binary cross entropy: non-binary target");
    const T p = std::clamp(pred[i], eps, T(1) - eps);
    loss -= tgt[i] * std::log(p) + (T(1) - tgt[i]) * std::log(T(1) - p);
  }
  const T n = static_cast<T>(tgt.size());
  loss /= n;
  return Tensor<T>::make_result({1}, {loss}, {pred.node()}, [tgt = std::move(tgt), eps, n](Node<T>& self) {
    auto& p = self.parents[0];
    auto& g = detail::grad_of(p);
    const T s = self.grad[0] / n;
    for (std::size_t i = 0; i < g.size(); ++i) {
      const T v = p->value[i];
      if (v < eps || v > T(1) - eps) continue;
      g[i] += s * (-tgt[i] / v + (T(1) - tgt[i]) / (T(1) - v));
    }
  });
}

// ---------------------------------------------------------------------------
// Normalization

// Normalizes every slice along `channel_axis` with statistics over all
// remaining axes, then applies per-channel scale/shift.  Batch statistics
// are used unconditionally (there are no running averages).
template <typename T>
Tensor<T> batch_norm(const Tensor<T>& x, std::size_t channel_axis, const Tensor<T>& gamma,
                     const Tensor<T>& beta, T eps = T(1e-5)) {
  if (channel_axis >= x.rank()) throw ShapeError("batch_norm: channel axis out of range");
  const auto& s = x.shape();
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < channel_axis; ++i) outer *= s[i];
  for (std::size_t i = channel_axis + 1; i < s.size(); ++i) inner *= s[i];
  const std::size_t channels = s[channel_axis];
  const std::size_t count = outer * inner;
  if (count < 2) throw ValidationError("batch_norm: degenerate batch (fewer than 2 elements per channel)");
  if (gamma.numel() != channels || beta.numel() != channels) {
    throw ShapeError("batch_norm: scale/shift size != " + std::to_string(channels));
  }
  auto at = [=](std::size_t o, std::size_t c, std::size_t i) { return (o * channels + c) * inner + i; };

  std::vector<T> xhat(x.numel()), inv_std(channels), out(x.numel());
  for (std::size_t c = 0; c < channels; ++c) {
    T mu = T(0);
    for (std::size_t o = 0; o < outer; ++o)
      for (std::size_t i = 0; i < inner; ++i) mu += x[at(o, c, i)];
    mu /= static_cast<T>(count);
    T var = T(0);
    for (std::size_t o = 0; o < outer; ++o)
      for (std::size_t i = 0; i < inner; ++i) {
        const T d = x[at(o, c, i)] - mu;
        var += d * d;
      }
    var /= static_cast<T>(count);
    inv_std[c] = T(1) / std::sqrt(var + eps);
    for (std::size_t o = 0; o < outer; ++o)
      for (std::size_t i = 0; i < inner; ++i) {
        const auto k = at(o, c, i);
        xhat[k] = (x[k] - mu) * inv_std[c];
        out[k] = gamma[c] * xhat[k] + beta[c];
      }
  }
  return Tensor<T>::make_result(
      s, std::move(out), {x.node(), gamma.node(), beta.node()},
      [xhat = std::move(xhat), inv_std = std::move(inv_std), outer, inner, channels, count,
       at](Node<T>& self) {
        auto& px = self.parents[0];
        auto& pg = self.parents[1];
        auto& pb = self.parents[2];
        for (std::size_t c = 0; c < channels; ++c) {
          T sum_dy = T(0), sum_dy_xhat = T(0);
          for (std::size_t o = 0; o < outer; ++o)
            for (std::size_t i = 0; i < inner; ++i) {
              const auto k = at(o, c, i);
              sum_dy += self.grad[k];
              sum_dy_xhat += self.grad[k] * xhat[k];
            }
          if (pg->requires_grad) detail::grad_of(pg)[c] += sum_dy_xhat;
          if (pb->requires_grad) detail::grad_of(pb)[c] += sum_dy;
          if (px->requires_grad) {
            auto& g = detail::grad_of(px);
            const T gam = pg->value[c];
            const T n = static_cast<T>(count);
            for (std::size_t o = 0; o < outer; ++o)
              for (std::size_t i = 0; i < inner; ++i) {
                const auto k = at(o, c, i);
                g[k] += gam * inv_std[c] / n * (n * self.grad[k] - sum_dy - xhat[k] * sum_dy_xhat);
              }
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Spatial operations on [B, C, H, W] (or a single [C, H, W] sample)

namespace detail {

struct ImageDims {
  std::size_t batch, channels, height, width;
  bool batched;
};

template <typename T>
ImageDims image_dims(const Tensor<T>& x, const char* op) {
  if (x.rank() == 4) return {x.dim(0), x.dim(1), x.dim(2), x.dim(3), true};
  if (x.rank() == 3) return {1, x.dim(0), x.dim(1), x.dim(2), false};
  throw ShapeError(std::string(op) + " expects [B,C,H,W] or [C,H,W], got " + to_string(x.shape()));
}

inline Shape image_shape(const ImageDims& d, std::size_t c, std::size_t h, std::size_t w) {
  return d.batched ? Shape{d.batch, c, h, w} : Shape{c, h, w};
}

template <typename T>
void im2col(const T* img, std::size_t channels, std::size_t height, std::size_t width, std::size_t k,
            std::size_t pad, T* col) {
  const std::size_t hw = height * width;
  for (std::size_t c = 0; c < channels; ++c)
    for (std::size_t ky = 0; ky < k; ++ky)
      for (std::size_t kx = 0; kx < k; ++kx) {
        T* row = col + ((c * k + ky) * k + kx) * hw;
        for (std::size_t y = 0; y < height; ++y) {
          const auto sy = static_cast<std::ptrdiff_t>(y + ky) - static_cast<std::ptrdiff_t>(pad);
          T* dst = row + y * width;
          if (sy < 0 || sy >= static_cast<std::ptrdiff_t>(height)) {
            std::fill(dst, dst + width, T(0));
            continue;
          }
          const T* src = img + (c * height + static_cast<std::size_t>(sy)) * width;
          for (std::size_t x = 0; x < width; ++x) {
            const auto sx = static_cast<std::ptrdiff_t>(x + kx) - static_cast<std::ptrdiff_t>(pad);
            dst[x] = (sx < 0 || sx >= static_cast<std::ptrdiff_t>(width)) ? T(0)
                                                                           : src[static_cast<std::size_t>(sx)];
          }
        }
      }
}

template <typename T>
void col2im_add(const T* col, std::size_t channels, std::size_t height, std::size_t width, std::size_t k,
                std::size_t pad, T* img) {
  const std::size_t hw = height * width;
  for (std::size_t c = 0; c < channels; ++c)
    for (std::size_t ky = 0; ky < k; ++ky)
      for (std::size_t kx = 0; kx < k; ++kx) {
        const T* row = col + ((c * k + ky) * k + kx) * hw;
        for (std::size_t y = 0; y < height; ++y) {
          const auto sy = static_cast<std::ptrdiff_t>(y + ky) - static_cast<std::ptrdiff_t>(pad);
          if (sy < 0 || sy >= static_cast<std::ptrdiff_t>(height)) continue;
          T* dst = img + (c * height + static_cast<std::size_t>(sy)) * width;
          for (std::size_t x = 0; x < width; ++x) {
            const auto sx = static_cast<std::ptrdiff_t>(x + kx) - static_cast<std::ptrdiff_t>(pad);
            if (sx >= 0 && sx < static_cast<std::ptrdiff_t>(width)) dst[sx] += row[y * width + x];
          }
        }
      }
}

}  // namespace detail

// Same-size cross-correlation with zero padding.  kernels: [C_out, C_in, K, K],
// K odd, pad = (K - 1) / 2.  No bias.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& kernels, std::size_t pad = 2) {
  const auto d = detail::image_dims(x, "conv2d");
  if (kernels.rank() != 4 || kernels.dim(2) != kernels.dim(3)) {
    throw ShapeError("conv2d kernels must be [C_out, C_in, K, K], got " + to_string(kernels.shape()));
  }
  const std::size_t cout = kernels.dim(0), k = kernels.dim(2);
  if (kernels.dim(1) != d.channels) {
    throw ShapeError("conv2d: input has " + std::to_string(d.channels) + " channels, kernels expect " +
                     std::to_string(kernels.dim(1)));
  }
  if (2 * pad + 1 != k) throw ShapeError("conv2d: padding must be (K-1)/2 for same-size output");
  const std::size_t hw = d.height * d.width;
  const std::size_t patch = d.channels * k * k;
  const auto ei = [](std::size_t v) { return static_cast<Eigen::Index>(v); };

  std::vector<T> out(d.batch * cout * hw);
  std::vector<T> col(patch * hw);
  detail::MapConstMat<T> kmat(kernels.data().data(), ei(cout), ei(patch));
  for (std::size_t b = 0; b < d.batch; ++b) {
    detail::im2col(x.data().data() + b * d.channels * hw, d.channels, d.height, d.width, k, pad, col.data());
    detail::MapMat<T>(out.data() + b * cout * hw, ei(cout), ei(hw)).noalias() =
        kmat * detail::MapConstMat<T>(col.data(), ei(patch), ei(hw));
  }
  return Tensor<T>::make_result(
      detail::image_shape(d, cout, d.height, d.width), std::move(out), {x.node(), kernels.node()},
      [d, cout, k, pad, hw, patch, ei](Node<T>& self) {
        auto& px = self.parents[0];
        auto& pk = self.parents[1];
        std::vector<T> col(patch * hw), dcol;
        if (px->requires_grad) dcol.resize(patch * hw);
        detail::MapConstMat<T> kmat(pk->value.data(), ei(cout), ei(patch));
        for (std::size_t b = 0; b < d.batch; ++b) {
          detail::MapConstMat<T> g(self.grad.data() + b * cout * hw, ei(cout), ei(hw));
          if (pk->requires_grad) {
            detail::im2col(px->value.data() + b * d.channels * hw, d.channels, d.height, d.width, k, pad,
                           col.data());
            detail::MapMat<T>(detail::grad_of(pk).data(), ei(cout), ei(patch)).noalias() +=
                g * detail::MapConstMat<T>(col.data(), ei(patch), ei(hw)).transpose();
          }
          if (px->requires_grad) {
            detail::MapMat<T>(dcol.data(), ei(patch), ei(hw)).noalias() = kmat.transpose() * g;
            detail::col2im_add(dcol.data(), d.channels, d.height, d.width, k, pad,
                               detail::grad_of(px).data() + b * d.channels * hw);
          }
        }
      });
}

// 2x2 max pooling with stride 2; a trailing odd row/column is dropped.
template <typename T>
Tensor<T> maxpool2d(const Tensor<T>& x) {
  const auto d = detail::image_dims(x, "maxpool2d");
  if (d.height < 2 || d.width < 2) throw ShapeError("maxpool2d needs H, W >= 2, got " + to_string(x.shape()));
  const std::size_t oh = d.height / 2, ow = d.width / 2;
  const std::size_t planes = d.batch * d.channels;
  std::vector<T> out(planes * oh * ow);
  std::vector<std::size_t> arg(out.size());
  for (std::size_t p = 0; p < planes; ++p) {
    const T* src = x.data().data() + p * d.height * d.width;
    for (std::size_t oy = 0; oy < oh; ++oy)
      for (std::size_t ox = 0; ox < ow; ++ox) {
        std::size_t best = (2 * oy) * d.width + 2 * ox;
        for (std::size_t dy = 0; dy < 2; ++dy)
          for (std::size_t dx = 0; dx < 2; ++dx) {
            const std::size_t idx = (2 * oy + dy) * d.width + 2 * ox + dx;
            if (src[idx] > src[best]) best = idx;
          }
        const std::size_t o = (p * oh + oy) * ow + ox;
        out[o] = src[best];
        arg[o] = p * d.height * d.width + best;
      }
  }
  return Tensor<T>::make_result(detail::image_shape(d, d.channels, oh, ow), std::move(out), {x.node()},
                                [arg = std::move(arg)](Node<T>& self) {
                                  auto& g = detail::grad_of(self.parents[0]);
                                  for (std::size_t o = 0; o < arg.size(); ++o) g[arg[o]] += self.grad[o];
                                });
}

// [B, C, H, W] -> [B, C] spatial mean.
template <typename T>
Tensor<T> global_avg_pool(const Tensor<T>& x) {
  if (x.rank() != 4) throw ShapeError("global_avg_pool expects [B,C,H,W]");
  const std::size_t planes = x.dim(0) * x.dim(1), hw = x.dim(2) * x.dim(3);
  std::vector<T> out(planes, T(0));
  for (std::size_t p = 0; p < planes; ++p) {
    for (std::size_t i = 0; i < hw; ++i) out[p] += x[p * hw + i];
    out[p] /= static_cast<T>(hw);
  }
  return Tensor<T>::make_result({x.dim(0), x.dim(1)}, std::move(out), {x.node()}, [planes, hw](Node<T>& self) {
    auto& g = detail::grad_of(self.parents[0]);
    const T inv = T(1) / static_cast<T>(hw);
    for (std::size_t p = 0; p < planes; ++p)
      for (std::size_t i = 0; i < hw; ++i) g[p * hw + i] += inv * self.grad[p];
  });
}

// ---------------------------------------------------------------------------
// Broadcast helpers for the few row/channel patterns the models use

// x: [B, n] + bias: [n] broadcast over rows.
template <typename T>
Tensor<T> add_bias(const Tensor<T>& x, const Tensor<T>& bias) {
  if (x.rank() != 2 || bias.numel() != x.dim(1)) throw ShapeError("add_bias: incompatible shapes");
  const std::size_t rows = x.dim(0), cols = x.dim(1);
  std::vector<T> out(x.numel());
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] = x[r * cols + c] + bias[c];
  return Tensor<T>::make_result(x.shape(), std::move(out), {x.node(), bias.node()}, [rows, cols](Node<T>& self) {
    auto& px = self.parents[0];
    auto& pb = self.parents[1];
    if (px->requires_grad) {
      auto& g = detail::grad_of(px);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
    if (pb->requires_grad) {
      auto& g = detail::grad_of(pb);
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < cols; ++c) g[c] += self.grad[r * cols + c];
    }
  });
}

// x: [B, n] times per-column factors g: [n]; gradients reach both.
template <typename T>
Tensor<T> scale_columns(const Tensor<T>& x, const Tensor<T>& factors) {
  if (x.rank() != 2 || factors.numel() != x.dim(1)) throw ShapeError("scale_columns: incompatible shapes");
  const std::size_t rows = x.dim(0), cols = x.dim(1);
  std::vector<T> out(x.numel());
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] = x[r * cols + c] * factors[c];
  return Tensor<T>::make_result(x.shape(), std::move(out), {x.node(), factors.node()}, [rows, cols](Node<T>& self) {
    auto& px = self.parents[0];
    auto& pf = self.parents[1];
    if (px->requires_grad) {
      auto& g = detail::grad_of(px);
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < cols; ++c) g[r * cols + c] += self.grad[r * cols + c] * pf->value[c];
    }
    if (pf->requires_grad) {
      auto& g = detail::grad_of(pf);
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < cols; ++c) g[c] += self.grad[r * cols + c] * px->value[r * cols + c];
    }
  });
}

// Multiplies every slice along `axis` by a constant factor (no gradient to
// the factors).  Used to apply band masks.
template <typename T>
Tensor<T> scale_axis(const Tensor<T>& x, std::size_t axis, std::span<const T> factors) {
  if (axis >= x.rank() || factors.size() != x.dim(axis)) {
    throw ShapeError("scale_axis: " + std::to_string(factors.size()) + " factors for axis " + std::to_string(axis) +
                     " of " + to_string(x.shape()));
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= x.dim(i);
  for (std::size_t i = axis + 1; i < x.rank(); ++i) inner *= x.dim(i);
  const std::size_t n = factors.size();
  std::vector<T> f(factors.begin(), factors.end());
  std::vector<T> out(x.numel());
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t c = 0; c < n; ++c)
      for (std::size_t i = 0; i < inner; ++i) {
        const auto k = (o * n + c) * inner + i;
        out[k] = x[k] * f[c];
      }
  return Tensor<T>::make_result(x.shape(), std::move(out), {x.node()},
                                [f = std::move(f), outer, inner, n](Node<T>& self) {
                                  auto& g = detail::grad_of(self.parents[0]);
                                  for (std::size_t o = 0; o < outer; ++o)
                                    for (std::size_t c = 0; c < n; ++c)
                                      for (std::size_t i = 0; i < inner; ++i) {
                                        const auto k = (o * n + c) * inner + i;
                                        g[k] += self.grad[k] * f[c];
                                      }
                                });
}

// Inverted dropout: kept units are scaled by 1/(1-p).  Identity when
// train is false or p == 0.
template <typename T>
Tensor<T> dropout(const Tensor<T>& x, double p, Rng& rng, bool train) {
  if (p < 0.0 || p >= 1.0) throw ValidationError("dropout probability must be in [0, 1)");
  if (!train || p == 0.0) return x;
  const T keep_scale = static_cast<T>(1.0 / (1.0 - p));
  std::vector<T> m(x.numel());
  for (auto& v : m) v = rng.uniform() >= p ? keep_scale : T(0);
  std::vector<T> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * m[i];
  return Tensor<T>::make_result(x.shape(), std::move(out), {x.node()}, [m = std::move(m)](Node<T>& self) {
    auto& g = detail::grad_of(self.parents[0]);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * m[i];
  });
}

// Stacks equally shaped tensors along a new leading axis.
template <typename T>
Tensor<T> stack(const std::vector<Tensor<T>>& items) {
  if (items.empty()) throw ValidationError("stack: no tensors");
  const Shape inner = items.front().shape();
  const std::size_t n = items.front().numel();
  std::vector<T> out;
  out.reserve(n * items.size());
  std::vector<std::shared_ptr<Node<T>>> parents;
  for (const auto& t : items) {
    if (t.shape() != inner) throw ShapeError("stack: mixed shapes");
    out.insert(out.end(), t.data().begin(), t.data().end());
    parents.push_back(t.node());
  }
  Shape shape{items.size()};
  shape.insert(shape.end(), inner.begin(), inner.end());
  return Tensor<T>::make_result(std::move(shape), std::move(out), std::move(parents), [n](Node<T>& self) {
    for (std::size_t b = 0; b < self.parents.size(); ++b) {
      auto& p = self.parents[b];
      if (!p->requires_grad) continue;
      auto& g = detail::grad_of(p);
      for (std::size_t i = 0; i < n; ++i) g[i] += self.grad[b * n + i];
    }
  });
}

}  // namespace m3bs::nn
