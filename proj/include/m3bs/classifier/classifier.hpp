#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "m3bs/errors.hpp"
#include "m3bs/numerics/ops.hpp"
#include "m3bs/numerics/rng.hpp"
#include "m3bs/numerics/tensor.hpp"

namespace m3bs::classifier {

using nn::Tensor;

struct Profile {
  std::string name;
  std::vector<std::size_t> channels;  // one conv stage per entry
  std::size_t patch = 33;
  double dropout = 0.5;
  bool global_pool = false;  // average the last feature map instead of requiring 1x1

  static Profile table1() { return {"table1", {64, 128, 256, 512, 1024}, 33, 0.5, false}; }
  static Profile desk(std::size_t patch = 33) { return {"desk", {16, 32}, patch, 0.5, true}; }

  static Profile by_name(const std::string& name, std::size_t patch) {
    if (name == "table1") {
      if (patch != 33) throw ValidationError("the table1 classifier profile requires 33x33 patches");
      return table1();
    }
    if (name == "desk") return desk(patch);
    throw ValidationError("unknown classifier profile '" + name + "'");
  }

  // Spatial size after each stage's 2x2 pooling.
  std::vector<std::size_t> resolutions() const {
    std::vector<std::size_t> r{patch};
    for (std::size_t s = 0; s < channels.size(); ++s) {
      if (r.back() < 2) throw ValidationError("profile '" + name + "': patch too small for its stages");
      r.push_back(r.back() / 2);
    }
    return r;
  }
};

template <typename T>
struct ClassifierParams {
  Profile profile;
  std::size_t n_band = 0, n_class = 0;
  std::vector<Tensor<T>> kernels;             // [C_out, C_in, 5, 5]
  std::vector<Tensor<T>> bn_gamma, bn_beta;   // [C_out]
  Tensor<T> fc_w;                             // [C_last, n_class]
  Tensor<T> fc_b;                             // [n_class]

  static ClassifierParams init(const Profile& profile, std::size_t n_band, std::size_t n_class, std::uint64_t seed) {
    if (n_band == 0 || n_class < 2) throw ValidationError("classifier needs n_band > 0 and n_class >= 2");
    const auto res = profile.resolutions();
    if (!profile.global_pool && res.back() != 1) {
      throw ValidationError("profile '" + profile.name + "' does not reduce the patch to 1x1");
    }
    Rng rng(seed);
    ClassifierParams p;
    p.profile = profile;
    p.n_band = n_band;
    p.n_class = n_class;
    auto uniform = [&](nn::Shape shape, std::size_t fan_in) {
      const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
      std::vector<T> v(nn::numel_of(shape));
      for (auto& x : v) x = static_cast<T>(rng.uniform(-bound, bound));
      return Tensor<T>::from(std::move(shape), std::move(v), true);
    };
    std::size_t c_in = n_band;
    for (auto c_out : profile.channels) {
      p.kernels.push_back(uniform({c_out, c_in, 5, 5}, c_in * 25));
      p.bn_gamma.push_back(Tensor<T>({c_out}, T(1), true));
      p.bn_beta.push_back(Tensor<T>({c_out}, T(0), true));
      c_in = c_out;
    }
    p.fc_w = uniform({c_in, n_class}, c_in);
    p.fc_b = uniform({n_class}, c_in);
    return p;
  }

  nn::ParamList<T> parameters() {
    nn::ParamList<T> out;
    for (std::size_t s = 0; s < kernels.size(); ++s) {
      out.push_back(&kernels[s]);
      out.push_back(&bn_gamma[s]);
      out.push_back(&bn_beta[s]);
    }
    out.push_back(&fc_w);
    out.push_back(&fc_b);
    return out;
  }

  std::vector<std::string> parameter_names() const {
    std::vector<std::string> out;
    for (std::size_t s = 0; s < kernels.size(); ++s) {
      const auto k = "stage" + std::to_string(s + 1);
      out.push_back(k + ".conv");
      out.push_back(k + ".bn.gamma");
      out.push_back(k + ".bn.beta");
    }
    out.emplace_back("fc.w");
    out.emplace_back("fc.b");
    return out;
  }

  ClassifierParams clone() const {
    ClassifierParams c = *this;
    for (auto* group : {&c.kernels, &c.bn_gamma, &c.bn_beta})
      for (auto& t : *group) t = t.clone();
    c.fc_w = c.fc_w.clone();
    c.fc_b = c.fc_b.clone();
    return c;
  }
};

// Logits [B, n_class] for a batch [B, n_band, patch, patch] (masked bands
// already zeroed).  Dropout draws from `rng` only in train mode.
template <typename T>
Tensor<T> logits(const Tensor<T>& x, const ClassifierParams<T>& p, bool train, Rng& rng) {
  const auto& pr = p.profile;
  if (x.rank() != 4 || x.dim(1) != p.n_band) {
    throw ShapeError("classifier input " + nn::to_string(x.shape()) + " vs " + std::to_string(p.n_band) + " bands");
  }
  if (x.dim(2) != pr.patch || x.dim(3) != pr.patch) {
    throw ShapeError("classifier expects " + std::to_string(pr.patch) + "x" + std::to_string(pr.patch) +
                     " patches, got " + std::to_string(x.dim(2)) + "x" + std::to_string(x.dim(3)));
  }
  Tensor<T> h = x;
  for (std::size_t s = 0; s < p.kernels.size(); ++s) {
    h = nn::conv2d(h, p.kernels[s], 2);
    h = nn::batch_norm(h, 1, p.bn_gamma[s], p.bn_beta[s]);
    h = nn::relu(h);
    h = nn::maxpool2d(h);
  }
  h = nn::global_avg_pool(h);  // [B, C]; a no-op reshape when the map is 1x1
  h = nn::dropout(h, pr.dropout, rng, train);
  return nn::add_bias(nn::matmul(h, p.fc_w), p.fc_b);
}

template <typename T>
Tensor<T> classify(const Tensor<T>& x, const ClassifierParams<T>& p, bool train, Rng& rng) {
  return nn::softmax(logits(x, p, train, rng));
}

template <typename T>
Tensor<T> classification_loss(const Tensor<T>& logits, std::span<const int> labels) {
  return nn::softmax_cross_entropy(logits, labels);
}

// 1-based argmax labels of a [B, n_class] tensor.
template <typename T>
std::vector<int> predict_labels(const Tensor<T>& scores) {
  const std::size_t b = scores.dim(0), c = scores.dim(1);
  std::vector<int> out(b);
  for (std::size_t i = 0; i < b; ++i) {
    std::size_t best = 0;
    for (std::size_t k = 1; k < c; ++k)
      if (scores[i * c + k] > scores[i * c + best]) best = k;
    out[i] = static_cast<int>(best) + 1;
  }
  return out;
}

}  // namespace m3bs::classifier
