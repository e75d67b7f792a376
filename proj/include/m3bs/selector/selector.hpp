#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "m3bs/errors.hpp"
#include "m3bs/graph/band_graph.hpp"
#include "m3bs/hsi/dataset.hpp"
#include "m3bs/numerics/ops.hpp"
#include "m3bs/numerics/rng.hpp"
#include "m3bs/numerics/tensor.hpp"

namespace m3bs::selector {

using nn::Tensor;

inline constexpr std::size_t kBases = 3;
inline constexpr std::size_t kHidden = 256;

// Shared GCN weights.  Every shape depends only on the patch area hw, never
// on the band count.
template <typename T>
struct SelectorParams {
  std::size_t hw = 0, hidden = kHidden, n_base = kBases;
  std::vector<Tensor<T>> bases1;  // n_base x [hw, hidden]
  std::vector<Tensor<T>> bases2;  // n_base x [hidden, 1]
  Tensor<T> w_fc;                 // [hw, n_base]
  Tensor<T> bn1_gamma, bn1_beta;  // [hidden]
  Tensor<T> bn2_gamma, bn2_beta;  // [1]

  static SelectorParams init(std::size_t hw, std::uint64_t seed, std::size_t hidden = kHidden,
                             std::size_t n_base = kBases) {
    if (hw == 0 || hidden == 0 || n_base == 0) throw ValidationError("selector dimensions must be positive");
    Rng rng(seed);
    SelectorParams p;
    p.hw = hw;
    p.hidden = hidden;
    p.n_base = n_base;
    auto uniform = [&](nn::Shape shape, std::size_t fan_in) {
      const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
      std::vector<T> v(nn::numel_of(shape));
      for (auto& x : v) x = static_cast<T>(rng.uniform(-bound, bound));
      return Tensor<T>::from(std::move(shape), std::move(v), true);
    };
    for (std::size_t b = 0; b < n_base; ++b) p.bases1.push_back(uniform({hw, hidden}, hw));
    for (std::size_t b = 0; b < n_base; ++b) p.bases2.push_back(uniform({hidden, 1}, hidden));
    p.w_fc = uniform({hw, n_base}, hw);
    p.bn1_gamma = Tensor<T>({hidden}, T(1), true);
    p.bn1_beta = Tensor<T>({hidden}, T(0), true);
    p.bn2_gamma = Tensor<T>({1}, T(1), true);
    p.bn2_beta = Tensor<T>({1}, T(0), true);
    return p;
  }

  nn::ParamList<T> parameters() {
    nn::ParamList<T> out;
    for (auto& b : bases1) out.push_back(&b);
    for (auto& b : bases2) out.push_back(&b);
    for (auto* t : {&w_fc, &bn1_gamma, &bn1_beta, &bn2_gamma, &bn2_beta}) out.push_back(t);
    return out;
  }

  std::vector<std::string> parameter_names() const {
    std::vector<std::string> out;
    for (std::size_t b = 0; b < n_base; ++b) out.push_back("bases1." + std::to_string(b));
    for (std::size_t b = 0; b < n_base; ++b) out.push_back("bases2." + std::to_string(b));
    for (const char* n : {"w_fc", "bn1.gamma", "bn1.beta", "bn2.gamma", "bn2.beta"}) out.emplace_back(n);
    return out;
  }

  // Deep copy with fresh leaves (no shared storage or gradients).
  SelectorParams clone() const {
    SelectorParams c = *this;
    for (auto& b : c.bases1) b = b.clone();
    for (auto& b : c.bases2) b = b.clone();
    for (auto* t : {&c.w_fc, &c.bn1_gamma, &c.bn1_beta, &c.bn2_gamma, &c.bn2_beta}) *t = t->clone();
    return c;
  }
};

// alpha = sigmoid(mean over bands of X times W_FC), shape [1, n_base].
template <typename T>
Tensor<T> coefficients(const Tensor<T>& x, const Tensor<T>& w_fc) {
  if (x.rank() != 2 || w_fc.rank() != 2 || x.dim(1) != w_fc.dim(0)) {
    throw ShapeError("coefficients: feature matrix " + nn::to_string(x.shape()) + " vs W_FC " +
                     nn::to_string(w_fc.shape()));
  }
  return nn::sigmoid(nn::matmul(nn::mean_rows(x), w_fc));
}

template <typename T>
Tensor<T> combine_bases(const std::vector<Tensor<T>>& bases, const Tensor<T>& alpha) {
  return nn::combine(bases, alpha);
}

template <typename T>
Tensor<T> propagation_tensor(const graph::BandGraph& g) {
  std::vector<T> p(g.P.begin(), g.P.end());
  return Tensor<T>::from({g.n_band, g.n_band}, std::move(p));
}

// Two basis-decomposed graph convolutions; returns scores [n_band] in (0, 1).
template <typename T>
Tensor<T> score_bands(const Tensor<T>& x, const graph::BandGraph& g, const SelectorParams<T>& p) {
  if (x.rank() != 2 || x.dim(0) != g.n_band) {
    throw ShapeError("score_bands: feature matrix " + nn::to_string(x.shape()) + " vs graph of " +
                     std::to_string(g.n_band) + " bands");
  }
  if (x.dim(1) != p.hw) {
    throw ShapeError("score_bands: patch area " + std::to_string(x.dim(1)) + " vs selector hw " + std::to_string(p.hw));
  }
  const auto alpha = coefficients(x, p.w_fc);
  const auto w1 = combine_bases(p.bases1, alpha);
  const auto w2 = combine_bases(p.bases2, alpha);
  const auto P = propagation_tensor<T>(g);
  const auto px = nn::matmul(P, x);
  const auto h = nn::relu(nn::batch_norm(nn::matmul(px, w1), 1, p.bn1_gamma, p.bn1_beta));
  const auto s = nn::sigmoid(nn::batch_norm(nn::matmul(P, nn::matmul(h, w2)), 1, p.bn2_gamma, p.bn2_beta));
  return nn::reshape(s, {g.n_band});
}

template <typename T>
Tensor<T> score_patch(std::span<const T> patch, std::size_t n_band, const SelectorParams<T>& p,
                      std::size_t edge_budget = 1000) {
  if (patch.size() != n_band * p.hw) throw ShapeError("score_patch: patch size does not match n_band x hw");
  const auto x = Tensor<T>::from({n_band, p.hw}, std::vector<T>(patch.begin(), patch.end()));
  const auto g = graph::build_graph(graph::FeatureView<T>{patch, n_band, p.hw}, edge_budget);
  return score_bands(x, g, p);
}

// Mean of per-patch scores over a [B, n_band, h, w] batch.
template <typename T>
Tensor<T> batch_scores(const Tensor<T>& batch, const SelectorParams<T>& p, std::size_t edge_budget = 1000) {
  if (batch.rank() != 4) throw ValidationError("batch_scores: expected [B, n_band, h, w], got " + nn::to_string(batch.shape()));
  const std::size_t n_band = batch.dim(1), per = n_band * batch.dim(2) * batch.dim(3);
  const auto values = batch.data();
  std::vector<Tensor<T>> scores;
  scores.reserve(batch.dim(0));
  for (std::size_t i = 0; i < batch.dim(0); ++i) {
    scores.push_back(score_patch<T>(values.subspan(i * per, per), n_band, p, edge_budget));
  }
  return nn::average(scores);
}

// Patches of differing band counts cannot share a mask.
template <typename T>
Tensor<T> batch_scores(const std::vector<hsi::Patch>& patches, const SelectorParams<T>& p,
                       std::size_t edge_budget = 1000) {
  if (patches.empty()) throw ValidationError("batch_scores: empty batch");
  std::vector<Tensor<T>> scores;
  for (const auto& patch : patches) {
    if (patch.n_band != patches.front().n_band) throw ValidationError("batch_scores: mixed band counts in one batch");
    std::vector<T> v(patch.values.begin(), patch.values.end());
    scores.push_back(score_patch<T>(v, patch.n_band, p, edge_budget));
  }
  return nn::average(scores);
}

struct BandMask {
  std::vector<std::uint8_t> mask;
  std::vector<std::size_t> bands;  // ascending
  double theta = 0.0;              // score of the weakest selected band
  std::size_t n_sband = 0;

  template <typename T>
  std::vector<T> factors() const {
    return std::vector<T>(mask.begin(), mask.end());
  }
};

// Bands ordered by score, highest first; equal scores keep the lower index first.
template <typename T>
std::vector<std::size_t> rank_bands(std::span<const T> scores) {
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  return order;
}

template <typename T>
BandMask binarize(std::span<const T> scores, std::size_t n_sband) {
  if (n_sband == 0 || n_sband >= scores.size()) {
    throw ValidationError("n_sband must satisfy 0 < n_sband < n_band (got " + std::to_string(n_sband) + " of " +
                          std::to_string(scores.size()) + ")");
  }
  const auto order = rank_bands(scores);
  BandMask m;
  m.n_sband = n_sband;
  m.mask.assign(scores.size(), 0);
  for (std::size_t k = 0; k < n_sband; ++k) m.mask[order[k]] = 1;
  m.theta = static_cast<double>(scores[order[n_sband - 1]]);
  m.bands.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_sband));
  std::sort(m.bands.begin(), m.bands.end());
  return m;
}

inline BandMask mask_from_bands(const std::vector<std::size_t>& bands, std::size_t n_band) {
  BandMask m;
  m.mask.assign(n_band, 0);
  for (auto b : bands) {
    if (b >= n_band) throw ValidationError("band index out of range in mask");
    m.mask[b] = 1;
  }
  for (std::size_t b = 0; b < n_band; ++b)
    if (m.mask[b]) m.bands.push_back(b);
  m.n_sband = m.bands.size();
  return m;
}

// Multiplies band b of a [B, n_band, h, w] or [n_band, h, w] tensor by mask[b].
template <typename T>
Tensor<T> apply_mask(const Tensor<T>& x, const BandMask& m) {
  if (x.rank() != 3 && x.rank() != 4) throw ShapeError("apply_mask: expected a patch or a batch of patches");
  const std::size_t axis = x.rank() == 4 ? 1 : 0;
  if (m.mask.size() != x.dim(axis)) {
    throw ShapeError("apply_mask: mask length " + std::to_string(m.mask.size()) + " vs " +
                     std::to_string(x.dim(axis)) + " bands");
  }
  const auto f = m.factors<T>();
  return nn::scale_axis(x, axis, std::span<const T>(f));
}

struct Selection {
  std::string dataset;
  std::size_t n_sband = 0;
  std::vector<std::size_t> bands;  // ascending
  std::vector<double> scores;      // one per band

  nlohmann::ordered_json to_json() const {
    return {{"dataset", dataset}, {"n_sband", n_sband}, {"bands", bands}, {"scores", scores}};
  }
  static Selection from_json(const nlohmann::json& j) {
    Selection s;
    try {
      s.dataset = j.at("dataset").get<std::string>();
      s.n_sband = j.at("n_sband").get<std::size_t>();
      s.bands = j.at("bands").get<std::vector<std::size_t>>();
      if (j.contains("scores")) s.scores = j.at("scores").get<std::vector<double>>();
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(std::string("selection JSON: ") + e.what());
    }
    if (s.bands.size() != s.n_sband) throw FormatError("selection JSON: band count does not match n_sband");
    return s;
  }
};

// Dataset-level selection without any training on the target: average the
// scores of n_infer seeded random windows, then binarize once.
template <typename T>
Selection select_bands(const hsi::HsiDataset& ds, const SelectorParams<T>& p, std::size_t n_sband,
                       std::size_t patch, std::uint64_t seed, std::size_t n_infer = 256,
                       std::size_t edge_budget = 1000) {
  if (patch * patch != p.hw) {
    throw ShapeError("select_bands: patch " + std::to_string(patch) + "x" + std::to_string(patch) +
                     " does not match selector hw " + std::to_string(p.hw));
  }
  if (n_infer == 0) throw ValidationError("n_infer must be positive");
  nn::NoGradGuard no_grad;
  Rng rng(seed);
  std::vector<double> mean(ds.n_band, 0.0);
  for (std::size_t i = 0; i < n_infer; ++i) {
    const auto w = hsi::extract_window(ds, rng.below(ds.n_pixels()), patch, patch);
    const std::vector<T> v(w.values.begin(), w.values.end());
    const auto s = score_patch<T>(v, ds.n_band, p, edge_budget);
    for (std::size_t b = 0; b < ds.n_band; ++b) mean[b] += static_cast<double>(s[b]);
  }
  for (auto& v : mean) v /= static_cast<double>(n_infer);
  const auto m = binarize(std::span<const double>(mean), n_sband);
  return {ds.name, n_sband, m.bands, mean};
}

}  // namespace m3bs::selector
