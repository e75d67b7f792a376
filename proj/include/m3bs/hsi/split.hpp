#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "m3bs/errors.hpp"
#include "m3bs/hsi/dataset.hpp"
#include "m3bs/numerics/rng.hpp"
#include "m3bs/numerics/tensor.hpp"

namespace m3bs::hsi {

struct SplitSpec {
  double train_fraction = 0.1;
  double support_ratio = 0.3;  // support : query = 3 : 7
  std::uint64_t seed = 0;
};

struct Split {
  std::vector<std::size_t> support, query, test;

  std::vector<std::size_t> train() const {
    std::vector<std::size_t> t = support;
    t.insert(t.end(), query.begin(), query.end());
    std::sort(t.begin(), t.end());
    return t;
  }
};

// Stratified center-pixel split.  Each class contributes
// max(1, round(train_fraction * n_c)) train pixels (at most n_c - 1, so the
// test set keeps every class too); the shuffled train pool is then cut
// support_ratio : (1 - support_ratio).  Index sets are returned sorted.
inline Split split(const HsiDataset& ds, const SplitSpec& spec) {
  if (!(spec.train_fraction > 0.0 && spec.train_fraction < 1.0)) {
    throw ValidationError("train fraction must lie in (0, 1)");
  }
  if (!(spec.support_ratio > 0.0 && spec.support_ratio < 1.0)) {
    throw ValidationError("support ratio must lie in (0, 1)");
  }
  std::vector<std::vector<std::size_t>> by_class(ds.n_class + 1);
  for (std::size_t p = 0; p < ds.labels.size(); ++p) {
    const auto l = ds.labels[p];
    if (l == 0) continue;
    if (l > ds.n_class) throw ValidationError("label exceeds n_class");
    by_class[l].push_back(p);
  }
  Rng rng(spec.seed);
  Split out;
  std::vector<std::size_t> train;
  for (std::size_t c = 1; c <= ds.n_class; ++c) {
    auto& pix = by_class[c];
    if (pix.size() < 2) {
      throw ValidationError("stratification error: class " + std::to_string(c) + " has " +
                            std::to_string(pix.size()) + " labeled pixel(s), need at least 2");
    }
    rng.shuffle(pix.begin(), pix.end());
    auto n_train = static_cast<std::size_t>(std::llround(spec.train_fraction * static_cast<double>(pix.size())));
    n_train = std::clamp<std::size_t>(n_train, 1, pix.size() - 1);
    train.insert(train.end(), pix.begin(), pix.begin() + static_cast<std::ptrdiff_t>(n_train));
    out.test.insert(out.test.end(), pix.begin() + static_cast<std::ptrdiff_t>(n_train), pix.end());
  }
  rng.shuffle(train.begin(), train.end());
  const auto n_support = static_cast<std::size_t>(std::llround(spec.support_ratio * static_cast<double>(train.size())));
  out.support.assign(train.begin(), train.begin() + static_cast<std::ptrdiff_t>(n_support));
  out.query.assign(train.begin() + static_cast<std::ptrdiff_t>(n_support), train.end());
  std::sort(out.support.begin(), out.support.end());
  std::sort(out.query.begin(), out.query.end());
  std::sort(out.test.begin(), out.test.end());
  return out;
}

// Shuffled mini-batches of pixel indices.  The order depends only on
// (seed, epoch); the final short batch is kept.
inline std::vector<std::vector<std::size_t>> batch_iter(std::span<const std::size_t> indices, std::size_t n_batch,
                                                        std::uint64_t seed, std::uint64_t epoch) {
  if (n_batch == 0) throw ValidationError("batch size must be positive");
  std::vector<std::size_t> order(indices.begin(), indices.end());
  Rng rng(Rng::mix(seed, epoch));
  rng.shuffle(order.begin(), order.end());
  std::vector<std::vector<std::size_t>> batches;
  for (std::size_t i = 0; i < order.size(); i += n_batch) {
    const std::size_t end = std::min(order.size(), i + n_batch);
    batches.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(i), order.begin() + static_cast<std::ptrdiff_t>(end));
  }
  return batches;
}

template <typename T>
struct Batch {
  nn::Tensor<T> x;          // [B, n_band, h, w]
  std::vector<int> labels;  // 1-based
};

template <typename T = float>
Batch<T> make_batch(const HsiDataset& ds, std::span<const std::size_t> pixels, std::size_t patch) {
  if (pixels.empty()) throw ValidationError("empty batch");
  const std::size_t per = ds.n_band * patch * patch;
  std::vector<T> values(pixels.size() * per);
  Batch<T> b;
  b.labels.reserve(pixels.size());
  for (std::size_t i = 0; i < pixels.size(); ++i) {
    const Patch p = extract_patch(ds, pixels[i], patch, patch);
    std::copy(p.values.begin(), p.values.end(), values.begin() + static_cast<std::ptrdiff_t>(i * per));
    b.labels.push_back(p.center_label);
  }
  b.x = nn::Tensor<T>::from({pixels.size(), ds.n_band, patch, patch}, std::move(values));
  return b;
}

}  // namespace m3bs::hsi
