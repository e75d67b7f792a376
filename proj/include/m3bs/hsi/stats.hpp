#pragma once

#include <algorithm>
#include <cstddef>
#include <limits>
#include <vector>

#include "m3bs/errors.hpp"
#include "m3bs/hsi/dataset.hpp"

namespace m3bs::hsi {

// One-way ANOVA F statistic of every band across classes, computed over
// `pixels` (all labeled pixels when empty).  A band with zero within-class
// variance gets F = 0 if its class means coincide and +inf otherwise.
inline std::vector<double> band_f_statistics(const HsiDataset& ds, std::vector<std::size_t> pixels = {}) {
  if (pixels.empty()) pixels = ds.labeled_pixels();
  const std::size_t k = ds.n_class;
  std::vector<double> count(k + 1, 0.0);
  for (auto p : pixels) {
    if (ds.labels[p] == 0) throw ValidationError("F statistic over an unlabeled pixel");
    count[ds.labels[p]] += 1.0;
  }
  std::size_t groups = 0;
  for (std::size_t c = 1; c <= k; ++c) groups += count[c] > 0 ? 1 : 0;
  const double n = static_cast<double>(pixels.size());
  if (groups < 2 || n <= static_cast<double>(groups)) {
    throw ValidationError("F statistic needs at least two classes and more pixels than classes");
  }
  std::vector<double> f(ds.n_band, 0.0);
  const std::size_t hw = ds.n_pixels();
  std::vector<double> sum(k + 1), sq(k + 1);
  for (std::size_t b = 0; b < ds.n_band; ++b) {
    std::fill(sum.begin(), sum.end(), 0.0);
    std::fill(sq.begin(), sq.end(), 0.0);
    const float* band = ds.cube.data() + b * hw;
    double total = 0.0;
    for (auto p : pixels) {
      const double v = band[p];
      sum[ds.labels[p]] += v;
      sq[ds.labels[p]] += v * v;
      total += v;
    }
    const double grand = total / n;
    double between = 0.0, within = 0.0;
    for (std::size_t c = 1; c <= k; ++c) {
      if (count[c] == 0) continue;
      const double m = sum[c] / count[c];
      between += count[c] * (m - grand) * (m - grand);
      within += std::max(0.0, sq[c] - count[c] * m * m);
    }
    const double ms_between = between / static_cast<double>(groups - 1);
    const double ms_within = within / (n - static_cast<double>(groups));
    if (ms_within <= 1e-12 * std::max(1.0, ms_between)) {
      f[b] = ms_between > 1e-12 ? std::numeric_limits<double>::infinity() : 0.0;
    } else {
      f[b] = ms_between / ms_within;
    }
  }
  return f;
}

}  // namespace m3bs::hsi
