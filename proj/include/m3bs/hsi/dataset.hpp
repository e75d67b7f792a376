#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include "m3bs/errors.hpp"

namespace m3bs::hsi {

// A labeled hyperspectral cube.  cube is band-major (band, row, col);
// labels are row-major with 0 = unlabeled background and classes 1..n_class.
struct HsiDataset {
  std::string name;
  std::size_t n_band = 0;
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t n_class = 0;
  std::vector<float> cube;
  std::vector<std::uint16_t> labels;

  std::size_t n_pixels() const { return height * width; }
  float at(std::size_t band, std::size_t row, std::size_t col) const {
    return cube[(band * height + row) * width + col];
  }
  std::uint16_t label_at(std::size_t pixel) const { return labels[pixel]; }

  // Flat pixel indices (row * width + col) of labeled pixels, raster order.
  std::vector<std::size_t> labeled_pixels() const {
    std::vector<std::size_t> out;
    for (std::size_t p = 0; p < labels.size(); ++p)
      if (labels[p] != 0) out.push_back(p);
    return out;
  }

  std::vector<std::size_t> class_counts() const {
    std::vector<std::size_t> counts(n_class + 1, 0);
    for (auto l : labels)
      if (l <= n_class) ++counts[l];
    return counts;
  }

  void validate() const {
    if (n_band == 0 || height == 0 || width == 0 || n_class == 0) {
      throw ValidationError("dataset '" + name + "': dimensions must be positive");
    }
    if (cube.size() != n_band * height * width) throw ValidationError("dataset '" + name + "': cube size mismatch");
    if (labels.size() != height * width) throw ValidationError("dataset '" + name + "': label raster size mismatch");
    for (float v : cube) {
      if (!std::isfinite(v)) throw ValidationError("dataset '" + name + "': non-finite reflectance");
    }
    std::vector<std::size_t> counts(n_class + 1, 0);
    for (auto l : labels) {
      if (l > n_class) {
        throw ValidationError("dataset '" + name + "': label " + std::to_string(l) + " exceeds n_class");
      }
      ++counts[l];
    }
    for (std::size_t c = 1; c <= n_class; ++c) {
      if (counts[c] == 0) throw ValidationError("dataset '" + name + "': class " + std::to_string(c) + " has no pixels");
    }
  }
};

// Band-wise min-max scaling to [0, 1].  Constant bands become 0.  Applying
// it to an already normalized cube leaves every value bit-identical.
inline void normalize_bands(HsiDataset& ds) {
  const std::size_t hw = ds.n_pixels();
  for (std::size_t b = 0; b < ds.n_band; ++b) {
    float* band = ds.cube.data() + b * hw;
    const auto [lo, hi] = std::minmax_element(band, band + hw);
    const float mn = *lo, range = *hi - *lo;
    for (std::size_t i = 0; i < hw; ++i) band[i] = range > 0.0f ? (band[i] - mn) / range : 0.0f;
  }
}

// An n_band x h x w window around one pixel, zero-padded outside the image.
struct Patch {
  std::vector<float> values;
  std::size_t n_band = 0, height = 0, width = 0;
  int center_label = 0;
  std::size_t row = 0, col = 0;
};

// Window centred on `pixel` (offset h/2, w/2) regardless of its label.
inline Patch extract_window(const HsiDataset& ds, std::size_t pixel, std::size_t h = 33, std::size_t w = 33) {
  if (pixel >= ds.n_pixels()) throw ValidationError("pixel index out of range");
  if (h == 0 || w == 0) throw ValidationError("patch size must be positive");
  Patch p;
  p.n_band = ds.n_band;
  p.height = h;
  p.width = w;
  p.row = pixel / ds.width;
  p.col = pixel % ds.width;
  p.center_label = ds.labels[pixel];
  p.values.assign(ds.n_band * h * w, 0.0f);
  const auto r0 = static_cast<std::ptrdiff_t>(p.row) - static_cast<std::ptrdiff_t>(h / 2);
  const auto c0 = static_cast<std::ptrdiff_t>(p.col) - static_cast<std::ptrdiff_t>(w / 2);
  for (std::size_t b = 0; b < ds.n_band; ++b) {
    for (std::size_t y = 0; y < h; ++y) {
      const auto sr = r0 + static_cast<std::ptrdiff_t>(y);
      if (sr < 0 || sr >= static_cast<std::ptrdiff_t>(ds.height)) continue;
      const float* src = ds.cube.data() + (b * ds.height + static_cast<std::size_t>(sr)) * ds.width;
      float* dst = p.values.data() + (b * h + y) * w;
      for (std::size_t x = 0; x < w; ++x) {
        const auto sc = c0 + static_cast<std::ptrdiff_t>(x);
        if (sc >= 0 && sc < static_cast<std::ptrdiff_t>(ds.width)) dst[x] = src[sc];
      }
    }
  }
  return p;
}

// Training patch around a labeled pixel.
inline Patch extract_patch(const HsiDataset& ds, std::size_t pixel, std::size_t h = 33, std::size_t w = 33) {
  if (pixel >= ds.n_pixels()) throw ValidationError("pixel index out of range");
  if (ds.labels[pixel] == 0) throw ValidationError("cannot extract a training patch at an unlabeled pixel");
  return extract_window(ds, pixel, h, w);
}

}  // namespace m3bs::hsi
