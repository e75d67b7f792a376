#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <map>
#include <numbers>
#include <set>
#include <string>
#include <vector>

#include "m3bs/errors.hpp"
#include "m3bs/hsi/dataset.hpp"
#include "m3bs/numerics/rng.hpp"

namespace m3bs::hsi {

struct SyntheticSpec {
  std::string name = "synthetic";
  std::size_t n_band = 0, n_class = 0, height = 0, width = 0;
  std::vector<std::size_t> informative;             // planted discriminative bands
  std::map<std::size_t, std::size_t> redundancy;    // band -> parent band (noisy copy)
  double sigma = 0.05;
  std::vector<std::vector<double>> class_means;     // [n_class][informative.size()]
  std::size_t n_regions = 0;                        // 0 -> 4 * n_class

  void validate() const {
    if (n_band == 0 || n_class == 0 || height == 0 || width == 0) {
      throw ValidationError("synthetic spec: dimensions must be positive");
    }
    if (!(sigma >= 0.0) || !std::isfinite(sigma)) throw ValidationError("synthetic spec: sigma must be finite and >= 0");
    std::set<std::size_t> inf(informative.begin(), informative.end());
    if (inf.size() != informative.size()) throw ValidationError("synthetic spec: duplicate informative band");
    for (auto b : informative)
      if (b >= n_band) throw ValidationError("synthetic spec: informative band out of range");
    if (class_means.size() != n_class) throw ValidationError("synthetic spec: class_means must have n_class rows");
    for (const auto& row : class_means) {
      if (row.size() != informative.size()) {
        throw ValidationError("synthetic spec: class_means rows must cover every informative band");
      }
    }
    for (const auto& [band, parent] : redundancy) {
      if (band >= n_band || parent >= n_band) throw ValidationError("synthetic spec: redundancy band out of range");
      if (inf.count(band)) throw ValidationError("synthetic spec: an informative band cannot be a redundant copy");
      if (redundancy.count(parent)) throw ValidationError("synthetic spec: redundancy chains are not supported");
      if (band == parent) throw ValidationError("synthetic spec: band cannot copy itself");
    }
  }
};

struct SyntheticDataset {
  HsiDataset data;
  std::vector<std::size_t> informative;  // sorted
  std::vector<std::size_t> redundant;    // sorted
};

namespace detail {

// Multi-source region growing: random seeds, then repeatedly a random
// frontier pixel claims its unassigned 4-neighbours.
inline std::vector<std::size_t> grow_regions(std::size_t h, std::size_t w, std::size_t n_regions, Rng& rng) {
  const std::size_t n = h * w;
  constexpr std::size_t kNone = static_cast<std::size_t>(-1);
  std::vector<std::size_t> region(n, kNone);
  std::vector<std::size_t> frontier;
  std::vector<std::size_t> pixels(n);
  for (std::size_t i = 0; i < n; ++i) pixels[i] = i;
  rng.shuffle(pixels.begin(), pixels.end());
  for (std::size_t r = 0; r < n_regions; ++r) {
    region[pixels[r]] = r;
    frontier.push_back(pixels[r]);
  }
  while (!frontier.empty()) {
    const std::size_t k = rng.below(frontier.size());
    const std::size_t p = frontier[k];
    const std::size_t y = p / w, x = p % w;
    bool grew = false;
    const std::size_t nbr[4] = {y > 0 ? p - w : kNone, y + 1 < h ? p + w : kNone, x > 0 ? p - 1 : kNone,
                                x + 1 < w ? p + 1 : kNone};
    for (auto q : nbr) {
      if (q == kNone || region[q] != kNone) continue;
      region[q] = region[p];
      frontier.push_back(q);
      grew = true;
      break;
    }
    if (!grew) {
      frontier[k] = frontier.back();
      frontier.pop_back();
    }
  }
  return region;
}

inline double baseline(std::size_t band, std::size_t n_band) {
  return 0.5 + 0.3 * std::sin(3.0 * std::numbers::pi * static_cast<double>(band) / static_cast<double>(n_band));
}

}  // namespace detail

// Pixel spectra: class mean on informative bands, parent value plus noise on
// redundant bands, a smooth class-independent baseline elsewhere, plus
// i.i.d. N(0, sigma) on every band.  The cube is min-max normalized per band.
inline SyntheticDataset generate_synthetic(const SyntheticSpec& spec, std::uint64_t seed) {
  spec.validate();
  const std::size_t n_regions = spec.n_regions == 0 ? 4 * spec.n_class : spec.n_regions;
  const std::size_t hw = spec.height * spec.width;
  if (spec.n_class > n_regions || n_regions > hw) {
    throw ValidationError("generation error: cannot fit " + std::to_string(spec.n_class) + " classes into " +
                          std::to_string(n_regions) + " regions of a " + std::to_string(spec.height) + "x" +
                          std::to_string(spec.width) + " image");
  }
  Rng rng(seed);
  const auto region = detail::grow_regions(spec.height, spec.width, n_regions, rng);
  std::vector<std::uint16_t> region_class(n_regions);
  for (std::size_t r = 0; r < n_regions; ++r) {
    region_class[r] = static_cast<std::uint16_t>(r < spec.n_class ? r + 1 : 1 + rng.below(spec.n_class));
  }
  SyntheticDataset out;
  HsiDataset& ds = out.data;
  ds.name = spec.name;
  ds.n_band = spec.n_band;
  ds.n_class = spec.n_class;
  ds.height = spec.height;
  ds.width = spec.width;
  ds.labels.resize(hw);
  for (std::size_t p = 0; p < hw; ++p) ds.labels[p] = region_class[region[p]];

  std::vector<long> informative_slot(spec.n_band, -1);
  for (std::size_t j = 0; j < spec.informative.size(); ++j) informative_slot[spec.informative[j]] = static_cast<long>(j);

  std::vector<double> cube(spec.n_band * hw);
  // Parents first so that copies see their final value.
  for (std::size_t b = 0; b < spec.n_band; ++b) {
    if (spec.redundancy.count(b)) continue;
    const double base = detail::baseline(b, spec.n_band);
    for (std::size_t p = 0; p < hw; ++p) {
      const double mu = informative_slot[b] >= 0
                            ? spec.class_means[ds.labels[p] - 1][static_cast<std::size_t>(informative_slot[b])]
                            : base;
      cube[b * hw + p] = mu + (spec.sigma > 0 ? rng.normal(0.0, spec.sigma) : 0.0);
    }
  }
  for (const auto& [band, parent] : spec.redundancy) {
    for (std::size_t p = 0; p < hw; ++p) {
      cube[band * hw + p] = cube[parent * hw + p] + (spec.sigma > 0 ? rng.normal(0.0, spec.sigma) : 0.0);
    }
  }
  ds.cube.assign(cube.begin(), cube.end());
  normalize_bands(ds);

  out.informative = spec.informative;
  std::sort(out.informative.begin(), out.informative.end());
  for (const auto& [band, parent] : spec.redundancy)
    if (informative_slot[parent] >= 0) out.redundant.push_back(band);
  return out;
}

// A spec with `n_informative` contiguous informative bands at a seeded
// offset.  Each class gets a distinct high/low code over those bands
// (0.5 +/- contrast, jittered) and every band separates at least two classes.
inline SyntheticSpec planted_spec(std::size_t n_band, std::size_t n_class, std::size_t n_informative,
                                  std::size_t height, std::size_t width, double sigma, std::uint64_t seed,
                                  double contrast = 0.15) {
  if (n_informative == 0 || n_informative > n_band) throw ValidationError("planted spec: bad informative count");
  if (n_class < 2) throw ValidationError("planted spec: need at least two classes");
  if (n_informative < 63 && (std::uint64_t{1} << n_informative) < n_class) {
    throw ValidationError("planted spec: too few informative bands to give every class a distinct code");
  }
  Rng rng(Rng::mix(seed, 0x5eed));
  SyntheticSpec s;
  s.n_band = n_band;
  s.n_class = n_class;
  s.height = height;
  s.width = width;
  s.sigma = sigma;
  const std::size_t offset = rng.below(n_band - n_informative + 1);
  for (std::size_t j = 0; j < n_informative; ++j) s.informative.push_back(offset + j);
  std::vector<std::vector<int>> code;
  for (int attempt = 0;; ++attempt) {
    if (attempt > 10000) throw ValidationError("planted spec: could not draw distinct class codes");
    code.assign(n_class, std::vector<int>(n_informative));
    for (auto& row : code)
      for (auto& v : row) v = rng.below(2) ? 1 : -1;
    bool ok = std::set<std::vector<int>>(code.begin(), code.end()).size() == n_class;
    for (std::size_t j = 0; ok && j < n_informative; ++j) {
      bool pos = false, neg = false;
      for (const auto& row : code) (row[j] > 0 ? pos : neg) = true;
      ok = pos && neg;
    }
    if (ok) break;
  }
  s.class_means.assign(n_class, std::vector<double>(n_informative));
  for (std::size_t c = 0; c < n_class; ++c)
    for (std::size_t j = 0; j < n_informative; ++j)
      s.class_means[c][j] = 0.5 + contrast * code[c][j] * (1.0 + 0.2 * rng.uniform(-1.0, 1.0));
  return s;
}

}  // namespace m3bs::hsi
