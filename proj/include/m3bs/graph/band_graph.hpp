#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "m3bs/errors.hpp"

namespace m3bs::graph {

// A feature matrix is n_band rows of length hw (one flattened band of a
// patch per row), stored row-major.
template <typename T>
struct FeatureView {
  std::span<const T> values;
  std::size_t n_band = 0, hw = 0;

  T operator()(std::size_t i, std::size_t k) const { return values[i * hw + k]; }
};

struct Edge {
  std::size_t i = 0, j = 0;  // i < j
  double weight = 0.0;
};

struct BandGraph {
  std::size_t n_band = 0;
  std::vector<double> A;  // n_band x n_band, symmetric, zero diagonal
  std::vector<double> P;  // D^{-1/2} (A + I) D^{-1/2}
  double theta = 0.0;     // smallest kept weight (0 when nothing is kept)
  std::vector<Edge> edges;

  std::size_t edge_count() const { return edges.size(); }
  double a(std::size_t i, std::size_t j) const { return A[i * n_band + j]; }
  double p(std::size_t i, std::size_t j) const { return P[i * n_band + j]; }
};

inline std::vector<double> adjacency_spa(std::size_t n_band) {
  if (n_band < 2) throw ValidationError("band graph needs at least 2 bands");
  std::vector<double> a(n_band * n_band, 0.0);
  const double n = static_cast<double>(n_band);
  for (std::size_t i = 0; i < n_band; ++i)
    for (std::size_t j = 0; j < n_band; ++j)
      if (i != j) a[i * n_band + j] = std::exp(-std::abs(static_cast<double>(i) - static_cast<double>(j)) / n);
  return a;
}

template <typename T>
std::vector<double> adjacency_spec(const FeatureView<T>& x) {
  if (x.n_band < 2) throw ValidationError("band graph needs at least 2 bands");
  if (x.values.size() != x.n_band * x.hw || x.hw == 0) throw ShapeError("feature matrix size mismatch");
  const std::size_t n = x.n_band;
  std::vector<double> a(n * n, 0.0);
  const double hw = static_cast<double>(x.hw);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) {
      double d2 = 0.0;
      for (std::size_t k = 0; k < x.hw; ++k) {
        const double d = static_cast<double>(x(i, k)) - static_cast<double>(x(j, k));
        d2 += d * d;
      }
      if (!std::isfinite(d2)) throw ValidationError("feature matrix must be finite");
      const double w = std::exp(-std::sqrt(d2) / hw);
      a[i * n + j] = w;
      a[j * n + i] = w;
    }
  }
  return a;
}

// Renormalized propagation matrix of a symmetric zero-diagonal adjacency.
inline std::vector<double> propagation(const std::vector<double>& A, std::size_t n) {
  std::vector<double> inv_sqrt(n);
  for (std::size_t i = 0; i < n; ++i) {
    double d = 1.0;
    for (std::size_t j = 0; j < n; ++j) d += A[i * n + j];
    inv_sqrt[i] = 1.0 / std::sqrt(d);
  }
  std::vector<double> P(n * n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j)
      P[i * n + j] = ((i == j ? 1.0 : 0.0) + A[i * n + j]) * inv_sqrt[i] * inv_sqrt[j];
  return P;
}

// Keeps the edge_budget - 1 heaviest undirected edges of A_spa + A_spec,
// ordering equal weights by (i, j), so the edge count stays below the budget.
// `spatial = false` drops the band-index kernel (used by equivariance checks).
template <typename T>
BandGraph build_graph(const FeatureView<T>& x, std::size_t edge_budget = 1000, bool spatial = true) {
  if (edge_budget == 0) throw ValidationError("edge budget must be positive");
  const std::size_t n = x.n_band;
  const auto spa = spatial ? adjacency_spa(n) : std::vector<double>(n * n, 0.0);
  const auto spec = adjacency_spec(x);
  std::vector<Edge> all;
  all.reserve(n * (n - 1) / 2);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) all.push_back({i, j, spa[i * n + j] + spec[i * n + j]});
  const auto heavier = [](const Edge& a, const Edge& b) {
    if (a.weight != b.weight) return a.weight > b.weight;
    return a.i != b.i ? a.i < b.i : a.j < b.j;
  };
  const std::size_t keep = std::min(all.size(), edge_budget - 1);
  if (keep < all.size()) {
    std::nth_element(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(keep), all.end(), heavier);
    all.resize(keep);
  }
  std::sort(all.begin(), all.end(), heavier);
  BandGraph g;
  g.n_band = n;
  g.A.assign(n * n, 0.0);
  for (const auto& e : all) {
    g.A[e.i * n + e.j] = e.weight;
    g.A[e.j * n + e.i] = e.weight;
  }
  g.theta = all.empty() ? 0.0 : all.back().weight;
  g.edges = std::move(all);
  g.P = propagation(g.A, n);
  return g;
}

inline void write_adjacency_csv(const BandGraph& g, std::ostream& out) {
  out << "band_i,band_j,weight\n";
  out.precision(17);
  for (std::size_t i = 0; i < g.n_band; ++i)
    for (std::size_t j = i + 1; j < g.n_band; ++j)
      if (g.a(i, j) != 0.0) out << i << ',' << j << ',' << g.a(i, j) << '\n';
}

}  // namespace m3bs::graph
