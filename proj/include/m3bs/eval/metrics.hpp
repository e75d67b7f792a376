#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "m3bs/errors.hpp"

namespace m3bs::eval {

// Rows are true classes, columns predicted classes; labels are 1-based.
struct ConfusionMatrix {
  std::size_t n_class = 0;
  std::vector<std::uint64_t> counts;

  explicit ConfusionMatrix(std::size_t n = 0) : n_class(n), counts(n * n, 0) {}

  std::uint64_t& at(std::size_t t, std::size_t p) { return counts[t * n_class + p]; }
  std::uint64_t at(std::size_t t, std::size_t p) const { return counts[t * n_class + p]; }

  void add(int truth, int pred) {
    if (truth < 1 || pred < 1 || static_cast<std::size_t>(truth) > n_class ||
        static_cast<std::size_t>(pred) > n_class) {
      throw ValidationError("label pair (" + std::to_string(truth) + ", " + std::to_string(pred) +
                            ") outside 1.." + std::to_string(n_class));
    }
    ++at(static_cast<std::size_t>(truth) - 1, static_cast<std::size_t>(pred) - 1);
  }

  std::uint64_t total() const {
    std::uint64_t s = 0;
    for (auto c : counts) s += c;
    return s;
  }
};

inline ConfusionMatrix confusion(std::span<const int> truth, std::span<const int> pred, std::size_t n_class) {
  if (truth.size() != pred.size()) throw ShapeError("confusion: truth and prediction lengths differ");
  ConfusionMatrix cm(n_class);
  for (std::size_t i = 0; i < truth.size(); ++i) cm.add(truth[i], pred[i]);
  return cm;
}

struct Metrics {
  double oa = 0, aa = 0, kappa = 0;
  std::vector<double> per_class;  // recall per true class
};

inline Metrics metrics(const ConfusionMatrix& cm) {
  const std::size_t n = cm.n_class;
  if (n == 0) throw ValidationError("metrics: empty confusion matrix");
  std::vector<double> row(n, 0.0), col(n, 0.0);
  double diag = 0.0, total = 0.0;
  for (std::size_t t = 0; t < n; ++t) {
    for (std::size_t p = 0; p < n; ++p) {
      const double c = static_cast<double>(cm.at(t, p));
      row[t] += c;
      col[p] += c;
      total += c;
    }
    diag += static_cast<double>(cm.at(t, t));
  }
  Metrics m;
  for (std::size_t t = 0; t < n; ++t) {
    if (row[t] == 0.0) {
      throw ValidationError("class " + std::to_string(t + 1) + " has no evaluated pixels; its recall is undefined");
    }
    m.per_class.push_back(static_cast<double>(cm.at(t, t)) / row[t]);
    m.aa += m.per_class.back();
  }
  m.aa /= static_cast<double>(n);
  m.oa = diag / total;
  double pe = 0.0;
  for (std::size_t c = 0; c < n; ++c) pe += row[c] * col[c];
  pe /= total * total;
  // pe == 1 only when every pixel is one class predicted perfectly.
  m.kappa = pe < 1.0 ? (m.oa - pe) / (1.0 - pe) : 1.0;
  return m;
}

}  // namespace m3bs::eval
