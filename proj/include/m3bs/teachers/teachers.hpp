#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <map>
#include <numeric>
#include <set>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "m3bs/errors.hpp"
#include "m3bs/hsi/dataset.hpp"
#include "m3bs/hsi/stats.hpp"
#include "m3bs/numerics/ops.hpp"
#include "m3bs/numerics/optim.hpp"
#include "m3bs/numerics/rng.hpp"

namespace m3bs::teachers {

struct TeacherSelection {
  std::string teacher;
  std::string dataset;
  std::vector<std::size_t> bands;  // in selection (rank) order
  std::size_t n_band = 0;

  // Rank score 1 - r / |bands| for the r-th selected band, 0 elsewhere.
  std::vector<double> rank_scores() const {
    std::vector<double> s(n_band, 0.0);
    for (std::size_t r = 0; r < bands.size(); ++r)
      s[bands[r]] = 1.0 - static_cast<double>(r) / static_cast<double>(bands.size());
    return s;
  }
  std::vector<std::size_t> sorted_bands() const {
    auto b = bands;
    std::sort(b.begin(), b.end());
    return b;
  }
};

struct TeacherConfig {
  std::size_t wrapper_budget = 0;  // candidate evaluations; 0 -> exhaustive
  double wrapper_holdout = 0.5;
  std::size_t embedding_epochs = 200;
  double embedding_lr = 0.05;
  double embedding_l1 = 0.01;
  double embedding_l2 = 1e-3;
  std::uint64_t seed = 0;
};

namespace detail {

inline void check_request(const hsi::HsiDataset& ds, std::size_t n_sband, bool allow_all) {
  if (n_sband == 0) throw ValidationError("n_sband must be positive");
  if (allow_all ? n_sband > ds.n_band : n_sband >= ds.n_band) {
    throw ValidationError("n_sband = " + std::to_string(n_sband) + " is out of range for " +
                          std::to_string(ds.n_band) + " bands");
  }
}

inline std::vector<std::size_t> labeled_or(const hsi::HsiDataset& ds, std::span<const std::size_t> pixels) {
  std::vector<std::size_t> out(pixels.begin(), pixels.end());
  if (out.empty()) out = ds.labeled_pixels();
  for (auto p : out)
    if (p >= ds.n_pixels() || ds.labels[p] == 0) throw ValidationError("teacher pixels must be labeled");
  if (out.empty()) throw ValidationError("teacher needs labeled pixels");
  return out;
}

inline double pearson(const float* a, const float* b, std::span<const std::size_t> pixels) {
  double ma = 0, mb = 0;
  for (auto p : pixels) {
    ma += a[p];
    mb += b[p];
  }
  const double n = static_cast<double>(pixels.size());
  ma /= n;
  mb /= n;
  double sab = 0, sa = 0, sb = 0;
  for (auto p : pixels) {
    const double da = a[p] - ma, db = b[p] - mb;
    sab += da * db;
    sa += da * da;
    sb += db * db;
  }
  if (sa <= 0 || sb <= 0) return 0.0;
  return sab / std::sqrt(sa * sb);
}

}  // namespace detail

// Greedy relevance-minus-redundancy selection: relevance is the band's F
// statistic divided by the largest F, redundancy the mean |corr| with the
// bands already chosen.
inline TeacherSelection filter_teacher(const hsi::HsiDataset& ds, std::size_t n_sband,
                                       std::span<const std::size_t> pixels = {}) {
  detail::check_request(ds, n_sband, false);
  const auto pix = detail::labeled_or(ds, pixels);
  auto f = hsi::band_f_statistics(ds, pix);
  double fmax = 0;
  for (double v : f)
    if (std::isfinite(v)) fmax = std::max(fmax, v);
  std::vector<double> rel(ds.n_band);
  for (std::size_t b = 0; b < ds.n_band; ++b) rel[b] = std::isinf(f[b]) ? 1.0 : (fmax > 0 ? f[b] / fmax : 0.0);
  const std::size_t hw = ds.n_pixels();
  std::vector<double> red_sum(ds.n_band, 0.0);
  std::vector<bool> taken(ds.n_band, false);
  TeacherSelection out{"filter", ds.name, {}, ds.n_band};
  for (std::size_t k = 0; k < n_sband; ++k) {
    std::size_t best = ds.n_band;
    double best_score = -std::numeric_limits<double>::infinity();
    for (std::size_t b = 0; b < ds.n_band; ++b) {
      if (taken[b]) continue;
      const double score = rel[b] - (k == 0 ? 0.0 : red_sum[b] / static_cast<double>(k));
      if (score > best_score) {
        best_score = score;
        best = b;
      }
    }
    taken[best] = true;
    out.bands.push_back(best);
    const float* sel = ds.cube.data() + best * hw;
    for (std::size_t b = 0; b < ds.n_band; ++b)
      if (!taken[b]) red_sum[b] += std::abs(detail::pearson(ds.cube.data() + b * hw, sel, pix));
  }
  return out;
}

// Nearest-centroid accuracy on `eval` pixels using centroids from `fit`
// restricted to `bands`.  Returns (accuracy, mean margin).
inline std::pair<double, double> nearest_centroid_score(const hsi::HsiDataset& ds, std::span<const std::size_t> bands,
                                                        std::span<const std::size_t> fit,
                                                        std::span<const std::size_t> eval) {
  const std::size_t k = ds.n_class, nb = bands.size(), hw = ds.n_pixels();
  std::vector<double> centroid((k + 1) * nb, 0.0), count(k + 1, 0.0);
  for (auto p : fit) {
    const auto c = ds.labels[p];
    count[c] += 1;
    for (std::size_t j = 0; j < nb; ++j) centroid[c * nb + j] += ds.cube[bands[j] * hw + p];
  }
  for (std::size_t c = 1; c <= k; ++c)
    for (std::size_t j = 0; j < nb; ++j) centroid[c * nb + j] /= std::max(1.0, count[c]);
  std::size_t correct = 0;
  double margin = 0;
  for (auto p : eval) {
    double best = std::numeric_limits<double>::infinity(), other = best, own = 0;
    std::size_t arg = 0;
    for (std::size_t c = 1; c <= k; ++c) {
      if (count[c] == 0) continue;
      double d = 0;
      for (std::size_t j = 0; j < nb; ++j) {
        const double diff = ds.cube[bands[j] * hw + p] - centroid[c * nb + j];
        d += diff * diff;
      }
      if (c == ds.labels[p]) own = d;
      if (d < best) {
        best = d;
        arg = c;
      }
    }
    for (std::size_t c = 1; c <= k; ++c) {
      if (count[c] == 0 || c == ds.labels[p]) continue;
      double d = 0;
      for (std::size_t j = 0; j < nb; ++j) {
        const double diff = ds.cube[bands[j] * hw + p] - centroid[c * nb + j];
        d += diff * diff;
      }
      other = std::min(other, d);
    }
    correct += arg == ds.labels[p];
    if (std::isfinite(other)) margin += std::sqrt(other) - std::sqrt(own);
  }
  const double n = static_cast<double>(eval.size());
  return {static_cast<double>(correct) / n, margin / n};
}

// Greedy forward selection scored by nearest-centroid accuracy (then margin)
// on a seeded held-out part of the pixels.  Each round evaluates at most
// budget / n_sband candidates, drawn at random when fewer than the remaining
// bands.
inline TeacherSelection wrapper_teacher(const hsi::HsiDataset& ds, std::size_t n_sband, const TeacherConfig& cfg = {},
                                        std::span<const std::size_t> pixels = {}) {
  detail::check_request(ds, n_sband, true);
  const std::size_t budget = cfg.wrapper_budget == 0 ? ds.n_band * n_sband : cfg.wrapper_budget;
  if (budget < n_sband) {
    throw ValidationError("wrapper budget " + std::to_string(budget) + " is smaller than n_sband = " +
                          std::to_string(n_sband));
  }
  auto pix = detail::labeled_or(ds, pixels);
  if (pix.size() < 2) throw ValidationError("wrapper teacher needs at least 2 pixels");
  Rng rng(Rng::mix(cfg.seed, 0x77a9));
  rng.shuffle(pix.begin(), pix.end());
  auto n_fit = static_cast<std::size_t>(std::llround((1.0 - cfg.wrapper_holdout) * static_cast<double>(pix.size())));
  n_fit = std::clamp<std::size_t>(n_fit, 1, pix.size() - 1);
  const std::span<const std::size_t> fit(pix.data(), n_fit), eval(pix.data() + n_fit, pix.size() - n_fit);
  const std::size_t per_round = budget / n_sband;
  TeacherSelection out{"wrapper", ds.name, {}, ds.n_band};
  std::vector<bool> taken(ds.n_band, false);
  for (std::size_t k = 0; k < n_sband; ++k) {
    std::vector<std::size_t> cand;
    for (std::size_t b = 0; b < ds.n_band; ++b)
      if (!taken[b]) cand.push_back(b);
    if (cand.size() > per_round) {
      rng.shuffle(cand.begin(), cand.end());
      cand.resize(per_round);
      std::sort(cand.begin(), cand.end());
    }
    std::size_t best = cand.front();
    std::pair<double, double> best_score{-1.0, -std::numeric_limits<double>::infinity()};
    auto trial = out.bands;
    trial.push_back(0);
    for (auto b : cand) {
      trial.back() = b;
      const auto s = nearest_centroid_score(ds, trial, fit, eval);
      if (s > best_score) {
        best_score = s;
        best = b;
      }
    }
    taken[best] = true;
    out.bands.push_back(best);
  }
  return out;
}

struct EmbeddingTrace {
  std::vector<double> gates;
  std::vector<double> loss;  // per epoch
};

// Per-band gates g (initialized to 1) scale pixel spectra feeding a softmax
// regression.  Adam on (g, W, b) with an L2 penalty on W, then a proximal
// L1 step on g.  Bands are ranked by |g|, lower index first on ties.
inline TeacherSelection embedding_teacher(const hsi::HsiDataset& ds, std::size_t n_sband, const TeacherConfig& cfg = {},
                                          std::span<const std::size_t> pixels = {}, EmbeddingTrace* trace = nullptr) {
  detail::check_request(ds, n_sband, false);
  const auto pix = detail::labeled_or(ds, pixels);
  const std::size_t n = pix.size(), nb = ds.n_band, k = ds.n_class, hw = ds.n_pixels();
  std::vector<double> xs(n * nb);
  std::vector<int> labels(n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t b = 0; b < nb; ++b) xs[i * nb + b] = ds.cube[b * hw + pix[i]];
    labels[i] = ds.labels[pix[i]];
  }
  const auto x = nn::Tensor<double>::from({n, nb}, std::move(xs));
  Rng rng(Rng::mix(cfg.seed, 0xe3b));
  auto gates = nn::Tensor<double>({nb}, 1.0, true);
  std::vector<double> wv(nb * k);
  for (auto& v : wv) v = rng.uniform(-0.1, 0.1);
  auto w = nn::Tensor<double>::from({nb, k}, std::move(wv), true);
  auto bias = nn::Tensor<double>({k}, 0.0, true);
  nn::ParamList<double> params{&gates, &w, &bias};
  nn::AdamState<double> adam(params, cfg.embedding_lr, 1.0);
  for (std::size_t e = 0; e < cfg.embedding_epochs; ++e) {
    nn::zero_grads(params);
    const auto l_ce = nn::softmax_cross_entropy(nn::add_bias(nn::matmul(nn::scale_columns(x, gates), w), bias),
                                                std::span<const int>(labels));
    const auto loss = nn::add(l_ce, nn::scale(nn::sum(nn::mul(w, w)), cfg.embedding_l2));
    if (!std::isfinite(loss.item())) throw TrainingError("embedding teacher loss is not finite");
    nn::backward(loss);
    nn::adam_step(params, adam);
    const double shrink = cfg.embedding_lr * cfg.embedding_l1;
    for (auto& g : gates.data()) g = std::copysign(std::max(0.0, std::abs(g) - shrink), g);
    if (trace) trace->loss.push_back(loss.item());
  }
  std::vector<double> mag(nb);
  for (std::size_t b = 0; b < nb; ++b) mag[b] = std::abs(gates[b]);
  if (trace) trace->gates = gates.values();
  std::vector<std::size_t> order(nb);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](auto a, auto c) { return mag[a] > mag[c]; });
  order.resize(n_sband);
  return {"embedding", ds.name, order, nb};
}

inline const std::vector<std::string>& teacher_ids() {
  static const std::vector<std::string> ids = {"filter", "wrapper", "embedding"};
  return ids;
}

inline TeacherSelection run_teacher(const std::string& id, const hsi::HsiDataset& ds, std::size_t n_sband,
                                    const TeacherConfig& cfg, std::span<const std::size_t> pixels = {}) {
  if (id == "filter") return filter_teacher(ds, n_sband, pixels);
  if (id == "wrapper") return wrapper_teacher(ds, n_sband, cfg, pixels);
  if (id == "embedding") return embedding_teacher(ds, n_sband, cfg, pixels);
  throw ValidationError("unknown teacher '" + id + "'");
}

// ---------------------------------------------------------------------------
// Fusion

struct TeacherLabel {
  std::vector<double> s;         // binary target, length n_band
  std::vector<std::size_t> cnt;  // votes per band
  std::vector<std::size_t> bands;
  std::uint64_t seed = 0;
};

inline std::vector<std::size_t> vote_counts(const std::vector<TeacherSelection>& sel) {
  if (sel.empty()) throw ValidationError("fusion needs at least one teacher selection");
  const std::size_t nb = sel.front().n_band;
  std::vector<std::size_t> cnt(nb, 0);
  for (const auto& t : sel) {
    if (t.n_band != nb) throw ValidationError("teacher selections disagree on n_band");
    std::set<std::size_t> uniq(t.bands.begin(), t.bands.end());
    for (auto b : uniq) {
      if (b >= nb) throw ValidationError("teacher band index out of range");
      ++cnt[b];
    }
  }
  return cnt;
}

// Bands by descending vote count; the count stratum straddling the n_sband
// cutoff is sampled uniformly without replacement.  No random numbers are
// drawn when the cutoff falls between strata.
inline TeacherLabel diversity_ensemble(const std::vector<TeacherSelection>& sel, std::size_t n_sband,
                                       std::uint64_t seed) {
  const auto cnt = vote_counts(sel);
  const std::size_t nb = cnt.size();
  if (n_sband == 0 || n_sband > nb) throw ValidationError("n_sband out of range for the ensemble");
  std::vector<std::size_t> order(nb);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return cnt[a] > cnt[b]; });
  const std::size_t cut = cnt[order[n_sband - 1]];
  TeacherLabel out;
  out.cnt = cnt;
  out.seed = seed;
  std::vector<std::size_t> stratum;
  for (auto b : order) {
    if (cnt[b] > cut) out.bands.push_back(b);
    else if (cnt[b] == cut) stratum.push_back(b);
  }
  const std::size_t need = n_sband - out.bands.size();
  if (need < stratum.size()) {
    Rng rng(seed);
    for (std::size_t i = 0; i < need; ++i) {
      const std::size_t j = i + rng.below(stratum.size() - i);
      std::swap(stratum[i], stratum[j]);
    }
  }
  out.bands.insert(out.bands.end(), stratum.begin(), stratum.begin() + static_cast<std::ptrdiff_t>(need));
  std::sort(out.bands.begin(), out.bands.end());
  out.s.assign(nb, 0.0);
  for (auto b : out.bands) out.s[b] = 1.0;
  return out;
}

// Set union; may hold more than n_sband bands.
inline TeacherLabel union_fusion(const std::vector<TeacherSelection>& sel) {
  TeacherLabel out;
  out.cnt = vote_counts(sel);
  out.s.assign(out.cnt.size(), 0.0);
  for (std::size_t b = 0; b < out.cnt.size(); ++b) {
    if (out.cnt[b] > 0) {
      out.s[b] = 1.0;
      out.bands.push_back(b);
    }
  }
  return out;
}

// Top n_sband of the averaged per-teacher score vectors (lower index on ties).
inline TeacherLabel normalized_sum_fusion(const std::vector<std::vector<double>>& scores, std::size_t n_sband) {
  if (scores.empty()) throw ValidationError("fusion needs at least one teacher score vector");
  const std::size_t nb = scores.front().size();
  if (n_sband == 0 || n_sband > nb) throw ValidationError("n_sband out of range for the fusion");
  std::vector<double> mean(nb, 0.0);
  for (const auto& s : scores) {
    if (s.size() != nb) throw ValidationError("teacher score vectors disagree on n_band");
    for (std::size_t b = 0; b < nb; ++b) mean[b] += s[b] / static_cast<double>(scores.size());
  }
  std::vector<std::size_t> order(nb);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return mean[a] > mean[b]; });
  TeacherLabel out;
  out.cnt.assign(nb, 0);
  out.bands.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_sband));
  std::sort(out.bands.begin(), out.bands.end());
  out.s.assign(nb, 0.0);
  for (auto b : out.bands) out.s[b] = 1.0;
  return out;
}

inline TeacherLabel normalized_sum_fusion(const std::vector<TeacherSelection>& sel, std::size_t n_sband) {
  std::vector<std::vector<double>> scores;
  for (const auto& t : sel) scores.push_back(t.rank_scores());
  return normalized_sum_fusion(scores, n_sband);
}

// Mean binary cross-entropy of the predicted scores against the target.
template <typename T>
nn::Tensor<T> selection_loss(const nn::Tensor<T>& scores, const TeacherLabel& label) {
  if (scores.numel() != label.s.size()) {
    throw ShapeError("selection loss: " + std::to_string(scores.numel()) + " scores vs " +
                     std::to_string(label.s.size()) + " targets");
  }
  const std::vector<T> target(label.s.begin(), label.s.end());
  return nn::binary_cross_entropy(scores, std::span<const T>(target));
}

// ---------------------------------------------------------------------------
// Cache: {teacher_id: [bands in selection order]} per dataset.

inline nlohmann::ordered_json cache_to_json(const std::vector<TeacherSelection>& sel) {
  nlohmann::ordered_json j = nlohmann::ordered_json::object();
  for (const auto& t : sel) j[t.teacher] = t.bands;
  return j;
}

// Parses and validates a cache against the dataset it describes.
inline std::vector<TeacherSelection> cache_from_json(const nlohmann::json& j, const std::string& dataset,
                                                     std::size_t n_band, std::size_t n_sband) {
  if (!j.is_object()) throw FormatError("teacher cache must be a JSON object");
  std::vector<TeacherSelection> out;
  for (const auto& id : teacher_ids()) {
    if (!j.contains(id)) continue;
    TeacherSelection t{id, dataset, {}, n_band};
    try {
      t.bands = j.at(id).get<std::vector<std::size_t>>();
    } catch (const nlohmann::json::exception&) {
      throw FormatError("teacher cache: '" + id + "' is not a list of band indices");
    }
    if (t.bands.size() != n_sband) {
      throw ValidationError("teacher cache: '" + id + "' has " + std::to_string(t.bands.size()) + " bands, expected " +
                            std::to_string(n_sband));
    }
    std::set<std::size_t> uniq(t.bands.begin(), t.bands.end());
    if (uniq.size() != t.bands.size()) throw ValidationError("teacher cache: '" + id + "' repeats a band");
    if (!uniq.empty() && *uniq.rbegin() >= n_band) throw ValidationError("teacher cache: '" + id + "' band out of range");
    out.push_back(std::move(t));
  }
  for (auto it = j.begin(); it != j.end(); ++it) {
    const auto& ids = teacher_ids();
    if (std::find(ids.begin(), ids.end(), it.key()) == ids.end()) {
      throw ValidationError("teacher cache: unknown teacher '" + it.key() + "'");
    }
  }
  return out;
}

}  // namespace m3bs::teachers
