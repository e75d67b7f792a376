#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <numeric>
#include <ostream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "m3bs/classifier/classifier.hpp"
#include "m3bs/errors.hpp"
#include "m3bs/eval/metrics.hpp"
#include "m3bs/hsi/dataset.hpp"
#include "m3bs/hsi/split.hpp"
#include "m3bs/numerics/optim.hpp"

namespace m3bs::eval {

struct EvalConfig {
  std::size_t repeats = 30;
  std::size_t epochs = 40;
  std::size_t batch = 64;
  double lr = 0.005;
  std::size_t patch = 9;
  std::string profile = "desk";
  double train_fraction = 0.1;
  std::uint64_t seed = 0;

  void validate() const {
    if (repeats == 0) throw ValidationError("repeats must be positive");
    if (epochs == 0 || batch == 0) throw ValidationError("epochs and batch must be positive");
    if (!(lr > 0.0)) throw ValidationError("lr must be positive");
    if (!(train_fraction > 0.0 && train_fraction < 1.0)) throw ValidationError("train_fraction must be in (0, 1)");
    classifier::Profile::by_name(profile, patch).resolutions();
  }
};

// Copy of the dataset restricted to the listed bands (in the given order).
inline hsi::HsiDataset subset_bands(const hsi::HsiDataset& ds, const std::vector<std::size_t>& bands) {
  if (bands.empty()) throw ValidationError("band subset is empty");
  hsi::HsiDataset out;
  out.name = ds.name;
  out.n_band = bands.size();
  out.height = ds.height;
  out.width = ds.width;
  out.n_class = ds.n_class;
  out.labels = ds.labels;
  const std::size_t hw = ds.n_pixels();
  out.cube.resize(bands.size() * hw);
  for (std::size_t i = 0; i < bands.size(); ++i) {
    if (bands[i] >= ds.n_band) {
      throw ValidationError("band " + std::to_string(bands[i]) + " out of range for " + std::to_string(ds.n_band) +
                            " bands");
    }
    std::copy_n(ds.cube.begin() + static_cast<std::ptrdiff_t>(bands[i] * hw), hw,
                out.cube.begin() + static_cast<std::ptrdiff_t>(i * hw));
  }
  return out;
}

// k distinct bands drawn uniformly, ascending.  Baseline for selection.
inline std::vector<std::size_t> random_bands(std::size_t n_band, std::size_t k, std::uint64_t seed) {
  if (k == 0 || k > n_band) throw ValidationError("random_bands: need 0 < k <= n_band");
  std::vector<std::size_t> all(n_band);
  std::iota(all.begin(), all.end(), std::size_t{0});
  Rng rng(seed);
  rng.shuffle(all.begin(), all.end());
  all.resize(k);
  std::sort(all.begin(), all.end());
  return all;
}

// Adam on the cross-entropy over shuffled minibatches of `train`.
inline classifier::ClassifierParams<float> train_classifier(const hsi::HsiDataset& ds,
                                                            const std::vector<std::size_t>& train,
                                                            const EvalConfig& cfg, std::uint64_t seed) {
  if (train.empty()) throw ValidationError("classifier training set is empty");
  auto p = classifier::ClassifierParams<float>::init(classifier::Profile::by_name(cfg.profile, cfg.patch), ds.n_band,
                                                     ds.n_class, Rng::mix(seed, 1));
  auto params = p.parameters();
  nn::AdamState<float> adam(params, cfg.lr);
  Rng rng(Rng::mix(seed, 2));
  for (std::size_t e = 0; e < cfg.epochs; ++e) {
    for (const auto& idx : hsi::batch_iter(train, cfg.batch, Rng::mix(seed, 3), e)) {
      const auto b = hsi::make_batch<float>(ds, idx, cfg.patch);
      nn::zero_grads(params);
      const auto loss = classifier::classification_loss(classifier::logits(b.x, p, true, rng),
                                                        std::span<const int>(b.labels));
      if (!std::isfinite(loss.item())) throw TrainingError("evaluation classifier loss is not finite");
      nn::backward(loss);
      nn::adam_step(params, adam);
    }
  }
  return p;
}

// 1-based class predictions for the given pixels (labeled or not).
inline std::vector<int> predict(const hsi::HsiDataset& ds, const classifier::ClassifierParams<float>& p,
                                const std::vector<std::size_t>& pixels, std::size_t patch,
                                std::size_t chunk = 256) {
  nn::NoGradGuard no_grad;
  Rng unused(0);
  std::vector<int> out;
  out.reserve(pixels.size());
  const std::size_t per = ds.n_band * patch * patch;
  for (std::size_t s = 0; s < pixels.size(); s += chunk) {
    const std::size_t n = std::min(chunk, pixels.size() - s);
    std::vector<float> values(n * per);
    for (std::size_t i = 0; i < n; ++i) {
      const auto w = hsi::extract_window(ds, pixels[s + i], patch, patch);
      std::copy(w.values.begin(), w.values.end(), values.begin() + static_cast<std::ptrdiff_t>(i * per));
    }
    const auto x = nn::Tensor<float>::from({n, ds.n_band, patch, patch}, std::move(values));
    const auto pred = classifier::predict_labels(classifier::logits(x, p, false, unused));
    out.insert(out.end(), pred.begin(), pred.end());
  }
  return out;
}

inline Metrics score(const hsi::HsiDataset& ds, const std::vector<std::size_t>& pixels, const std::vector<int>& pred) {
  std::vector<int> truth;
  truth.reserve(pixels.size());
  for (auto px : pixels) truth.push_back(ds.labels[px]);
  return metrics(confusion(truth, pred, ds.n_class));
}

struct Summary {
  double mean = 0, std = 0;  // population std
};

inline Summary summarize(const std::vector<double>& v) {
  Summary s;
  if (v.empty()) return s;
  for (double x : v) s.mean += x;
  s.mean /= static_cast<double>(v.size());
  double ss = 0;
  for (double x : v) ss += (x - s.mean) * (x - s.mean);
  s.std = std::sqrt(ss / static_cast<double>(v.size()));
  return s;
}

struct EvalReport {
  std::string dataset;
  std::vector<std::size_t> bands;
  std::vector<std::uint64_t> seeds;
  std::vector<Metrics> runs;
  Summary oa, aa, kappa;
  std::vector<double> per_class;  // mean recall per class

  void finalize() {
    std::vector<double> o, a, k;
    per_class.assign(runs.empty() ? 0 : runs.front().per_class.size(), 0.0);
    for (const auto& r : runs) {
      o.push_back(r.oa);
      a.push_back(r.aa);
      k.push_back(r.kappa);
      for (std::size_t c = 0; c < per_class.size(); ++c) per_class[c] += r.per_class[c];
    }
    for (auto& c : per_class) c /= static_cast<double>(runs.size());
    oa = summarize(o);
    aa = summarize(a);
    kappa = summarize(k);
  }
};

inline std::vector<std::uint64_t> repeat_seeds(const EvalConfig& cfg) {
  std::vector<std::uint64_t> s;
  for (std::size_t r = 0; r < cfg.repeats; ++r) s.push_back(Rng::mix(cfg.seed, r));
  return s;
}

// For each seed: split the dataset, train a fresh classifier on the train
// split using only `bands`, and score it on the test split.
inline EvalReport evaluate(const hsi::HsiDataset& ds, const std::vector<std::size_t>& bands, const EvalConfig& cfg,
                           std::vector<std::uint64_t> seeds = {}) {
  cfg.validate();
  if (seeds.empty()) seeds = repeat_seeds(cfg);
  const auto sub = subset_bands(ds, bands);
  EvalReport rep;
  rep.dataset = ds.name;
  rep.bands = bands;
  rep.seeds = seeds;
  for (auto seed : seeds) {
    const auto sp = hsi::split(sub, {cfg.train_fraction, 0.3, Rng::mix(seed, 0)});
    if (sp.test.empty()) throw ValidationError("dataset '" + ds.name + "' has an empty test split");
    const auto model = train_classifier(sub, sp.train(), cfg, seed);
    rep.runs.push_back(score(sub, sp.test, predict(sub, model, sp.test, cfg.patch)));
  }
  rep.finalize();
  return rep;
}

// Score a stored full-band classifier (e.g. a meta-trained one) with the
// unselected bands zeroed.  Deterministic, so a single run.
inline EvalReport evaluate_stored(const hsi::HsiDataset& ds, const classifier::ClassifierParams<float>& model,
                                  const std::vector<std::size_t>& bands, const std::vector<std::size_t>& test,
                                  std::size_t patch) {
  if (model.n_band != ds.n_band || model.n_class != ds.n_class) {
    throw ValidationError("stored classifier does not match dataset '" + ds.name + "'");
  }
  if (test.empty()) throw ValidationError("dataset '" + ds.name + "' has an empty test split");
  auto masked = ds;
  std::vector<bool> keep(ds.n_band, false);
  for (auto b : bands) {
    if (b >= ds.n_band) throw ValidationError("band " + std::to_string(b) + " out of range");
    keep[b] = true;
  }
  const std::size_t hw = ds.n_pixels();
  for (std::size_t b = 0; b < ds.n_band; ++b)
    if (!keep[b]) std::fill_n(masked.cube.begin() + static_cast<std::ptrdiff_t>(b * hw), hw, 0.0f);
  EvalReport rep;
  rep.dataset = ds.name;
  rep.bands = bands;
  rep.runs.push_back(score(ds, test, predict(masked, model, test, patch)));
  rep.finalize();
  return rep;
}

inline nlohmann::ordered_json to_json(const Metrics& m) {
  return {{"oa", m.oa}, {"aa", m.aa}, {"kappa", m.kappa}, {"per_class", m.per_class}};
}

inline nlohmann::ordered_json to_json(const EvalReport& r) {
  nlohmann::ordered_json runs = nlohmann::ordered_json::array();
  for (const auto& m : r.runs) runs.push_back(to_json(m));
  return {{"dataset", r.dataset},
          {"bands", r.bands},
          {"repeats", r.runs.size()},
          {"oa", {{"mean", r.oa.mean}, {"std", r.oa.std}}},
          {"aa", {{"mean", r.aa.mean}, {"std", r.aa.std}}},
          {"kappa", {{"mean", r.kappa.mean}, {"std", r.kappa.std}}},
          {"per_class", r.per_class},
          {"seeds", r.seeds},
          {"runs", runs}};
}

// Table layout: OA and AA in percent, Kappa x 100, each followed by its std.
inline void write_csv_header(std::ostream& out) { out << "dataset,n_sband,OA,OA_std,AA,AA_std,Kappa,Kappa_std\n"; }

inline void write_csv_row(std::ostream& out, const EvalReport& r) {
  char buf[256];
  std::snprintf(buf, sizeof buf, "%s,%zu,%.2f,%.2f,%.2f,%.2f,%.2f,%.2f\n", r.dataset.c_str(), r.bands.size(),
                100 * r.oa.mean, 100 * r.oa.std, 100 * r.aa.mean, 100 * r.aa.std, 100 * r.kappa.mean,
                100 * r.kappa.std);
  out << buf;
}

}  // namespace m3bs::eval
