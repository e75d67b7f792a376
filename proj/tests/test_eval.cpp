#include <gtest/gtest.h>

#include <sstream>

#include <zlib.h>

#include "m3bs/eval/evaluate.hpp"
#include "m3bs/eval/metrics.hpp"
#include "m3bs/eval/render.hpp"
#include "m3bs/hsi/synthetic.hpp"

using namespace m3bs;
using namespace m3bs::eval;

namespace {

ConfusionMatrix from_rows(const std::vector<std::vector<std::uint64_t>>& rows) {
  ConfusionMatrix cm(rows.size());
  for (std::size_t t = 0; t < rows.size(); ++t)
    for (std::size_t p = 0; p < rows.size(); ++p) cm.at(t, p) = rows[t][p];
  return cm;
}

// Recompute the metrics from raw (true, predicted) pairs.
Metrics pair_oracle(const std::vector<std::pair<int, int>>& pairs, int n_class) {
  Metrics m;
  const double n = static_cast<double>(pairs.size());
  double agree = 0;
  for (const auto& [t, p] : pairs) agree += t == p;
  m.oa = agree / n;
  double pe = 0;
  for (int c = 1; c <= n_class; ++c) {
    double true_c = 0, pred_c = 0, hit = 0;
    for (const auto& [t, p] : pairs) {
      true_c += t == c;
      pred_c += p == c;
      hit += t == c && p == c;
    }
    m.per_class.push_back(hit / true_c);
    m.aa += hit / true_c / n_class;
    pe += (true_c / n) * (pred_c / n);
  }
  m.kappa = (m.oa - pe) / (1 - pe);
  return m;
}

hsi::HsiDataset small_planted(std::uint64_t seed = 3) {
  auto g = hsi::generate_synthetic(hsi::planted_spec(12, 3, 4, 20, 20, 0.1, seed), seed + 1);
  g.data.name = "tiny";
  return g.data;
}

EvalConfig quick_eval() {
  EvalConfig c;
  c.repeats = 2;
  c.epochs = 2;
  c.patch = 5;
  c.train_fraction = 0.2;
  c.seed = 4;
  return c;
}

std::string inflate(const std::string& z, std::size_t raw_size) {
  std::string out(raw_size, '\0');
  uLongf n = static_cast<uLongf>(raw_size);
  EXPECT_EQ(::uncompress(reinterpret_cast<Bytef*>(out.data()), &n, reinterpret_cast<const Bytef*>(z.data()),
                         static_cast<uLong>(z.size())),
            Z_OK);
  EXPECT_EQ(n, raw_size);
  return out;
}

std::uint32_t be32(const std::string& s, std::size_t at) {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v = (v << 8) | static_cast<std::uint8_t>(s[at + i]);
  return v;
}

}  // namespace

TEST(Metrics, PerfectClassifier) {
  const auto m = metrics(from_rows({{5, 0, 0}, {0, 7, 0}, {0, 0, 2}}));
  EXPECT_EQ(m.oa, 1.0);
  EXPECT_EQ(m.aa, 1.0);
  EXPECT_EQ(m.kappa, 1.0);
}

TEST(Metrics, ChanceLevel) {
  const auto m = metrics(from_rows({{25, 25}, {25, 25}}));
  EXPECT_DOUBLE_EQ(m.oa, 0.5);
  EXPECT_DOUBLE_EQ(m.kappa, 0.0);
}

TEST(Metrics, HandWorkedExample) {
  const auto m = metrics(from_rows({{40, 10}, {20, 30}}));
  EXPECT_NEAR(m.oa, 0.7, 1e-15);
  // p_e = (50*60 + 50*40) / 100^2 = 0.5
  EXPECT_NEAR(m.kappa, 0.4, 1e-15);
  EXPECT_NEAR(m.aa, (0.8 + 0.6) / 2, 1e-15);
}

TEST(Metrics, EmptyClassRowIsAnError) {
  EXPECT_THROW(metrics(from_rows({{3, 1}, {0, 0}})), ValidationError);
  EXPECT_THROW(ConfusionMatrix(2).add(3, 1), ValidationError);
}

TEST(Metrics, MatchesPairListOracleOnRandomMatrices) {
  Rng rng(17);
  for (int trial = 0; trial < 100; ++trial) {
    const int n = 2 + static_cast<int>(rng.below(7));
    std::vector<std::pair<int, int>> pairs;
    for (int t = 1; t <= n; ++t) {
      const auto count = 1 + rng.below(40);
      for (std::uint64_t i = 0; i < count; ++i) pairs.emplace_back(t, 1 + static_cast<int>(rng.below(n)));
    }
    rng.shuffle(pairs.begin(), pairs.end());
    std::vector<int> truth, pred;
    for (const auto& [t, p] : pairs) {
      truth.push_back(t);
      pred.push_back(p);
    }
    const auto cm = confusion(truth, pred, static_cast<std::size_t>(n));
    EXPECT_EQ(cm.total(), pairs.size());
    const auto got = metrics(cm);
    const auto want = pair_oracle(pairs, n);
    EXPECT_NEAR(got.oa, want.oa, 1e-12);
    EXPECT_NEAR(got.aa, want.aa, 1e-12);
    EXPECT_NEAR(got.kappa, want.kappa, 1e-12);
    for (int c = 0; c < n; ++c) EXPECT_NEAR(got.per_class[c], want.per_class[c], 1e-12);
    EXPECT_GE(got.kappa, -1.0);
    EXPECT_LE(got.kappa, 1.0);
  }
}

TEST(Summary, PopulationStd) {
  const auto s = summarize({1.0, 3.0});
  EXPECT_EQ(s.mean, 2.0);
  EXPECT_EQ(s.std, 1.0);
  EXPECT_EQ(summarize({0.7}).std, 0.0);
}

TEST(Bands, SubsetAndRandom) {
  const auto ds = small_planted();
  const auto sub = subset_bands(ds, {3, 0});
  EXPECT_EQ(sub.n_band, 2u);
  EXPECT_EQ(sub.at(0, 5, 6), ds.at(3, 5, 6));
  EXPECT_EQ(sub.at(1, 5, 6), ds.at(0, 5, 6));
  EXPECT_THROW(subset_bands(ds, {12}), ValidationError);
  EXPECT_THROW(subset_bands(ds, {}), ValidationError);
  const auto r = random_bands(64, 8, 5);
  EXPECT_EQ(r.size(), 8u);
  EXPECT_TRUE(std::is_sorted(r.begin(), r.end()));
  EXPECT_EQ(std::adjacent_find(r.begin(), r.end()), r.end());
  EXPECT_EQ(r, random_bands(64, 8, 5));
  EXPECT_THROW(random_bands(4, 5, 1), ValidationError);
}

TEST(Evaluate, SingleRepeatHasZeroStd) {
  auto cfg = quick_eval();
  cfg.repeats = 1;
  const auto rep = evaluate(small_planted(), {0, 1, 2, 3}, cfg);
  ASSERT_EQ(rep.runs.size(), 1u);
  EXPECT_EQ(rep.oa.std, 0.0);
  EXPECT_EQ(rep.kappa.std, 0.0);
  EXPECT_GE(rep.oa.mean, 0.0);
  EXPECT_LE(rep.oa.mean, 1.0);
}

TEST(Evaluate, IdenticalSeedsGiveIdenticalAccuracies) {
  const auto rep = evaluate(small_planted(), {1, 4, 7}, quick_eval(), {99, 99});
  ASSERT_EQ(rep.runs.size(), 2u);
  EXPECT_EQ(rep.runs[0].oa, rep.runs[1].oa);
  EXPECT_EQ(rep.runs[0].per_class, rep.runs[1].per_class);
  EXPECT_EQ(rep.oa.std, 0.0);
}

TEST(Evaluate, ReproducibleToTheLastDigit) {
  const auto a = evaluate(small_planted(), {0, 5}, quick_eval());
  const auto b = evaluate(small_planted(), {0, 5}, quick_eval());
  EXPECT_EQ(to_json(a).dump(), to_json(b).dump());
  std::ostringstream ca, cb;
  write_csv_row(ca, a);
  write_csv_row(cb, b);
  EXPECT_EQ(ca.str(), cb.str());
}

TEST(Evaluate, ReportFormats) {
  const auto rep = evaluate(small_planted(), {0, 5}, quick_eval());
  const auto j = to_json(rep);
  EXPECT_EQ(j["dataset"], "tiny");
  EXPECT_EQ(j["repeats"], 2);
  EXPECT_EQ(j["runs"].size(), 2u);
  EXPECT_GE(j["oa"]["std"].get<double>(), 0.0);
  std::ostringstream csv;
  write_csv_header(csv);
  write_csv_row(csv, rep);
  const auto text = csv.str();
  EXPECT_EQ(text.substr(0, text.find('\n')), "dataset,n_sband,OA,OA_std,AA,AA_std,Kappa,Kappa_std");
  char expect[64];
  std::snprintf(expect, sizeof expect, "tiny,2,%.2f,", 100 * rep.oa.mean);
  EXPECT_EQ(text.substr(text.find('\n') + 1, std::string(expect).size()), expect);
}

TEST(Evaluate, PlantedBandsBeatNoiseBands) {
  auto g = hsi::generate_synthetic(hsi::planted_spec(16, 3, 4, 32, 32, 0.1, 7), 8);
  auto cfg = quick_eval();
  cfg.epochs = 10;
  std::vector<std::size_t> noise;
  for (std::size_t b = 0; b < 16 && noise.size() < 4; ++b)
    if (std::find(g.informative.begin(), g.informative.end(), b) == g.informative.end()) noise.push_back(b);
  const auto good = evaluate(g.data, g.informative, cfg);
  const auto bad = evaluate(g.data, noise, cfg);
  EXPECT_GT(good.oa.mean, bad.oa.mean + 0.1);
}

TEST(Evaluate, StoredClassifierScoresMaskedInput) {
  const auto ds = small_planted();
  auto cfg = quick_eval();
  const auto sp = hsi::split(ds, {0.2, 0.3, 1});
  const auto model = train_classifier(ds, sp.train(), cfg, 3);
  const auto rep = evaluate_stored(ds, model, {0, 1, 2, 3}, sp.test, cfg.patch);
  EXPECT_EQ(rep.runs.size(), 1u);
  EXPECT_EQ(rep.oa.std, 0.0);
  const auto other = small_planted();
  auto wrong = subset_bands(other, {0, 1});
  EXPECT_THROW(evaluate_stored(wrong, model, {0}, sp.test, cfg.patch), ValidationError);
}

TEST(Evaluate, ConfigValidation) {
  auto cfg = quick_eval();
  cfg.repeats = 0;
  EXPECT_THROW(cfg.validate(), ValidationError);
  cfg = quick_eval();
  cfg.profile = "table1";
  EXPECT_THROW(cfg.validate(), ValidationError);
}

TEST(Render, ValidPngOfGroundTruth) {
  const auto ds = small_planted();
  const auto png = render_map(ds, ds.labels);
  ASSERT_EQ(png.substr(0, 8), std::string("\x89PNG\r\n\x1a\n"));
  EXPECT_EQ(be32(png, 8), 13u);
  EXPECT_EQ(png.substr(12, 4), "IHDR");
  EXPECT_EQ(be32(png, 16), ds.width);
  EXPECT_EQ(be32(png, 20), ds.height);
  // Walk the chunks and verify every CRC.
  std::size_t pos = 8;
  std::string idat;
  while (pos < png.size()) {
    const auto len = be32(png, pos);
    const auto type = png.substr(pos + 4, 4);
    const auto crc = ::crc32(0L, reinterpret_cast<const Bytef*>(png.data() + pos + 4), len + 4);
    EXPECT_EQ(be32(png, pos + 8 + len), crc) << type;
    if (type == "IDAT") idat += png.substr(pos + 8, len);
    pos += 12 + len;
  }
  EXPECT_EQ(pos, png.size());
  const auto raw = inflate(idat, ds.height * (1 + 3 * ds.width));
  for (std::size_t r = 0; r < ds.height; ++r) {
    EXPECT_EQ(raw[r * (1 + 3 * ds.width)], '\0');
    for (std::size_t c = 0; c < ds.width; ++c) {
      const auto lab = ds.labels[r * ds.width + c];
      const auto* px = reinterpret_cast<const std::uint8_t*>(raw.data() + r * (1 + 3 * ds.width) + 1 + 3 * c);
      const auto want = lab == 0 ? kBackground : palette()[lab - 1];
      EXPECT_EQ(px[0], want[0]);
      EXPECT_EQ(px[1], want[1]);
      EXPECT_EQ(px[2], want[2]);
    }
  }
}

TEST(Render, IdentityAndDeterminism) {
  auto ds = small_planted();
  for (std::size_t p = 0; p < 40; ++p) ds.labels[p] = 0;  // unlabeled strip
  EXPECT_EQ(render_map(ds, ds.labels), encode_png(ds.labels, ds.height, ds.width));
  EXPECT_EQ(render_map(ds, ds.labels), render_map(ds, ds.labels));
  // Predictions on unlabeled pixels are hidden unless full_image is set.
  std::vector<std::uint16_t> ones(ds.n_pixels(), 1);
  std::vector<std::uint16_t> masked(ds.n_pixels(), 1);
  for (std::size_t p = 0; p < 40; ++p) masked[p] = 0;
  EXPECT_EQ(render_map(ds, ones), encode_png(masked, ds.height, ds.width));
  EXPECT_EQ(render_map(ds, ones, true), encode_png(ones, ds.height, ds.width));
}

TEST(Render, ConstantPredictionIsSingleColour) {
  const auto ds = small_planted();
  std::vector<std::uint16_t> twos(ds.n_pixels(), 2);
  const auto png = render_map(ds, twos);
  const auto idat_len = be32(png, 33);
  const auto raw = inflate(png.substr(41, idat_len), ds.height * (1 + 3 * ds.width));
  for (std::size_t r = 0; r < ds.height; ++r)
    for (std::size_t c = 0; c < ds.width; ++c)
      for (int k = 0; k < 3; ++k)
        EXPECT_EQ(static_cast<std::uint8_t>(raw[r * (1 + 3 * ds.width) + 1 + 3 * c + k]), palette()[1][k]);
}

TEST(Render, ShapeMismatchRejected) {
  const auto ds = small_planted();
  EXPECT_THROW(render_map(ds, std::vector<std::uint16_t>(ds.n_pixels() - 1, 1)), ShapeError);
  EXPECT_THROW(render_map(ds, std::vector<std::uint16_t>(ds.n_pixels(), 9)), ValidationError);
}

TEST(Render, LargeImagesSpanSeveralStoredBlocks) {
  std::vector<std::uint16_t> lab(200 * 200);
  for (std::size_t i = 0; i < lab.size(); ++i) lab[i] = static_cast<std::uint16_t>(i % 18);
  const auto png = encode_png(lab, 200, 200);
  const auto idat_len = be32(png, 33);
  const auto raw = inflate(png.substr(41, idat_len), 200 * 601);
  EXPECT_EQ(static_cast<std::uint8_t>(raw[1 + 3 * 16]), palette()[15][0]);  // label 16
  EXPECT_EQ(static_cast<std::uint8_t>(raw[1 + 3 * 17]), palette()[0][0]);   // label 17 wraps
}
