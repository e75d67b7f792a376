#include <gtest/gtest.h>

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <set>

#include "m3bs/hsi/dataset.hpp"
#include "m3bs/hsi/io.hpp"
#include "m3bs/hsi/split.hpp"
#include "m3bs/hsi/stats.hpp"
#include "m3bs/hsi/synthetic.hpp"

using namespace m3bs;
using namespace m3bs::hsi;

namespace {

std::string temp_path(const std::string& name) {
  return (std::filesystem::temp_directory_path() / ("m3bs_" + name + "_" + std::to_string(::getpid()))).string();
}

HsiDataset random_dataset(std::size_t n_band, std::size_t h, std::size_t w, std::size_t n_class, std::uint64_t seed) {
  Rng rng(seed);
  HsiDataset ds;
  ds.name = "rand";
  ds.n_band = n_band;
  ds.height = h;
  ds.width = w;
  ds.n_class = n_class;
  ds.cube.resize(n_band * h * w);
  for (auto& v : ds.cube) v = static_cast<float>(rng.uniform(-3.0, 7.0));
  ds.labels.resize(h * w);
  for (std::size_t p = 0; p < ds.labels.size(); ++p) ds.labels[p] = static_cast<std::uint16_t>(p % (n_class + 1));
  return ds;
}

// Label raster with the given per-class counts, rest background.
HsiDataset counted_dataset(const std::vector<std::size_t>& counts) {
  const std::size_t total = std::accumulate(counts.begin(), counts.end(), std::size_t{0});
  HsiDataset ds;
  ds.name = "counted";
  ds.n_band = 1;
  ds.height = 1;
  ds.width = total + 7;
  ds.n_class = counts.size();
  ds.cube.assign(ds.width, 0.0f);
  ds.labels.assign(ds.width, 0);
  std::size_t p = 3;
  for (std::size_t c = 0; c < counts.size(); ++c)
    for (std::size_t i = 0; i < counts[c]; ++i) ds.labels[p++] = static_cast<std::uint16_t>(c + 1);
  return ds;
}

}  // namespace

TEST(HsicIo, RoundTripIsBitExact) {
  auto ds = random_dataset(7, 5, 6, 3, 11);
  normalize_bands(ds);
  const auto path = temp_path("rt.hsic");
  save(ds, path);
  const auto back = load(path);
  EXPECT_EQ(back.name, ds.name);
  EXPECT_EQ(back.n_band, 7u);
  EXPECT_EQ(back.n_class, 3u);
  ASSERT_EQ(back.cube.size(), ds.cube.size());
  EXPECT_EQ(0, std::memcmp(back.cube.data(), ds.cube.data(), ds.cube.size() * sizeof(float)));
  EXPECT_EQ(back.labels, ds.labels);
  std::filesystem::remove(path);
}

TEST(HsicIo, RawRoundTripWithoutNormalization) {
  const auto ds = random_dataset(3, 4, 4, 2, 5);
  const auto back = decode_hsic(encode_hsic(ds), false);
  EXPECT_EQ(back.cube, ds.cube);
  EXPECT_EQ(back.labels, ds.labels);
}

TEST(HsicIo, LoadNormalizesBandsToUnitInterval) {
  const auto ds = random_dataset(4, 6, 6, 2, 9);
  const auto back = decode_hsic(encode_hsic(ds));
  for (std::size_t b = 0; b < back.n_band; ++b) {
    const auto first = back.cube.begin() + static_cast<std::ptrdiff_t>(b * 36);
    const auto [lo, hi] = std::minmax_element(first, first + 36);
    EXPECT_EQ(*lo, 0.0f);
    EXPECT_EQ(*hi, 1.0f);
  }
}

TEST(HsicIo, IndianPinesSizedHeader) {
  auto ds = random_dataset(200, 3, 3, 2, 1);
  ds.name = "indian_pines";
  const auto back = decode_hsic(encode_hsic(ds));
  EXPECT_EQ(back.name, "indian_pines");
  EXPECT_EQ(back.n_band, 200u);
  EXPECT_EQ(back.cube.size(), 200u * 9u);
}

TEST(HsicIo, HeaderLineFormat) {
  const auto ds = random_dataset(2, 2, 2, 1, 1);
  const auto bytes = encode_hsic(ds);
  const auto header = nlohmann::json::parse(bytes.substr(0, bytes.find('\n')));
  EXPECT_EQ(header["dtype"], "f32");
  EXPECT_EQ(header["layout"], "band-major");
  EXPECT_EQ(header["height"], 2);
  EXPECT_EQ(bytes.size(), bytes.find('\n') + 1 + 8 * 4 + 4 * 2);
}

TEST(HsicIo, TruncatedPayloadIsSizeMismatch) {
  const auto ds = random_dataset(3, 4, 4, 2, 2);
  auto bytes = encode_hsic(ds);
  bytes.pop_back();
  try {
    decode_hsic(bytes);
    FAIL() << "expected FormatError";
  } catch (const FormatError& e) {
    EXPECT_NE(std::string(e.what()).find("size mismatch"), std::string::npos);
  }
  bytes += "xyz";
  EXPECT_THROW(decode_hsic(bytes), FormatError);
}

TEST(HsicIo, MalformedHeaderAndDtype) {
  EXPECT_THROW(decode_hsic("not json\n"), FormatError);
  EXPECT_THROW(decode_hsic("{\"name\":\"x\"}"), FormatError);
  EXPECT_THROW(decode_hsic("{\"name\":\"x\",\"n_band\":1,\"height\":1,\"width\":1,\"n_class\":1,\"dtype\":\"f32\"}\n"),
               FormatError);
  const auto ds = random_dataset(1, 1, 1, 1, 3);
  auto bytes = encode_hsic(ds);
  const auto pos = bytes.find("\"f32\"");
  bytes.replace(pos, 5, "\"f64\"");
  try {
    decode_hsic(bytes);
    FAIL();
  } catch (const FormatError& e) {
    EXPECT_NE(std::string(e.what()).find("unsupported dtype"), std::string::npos);
  }
  EXPECT_THROW(load("/nonexistent/dir/x.hsic"), FormatError);
}

TEST(LabelRasterIo, RoundTrip) {
  LabelRaster r{3, 2, {0, 1, 2, 3, 4, 65535}};
  const auto path = temp_path("lab.u16");
  save_label_raster(r, path);
  const auto back = load_label_raster(path);
  EXPECT_EQ(back.height, 3u);
  EXPECT_EQ(back.width, 2u);
  EXPECT_EQ(back.labels, r.labels);
  std::filesystem::remove(path);
}

TEST(Dataset, ValidateCatchesBadLabels) {
  auto ds = random_dataset(2, 4, 4, 3, 1);
  EXPECT_NO_THROW(ds.validate());
  ds.labels[0] = 4;
  EXPECT_THROW(ds.validate(), ValidationError);
  ds.labels[0] = 0;
  std::replace(ds.labels.begin(), ds.labels.end(), std::uint16_t{2}, std::uint16_t{0});
  EXPECT_THROW(ds.validate(), ValidationError);
}

TEST(Dataset, NormalizationIsIdempotentAndHandlesConstantBands) {
  auto ds = random_dataset(3, 5, 5, 2, 4);
  std::fill(ds.cube.begin() + 25, ds.cube.begin() + 50, 3.5f);
  normalize_bands(ds);
  for (std::size_t i = 25; i < 50; ++i) EXPECT_EQ(ds.cube[i], 0.0f);
  const auto once = ds.cube;
  normalize_bands(ds);
  EXPECT_EQ(ds.cube, once);
}

TEST(Split, IndianPinesScaleFivePercent) {
  // Class sizes of the 16-class Indian Pines ground truth.
  const std::vector<std::size_t> counts = {46, 1428, 830, 237, 483, 730, 28, 478, 20, 972, 2455, 593, 205, 1265, 386, 93};
  const auto ds = counted_dataset(counts);
  ASSERT_EQ(std::accumulate(counts.begin(), counts.end(), std::size_t{0}), 10249u);
  const auto s = split(ds, {0.05, 0.3, 7});
  const auto n_train = s.support.size() + s.query.size();
  EXPECT_NEAR(static_cast<double>(n_train), 512.45, 8.0);
  EXPECT_EQ(n_train + s.test.size(), 10249u);
}

TEST(Split, SupportQueryThreeToSeven) {
  const auto ds = counted_dataset({500, 500});
  const auto s = split(ds, {0.1, 0.3, 3});
  EXPECT_EQ(s.support.size(), 30u);
  EXPECT_EQ(s.query.size(), 70u);
  EXPECT_EQ(s.test.size(), 900u);
}

TEST(Split, DisjointStratifiedDeterministic) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng rng(seed);
    std::vector<std::size_t> counts;
    for (int c = 0; c < 5; ++c) counts.push_back(2 + rng.below(60));
    const auto ds = counted_dataset(counts);
    const auto s = split(ds, {0.07, 0.3, seed});
    std::set<std::size_t> all;
    for (const auto* v : {&s.support, &s.query, &s.test}) {
      EXPECT_TRUE(std::is_sorted(v->begin(), v->end()));
      all.insert(v->begin(), v->end());
    }
    EXPECT_EQ(all.size(), s.support.size() + s.query.size() + s.test.size());
    const auto labeled = ds.labeled_pixels();
    EXPECT_EQ(std::vector<std::size_t>(all.begin(), all.end()), labeled);
    std::set<int> train_classes, test_classes;
    for (auto p : s.train()) train_classes.insert(ds.labels[p]);
    for (auto p : s.test) test_classes.insert(ds.labels[p]);
    EXPECT_EQ(train_classes.size(), 5u);
    EXPECT_EQ(test_classes.size(), 5u);
    const auto again = split(ds, {0.07, 0.3, seed});
    EXPECT_EQ(again.support, s.support);
    EXPECT_EQ(again.query, s.query);
    EXPECT_EQ(again.test, s.test);
  }
}

TEST(Split, Errors) {
  EXPECT_THROW(split(counted_dataset({10, 1}), {0.1, 0.3, 0}), ValidationError);
  EXPECT_THROW(split(counted_dataset({10, 10}), {0.0, 0.3, 0}), ValidationError);
  EXPECT_THROW(split(counted_dataset({10, 10}), {1.0, 0.3, 0}), ValidationError);
}

TEST(BatchIter, SizesAndDeterminism) {
  std::vector<std::size_t> idx(300);
  std::iota(idx.begin(), idx.end(), 0);
  const auto b = batch_iter(idx, 128, 5, 0);
  ASSERT_EQ(b.size(), 3u);
  EXPECT_EQ(b[0].size(), 128u);
  EXPECT_EQ(b[1].size(), 128u);
  EXPECT_EQ(b[2].size(), 44u);
  std::vector<std::size_t> flat;
  for (const auto& x : b) flat.insert(flat.end(), x.begin(), x.end());
  std::sort(flat.begin(), flat.end());
  EXPECT_EQ(flat, idx);
  EXPECT_EQ(batch_iter(idx, 128, 5, 0), b);
  EXPECT_NE(batch_iter(idx, 128, 5, 1), b);
  const auto singles = batch_iter(idx, 1, 5, 0);
  EXPECT_EQ(singles.size(), 300u);
  for (const auto& x : singles) EXPECT_EQ(x.size(), 1u);
}

TEST(Patch, CornerPixelIsZeroPadded) {
  auto ds = random_dataset(2, 145, 145, 3, 8);
  normalize_bands(ds);
  for (auto& v : ds.cube) v = v * 0.5f + 0.5f;  // strictly positive
  ds.labels[0] = 1;
  const auto p = extract_patch(ds, 0);
  EXPECT_EQ(p.values.size(), 2u * 33u * 33u);
  EXPECT_EQ(p.height, 33u);
  for (std::size_t b = 0; b < 2; ++b)
    for (std::size_t y = 0; y < 33; ++y)
      for (std::size_t x = 0; x < 33; ++x) {
        const float v = p.values[(b * 33 + y) * 33 + x];
        if (y < 16 || x < 16) {
          EXPECT_EQ(v, 0.0f);
        } else {
          EXPECT_EQ(v, ds.at(b, y - 16, x - 16));
        }
      }
}

TEST(Patch, InteriorIsExactCopy) {
  const auto ds = random_dataset(3, 50, 40, 2, 2);
  const std::size_t row = 20, col = 18, pixel = row * 40 + col;
  ASSERT_NE(ds.labels[pixel], 0);
  const auto p = extract_patch(ds, pixel);
  EXPECT_EQ(p.center_label, ds.labels[pixel]);
  EXPECT_EQ(p.row, row);
  EXPECT_EQ(p.col, col);
  for (std::size_t b = 0; b < 3; ++b)
    for (std::size_t y = 0; y < 33; ++y)
      for (std::size_t x = 0; x < 33; ++x)
        EXPECT_EQ(p.values[(b * 33 + y) * 33 + x], ds.at(b, row - 16 + y, col - 16 + x));
}

TEST(Patch, UnlabeledPixelRejected) {
  const auto ds = random_dataset(1, 4, 4, 2, 1);
  ASSERT_EQ(ds.labels[0], 0);
  EXPECT_THROW(extract_patch(ds, 0), ValidationError);
  EXPECT_NO_THROW(extract_window(ds, 0));
}

TEST(Patch, TranslationConsistent) {
  HsiDataset ds;
  ds.n_band = 1;
  ds.height = 10;
  ds.width = 20;
  ds.n_class = 1;
  ds.labels.assign(200, 1);
  ds.cube.resize(200);
  // Columns repeat with period 10, so (r, c) and (r, c + 10) share neighbourhoods.
  for (std::size_t r = 0; r < 10; ++r)
    for (std::size_t c = 0; c < 20; ++c) ds.cube[r * 20 + c] = static_cast<float>(r * 10 + c % 10);
  for (std::size_t c = 1; c + 10 < 19; ++c) {
    EXPECT_EQ(extract_patch(ds, 5 * 20 + c, 3, 3).values, extract_patch(ds, 5 * 20 + c + 10, 3, 3).values);
  }
}

TEST(MakeBatch, StacksPatches) {
  const auto ds = random_dataset(4, 12, 12, 3, 6);
  const std::vector<std::size_t> pix = {1, 2, 5};
  const auto b = make_batch<float>(ds, pix, 5);
  EXPECT_EQ(b.x.shape(), (nn::Shape{3, 4, 5, 5}));
  EXPECT_EQ(b.labels, (std::vector<int>{1, 2, 1}));
  const auto p = extract_patch(ds, 5, 5, 5);
  for (std::size_t i = 0; i < p.values.size(); ++i) EXPECT_EQ(b.x.data()[2 * 100 + i], p.values[i]);
}

TEST(Synthetic, SigmaZeroSingleInformativeBand) {
  SyntheticSpec s;
  s.n_band = 8;
  s.n_class = 2;
  s.height = 16;
  s.width = 16;
  s.sigma = 0.0;
  s.informative = {5};
  s.class_means = {{0.2}, {0.8}};
  const auto g = generate_synthetic(s, 3);
  const auto& ds = g.data;
  EXPECT_NO_THROW(ds.validate());
  for (std::size_t b = 0; b < 8; ++b) {
    double m[3] = {0, 0, 0}, n[3] = {0, 0, 0};
    for (std::size_t p = 0; p < 256; ++p) {
      m[ds.labels[p]] += ds.at(b, p / 16, p % 16);
      n[ds.labels[p]] += 1;
    }
    if (b == 5) {
      EXPECT_GT(std::abs(m[1] / n[1] - m[2] / n[2]), 0.5);
    } else {
      EXPECT_EQ(m[1] / n[1], m[2] / n[2]);
    }
  }
  EXPECT_EQ(g.informative, std::vector<std::size_t>{5});
}

TEST(Synthetic, DeterministicAndSmooth) {
  const auto spec = planted_spec(20, 4, 4, 32, 32, 0.05, 1);
  const auto a = generate_synthetic(spec, 9);
  const auto b = generate_synthetic(spec, 9);
  EXPECT_EQ(a.data.cube, b.data.cube);
  EXPECT_EQ(a.data.labels, b.data.labels);
  EXPECT_NE(generate_synthetic(spec, 10).data.labels, a.data.labels);
  // Region growing keeps most 4-neighbours in the same class.
  std::size_t same = 0, total = 0;
  for (std::size_t y = 0; y < 32; ++y)
    for (std::size_t x = 0; x + 1 < 32; ++x) {
      same += a.data.labels[y * 32 + x] == a.data.labels[y * 32 + x + 1];
      ++total;
    }
  EXPECT_GT(static_cast<double>(same) / static_cast<double>(total), 0.8);
  const auto counts = a.data.class_counts();
  for (std::size_t c = 1; c <= 4; ++c) EXPECT_GT(counts[c], 0u);
}

TEST(Synthetic, FStatisticRanksPlantedBandsFirst) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    auto spec = planted_spec(40, 4, 6, 40, 40, 0.08, seed);
    // Two redundant copies of informative bands, placed away from the block.
    const std::size_t far = spec.informative.front() >= 10 ? 0 : 39;
    spec.redundancy[far] = spec.informative[0];
    spec.redundancy[far == 0 ? 1 : 38] = spec.informative[3];
    const auto g = generate_synthetic(spec, seed + 100);
    const auto f = band_f_statistics(g.data);
    std::vector<std::size_t> order(40);
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](auto i, auto j) { return f[i] > f[j]; });
    std::set<std::size_t> planted(g.informative.begin(), g.informative.end());
    planted.insert(g.redundant.begin(), g.redundant.end());
    ASSERT_EQ(planted.size(), 8u);
    std::set<std::size_t> top(order.begin(), order.begin() + 8);
    EXPECT_EQ(top, planted) << "seed " << seed;
  }
}

TEST(Synthetic, FStatisticMatchesHandComputation) {
  HsiDataset ds;
  ds.n_band = 1;
  ds.height = 1;
  ds.width = 6;
  ds.n_class = 2;
  ds.cube = {1, 2, 3, 5, 6, 7};
  ds.labels = {1, 1, 1, 2, 2, 2};
  // Means 2 and 6, grand 4: SSB = 3*4 + 3*4 = 24, SSW = 2 + 2 = 4.
  // F = (24 / 1) / (4 / 4) = 24.
  EXPECT_NEAR(band_f_statistics(ds)[0], 24.0, 1e-12);
}

TEST(Synthetic, InfeasibleSpecs) {
  auto spec = planted_spec(10, 3, 2, 4, 4, 0.1, 0);
  spec.n_regions = 2;
  EXPECT_THROW(generate_synthetic(spec, 0), ValidationError);
  spec.n_regions = 0;
  spec.informative[0] = 10;
  EXPECT_THROW(generate_synthetic(spec, 0), ValidationError);
  EXPECT_THROW(planted_spec(10, 5, 2, 4, 4, 0.1, 0), ValidationError);
}
