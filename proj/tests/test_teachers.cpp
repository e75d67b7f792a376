#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <set>

#include "m3bs/hsi/split.hpp"
#include "m3bs/hsi/synthetic.hpp"
#include "m3bs/teachers/teachers.hpp"

using namespace m3bs;
using namespace m3bs::teachers;

namespace {

TeacherSelection make_sel(std::vector<std::size_t> bands, std::size_t n_band, std::string id = "t") {
  return {std::move(id), "d", std::move(bands), n_band};
}

std::size_t overlap(const std::vector<std::size_t>& a, const std::vector<std::size_t>& b) {
  std::set<std::size_t> sa(a.begin(), a.end());
  std::size_t n = 0;
  for (auto x : b) n += sa.count(x);
  return n;
}

hsi::SyntheticDataset planted(std::uint64_t seed, std::size_t n_band = 64) {
  return hsi::generate_synthetic(hsi::planted_spec(n_band, 4, 8, 64, 64, 0.1, seed), seed + 1000);
}

std::vector<std::size_t> train_pixels(const hsi::HsiDataset& ds, std::uint64_t seed) {
  return hsi::split(ds, {0.1, 0.3, seed}).train();
}

// Two-class dataset separable on a single band; every other band is constant.
hsi::HsiDataset single_band_separable(std::size_t n_band, std::size_t band) {
  hsi::HsiDataset ds;
  ds.name = "sep";
  ds.n_band = n_band;
  ds.height = 8;
  ds.width = 8;
  ds.n_class = 2;
  ds.labels.resize(64);
  for (std::size_t p = 0; p < 64; ++p) ds.labels[p] = p < 32 ? 1 : 2;
  ds.cube.assign(n_band * 64, 0.5f);
  for (std::size_t p = 0; p < 64; ++p) ds.cube[band * 64 + p] = p < 32 ? 0.0f : 1.0f;
  return ds;
}

}  // namespace

TEST(FilterTeacher, RecoversPlantedBands) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const auto g = planted(seed);
    const auto sel = filter_teacher(g.data, 8, train_pixels(g.data, seed));
    EXPECT_EQ(sel.bands.size(), 8u);
    EXPECT_GE(overlap(g.informative, sel.bands), 6u) << "seed " << seed;
  }
}

TEST(FilterTeacher, DuplicateBandNotPickedBeforeUncorrelated) {
  auto ds = single_band_separable(6, 2);
  // Band 4 is an exact copy of band 2; band 5 is weakly informative and independent.
  for (std::size_t p = 0; p < 64; ++p) ds.cube[4 * 64 + p] = ds.cube[2 * 64 + p];
  for (std::size_t p = 0; p < 64; ++p) ds.cube[5 * 64 + p] = static_cast<float>((p % 3) * 0.3 + (p >= 32 ? 0.2 : 0));
  const auto sel = filter_teacher(ds, 2);
  EXPECT_TRUE(sel.bands[0] == 2 || sel.bands[0] == 4);
  EXPECT_EQ(sel.bands[1], 5u);
}

TEST(FilterTeacher, SingleBandIsMaxRelevance) {
  const auto g = planted(3);
  const auto f = hsi::band_f_statistics(g.data);
  const auto sel = filter_teacher(g.data, 1);
  EXPECT_EQ(sel.bands[0], static_cast<std::size_t>(std::max_element(f.begin(), f.end()) - f.begin()));
  EXPECT_THROW(filter_teacher(g.data, 64), ValidationError);
}

TEST(WrapperTeacher, SeparableBandFirst) {
  const auto ds = single_band_separable(7, 3);
  const auto sel = wrapper_teacher(ds, 2);
  EXPECT_EQ(sel.bands[0], 3u);
}

TEST(WrapperTeacher, BeatsRandomSetsOfEqualSize) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const auto g = planted(seed, 40);
    auto pix = train_pixels(g.data, seed);
    TeacherConfig cfg;
    cfg.seed = seed;
    cfg.wrapper_budget = 8 * 20;
    const auto sel = wrapper_teacher(g.data, 8, cfg, pix);
    Rng rng(seed);
    std::vector<std::size_t> bands(40);
    std::iota(bands.begin(), bands.end(), 0);
    rng.shuffle(bands.begin(), bands.end());
    bands.resize(8);
    const auto test = hsi::split(g.data, {0.1, 0.3, seed}).test;
    const double acc_sel = nearest_centroid_score(g.data, sel.bands, pix, test).first;
    const double acc_rand = nearest_centroid_score(g.data, bands, pix, test).first;
    EXPECT_GE(acc_sel, acc_rand) << "seed " << seed;
  }
}

TEST(WrapperTeacher, ExhaustiveAndBudget) {
  const auto ds = single_band_separable(5, 1);
  const auto all = wrapper_teacher(ds, 5);
  EXPECT_EQ(all.sorted_bands(), (std::vector<std::size_t>{0, 1, 2, 3, 4}));
  TeacherConfig cfg;
  cfg.wrapper_budget = 2;
  EXPECT_THROW(wrapper_teacher(ds, 3, cfg), ValidationError);
  cfg.seed = 4;
  cfg.wrapper_budget = 6;
  EXPECT_EQ(wrapper_teacher(ds, 3, cfg).bands, wrapper_teacher(ds, 3, cfg).bands);
}

TEST(EmbeddingTeacher, PlantedBandsInTopQuartile) {
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    const auto g = planted(seed);
    TeacherConfig cfg;
    cfg.seed = seed;
    const auto sel = embedding_teacher(g.data, 16, cfg, train_pixels(g.data, seed));
    EXPECT_EQ(overlap(g.informative, sel.bands), 8u) << "seed " << seed;
  }
}

TEST(EmbeddingTeacher, ZeroEpochsKeepsInitialOrder) {
  const auto g = planted(1);
  TeacherConfig cfg;
  cfg.embedding_epochs = 0;
  const auto sel = embedding_teacher(g.data, 5, cfg);
  EXPECT_EQ(sel.bands, (std::vector<std::size_t>{0, 1, 2, 3, 4}));
}

TEST(EmbeddingTeacher, L1PenaltyCreatesNearZeroGates) {
  const auto g = planted(2);
  const auto pix = train_pixels(g.data, 2);
  auto count_small = [](const EmbeddingTrace& t) {
    return std::count_if(t.gates.begin(), t.gates.end(), [](double v) { return std::abs(v) < 1e-3; });
  };
  TeacherConfig with, without;
  without.embedding_l1 = 0.0;
  EmbeddingTrace tw, to;
  embedding_teacher(g.data, 8, with, pix, &tw);
  embedding_teacher(g.data, 8, without, pix, &to);
  EXPECT_LT(count_small(to), count_small(tw));
  EXPECT_LT(tw.loss.back(), tw.loss.front());
}

TEST(EmbeddingTeacher, DivergenceIsTrainingError) {
  const auto g = planted(2, 16);
  TeacherConfig cfg;
  cfg.embedding_lr = 1e300;
  cfg.embedding_epochs = 50;
  EXPECT_THROW(embedding_teacher(g.data, 4, cfg), TrainingError);
}

TEST(DiversityEnsemble, WorkedExample) {
  const std::vector<TeacherSelection> sel = {make_sel({1, 2, 3}, 6), make_sel({2, 3, 4}, 6), make_sel({3, 4, 5}, 6)};
  const auto label = diversity_ensemble(sel, 3, 0);
  EXPECT_EQ(label.cnt, (std::vector<std::size_t>{0, 1, 2, 3, 2, 1}));
  EXPECT_EQ(label.bands, (std::vector<std::size_t>{2, 3, 4}));
  EXPECT_EQ(label.s, (std::vector<double>{0, 0, 1, 1, 1, 0}));
}

TEST(DiversityEnsemble, UnanimousAndSingleTeacher) {
  const auto t = make_sel({7, 1, 4}, 10);
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    EXPECT_EQ(diversity_ensemble({t, t, t}, 3, seed).bands, (std::vector<std::size_t>{1, 4, 7}));
    EXPECT_EQ(diversity_ensemble({t}, 3, seed).bands, (std::vector<std::size_t>{1, 4, 7}));
  }
  EXPECT_THROW(diversity_ensemble({}, 3, 0), ValidationError);
}

TEST(DiversityEnsemble, MatchesBruteForceOracle) {
  Rng rng(21);
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t nb = 4 + rng.below(40);
    const std::size_t k = 1 + rng.below(std::min<std::size_t>(nb - 1, 12));
    std::vector<TeacherSelection> sel;
    for (int t = 0; t < 3; ++t) {
      std::vector<std::size_t> all(nb);
      std::iota(all.begin(), all.end(), 0);
      rng.shuffle(all.begin(), all.end());
      all.resize(k);
      sel.push_back(make_sel(all, nb));
    }
    const auto label = diversity_ensemble(sel, k, rng.next_u64());
    // Oracle: count membership directly.
    std::vector<std::size_t> cnt(nb, 0);
    for (std::size_t b = 0; b < nb; ++b)
      for (const auto& t : sel)
        if (std::find(t.bands.begin(), t.bands.end(), b) != t.bands.end()) ++cnt[b];
    ASSERT_EQ(label.cnt, cnt);
    ASSERT_EQ(label.bands.size(), k);
    ASSERT_EQ(std::accumulate(label.s.begin(), label.s.end(), 0.0), static_cast<double>(k));
    auto sorted = cnt;
    std::sort(sorted.rbegin(), sorted.rend());
    const std::size_t cut = sorted[k - 1];
    std::size_t above = 0, at = 0;
    for (std::size_t b = 0; b < nb; ++b) {
      if (cnt[b] > cut) {
        ++above;
        ASSERT_EQ(label.s[b], 1.0);
      } else if (cnt[b] < cut) {
        ASSERT_EQ(label.s[b], 0.0);
      } else {
        at += label.s[b] == 1.0;
      }
    }
    ASSERT_EQ(above + at, k);
  }
}

TEST(DiversityEnsemble, VoteMonotonicity) {
  Rng rng(22);
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t nb = 5 + rng.below(30), n_t = 1 + rng.below(5), k = 1 + rng.below(nb - 1);
    std::vector<TeacherSelection> sel;
    for (std::size_t t = 0; t < n_t; ++t) {
      std::vector<std::size_t> bands;
      for (std::size_t b = 0; b < nb; ++b)
        if (rng.below(3) == 0) bands.push_back(b);
      sel.push_back(make_sel(bands, nb));
    }
    const auto label = diversity_ensemble(sel, k, trial);
    for (std::size_t a = 0; a < nb; ++a)
      for (std::size_t b = 0; b < nb; ++b)
        if (label.cnt[a] > label.cnt[b] && label.s[b] == 1.0) {
          ASSERT_EQ(label.s[a], 1.0);
        }
  }
}

TEST(DiversityEnsemble, ReseedingOnlyChangesTieStratum) {
  const std::vector<TeacherSelection> sel = {make_sel({0, 1, 2, 3}, 12), make_sel({0, 1, 5, 6}, 12),
                                             make_sel({0, 7, 8, 9}, 12)};
  std::set<std::vector<std::size_t>> seen;
  for (std::uint64_t seed = 0; seed < 200; ++seed) {
    const auto label = diversity_ensemble(sel, 4, seed);
    EXPECT_EQ(label.s[0], 1.0);
    EXPECT_EQ(label.s[1], 1.0);
    seen.insert(label.bands);
  }
  EXPECT_GT(seen.size(), 1u);
}

TEST(DiversityEnsemble, TieStratumUniformity) {
  const std::vector<TeacherSelection> sel = {make_sel({0}, 3), make_sel({1}, 3), make_sel({2}, 3)};
  std::array<double, 3> counts{};
  for (std::uint64_t seed = 0; seed < 3000; ++seed) counts[diversity_ensemble(sel, 1, seed).bands[0]] += 1;
  double chi2 = 0;
  for (double c : counts) chi2 += (c - 1000.0) * (c - 1000.0) / 1000.0;
  // chi-square with 2 degrees of freedom: p > 0.01 <=> statistic < 9.2103.
  EXPECT_LT(chi2, 9.2103);
}

TEST(Fusion, UnionAndNormalizedSum) {
  const auto a = make_sel({0, 1}, 8), b = make_sel({2, 3}, 8), c = make_sel({4, 5}, 8);
  EXPECT_EQ(union_fusion({a, b, c}).bands.size(), 6u);
  const auto big = make_sel({0, 1, 2, 3}, 8);
  EXPECT_EQ(union_fusion({a, big, make_sel({1, 2}, 8)}).bands, big.sorted_bands());
  std::vector<double> s = {0.1, 0.9, 0.3, 0.8, 0.2, 0.4, 0.5, 0.0};
  const auto ns = normalized_sum_fusion(std::vector<std::vector<double>>{s, s, s}, 3);
  EXPECT_EQ(ns.bands, (std::vector<std::size_t>{1, 3, 6}));
  EXPECT_EQ(normalized_sum_fusion({a, a, a}, 2).bands, (std::vector<std::size_t>{0, 1}));
}

TEST(SelectionLoss, Examples) {
  TeacherLabel l;
  l.s = {1, 0};
  EXPECT_NEAR(selection_loss(nn::Tensor<double>::from({2}, {0.9, 0.1}), l).item(), 0.105360516, 1e-8);
  EXPECT_NEAR(selection_loss(nn::Tensor<double>::from({2}, {0.5, 0.5}), l).item(), std::log(2.0), 1e-12);
  EXPECT_LT(selection_loss(nn::Tensor<double>::from({2}, {1 - 1e-9, 1e-9}), l).item(), 1e-6);
  EXPECT_THROW(selection_loss(nn::Tensor<double>::from({3}, {0.5, 0.5, 0.5}), l), ShapeError);
}

TEST(TeacherCache, RoundTripAndValidation) {
  const std::vector<TeacherSelection> sel = {make_sel({3, 1}, 5, "filter"), make_sel({0, 4}, 5, "wrapper")};
  const auto j = nlohmann::json::parse(cache_to_json(sel).dump());
  const auto back = cache_from_json(j, "d", 5, 2);
  ASSERT_EQ(back.size(), 2u);
  EXPECT_EQ(back[0].bands, (std::vector<std::size_t>{3, 1}));
  EXPECT_THROW(cache_from_json(j, "d", 5, 3), ValidationError);
  EXPECT_THROW(cache_from_json(j, "d", 4, 2), ValidationError);
  EXPECT_THROW(cache_from_json(nlohmann::json::parse(R"({"oracle":[1,2]})"), "d", 5, 2), ValidationError);
  EXPECT_THROW(cache_from_json(nlohmann::json::parse(R"({"filter":[1,1]})"), "d", 5, 2), ValidationError);
  EXPECT_THROW(cache_from_json(nlohmann::json::parse(R"([1])"), "d", 5, 2), FormatError);
}

TEST(Teachers, DeterministicGivenSeed) {
  const auto g = planted(4, 32);
  TeacherConfig cfg;
  cfg.seed = 9;
  cfg.embedding_epochs = 30;
  for (const auto& id : teacher_ids()) {
    EXPECT_EQ(run_teacher(id, g.data, 6, cfg).bands, run_teacher(id, g.data, 6, cfg).bands) << id;
  }
  EXPECT_THROW(run_teacher("bsnets", g.data, 6, cfg), ValidationError);
}
