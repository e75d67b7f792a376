#include <gtest/gtest.h>

#include <cmath>

#include "m3bs/classifier/classifier.hpp"
#include "m3bs/numerics/gradcheck.hpp"
#include "m3bs/selector/selector.hpp"

using namespace m3bs;
using namespace m3bs::classifier;
using nn::Tensor;

namespace {

template <typename T>
Tensor<T> random_batch(nn::Shape shape, Rng& rng) {
  std::vector<T> v(nn::numel_of(shape));
  for (auto& x : v) x = static_cast<T>(rng.uniform());
  return Tensor<T>::from(std::move(shape), std::move(v));
}

Profile tiny() { return {"tiny", {4, 4}, 8, 0.5, true}; }

}  // namespace

TEST(Classifier, Table1ShapeTrace) {
  const auto pr = Profile::table1();
  EXPECT_EQ(pr.resolutions(), (std::vector<std::size_t>{33, 16, 8, 4, 2, 1}));
  Rng rng(1);
  auto p = ClassifierParams<float>::init(pr, 3, 5, 2);
  EXPECT_EQ(p.kernels[0].shape(), (nn::Shape{64, 3, 5, 5}));
  EXPECT_EQ(p.kernels[4].shape(), (nn::Shape{1024, 512, 5, 5}));
  EXPECT_EQ(p.fc_w.shape(), (nn::Shape{1024, 5}));
  // Trace the stack by hand to check the stage-5 map is 1x1x1024.
  nn::NoGradGuard g;
  Tensor<float> h = random_batch<float>({2, 3, 33, 33}, rng);
  for (std::size_t s = 0; s < 5; ++s) h = nn::maxpool2d(nn::relu(nn::conv2d(h, p.kernels[s], 2)));
  EXPECT_EQ(h.shape(), (nn::Shape{2, 1024, 1, 1}));
}

TEST(Classifier, DeskProfileShapeTrace) {
  const auto pr = Profile::desk(33);
  EXPECT_EQ(pr.resolutions(), (std::vector<std::size_t>{33, 16, 8}));
  Rng rng(2);
  auto p = ClassifierParams<float>::init(pr, 6, 4, 3);
  nn::NoGradGuard g;
  const auto x = random_batch<float>({3, 6, 33, 33}, rng);
  const auto y = classify(x, p, false, rng);
  EXPECT_EQ(y.shape(), (nn::Shape{3, 4}));
  for (std::size_t b = 0; b < 3; ++b) {
    double s = 0;
    for (std::size_t c = 0; c < 4; ++c) {
      EXPECT_GE(y[b * 4 + c], 0.0f);
      s += y[b * 4 + c];
    }
    EXPECT_NEAR(s, 1.0, 1e-6);
  }
}

TEST(Classifier, WrongSpatialSizeIsShapeError) {
  Rng rng(3);
  auto p = ClassifierParams<float>::init(Profile::desk(9), 4, 3, 1);
  EXPECT_THROW(logits(random_batch<float>({1, 4, 8, 8}, rng), p, false, rng), ShapeError);
  EXPECT_THROW(logits(random_batch<float>({1, 5, 9, 9}, rng), p, false, rng), ShapeError);
  EXPECT_THROW(Profile::by_name("table1", 9), ValidationError);
  EXPECT_THROW(Profile::by_name("resnet", 9), ValidationError);
}

TEST(Classifier, DropoutOnlyInTrainMode) {
  Rng rng(4);
  auto p = ClassifierParams<double>::init(Profile::desk(8), 3, 3, 5);
  const auto x = random_batch<double>({4, 3, 8, 8}, rng);
  Rng a(7), b(7), c(8);
  EXPECT_EQ(logits(x, p, false, a).values(), logits(x, p, false, c).values());
  Rng a2(7);
  EXPECT_EQ(logits(x, p, true, a2).values(), logits(x, p, true, b).values());
  Rng d(9);
  EXPECT_NE(logits(x, p, true, d).values(), logits(x, p, false, d).values());
}

TEST(Classifier, LossExamples) {
  const std::vector<int> labels = {3, 1};
  // Uniform logits over 16 classes: ln 16.
  const auto uniform = Tensor<double>({2, 16}, 0.0);
  EXPECT_NEAR(classification_loss(uniform, labels)[0], std::log(16.0), 1e-12);
  EXPECT_NEAR(std::log(16.0), 2.7726, 1e-4);
  std::vector<double> v(32, -60.0);
  v[2] = 60.0;
  v[16] = 60.0;
  EXPECT_LT(classification_loss(Tensor<double>::from({2, 16}, v), labels)[0], 1e-12);
  Rng rng(5);
  const auto z = random_batch<double>({2, 4}, rng);
  const std::vector<int> l0 = {2}, l1 = {4};
  const auto z0 = Tensor<double>::from({1, 4}, {z[0], z[1], z[2], z[3]});
  const auto z1 = Tensor<double>::from({1, 4}, {z[4], z[5], z[6], z[7]});
  const std::vector<int> both = {2, 4};
  EXPECT_NEAR(classification_loss(z, both)[0],
              0.5 * (classification_loss(z0, l0)[0] + classification_loss(z1, l1)[0]), 1e-14);
  const std::vector<int> bad = {0, 5};
  EXPECT_THROW(classification_loss(z, bad), ValidationError);
}

TEST(Classifier, FiniteDifferenceThroughStack) {
  Rng rng(6);
  auto p = ClassifierParams<double>::init(tiny(), 3, 3, 7);
  p.profile.dropout = 0.0;
  for (auto* t : {&p.bn_gamma[0], &p.bn_beta[0], &p.bn_gamma[1], &p.bn_beta[1]})
    for (auto& v : t->data()) v += rng.uniform(-0.3, 0.3);
  const auto x = random_batch<double>({3, 3, 8, 8}, rng);
  const std::vector<int> labels = {1, 3, 2};
  std::vector<Tensor<double>> leaves;
  for (auto* t : p.parameters()) leaves.push_back(*t);
  const auto r = nn::finite_difference_check(
      [&] {
        Rng unused(0);
        return classification_loss(logits(x, p, false, unused), labels);
      },
      leaves, 1e-5);
  EXPECT_LT(r.max_rel_error, 1e-4);
}

TEST(Classifier, MaskEqualsZeroedChannel) {
  Rng rng(8);
  auto p = ClassifierParams<double>::init(Profile::desk(8), 5, 3, 9);
  const auto x = random_batch<double>({2, 5, 8, 8}, rng);
  const auto mask = selector::mask_from_bands({0, 2, 3}, 5);
  const auto masked = selector::apply_mask(x, mask);
  auto z = x.values();
  for (std::size_t b = 0; b < 2; ++b)
    for (std::size_t c : {1u, 4u})
      for (std::size_t i = 0; i < 64; ++i) z[(b * 5 + c) * 64 + i] = 0.0;
  Rng r1(1), r2(1);
  EXPECT_EQ(logits(masked, p, false, r1).values(), logits(Tensor<double>::from({2, 5, 8, 8}, z), p, false, r2).values());
}

TEST(Classifier, PredictLabelsIsOneBasedArgmax) {
  const auto s = Tensor<double>::from({2, 3}, {0.1, 0.7, 0.2, 0.5, 0.2, 0.3});
  EXPECT_EQ(predict_labels(s), (std::vector<int>{2, 1}));
}

TEST(Classifier, CloneIsIndependent) {
  auto p = ClassifierParams<float>::init(Profile::desk(8), 2, 2, 1);
  auto c = p.clone();
  c.fc_w.data()[0] += 1.0f;
  EXPECT_NE(c.fc_w[0], p.fc_w[0]);
  EXPECT_EQ(p.parameters().size(), p.parameter_names().size());
}
