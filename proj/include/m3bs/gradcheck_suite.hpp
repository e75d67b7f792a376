#pragma once

// Finite-difference checks of every differentiable operation plus the
// composed selector and classifier graphs, in double precision with all
// dimensions <= 16.  Shared by the CLI and the acceptance runner.

#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "m3bs/classifier/classifier.hpp"
#include "m3bs/numerics/gradcheck.hpp"
#include "m3bs/numerics/ops.hpp"
#include "m3bs/objective/objective.hpp"
#include "m3bs/selector/selector.hpp"

namespace m3bs::gradcheck {

using Td = nn::Tensor<double>;

struct CaseResult {
  std::string name;
  std::uint64_t seed = 0;
  nn::GradCheckResult result;
};

inline Td random_tensor(nn::Shape shape, Rng& rng, bool grad = true, double lo = -1.0, double hi = 1.0) {
  std::vector<double> v(nn::numel_of(shape));
  for (auto& x : v) x = rng.uniform(lo, hi);
  return Td::from(std::move(shape), std::move(v), grad);
}

// All op-level cases for one seed.
inline std::vector<CaseResult> operation_cases(std::uint64_t seed) {
  using namespace nn;
  Rng rng(100 + seed);
  const std::size_t m = 2 + rng.below(4), k = 2 + rng.below(4), n = 2 + rng.below(4);
  auto a = random_tensor({m, k}, rng);
  auto b = random_tensor({k, n}, rng);
  auto c = random_tensor({m, k}, rng);
  auto weights = random_tensor({m, n}, rng, false);
  auto readout = [seed](const Td& t) {
    Td w = Td::from(t.shape(), std::vector<double>(t.numel()));
    Rng r2(seed);
    for (auto& v : w.data()) v = r2.uniform(-1, 1);
    return sum(mul(t, w));
  };
  std::vector<std::pair<std::string, std::pair<std::function<Td()>, std::vector<Td>>>> cases;
  auto add_case = [&](std::string name, std::function<Td()> f, std::vector<Td> leaves) {
    cases.push_back({std::move(name), {std::move(f), std::move(leaves)}});
  };
  add_case("matmul", [=] { return sum(mul(matmul(a, b), weights)); }, {a, b});
  add_case("add", [=] { return readout(add(a, c)); }, {a, c});
  add_case("sub", [=] { return readout(sub(a, c)); }, {a, c});
  add_case("mul", [=] { return readout(mul(a, c)); }, {a, c});
  add_case("scale", [=] { return readout(scale(a, 1.7)); }, {a});
  add_case("relu", [=] { return readout(relu(a)); }, {a});
  add_case("sigmoid", [=] { return readout(sigmoid(a)); }, {a});
  add_case("exp", [=] { return readout(nn::exp(a)); }, {a});
  add_case("softmax", [=] { return readout(softmax(a)); }, {a});
  add_case("mean_rows", [=] { return readout(mean_rows(a)); }, {a});
  add_case("mean", [=] { return mean(mul(a, c)); }, {a, c});
  add_case("average", [=] { return readout(average(std::vector<Td>{a, c})); }, {a, c});
  add_case("reshape", [=] { return readout(reshape(a, {k, m})); }, {a});
  auto labels = std::make_shared<std::vector<int>>();
  for (std::size_t i = 0; i < m; ++i) labels->push_back(1 + static_cast<int>(rng.below(k)));
  add_case("softmax_cross_entropy", [=] { return softmax_cross_entropy(a, *labels); }, {a});
  auto p = random_tensor({6}, rng, true, 0.05, 0.95);
  auto tgt = std::make_shared<std::vector<double>>();
  for (int i = 0; i < 6; ++i) tgt->push_back(static_cast<double>(rng.below(2)));
  add_case("binary_cross_entropy", [=] { return binary_cross_entropy(p, std::span<const double>(*tgt)); }, {p});
  auto gamma = random_tensor({k}, rng), beta = random_tensor({k}, rng);
  add_case("batch_norm_2d", [=] { return readout(batch_norm(a, 1, gamma, beta)); }, {a, gamma, beta});
  auto coeff = random_tensor({2}, rng);
  add_case("combine", [=] { return readout(combine(std::vector<Td>{a, c}, coeff)); }, {a, c, coeff});
  auto bias = random_tensor({k}, rng);
  add_case("add_bias", [=] { return readout(add_bias(a, bias)); }, {a, bias});
  add_case("scale_columns", [=] { return readout(scale_columns(a, bias)); }, {a, bias});
  auto f = std::make_shared<std::vector<double>>(std::vector<double>{0.0, 1.0, 0.5});
  auto img = random_tensor({2, 3, 5, 4}, rng);
  auto ker = random_tensor({2, 3, 3, 3}, rng);
  add_case("scale_axis", [=] { return readout(scale_axis(img, 1, std::span<const double>(*f))); }, {img});
  add_case("conv2d", [=] { return readout(conv2d(img, ker, 1)); }, {img, ker});
  add_case("maxpool2d", [=] { return readout(maxpool2d(img)); }, {img});
  add_case("global_avg_pool", [=] { return readout(global_avg_pool(img)); }, {img});
  auto g3 = random_tensor({3}, rng), b3 = random_tensor({3}, rng);
  add_case("batch_norm_4d", [=] { return readout(batch_norm(img, 1, g3, b3)); }, {img, g3, b3});
  add_case("stack", [=] { return readout(stack(std::vector<Td>{a, c})); }, {a, c});
  auto s_bs = Td::scalar(rng.uniform(-1, 1), true), s_cls = Td::scalar(rng.uniform(-1, 1), true);
  auto l_bs = Td::scalar(rng.uniform(0.1, 3.0), true), l_cls = Td::scalar(rng.uniform(0.1, 3.0), true);
  add_case("uncertainty_loss",
           [=] {
             objective::LossWeights<double> w;
             w.s_bs = s_bs;
             w.s_cls = s_cls;
             return objective::uncertainty_loss(l_bs, l_cls, w);
           },
           {s_bs, s_cls, l_bs, l_cls});

  std::vector<CaseResult> out;
  for (auto& [name, fc] : cases) out.push_back({name, seed, nn::finite_difference_check(fc.first, fc.second)});
  return out;
}

// BCE of the batch-averaged selector scores w.r.t. every selector tensor.
inline CaseResult selector_case(std::uint64_t seed) {
  Rng rng(13 + seed);
  auto p = selector::SelectorParams<double>::init(16, 14 + seed, 8);
  for (auto* t : {&p.bn1_gamma, &p.bn1_beta, &p.bn2_gamma, &p.bn2_beta})
    for (auto& v : t->data()) v += rng.uniform(-0.3, 0.3);
  const std::size_t n_band = 12;
  const auto batch = random_tensor({2, n_band, 4, 4}, rng, false);
  std::vector<double> target(n_band, 0.0);
  for (int i = 0; i < 3; ++i) target[rng.below(n_band)] = 1.0;
  std::vector<Td> leaves;
  for (auto* t : p.parameters()) leaves.push_back(*t);
  const auto r = nn::finite_difference_check(
      [&] { return nn::binary_cross_entropy(selector::batch_scores(batch, p), std::span<const double>(target)); },
      leaves, 1e-5);
  return {"selector_graph", seed, r};
}

// Cross-entropy through a two-stage conv classifier w.r.t. every tensor.
inline CaseResult classifier_case(std::uint64_t seed) {
  Rng rng(6 + seed);
  classifier::Profile prof{"tiny", {4, 6}, 8, 0.0, true};
  auto p = classifier::ClassifierParams<double>::init(prof, 3, 3, 7 + seed);
  for (std::size_t s = 0; s < p.bn_gamma.size(); ++s)
    for (auto* t : {&p.bn_gamma[s], &p.bn_beta[s]})
      for (auto& v : t->data()) v += rng.uniform(-0.3, 0.3);
  const auto x = random_tensor({3, 3, 8, 8}, rng, false);
  const std::vector<int> labels = {1, 3, 2};
  std::vector<Td> leaves;
  for (auto* t : p.parameters()) leaves.push_back(*t);
  const auto r = nn::finite_difference_check(
      [&] {
        Rng unused(0);
        return classifier::classification_loss(classifier::logits(x, p, false, unused), labels);
      },
      leaves, 1e-5);
  return {"classifier_graph", seed, r};
}

inline std::vector<CaseResult> run_suite(std::size_t n_seeds = 5) {
  std::vector<CaseResult> out;
  for (std::uint64_t s = 0; s < n_seeds; ++s) {
    auto ops = operation_cases(s);
    out.insert(out.end(), ops.begin(), ops.end());
    out.push_back(selector_case(s));
    out.push_back(classifier_case(s));
  }
  return out;
}

inline double worst(const std::vector<CaseResult>& r) {
  double w = 0.0;
  for (const auto& c : r) w = std::max(w, c.result.max_rel_error);
  return w;
}

}  // namespace m3bs::gradcheck
