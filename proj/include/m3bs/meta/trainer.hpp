#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <memory>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "m3bs/classifier/classifier.hpp"
#include "m3bs/errors.hpp"
#include "m3bs/hsi/dataset.hpp"
#include "m3bs/hsi/split.hpp"
#include "m3bs/meta/config.hpp"
#include "m3bs/numerics/optim.hpp"
#include "m3bs/objective/objective.hpp"
#include "m3bs/selector/selector.hpp"
#include "m3bs/teachers/teachers.hpp"

namespace m3bs::meta {

using nn::GradList;
using nn::Tensor;

enum class Role { MetaTrain, MetaTest };

inline Role parse_role(const std::string& s) {
  if (s == "meta-train") return Role::MetaTrain;
  if (s == "meta-test") return Role::MetaTest;
  throw ValidationError("unknown task role '" + s + "'");
}

struct TaskBundle {
  std::shared_ptr<const hsi::HsiDataset> data;
  Role role = Role::MetaTrain;
  hsi::Split split;
  std::vector<teachers::TeacherSelection> votes;  // cached teacher selections

  const std::string& name() const { return data->name; }
};

// Split the dataset and (for meta-train tasks) run the configured teachers on
// its train pixels.  `index` decorrelates the seeds of different tasks.
// A non-empty `cached` supplies the votes instead of running the teachers.
inline TaskBundle make_bundle(std::shared_ptr<const hsi::HsiDataset> ds, Role role, const TrainConfig& cfg,
                              std::size_t index, const std::vector<teachers::TeacherSelection>& cached = {}) {
  ds->validate();
  TaskBundle b;
  b.data = std::move(ds);
  b.role = role;
  b.split = hsi::split(*b.data, {cfg.train_fraction, 0.3, Rng::mix(cfg.seed, 0x5b17 + index)});
  if (role == Role::MetaTrain && !cached.empty()) {
    for (const auto& id : cfg.teachers) {
      auto it = std::find_if(cached.begin(), cached.end(), [&](const auto& t) { return t.teacher == id; });
      if (it == cached.end()) throw ValidationError("teacher cache for '" + b.data->name + "' lacks '" + id + "'");
      if (it->n_band != b.data->n_band || it->bands.size() != cfg.n_sband) {
        throw ValidationError("teacher cache for '" + b.data->name + "' does not match the dataset or n_sband");
      }
      b.votes.push_back(*it);
    }
  } else if (role == Role::MetaTrain) {
    const auto train = b.split.train();
    auto tcfg = cfg.teacher;
    tcfg.seed = Rng::mix(cfg.teacher.seed, index);
    for (const auto& id : cfg.teachers) b.votes.push_back(teachers::run_teacher(id, *b.data, cfg.n_sband, tcfg, train));
  }
  return b;
}

// Supervision target for one task and epoch; empty when there are no teachers.
inline std::optional<teachers::TeacherLabel> fuse_votes(const TaskBundle& task, const TrainConfig& cfg,
                                                        std::uint64_t seed) {
  if (task.votes.empty()) return std::nullopt;
  if (cfg.fusion == "union") return teachers::union_fusion(task.votes);
  if (cfg.fusion == "normalized_sum") return teachers::normalized_sum_fusion(task.votes, cfg.n_sband);
  return teachers::diversity_ensemble(task.votes, cfg.n_sband, seed);
}

template <typename T = float>
struct MetaState {
  TrainConfig cfg;
  selector::SelectorParams<T> selector;
  std::vector<classifier::ClassifierParams<T>> classifiers;  // one per meta-train task
  objective::LossWeights<T> weights;
  nn::AdamState<T> adam_gcn;
  std::vector<nn::AdamState<T>> adam_cnn;
  nn::AdamState<T> adam_weights;
  double alpha = 0.0, beta = 0.0;  // current (decayed) rates
  std::size_t epoch = 0;
};

template <typename T = float>
MetaState<T> init_state(const TrainConfig& cfg, const std::vector<TaskBundle>& tasks) {
  cfg.validate();
  MetaState<T> st;
  st.cfg = cfg;
  st.selector = selector::SelectorParams<T>::init(cfg.patch * cfg.patch, Rng::mix(cfg.seed, 1), cfg.hidden, cfg.n_base);
  const auto profile = classifier::Profile::by_name(cfg.classifier_profile, cfg.patch);
  std::size_t k = 0;
  for (const auto& t : tasks) {
    if (t.role != Role::MetaTrain) continue;
    st.classifiers.push_back(
        classifier::ClassifierParams<T>::init(profile, t.data->n_band, t.data->n_class, Rng::mix(cfg.seed, 100 + k++)));
  }
  if (st.classifiers.empty()) throw ValidationError("training needs at least one meta-train task");
  st.alpha = cfg.alpha;
  st.beta = cfg.beta;
  st.adam_gcn = nn::AdamState<T>(st.selector.parameters(), cfg.beta, cfg.gamma);
  for (auto& c : st.classifiers) st.adam_cnn.emplace_back(c.parameters(), cfg.alpha, cfg.gamma);
  st.adam_weights = nn::AdamState<T>(st.weights.parameters(), cfg.alpha, cfg.gamma);
  return st;
}

// Plain SGD with step alpha on a detached duplicate of the shared selector,
// one step per support batch.  The shared parameters are never touched.
template <typename T>
selector::SelectorParams<T> support_phase(const TaskBundle& task, const selector::SelectorParams<T>& shared,
                                          double alpha, const std::vector<std::vector<std::size_t>>& batches,
                                          const std::optional<teachers::TeacherLabel>& label, const TrainConfig& cfg) {
  if (task.role != Role::MetaTrain) throw ValidationError("support phase on a meta-test task");
  auto dup = shared.clone();
  if (!label) return dup;
  auto params = dup.parameters();
  for (const auto& idx : batches) {
    const auto b = hsi::make_batch<T>(*task.data, idx, cfg.patch);
    nn::zero_grads(params);
    const auto loss = teachers::selection_loss(selector::batch_scores(b.x, dup, cfg.edge_budget), *label);
    if (!std::isfinite(static_cast<double>(loss.item()))) throw TrainingError("support selection loss is not finite");
    nn::backward(loss);
    nn::sgd_step(params, alpha);
  }
  return dup;
}

struct QueryStats {
  double l_bs = 0.0, l_cls = 0.0, loss = 0.0;
  std::size_t correct = 0, seen = 0, batches = 0;

  void merge(const QueryStats& o) {
    l_bs += o.l_bs;
    l_cls += o.l_cls;
    loss += o.loss;
    correct += o.correct;
    seen += o.seen;
    batches += o.batches;
  }
};

template <typename T>
struct QueryResult {
  GradList<T> grad;  // averaged over the task's query batches
  QueryStats stats;
};

template <typename T>
Tensor<T> task_loss(const Tensor<T>& l_bs, const Tensor<T>& l_cls, bool has_bs, const TrainConfig& cfg,
                    const objective::LossWeights<T>& w) {
  if (!has_bs) return l_cls;
  switch (objective::parse_weighting(cfg.weighting)) {
    case objective::Weighting::Uncertainty: return objective::uncertainty_loss(l_bs, l_cls, w);
    case objective::Weighting::Static:
      return objective::static_weighted_loss(l_bs, l_cls, cfg.static_weights[0], cfg.static_weights[1]);
    case objective::Weighting::ClsOnly: return l_cls;
  }
  return l_cls;
}

// Per query batch: score with the task-adapted selector, mask, classify, and
// step the task classifier (and the loss weights under uncertainty
// weighting) with Adam.  Selector gradients are accumulated, not applied.
template <typename T>
QueryResult<T> query_phase(const TaskBundle& task, selector::SelectorParams<T>& adapted,
                           classifier::ClassifierParams<T>& cnn, nn::AdamState<T>& adam_cnn,
                           objective::LossWeights<T>& weights, nn::AdamState<T>& adam_weights,
                           const std::vector<std::vector<std::size_t>>& batches,
                           const std::optional<teachers::TeacherLabel>& label, const TrainConfig& cfg, Rng& rng,
                           std::size_t epoch = 0) {
  if (task.role != Role::MetaTrain) throw ValidationError("query phase on a meta-test task");
  if (batches.empty()) throw ValidationError("query set of task '" + task.name() + "' is empty");
  auto sel_params = adapted.parameters();
  auto cnn_params = cnn.parameters();
  auto w_params = weights.parameters();
  const bool learn_weights = label && objective::parse_weighting(cfg.weighting) == objective::Weighting::Uncertainty;
  QueryResult<T> out;
  for (auto* p : sel_params) out.grad.emplace_back(p->numel(), T(0));
  for (std::size_t bi = 0; bi < batches.size(); ++bi) {
    const auto b = hsi::make_batch<T>(*task.data, batches[bi], cfg.patch);
    nn::zero_grads(sel_params);
    nn::zero_grads(cnn_params);
    nn::zero_grads(w_params);
    const auto scores = selector::batch_scores(b.x, adapted, cfg.edge_budget);
    const auto mask = selector::binarize(scores.data(), cfg.n_sband);
    const auto z = classifier::logits(selector::apply_mask(b.x, mask), cnn, true, rng);
    const auto l_cls = classifier::classification_loss(z, std::span<const int>(b.labels));
    const auto l_bs = label ? teachers::selection_loss(scores, *label) : Tensor<T>::scalar(T(0));
    const auto loss = task_loss(l_bs, l_cls, label.has_value(), cfg, weights);
    if (!std::isfinite(static_cast<double>(loss.item()))) {
      throw TrainingError("non-finite loss on task '" + task.name() + "' at epoch " + std::to_string(epoch + 1) +
                          ", query batch " + std::to_string(bi + 1));
    }
    nn::backward(loss);
    for (std::size_t i = 0; i < sel_params.size(); ++i) {
      if (sel_params[i]->has_grad()) {
        const auto g = std::as_const(*sel_params[i]).grad();
        for (std::size_t j = 0; j < g.size(); ++j) out.grad[i][j] += g[j];
      }
    }
    nn::adam_step(cnn_params, adam_cnn);
    if (learn_weights) nn::adam_step(w_params, adam_weights);
    const auto pred = classifier::predict_labels(z);
    for (std::size_t i = 0; i < pred.size(); ++i) out.stats.correct += pred[i] == b.labels[i];
    out.stats.seen += pred.size();
    out.stats.l_bs += static_cast<double>(l_bs.item());
    out.stats.l_cls += static_cast<double>(l_cls.item());
    out.stats.loss += static_cast<double>(loss.item());
    ++out.stats.batches;
  }
  const T inv = T(1) / static_cast<T>(batches.size());
  for (auto& g : out.grad)
    for (auto& v : g) v *= inv;
  return out;
}

// Sum of the task meta-gradients.
template <typename T>
GradList<T> sum_grads(const std::vector<GradList<T>>& task_grads) {
  if (task_grads.empty()) throw ValidationError("meta update needs at least one task gradient");
  GradList<T> g = task_grads.front();
  for (std::size_t k = 1; k < task_grads.size(); ++k)
    for (std::size_t i = 0; i < g.size(); ++i)
      for (std::size_t j = 0; j < g[i].size(); ++j) g[i][j] += task_grads[k][i][j];
  return g;
}

template <typename T>
void meta_update(selector::SelectorParams<T>& shared, const std::vector<GradList<T>>& task_grads,
                 nn::AdamState<T>& adam) {
  nn::adam_step(shared.parameters(), sum_grads(task_grads), adam);
}

struct EpochStats {
  std::size_t epoch = 0;  // 1-based
  double loss = 0, l_bs = 0, l_cls = 0, query_acc = 0;
  double lambda_bs = 1, lambda_cls = 1, alpha = 0, beta = 0;
  std::vector<double> task_l_cls;
};

template <typename T>
struct EpochTrace {
  GradList<T> meta_grad;
  nn::AdamState<T> adam_before;
};

inline std::vector<std::vector<std::size_t>> task_batches(const std::vector<std::size_t>& idx, const TrainConfig& cfg,
                                                          std::uint64_t salt, std::size_t epoch) {
  if (idx.empty()) return {};
  return hsi::batch_iter(idx, cfg.batch, Rng::mix(cfg.seed, salt), epoch);
}

template <typename T>
EpochStats train_epoch(MetaState<T>& st, const std::vector<TaskBundle>& tasks, EpochTrace<T>* trace = nullptr) {
  const auto& cfg = st.cfg;
  std::vector<GradList<T>> grads;
  QueryStats total;
  EpochStats es;
  std::size_t k = 0;
  for (const auto& task : tasks) {
    if (task.role != Role::MetaTrain) continue;
    if (task.split.support.empty()) throw ValidationError("support set of task '" + task.name() + "' is empty");
    const auto label = fuse_votes(task, cfg, Rng::mix(Rng::mix(cfg.seed, 5000 + k), st.epoch));
    const auto support = task_batches(task.split.support, cfg, 2000 + k, st.epoch);
    const auto query = task_batches(task.split.query, cfg, 3000 + k, st.epoch);
    auto adapted = support_phase(task, st.selector, st.alpha, support, label, cfg);
    Rng rng(Rng::mix(Rng::mix(cfg.seed, 4000 + k), st.epoch));
    auto q = query_phase(task, adapted, st.classifiers[k], st.adam_cnn[k], st.weights, st.adam_weights, query, label,
                         cfg, rng, st.epoch);
    es.task_l_cls.push_back(q.stats.l_cls / static_cast<double>(q.stats.batches));
    total.merge(q.stats);
    grads.push_back(std::move(q.grad));
    ++k;
  }
  if (grads.empty()) throw ValidationError("no meta-train tasks");
  if (trace) {
    trace->adam_before = st.adam_gcn;
    trace->meta_grad = sum_grads(grads);
  }
  meta_update(st.selector, grads, st.adam_gcn);
  es.epoch = ++st.epoch;
  const double nb = static_cast<double>(total.batches);
  es.loss = total.loss / nb;
  es.l_bs = total.l_bs / nb;
  es.l_cls = total.l_cls / nb;
  es.query_acc = static_cast<double>(total.correct) / static_cast<double>(total.seen);
  es.lambda_bs = static_cast<double>(st.weights.lambda_bs());
  es.lambda_cls = static_cast<double>(st.weights.lambda_cls());
  es.alpha = st.alpha;
  es.beta = st.beta;
  st.alpha *= cfg.gamma;
  st.beta *= cfg.gamma;
  st.adam_gcn.decay();
  for (auto& a : st.adam_cnn) a.decay();
  st.adam_weights.decay();
  return es;
}

inline void write_log_header(std::ostream& out) {
  out << "epoch,loss,l_bs,l_cls,query_acc,lambda_bs,lambda_cls,alpha,beta\n";
}

inline void write_log_row(std::ostream& out, const EpochStats& e) {
  out.precision(9);
  out << e.epoch << ',' << e.loss << ',' << e.l_bs << ',' << e.l_cls << ',' << e.query_acc << ',' << e.lambda_bs << ','
      << e.lambda_cls << ',' << e.alpha << ',' << e.beta << '\n';
}

template <typename T>
std::vector<EpochStats> train(MetaState<T>& st, const std::vector<TaskBundle>& tasks, std::ostream* log = nullptr,
                              std::ostream* lambda_log = nullptr) {
  std::vector<EpochStats> out;
  if (log) write_log_header(*log);
  if (lambda_log) *lambda_log << "epoch,lambda_bs,lambda_cls\n";
  while (st.epoch < st.cfg.epochs) {
    out.push_back(train_epoch(st, tasks));
    if (log) write_log_row(*log, out.back());
    if (lambda_log) {
      lambda_log->precision(9);
      *lambda_log << out.back().epoch << ',' << out.back().lambda_bs << ',' << out.back().lambda_cls << '\n';
    }
  }
  return out;
}

}  // namespace m3bs::meta
