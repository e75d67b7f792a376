#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "m3bs/errors.hpp"
#include "m3bs/objective/objective.hpp"
#include "m3bs/teachers/teachers.hpp"

namespace m3bs::meta {

struct TaskSpec {
  std::string path;
  std::string role = "meta-train";  // or "meta-test"
  std::string teacher_cache;         // optional precomputed teacher selections
};

struct TrainConfig {
  std::vector<TaskSpec> tasks;
  std::size_t n_sband = 20;
  std::size_t n_base = 3;
  std::size_t patch = 33;
  std::size_t batch = 128;
  std::size_t epochs = 400;
  double alpha = 0.001;
  double beta = 0.001;
  double gamma = 0.99;
  std::uint64_t seed = 0;
  std::string classifier_profile = "table1";
  std::string fusion = "diversity";
  std::string weighting = "uncertainty";
  std::vector<double> static_weights = {1.0, 1.0};
  std::vector<std::string> teachers = {"filter", "wrapper", "embedding"};
  // Settings beyond the core schema.
  double train_fraction = 0.1;
  std::size_t hidden = 256;
  std::size_t edge_budget = 1000;
  std::size_t n_infer = 256;
  teachers::TeacherConfig teacher;

  void validate() const {
    if (n_sband == 0) throw ValidationError("n_sband must be positive");
    if (n_base == 0 || hidden == 0) throw ValidationError("n_base and hidden must be positive");
    if (patch < 2) throw ValidationError("patch must be at least 2");
    if (batch == 0) throw ValidationError("batch must be positive");
    if (!(alpha >= 0.0) || !(beta >= 0.0)) throw ValidationError("learning rates must be nonnegative");
    if (!(gamma > 0.0 && gamma <= 1.0)) throw ValidationError("gamma must be in (0, 1]");
    if (classifier_profile != "table1" && classifier_profile != "desk") {
      throw ValidationError("classifier_profile must be 'table1' or 'desk'");
    }
    if (fusion != "diversity" && fusion != "union" && fusion != "normalized_sum") {
      throw ValidationError("fusion must be 'diversity', 'union' or 'normalized_sum'");
    }
    objective::parse_weighting(weighting);
    if (static_weights.size() != 2 || static_weights[0] < 0.0 || static_weights[1] < 0.0) {
      throw ValidationError("static_weights must be two nonnegative numbers");
    }
    for (const auto& t : teachers) {
      const auto& ids = teachers::teacher_ids();
      if (std::find(ids.begin(), ids.end(), t) == ids.end()) throw ValidationError("unknown teacher '" + t + "'");
    }
    if (!(train_fraction > 0.0 && train_fraction < 1.0)) throw ValidationError("train_fraction must be in (0, 1)");
    if (n_infer == 0 || edge_budget == 0) throw ValidationError("n_infer and edge_budget must be positive");
    for (const auto& t : tasks) {
      if (t.role != "meta-train" && t.role != "meta-test") {
        throw ValidationError("task role must be 'meta-train' or 'meta-test', got '" + t.role + "'");
      }
    }
  }
};

inline nlohmann::ordered_json to_json(const TrainConfig& c) {
  nlohmann::ordered_json tasks = nlohmann::ordered_json::array();
  for (const auto& t : c.tasks) {
    nlohmann::ordered_json e = {{"path", t.path}, {"role", t.role}};
    if (!t.teacher_cache.empty()) e["teacher_cache"] = t.teacher_cache;
    tasks.push_back(e);
  }
  return {{"tasks", tasks},
          {"n_sband", c.n_sband},
          {"n_base", c.n_base},
          {"patch", c.patch},
          {"batch", c.batch},
          {"epochs", c.epochs},
          {"alpha", c.alpha},
          {"beta", c.beta},
          {"gamma", c.gamma},
          {"seed", c.seed},
          {"classifier_profile", c.classifier_profile},
          {"fusion", c.fusion},
          {"weighting", c.weighting},
          {"static_weights", c.static_weights},
          {"teachers", c.teachers},
          {"train_fraction", c.train_fraction},
          {"hidden", c.hidden},
          {"edge_budget", c.edge_budget},
          {"n_infer", c.n_infer},
          {"teacher_config",
           {{"wrapper_budget", c.teacher.wrapper_budget},
            {"wrapper_holdout", c.teacher.wrapper_holdout},
            {"embedding_epochs", c.teacher.embedding_epochs},
            {"embedding_lr", c.teacher.embedding_lr},
            {"embedding_l1", c.teacher.embedding_l1},
            {"embedding_l2", c.teacher.embedding_l2},
            {"seed", c.teacher.seed}}}};
}

// Missing keys keep their defaults; unknown keys are rejected.
inline TrainConfig config_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ValidationError("config must be a JSON object");
  TrainConfig c;
  static const std::vector<std::string> known = {
      "tasks",     "n_sband",   "n_base",  "patch",          "batch",       "epochs",  "alpha",
      "beta",      "gamma",     "seed",    "classifier_profile", "fusion", "weighting", "static_weights",
      "teachers",  "train_fraction", "hidden", "edge_budget", "n_infer",   "teacher_config"};
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (std::find(known.begin(), known.end(), it.key()) == known.end()) {
      throw ValidationError("unknown config key '" + it.key() + "'");
    }
  }
  try {
    if (j.contains("tasks")) {
      for (const auto& t : j.at("tasks")) {
        c.tasks.push_back({t.at("path").get<std::string>(), t.value("role", "meta-train"),
                           t.value("teacher_cache", std::string())});
      }
    }
    auto get = [&](const char* key, auto& field) {
      if (j.contains(key)) field = j.at(key).get<std::decay_t<decltype(field)>>();
    };
    get("n_sband", c.n_sband);
    get("n_base", c.n_base);
    get("patch", c.patch);
    get("batch", c.batch);
    get("epochs", c.epochs);
    get("alpha", c.alpha);
    get("beta", c.beta);
    get("gamma", c.gamma);
    get("seed", c.seed);
    get("classifier_profile", c.classifier_profile);
    get("fusion", c.fusion);
    get("weighting", c.weighting);
    get("static_weights", c.static_weights);
    get("teachers", c.teachers);
    get("train_fraction", c.train_fraction);
    get("hidden", c.hidden);
    get("edge_budget", c.edge_budget);
    get("n_infer", c.n_infer);
    if (j.contains("teacher_config")) {
      const auto& t = j.at("teacher_config");
      c.teacher.wrapper_budget = t.value("wrapper_budget", c.teacher.wrapper_budget);
      c.teacher.wrapper_holdout = t.value("wrapper_holdout", c.teacher.wrapper_holdout);
      c.teacher.embedding_epochs = t.value("embedding_epochs", c.teacher.embedding_epochs);
      c.teacher.embedding_lr = t.value("embedding_lr", c.teacher.embedding_lr);
      c.teacher.embedding_l1 = t.value("embedding_l1", c.teacher.embedding_l1);
      c.teacher.embedding_l2 = t.value("embedding_l2", c.teacher.embedding_l2);
      c.teacher.seed = t.value("seed", c.teacher.seed);
    }
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("config: ") + e.what());
  }
  c.validate();
  return c;
}

}  // namespace m3bs::meta
