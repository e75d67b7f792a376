#pragma once

// Checkpoint directory layout:
//   manifest.json  {format, version, dtype, epoch, config, selector, classifiers,
//                   tensors: [{name, shape, offset, numel}], selector_sha256}
//   params.bin     little-endian float32 values of every tensor, concatenated
//                  in manifest order (offsets in elements)

#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "m3bs/errors.hpp"
#include "m3bs/hsi/io.hpp"
#include "m3bs/meta/trainer.hpp"
#include "m3bs/numerics/hash.hpp"

namespace m3bs::meta {

struct ClassifierInfo {
  std::string task;
  std::size_t n_band = 0, n_class = 0;
};

struct Checkpoint {
  TrainConfig cfg;
  std::size_t epoch = 0;
  selector::SelectorParams<float> selector;
  std::vector<ClassifierInfo> classifier_info;
  std::vector<classifier::ClassifierParams<float>> classifiers;
  objective::LossWeights<float> weights;
};

template <typename T>
std::string selector_hash(const selector::SelectorParams<T>& p) {
  return nn::hash_params(const_cast<selector::SelectorParams<T>&>(p).parameters());
}

namespace detail {

struct NamedTensor {
  std::string name;
  nn::Tensor<float>* tensor;
};

inline std::vector<NamedTensor> named_tensors(Checkpoint& c) {
  std::vector<NamedTensor> out;
  const auto sel_names = c.selector.parameter_names();
  const auto sel = c.selector.parameters();
  for (std::size_t i = 0; i < sel.size(); ++i) out.push_back({"selector." + sel_names[i], sel[i]});
  for (std::size_t k = 0; k < c.classifiers.size(); ++k) {
    const auto names = c.classifiers[k].parameter_names();
    const auto ps = c.classifiers[k].parameters();
    for (std::size_t i = 0; i < ps.size(); ++i) {
      out.push_back({"classifier." + std::to_string(k) + "." + names[i], ps[i]});
    }
  }
  out.push_back({"weights.s_bs", &c.weights.s_bs});
  out.push_back({"weights.s_cls", &c.weights.s_cls});
  return out;
}

}  // namespace detail

inline Checkpoint make_checkpoint(const MetaState<float>& st, const std::vector<TaskBundle>& tasks) {
  Checkpoint c;
  c.cfg = st.cfg;
  c.epoch = st.epoch;
  c.selector = st.selector.clone();
  for (const auto& cls : st.classifiers) c.classifiers.push_back(cls.clone());
  for (const auto& t : tasks)
    if (t.role == Role::MetaTrain) c.classifier_info.push_back({t.name(), t.data->n_band, t.data->n_class});
  c.weights = st.weights.clone();
  return c;
}

inline void save_checkpoint(Checkpoint c, const std::string& dir) {
  std::filesystem::create_directories(dir);
  nlohmann::ordered_json tensors = nlohmann::ordered_json::array();
  std::vector<float> blob;
  for (const auto& nt : detail::named_tensors(c)) {
    tensors.push_back({{"name", nt.name}, {"shape", nt.tensor->shape()}, {"offset", blob.size()}, {"numel", nt.tensor->numel()}});
    blob.insert(blob.end(), nt.tensor->data().begin(), nt.tensor->data().end());
  }
  nlohmann::ordered_json classifiers = nlohmann::ordered_json::array();
  for (const auto& ci : c.classifier_info) {
    classifiers.push_back({{"task", ci.task}, {"n_band", ci.n_band}, {"n_class", ci.n_class}});
  }
  const nlohmann::ordered_json manifest = {
      {"format", "m3bs-checkpoint"},
      {"version", 1},
      {"dtype", "f32"},
      {"epoch", c.epoch},
      {"config", to_json(c.cfg)},
      {"selector", {{"hw", c.selector.hw}, {"hidden", c.selector.hidden}, {"n_base", c.selector.n_base}}},
      {"classifiers", classifiers},
      {"tensors", tensors},
      {"selector_sha256", selector_hash(c.selector)}};
  std::string bytes;
  hsi::detail::append_le(bytes, blob);
  hsi::detail::write_file((std::filesystem::path(dir) / "params.bin").string(), bytes);
  hsi::detail::write_file((std::filesystem::path(dir) / "manifest.json").string(), manifest.dump(2) + "\n");
}

inline Checkpoint load_checkpoint(const std::string& dir) {
  const auto text = hsi::detail::read_file((std::filesystem::path(dir) / "manifest.json").string());
  nlohmann::json m;
  try {
    m = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("checkpoint manifest: ") + e.what());
  }
  if (m.value("format", "") != "m3bs-checkpoint" || m.value("dtype", "") != "f32") {
    throw FormatError("not an m3bs f32 checkpoint: " + dir);
  }
  Checkpoint c;
  try {
    c.cfg = config_from_json(m.at("config"));
    c.epoch = m.at("epoch").get<std::size_t>();
    const auto& s = m.at("selector");
    c.selector = selector::SelectorParams<float>::init(s.at("hw").get<std::size_t>(), 0, s.at("hidden").get<std::size_t>(),
                                                       s.at("n_base").get<std::size_t>());
    const auto profile = classifier::Profile::by_name(c.cfg.classifier_profile, c.cfg.patch);
    for (const auto& ci : m.at("classifiers")) {
      ClassifierInfo info{ci.at("task").get<std::string>(), ci.at("n_band").get<std::size_t>(),
                          ci.at("n_class").get<std::size_t>()};
      c.classifiers.push_back(classifier::ClassifierParams<float>::init(profile, info.n_band, info.n_class, 0));
      c.classifier_info.push_back(std::move(info));
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("checkpoint manifest: ") + e.what());
  }
  const auto bytes = hsi::detail::read_file((std::filesystem::path(dir) / "params.bin").string());
  if (bytes.size() % sizeof(float) != 0) throw FormatError("checkpoint archive size is not a multiple of 4");
  std::vector<float> blob;
  hsi::detail::read_le(bytes.data(), bytes.size() / sizeof(float), blob);
  auto slots = detail::named_tensors(c);
  const auto& entries = m.at("tensors");
  if (entries.size() != slots.size()) throw FormatError("checkpoint tensor count does not match its configuration");
  for (std::size_t i = 0; i < slots.size(); ++i) {
    const auto& e = entries[i];
    if (e.at("name").get<std::string>() != slots[i].name) {
      throw FormatError("checkpoint tensor " + std::to_string(i) + " is '" + e.at("name").get<std::string>() +
                        "', expected '" + slots[i].name + "'");
    }
    if (e.at("shape").get<nn::Shape>() != slots[i].tensor->shape()) {
      throw FormatError("checkpoint tensor '" + slots[i].name + "' has the wrong shape");
    }
    const auto off = e.at("offset").get<std::size_t>(), n = e.at("numel").get<std::size_t>();
    if (n != slots[i].tensor->numel() || off + n > blob.size()) {
      throw FormatError("checkpoint tensor '" + slots[i].name + "' exceeds the archive");
    }
    std::copy(blob.begin() + static_cast<std::ptrdiff_t>(off), blob.begin() + static_cast<std::ptrdiff_t>(off + n),
              slots[i].tensor->data().begin());
  }
  if (m.contains("selector_sha256") && m.at("selector_sha256").get<std::string>() != selector_hash(c.selector)) {
    throw FormatError("checkpoint selector hash mismatch (archive corrupted?)");
  }
  return c;
}

// Zero-shot band selection on a dataset the checkpoint was not trained on.
// Only pixels are read; labels and parameters are left alone.
inline selector::Selection zero_shot_select(const Checkpoint& c, const hsi::HsiDataset& ds, std::size_t n_sband,
                                            std::uint64_t seed, std::size_t n_infer = 256) {
  for (const auto& ci : c.classifier_info) {
    if (ci.task == ds.name) throw ValidationError("dataset '" + ds.name + "' was used for meta-training");
  }
  return selector::select_bands(ds, c.selector, n_sband, c.cfg.patch, seed, n_infer, c.cfg.edge_budget);
}

}  // namespace m3bs::meta
