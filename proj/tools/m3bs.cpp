// m3bs: command-line front end.
//
// Exit codes: 0 success, 1 usage or validation error, 2 runtime failure.

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "m3bs/eval/evaluate.hpp"
#include "m3bs/eval/render.hpp"
#include "m3bs/gradcheck_suite.hpp"
#include "m3bs/graph/band_graph.hpp"
#include "m3bs/hsi/io.hpp"
#include "m3bs/hsi/synthetic.hpp"
#include "m3bs/meta/checkpoint.hpp"

using namespace m3bs;
using json = nlohmann::json;

namespace {

json read_json(const std::string& path) {
  try {
    return json::parse(hsi::detail::read_file(path));
  } catch (const json::parse_error& e) {
    throw FormatError(path + ": " + e.what());
  }
}

void write_text(const std::string& path, const std::string& text) {
  if (path.empty() || path == "-") {
    std::cout << text;
    return;
  }
  hsi::detail::write_file(path, text);
}

std::vector<std::size_t> parse_band_list(const std::string& s) {
  std::vector<std::size_t> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      std::size_t used = 0;
      out.push_back(std::stoul(item, &used));
      if (used != item.size()) throw std::invalid_argument(item);
    } catch (const std::logic_error&) {
      throw ValidationError("bad band index '" + item + "'");
    }
  }
  return out;
}

// Bands come from --selection (a select output) or --bands "i,j,k".
std::vector<std::size_t> resolve_bands(const std::string& selection, const std::string& bands, std::size_t n_band) {
  if (selection.empty() == bands.empty()) throw ValidationError("give exactly one of --selection or --bands");
  auto out = selection.empty() ? parse_band_list(bands) : selector::Selection::from_json(read_json(selection)).bands;
  for (auto b : out)
    if (b >= n_band) throw ValidationError("band " + std::to_string(b) + " out of range");
  return out;
}

std::vector<meta::TaskBundle> load_tasks(const meta::TrainConfig& cfg) {
  std::vector<meta::TaskBundle> tasks;
  for (std::size_t i = 0; i < cfg.tasks.size(); ++i) {
    const auto& t = cfg.tasks[i];
    auto ds = std::make_shared<hsi::HsiDataset>(hsi::load(t.path));
    std::vector<teachers::TeacherSelection> cached;
    if (!t.teacher_cache.empty()) {
      cached = teachers::cache_from_json(read_json(t.teacher_cache), ds->name, ds->n_band, cfg.n_sband);
    }
    tasks.push_back(meta::make_bundle(ds, meta::parse_role(t.role), cfg, i, cached));
  }
  return tasks;
}

struct EvalFlags {
  std::size_t repeats = 30, epochs = 40, batch = 64, patch = 9;
  double lr = 0.005, train_fraction = 0.1;
  std::string profile = "desk";
  std::uint64_t seed = 0;

  void add(CLI::App* app) {
    app->add_option("--epochs", epochs, "Classifier training epochs")->capture_default_str();
    app->add_option("--batch", batch, "Classifier minibatch size")->capture_default_str();
    app->add_option("--lr", lr, "Classifier Adam learning rate")->capture_default_str();
    app->add_option("--patch", patch, "Classifier window size")->capture_default_str();
    app->add_option("--profile", profile, "Classifier profile (desk|table1)")->capture_default_str();
    app->add_option("--train-fraction", train_fraction, "Labeled fraction used for training")->capture_default_str();
    app->add_option("--seed", seed, "Base seed")->capture_default_str();
  }
  eval::EvalConfig config() const {
    eval::EvalConfig c;
    c.repeats = repeats;
    c.epochs = epochs;
    c.batch = batch;
    c.lr = lr;
    c.patch = patch;
    c.profile = profile;
    c.train_fraction = train_fraction;
    c.seed = seed;
    c.validate();
    return c;
  }
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Meta-learned band selection for hyperspectral images"};
  app.require_subcommand(1);

  // generate
  auto* gen = app.add_subcommand("generate", "Write a planted synthetic dataset");
  std::string gen_out, gen_truth, gen_name = "synthetic";
  std::size_t gen_bands = 64, gen_classes = 4, gen_inf = 8, gen_h = 64, gen_w = 64, gen_regions = 16;
  double gen_sigma = 0.1, gen_contrast = 0.15;
  std::uint64_t gen_seed = 0;
  gen->add_option("--out", gen_out, "Output .hsic path")->required();
  gen->add_option("--truth", gen_truth, "Write the planted bands as JSON here");
  gen->add_option("--name", gen_name, "Dataset name")->capture_default_str();
  gen->add_option("--n-band", gen_bands, "Number of bands")->capture_default_str();
  gen->add_option("--n-class", gen_classes, "Number of classes")->capture_default_str();
  gen->add_option("--informative", gen_inf, "Number of planted bands")->capture_default_str();
  gen->add_option("--height", gen_h)->capture_default_str();
  gen->add_option("--width", gen_w)->capture_default_str();
  gen->add_option("--regions", gen_regions, "Number of label regions")->capture_default_str();
  gen->add_option("--sigma", gen_sigma, "Noise level")->capture_default_str();
  gen->add_option("--contrast", gen_contrast, "Class code amplitude")->capture_default_str();
  gen->add_option("--seed", gen_seed)->capture_default_str();

  // teach
  auto* teach = app.add_subcommand("teach", "Precompute teacher selections for the meta-train tasks");
  std::string teach_config, teach_dir = ".", teach_validate, teach_dataset;
  std::size_t teach_k = 20;
  teach->add_option("--config", teach_config, "Training config JSON");
  teach->add_option("--out-dir", teach_dir, "Directory for <dataset>.teachers.json")->capture_default_str();
  teach->add_option("--validate", teach_validate, "Check an existing cache against --dataset and --k");
  teach->add_option("--dataset", teach_dataset, "Dataset for --validate");
  teach->add_option("--k", teach_k, "Bands per teacher for --validate")->capture_default_str();

  // train
  auto* train = app.add_subcommand("train", "Meta-train the band selector");
  std::string train_config, train_out = "checkpoint", train_log, train_lambda_log;
  std::vector<std::string> train_tasks, test_tasks, train_teachers;
  std::optional<std::size_t> o_epochs, o_patch, o_batch, o_sband, o_budget, o_hidden;
  std::optional<double> o_alpha, o_beta, o_gamma;
  std::optional<std::uint64_t> o_seed;
  std::optional<std::string> o_profile, o_weighting, o_fusion;
  train->add_option("--config", train_config, "Training config JSON; flags below override it");
  train->add_option("--out", train_out, "Checkpoint directory")->capture_default_str();
  train->add_option("--log", train_log, "Per-epoch CSV log (default <out>/train_log.csv)");
  train->add_option("--lambda-log", train_lambda_log, "Loss weight trajectory (default <out>/lambda_log.csv)");
  train->add_option("--task", train_tasks, "Extra meta-train dataset (repeatable)");
  train->add_option("--test-task", test_tasks, "Extra meta-test dataset (repeatable)");
  train->add_option("--teachers", train_teachers, "Teacher ids")->delimiter(',');
  train->add_option("--epochs", o_epochs);
  train->add_option("--patch", o_patch);
  train->add_option("--batch", o_batch);
  train->add_option("--n-sband", o_sband);
  train->add_option("--edge-budget", o_budget);
  train->add_option("--hidden", o_hidden);
  train->add_option("--alpha", o_alpha);
  train->add_option("--beta", o_beta);
  train->add_option("--gamma", o_gamma);
  train->add_option("--seed", o_seed);
  train->add_option("--profile", o_profile, "Classifier profile (table1|desk)");
  train->add_option("--weighting", o_weighting, "uncertainty|static|cls_only");
  train->add_option("--fusion", o_fusion, "diversity|union|normalized_sum");

  // select
  auto* sel = app.add_subcommand("select", "Zero-shot band selection on an unseen dataset");
  std::string sel_ckpt, sel_dataset, sel_out, sel_adj;
  std::optional<std::size_t> sel_k, sel_infer;
  std::size_t sel_pixel = 0;
  std::uint64_t sel_seed = 0;
  sel->add_option("--checkpoint", sel_ckpt, "Checkpoint directory")->required();
  sel->add_option("--dataset", sel_dataset, "Dataset .hsic")->required();
  sel->add_option("--k", sel_k, "Bands to select (default: the checkpoint's n_sband)");
  sel->add_option("--n-infer", sel_infer, "Windows averaged for the scores");
  sel->add_option("--seed", sel_seed)->capture_default_str();
  sel->add_option("--out", sel_out, "Write the selection here instead of stdout");
  sel->add_option("--dump-adjacency", sel_adj, "Write the band graph of one window as CSV");
  sel->add_option("--pixel", sel_pixel, "Window centre for --dump-adjacency")->capture_default_str();

  // classify
  auto* cls = app.add_subcommand("classify", "Train a classifier on selected bands and predict a label raster");
  std::string cls_dataset, cls_selection, cls_bands, cls_out;
  bool cls_full = false;
  EvalFlags cls_flags;
  cls->add_option("--dataset", cls_dataset)->required();
  cls->add_option("--selection", cls_selection, "Selection JSON from select");
  cls->add_option("--bands", cls_bands, "Comma-separated band indices");
  cls->add_option("--out", cls_out, "Output label raster")->required();
  cls->add_flag("--full-image", cls_full, "Predict unlabeled pixels too");
  cls_flags.add(cls);

  // eval
  auto* ev = app.add_subcommand("eval", "Repeated OA/AA/Kappa evaluation of a band subset");
  std::string ev_dataset, ev_selection, ev_bands, ev_json, ev_csv, ev_source = "fresh", ev_ckpt;
  EvalFlags ev_flags;
  ev->add_option("--dataset", ev_dataset)->required();
  ev->add_option("--selection", ev_selection, "Selection JSON from select");
  ev->add_option("--bands", ev_bands, "Comma-separated band indices");
  ev->add_option("--repeats", ev_flags.repeats, "Independent runs")->capture_default_str();
  ev->add_option("--json", ev_json, "Write the full report as JSON");
  ev->add_option("--csv", ev_csv, "Write a one-row table as CSV");
  ev->add_option("--source", ev_source, "fresh: new classifier per run; checkpoint: stored meta-train classifier")
      ->check(CLI::IsMember({"fresh", "checkpoint"}))
      ->capture_default_str();
  ev->add_option("--checkpoint", ev_ckpt, "Checkpoint for --source checkpoint");
  ev_flags.add(ev);

  // render
  auto* ren = app.add_subcommand("render", "Render a label raster as a PNG classification map");
  std::string ren_dataset, ren_pred, ren_out;
  bool ren_full = false, ren_truth = false;
  ren->add_option("--dataset", ren_dataset)->required();
  ren->add_option("--predictions", ren_pred, "Label raster from classify");
  ren->add_flag("--truth", ren_truth, "Render the ground truth instead");
  ren->add_option("--out", ren_out, "Output PNG")->required();
  ren->add_flag("--full-image", ren_full, "Draw predictions on unlabeled pixels");

  // gradcheck
  auto* gc = app.add_subcommand("gradcheck", "Finite-difference check of every differentiable operation");
  std::size_t gc_seeds = 5;
  double gc_tol = 1e-4;
  bool gc_verbose = false;
  gc->add_option("--seeds", gc_seeds)->capture_default_str();
  gc->add_option("--tol", gc_tol, "Failure threshold on the relative error")->capture_default_str();
  gc->add_flag("--verbose", gc_verbose, "Print every case");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    if (*gen) {
      auto spec = hsi::planted_spec(gen_bands, gen_classes, gen_inf, gen_h, gen_w, gen_sigma, gen_seed, gen_contrast);
      spec.name = gen_name;
      spec.n_regions = gen_regions;
      auto g = hsi::generate_synthetic(spec, Rng::mix(gen_seed, 1));
      g.data.name = gen_name;
      hsi::save(g.data, gen_out);
      if (!gen_truth.empty()) {
        const nlohmann::ordered_json t = {{"dataset", gen_name}, {"informative", g.informative}, {"redundant", g.redundant}};
        write_text(gen_truth, t.dump(2) + "\n");
      }
      std::cerr << "wrote " << gen_out << " (" << gen_bands << " bands, " << gen_h << "x" << gen_w << ")\n";
    } else if (*teach) {
      if (!teach_validate.empty()) {
        if (teach_dataset.empty()) throw ValidationError("--validate needs --dataset");
        const auto ds = hsi::load(teach_dataset);
        const auto c = teachers::cache_from_json(read_json(teach_validate), ds.name, ds.n_band, teach_k);
        std::cout << teach_validate << ": " << c.size() << " teacher selections of " << teach_k << " bands, valid\n";
      } else {
        if (teach_config.empty()) throw ValidationError("teach needs --config (or --validate)");
        const auto cfg = meta::config_from_json(read_json(teach_config));
        cfg.validate();
        for (std::size_t i = 0; i < cfg.tasks.size(); ++i) {
          if (cfg.tasks[i].role != "meta-train") continue;
          const auto b = meta::make_bundle(std::make_shared<hsi::HsiDataset>(hsi::load(cfg.tasks[i].path)),
                                           meta::Role::MetaTrain, cfg, i);
          const std::string path = teach_dir + "/" + b.name() + ".teachers.json";
          write_text(path, teachers::cache_to_json(b.votes).dump(2) + "\n");
          std::cerr << "wrote " << path << "\n";
        }
      }
    } else if (*train) {
      meta::TrainConfig cfg;
      if (!train_config.empty()) cfg = meta::config_from_json(read_json(train_config));
      for (const auto& t : train_tasks) cfg.tasks.push_back({t, "meta-train", ""});
      for (const auto& t : test_tasks) cfg.tasks.push_back({t, "meta-test", ""});
      if (!train_teachers.empty()) cfg.teachers = train_teachers;
      if (o_epochs) cfg.epochs = *o_epochs;
      if (o_patch) cfg.patch = *o_patch;
      if (o_batch) cfg.batch = *o_batch;
      if (o_sband) cfg.n_sband = *o_sband;
      if (o_budget) cfg.edge_budget = *o_budget;
      if (o_hidden) cfg.hidden = *o_hidden;
      if (o_alpha) cfg.alpha = *o_alpha;
      if (o_beta) cfg.beta = *o_beta;
      if (o_gamma) cfg.gamma = *o_gamma;
      if (o_seed) cfg.seed = *o_seed;
      if (o_profile) cfg.classifier_profile = *o_profile;
      if (o_weighting) cfg.weighting = *o_weighting;
      if (o_fusion) cfg.fusion = *o_fusion;
      cfg.validate();
      if (cfg.tasks.empty()) throw ValidationError("no tasks: give --config with tasks or --task");
      const auto t0 = std::chrono::steady_clock::now();
      const auto tasks = load_tasks(cfg);
      auto st = meta::init_state<float>(cfg, tasks);
      std::filesystem::create_directories(train_out);
      std::ofstream log(train_log.empty() ? train_out + "/train_log.csv" : train_log);
      std::ofstream lam(train_lambda_log.empty() ? train_out + "/lambda_log.csv" : train_lambda_log);
      if (!log || !lam) throw Error("cannot open log files under " + train_out);
      const auto stats = meta::train(st, tasks, &log, &lam);
      meta::save_checkpoint(meta::make_checkpoint(st, tasks), train_out);
      const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      std::cerr << "trained " << stats.size() << " epochs in " << secs << " s; checkpoint " << train_out << "\n";
      if (!stats.empty()) {
        std::cerr << "final loss " << stats.back().loss << " (l_bs " << stats.back().l_bs << ", l_cls "
                  << stats.back().l_cls << ")\n";
      }
    } else if (*sel) {
      const auto c = meta::load_checkpoint(sel_ckpt);
      const auto ds = hsi::load(sel_dataset);
      const auto s = meta::zero_shot_select(c, ds, sel_k.value_or(c.cfg.n_sband), sel_seed,
                                            sel_infer.value_or(c.cfg.n_infer));
      write_text(sel_out, s.to_json().dump(2) + "\n");
      if (!sel_adj.empty()) {
        const auto w = hsi::extract_window(ds, sel_pixel, c.cfg.patch, c.cfg.patch);
        const std::vector<float> v(w.values.begin(), w.values.end());
        const auto g = graph::build_graph(
            graph::FeatureView<float>{std::span<const float>(v), ds.n_band, c.cfg.patch * c.cfg.patch},
            c.cfg.edge_budget);
        std::ostringstream csv;
        graph::write_adjacency_csv(g, csv);
        write_text(sel_adj, csv.str());
      }
    } else if (*cls) {
      const auto ds = hsi::load(cls_dataset);
      const auto bands = resolve_bands(cls_selection, cls_bands, ds.n_band);
      auto ec = cls_flags.config();
      const auto sub = eval::subset_bands(ds, bands);
      const auto sp = hsi::split(sub, {ec.train_fraction, 0.3, Rng::mix(ec.seed, 0)});
      const auto model = eval::train_classifier(sub, sp.train(), ec, ec.seed);
      std::vector<std::size_t> pixels;
      if (cls_full) {
        pixels.resize(ds.n_pixels());
        std::iota(pixels.begin(), pixels.end(), std::size_t{0});
      } else {
        pixels = ds.labeled_pixels();
      }
      const auto pred = eval::predict(sub, model, pixels, ec.patch);
      hsi::LabelRaster r{ds.height, ds.width, std::vector<std::uint16_t>(ds.n_pixels(), 0)};
      for (std::size_t i = 0; i < pixels.size(); ++i) r.labels[pixels[i]] = static_cast<std::uint16_t>(pred[i]);
      hsi::save_label_raster(r, cls_out);
      const auto m = eval::score(sub, sp.test, eval::predict(sub, model, sp.test, ec.patch));
      std::fprintf(stderr, "test OA %.2f%%  AA %.2f%%  Kappa %.2f\n", 100 * m.oa, 100 * m.aa, 100 * m.kappa);
    } else if (*ev) {
      const auto ds = hsi::load(ev_dataset);
      const auto bands = resolve_bands(ev_selection, ev_bands, ds.n_band);
      eval::EvalReport rep;
      if (ev_source == "fresh") {
        rep = eval::evaluate(ds, bands, ev_flags.config());
      } else {
        if (ev_ckpt.empty()) throw ValidationError("--source checkpoint needs --checkpoint");
        const auto c = meta::load_checkpoint(ev_ckpt);
        std::size_t k = 0, index = c.cfg.tasks.size();
        for (std::size_t i = 0; i < c.cfg.tasks.size() && k < c.classifier_info.size(); ++i) {
          if (c.cfg.tasks[i].role != "meta-train") continue;
          if (c.classifier_info[k].task == ds.name) {
            index = i;
            break;
          }
          ++k;
        }
        if (index == c.cfg.tasks.size()) {
          throw ValidationError("checkpoint has no classifier for '" + ds.name + "'; use --source fresh");
        }
        const auto b = meta::make_bundle(std::make_shared<hsi::HsiDataset>(ds), meta::Role::MetaTest, c.cfg, index);
        rep = eval::evaluate_stored(ds, c.classifiers[k], bands, b.split.test, c.cfg.patch);
      }
      std::printf("%s  %zu bands  %zu runs\n", rep.dataset.c_str(), rep.bands.size(), rep.runs.size());
      std::printf("OA    %6.2f +- %.2f %%\n", 100 * rep.oa.mean, 100 * rep.oa.std);
      std::printf("AA    %6.2f +- %.2f %%\n", 100 * rep.aa.mean, 100 * rep.aa.std);
      std::printf("Kappa %6.2f +- %.2f (x100)\n", 100 * rep.kappa.mean, 100 * rep.kappa.std);
      if (!ev_json.empty()) write_text(ev_json, eval::to_json(rep).dump(2) + "\n");
      if (!ev_csv.empty()) {
        std::ostringstream csv;
        eval::write_csv_header(csv);
        eval::write_csv_row(csv, rep);
        write_text(ev_csv, csv.str());
      }
    } else if (*ren) {
      const auto ds = hsi::load(ren_dataset);
      if (ren_truth == !ren_pred.empty()) throw ValidationError("give exactly one of --predictions or --truth");
      std::vector<std::uint16_t> labels = ds.labels;
      if (!ren_truth) {
        const auto r = hsi::load_label_raster(ren_pred);
        if (r.height != ds.height || r.width != ds.width) {
          throw ShapeError("raster is " + std::to_string(r.height) + "x" + std::to_string(r.width) + ", dataset is " +
                           std::to_string(ds.height) + "x" + std::to_string(ds.width));
        }
        labels = r.labels;
      }
      eval::write_map(ren_out, ds, labels, ren_full);
    } else if (*gc) {
      const auto t0 = std::chrono::steady_clock::now();
      const auto results = gradcheck::run_suite(gc_seeds);
      const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      if (gc_verbose) {
        for (const auto& r : results)
          std::printf("%-24s seed %llu  rel %.3e\n", r.name.c_str(), static_cast<unsigned long long>(r.seed),
                      r.result.max_rel_error);
      }
      const double w = gradcheck::worst(results);
      std::printf("%zu cases, max relative error %.3e (%.1f s)\n", results.size(), w, secs);
      if (!(w < gc_tol)) {
        std::fprintf(stderr, "gradient check failed: %.3e >= %.1e\n", w, gc_tol);
        return 2;
      }
    }
  } catch (const ValidationError& e) {
    std::cerr << "m3bs: " << e.what() << "\n";
    return 1;
  } catch (const ShapeError& e) {
    std::cerr << "m3bs: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "m3bs: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
