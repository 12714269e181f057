#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "stvnet/checkpoint.hpp"
#include "stvnet/gradcheck_suite.hpp"
#include "stvnet/harness.hpp"
#include "stvnet/phantom.hpp"
#include "stvnet/quantification.hpp"

namespace fs = std::filesystem;
using namespace stvnet;

namespace {

// Fills options of `sub` from a JSON object. Top-level keys apply to every
// subcommand; an object keyed by the subcommand name applies only to it.
// Options given on the command line keep their values.
void apply_json_config(CLI::App* sub, const std::string& path) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(io::read_file(path));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(FormatError::Kind::kMalformedHeader, path, e.what());
  }
  if (!j.is_object()) throw FormatError(FormatError::Kind::kMalformedHeader, path, "config must be a JSON object");
  auto scalar = [](const nlohmann::json& v) -> std::string {
    if (v.is_string()) return v.get<std::string>();
    if (v.is_boolean()) return v.get<bool>() ? "true" : "false";
    return v.dump();
  };
  auto apply = [&](const nlohmann::json& obj) {
    for (const auto& [key, value] : obj.items()) {
      if (value.is_object()) continue;
      CLI::Option* opt = sub->get_option_no_throw("--" + key);
      if (opt == nullptr) throw ConfigError(path + ": unknown option '" + key + "' for " + sub->get_name());
      if (opt->count() > 0) continue;
      try {
        if (value.is_array()) {
          for (const auto& v : value) opt->add_result(scalar(v));
        } else {
          opt->add_result(scalar(value));
        }
        opt->run_callback();
      } catch (const CLI::Error& e) {
        throw ConfigError(path + ": option '" + key + "': " + e.what());
      }
    }
  };
  apply(j);
  if (j.contains(sub->get_name()) && j[sub->get_name()].is_object()) apply(j[sub->get_name()]);
}

void log_line(const std::string& s) { std::cerr << s << std::endl; }

std::pair<double, double> parse_pair(const std::string& s, const char* what) {
  const auto comma = s.find(',');
  if (comma == std::string::npos) throw ConfigError(std::string(what) + " must look like a,b");
  try {
    return {std::stod(s.substr(0, comma)), std::stod(s.substr(comma + 1))};
  } catch (const std::exception&) {
    throw ConfigError(std::string(what) + " must hold two numbers, got '" + s + "'");
  }
}

struct ModelFlags {
  std::string arch = "stvnet";
  std::string structure = "endo";
  int gates = 3;
  int base = 8;
  std::string lstm_mode = "literal";

  void add(CLI::App* c) {
    c->add_option("--arch", arch, "vnet|stnet|stvnet")->check(CLI::IsMember({"vnet", "stnet", "stvnet"}));
    c->add_option("--structure", structure, "epi|endo")->check(CLI::IsMember({"epi", "endo"}));
    c->add_option("--gates", gates, "Window length T (gates fed per prediction)");
    c->add_option("--base", base, "Base channel count");
    c->add_option("--lstm-mode", lstm_mode, "literal|conventional ConvLSTM activations")
        ->check(CLI::IsMember({"literal", "conventional"}));
  }

  NetworkSpec spec(Extent3 shape) const {
    NetworkSpec s;
    s.arch = parse_arch(arch);
    s.structure = parse_structure(structure);
    s.window_T = gates;
    s.base_channels = base;
    s.activation_mode = parse_lstm_mode(lstm_mode);
    s.input_shape = shape;
    return s;
  }
};

struct TrainFlags {
  int epochs = 300;
  double lr = 1e-3;
  int batch = 4;
  double l1 = 1e-5;
  bool literal_l1 = false;
  bool no_augment = false;
  std::uint64_t seed = 0;

  void add(CLI::App* c) {
    c->add_option("--epochs", epochs, "Training epochs");
    c->add_option("--lr", lr, "Adam learning rate");
    c->add_option("--batch", batch, "Mini-batch size");
    c->add_option("--l1", l1, "L1 weight-penalty coefficient");
    c->add_flag("--literal-l1", literal_l1, "Use an unweighted L1 penalty");
    c->add_flag("--no-augment", no_augment, "Disable flip/rotation augmentation");
    c->add_option("--seed", seed, "Seed for initialisation, shuffling, augmentation and folds");
  }

  TrainConfig config(int window_T) const {
    TrainConfig c;
    c.epochs = epochs;
    c.learning_rate = lr;
    c.batch_size = batch;
    c.l1_weight = l1;
    c.literal_l1 = literal_l1;
    c.augment = !no_augment;
    c.seed = seed;
    c.window_T = window_T;
    return c;
  }
};

Extent3 common_extent(const std::vector<GatedStudy>& studies) {
  const Extent3 e = studies.front().extent;
  for (const auto& s : studies) {
    if (s.extent != e) throw ConfigError("subjects differ in shape: " + to_string(e) + " vs " + to_string(s.extent));
  }
  return e;
}

void print_report(const CvReport& r) {
  std::printf("%-6s %-5s T=%d\n", to_string(r.spec.arch), to_string(r.spec.structure), r.spec.window_T);
  for (const auto& m : metric_names()) {
    const auto s = r.aggregate(m);
    std::printf("  %-4s %.4f +- %.4f (n=%zu)\n", m.c_str(), s.mean, s.std, s.n);
  }
  if (r.rvef_agreement) {
    std::printf("  rvef agreement: mae %.4f rmse %.4f pcc %.4f\n", r.rvef_agreement->mae, r.rvef_agreement->rmse,
                r.rvef_agreement->pcc);
  }
}

int run_gradcheck(const std::string& module, int seeds) {
  int failures = 0;
  std::map<std::string, double> worst;
  run_gradchecks(module, seeds, [&](const GradCheckEntry& e) {
    if (!e.passed()) {
      ++failures;
      std::printf("FAIL %s/%s seed %llu: %.3e >= %.0e\n", e.module.c_str(), e.name.c_str(),
                  static_cast<unsigned long long>(e.seed), e.max_rel_error, e.tolerance);
    }
    auto& w = worst[e.module + "/" + e.name];
    w = std::max(w, e.max_rel_error);
  });
  for (const auto& [name, err] : worst) std::printf("%-34s max rel error %.3e\n", name.c_str(), err);
  std::printf("%s (%d failures over %d seeds)\n", failures ? "FAILED" : "passed", failures, seeds);
  return failures ? 1 : 0;
}

void write_masks_dir(const fs::path& dir, const GatedStudy& s, const std::vector<Mask>& masks,
                     const std::vector<Volume>& probs, const NetworkSpec& spec) {
  fs::create_directories(dir);
  const nlohmann::json h = {{"id", s.id},
                            {"gates", masks.size()},
                            {"shape", {s.extent.y, s.extent.x, s.extent.z}},
                            {"spacing_mm", s.spacing_mm},
                            {"arch", to_string(spec.arch)},
                            {"structure", to_string(spec.structure)}};
  io::write_file(dir / "masks.json", h.dump(2) + "\n");
  for (std::size_t k = 0; k < masks.size(); ++k) {
    io::write_raw(dir / ("mask_" + std::to_string(k + 1) + ".raw"), masks[k].data);
    io::write_raw(dir / ("prob_" + std::to_string(k + 1) + ".raw"), probs[k].data);
  }
}

// A segment output directory (masks.json) or a dataset subject (subject.json,
// endocardial truth).
std::pair<QuantRow, std::vector<double>> quantify_dir(const fs::path& dir) {
  if (fs::exists(dir / "masks.json")) {
    const auto path = dir / "masks.json";
    nlohmann::json h;
    std::string id, arch;
    Extent3 e;
    int gates = 0;
    double spacing = 0;
    try {
      h = nlohmann::json::parse(io::read_file(path));
      id = h.at("id").get<std::string>();
      arch = h.at("arch").get<std::string>();
      gates = h.at("gates").get<int>();
      spacing = h.at("spacing_mm").get<double>();
      const auto shape = h.at("shape").get<std::vector<int>>();
      if (shape.size() != 3) throw std::runtime_error("shape must have 3 entries");
      e = {shape[1], shape[0], shape[2]};
    } catch (const std::exception& ex) {
      throw FormatError(FormatError::Kind::kMalformedHeader, path.string(), ex.what());
    }
    std::vector<Mask> masks;
    for (int k = 1; k <= gates; ++k) masks.push_back(detail::read_mask(dir / ("mask_" + std::to_string(k) + ".raw"), e));
    return {{id, arch, quantify_masks(masks, spacing)}, {}};
  }
  const auto s = read_study(dir);
  std::vector<double> analytic;
  if (!s.analytic_volumes_ml.empty()) analytic = s.analytic_volumes_ml;
  return {{s.id, "truth", quantify_study(s)}, analytic};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"ST-VNet segmentation and RVEF quantification on gated volumes"};
  app.require_subcommand(1);

  // phantom
  auto* ph = app.add_subcommand("phantom", "Generate a synthetic gated dataset with analytic ground truth");
  std::string ph_out, ph_shape = "32x32x12", ph_ef;
  int ph_subjects = 20, ph_gates = 8;
  std::uint64_t ph_seed = 0;
  double ph_noise = 0.1;
  ph->add_option("--out", ph_out, "Output dataset directory")->required();
  ph->add_option("--subjects", ph_subjects, "Number of subjects");
  ph->add_option("--shape", ph_shape, "Grid as HxWxD");
  ph->add_option("--gates", ph_gates, "Gates per cardiac cycle");
  ph->add_option("--seed", ph_seed, "Generator seed");
  ph->add_option("--ef-range", ph_ef, "Ejection-fraction range a,b");
  ph->add_option("--noise", ph_noise, "Noise amplitude");

  // train
  auto* tr = app.add_subcommand("train", "Train one network on every subject of a dataset");
  std::string tr_data, tr_out;
  int tr_val = 0;
  ModelFlags tr_model;
  TrainFlags tr_flags;
  tr->add_option("--data", tr_data, "Dataset directory")->required();
  tr->add_option("--out", tr_out, "Output directory (model.ckpt, train_log.csv, config.json)")->required();
  tr->add_option("--val-subjects", tr_val, "Hold out the last N subjects for validation logging");
  tr_model.add(tr);
  tr_flags.add(tr);

  // crossval
  auto* cv = app.add_subcommand("crossval", "Subject-level k-fold cross-validation");
  std::string cv_data, cv_out;
  int cv_folds = 5;
  bool cv_oracle = false, cv_epi_quant = false;
  ModelFlags cv_model;
  TrainFlags cv_flags;
  cv->add_option("--data", cv_data, "Dataset directory")->required();
  cv->add_option("--out", cv_out, "Output directory")->required();
  cv->add_option("--folds", cv_folds, "Number of folds");
  cv->add_flag("--oracle", cv_oracle, "Skip training and score the ground-truth masks");
  cv->add_flag("--epicardial-quant", cv_epi_quant, "Quantify volumes from epicardial predictions");
  cv_model.add(cv);
  cv_flags.add(cv);

  // segment
  auto* sg = app.add_subcommand("segment", "Predict masks and probability maps with a trained model");
  std::string sg_model, sg_data, sg_out;
  sg->add_option("--model", sg_model, "Checkpoint file")->required();
  sg->add_option("--data", sg_data, "Dataset directory")->required();
  sg->add_option("--out", sg_out, "Output directory")->required();

  // quantify
  auto* qu = app.add_subcommand("quantify", "EDV, ESV and RVEF from per-gate cavity masks");
  std::string qu_masks, qu_out;
  qu->add_option("--masks", qu_masks, "Segment output or dataset directory")->required();
  qu->add_option("--out", qu_out, "Output CSV")->required();

  // gradcheck
  auto* gc = app.add_subcommand("gradcheck", "Compare reverse-mode gradients with central differences");
  std::string gc_module = "all";
  int gc_seeds = 10;
  gc->add_option("--module", gc_module, "all|tensor|convlstm|network")
      ->check(CLI::IsMember({"all", "tensor", "convlstm", "network"}));
  gc->add_option("--seeds", gc_seeds, "Number of seeds");

  // sweep-gates
  auto* sw = app.add_subcommand("sweep-gates", "Cross-validate once per window length T");
  std::string sw_data, sw_out = "sweep";
  int sw_tmin = 1, sw_tmax = 8, sw_folds = 5;
  ModelFlags sw_model;
  TrainFlags sw_flags;
  sw->add_option("--data", sw_data, "Dataset directory")->required();
  sw->add_option("--out", sw_out, "Output directory (sweep.csv plus one crossval directory per T)");
  sw->add_option("--tmin", sw_tmin, "Smallest window");
  sw->add_option("--tmax", sw_tmax, "Largest window");
  sw->add_option("--folds", sw_folds, "Number of folds");
  sw_model.add(sw);
  sw_flags.add(sw);

  std::map<CLI::App*, std::string> config_files;
  std::map<CLI::App*, std::vector<std::string>> required_flags;
  for (auto* sub : {ph, tr, cv, sg, qu, gc, sw}) {
    // Required flags may come from the config file instead, so they are checked after it is applied.
    for (auto* opt : sub->get_options()) {
      if (!opt->get_required()) continue;
      required_flags[sub].push_back(opt->get_name());
      opt->required(false);
    }
    sub->add_option("--config", config_files[sub], "JSON file with option values; command-line flags take precedence");
  }

  CLI11_PARSE(app, argc, argv);

  try {
    for (auto* sub : {ph, tr, cv, sg, qu, gc, sw}) {
      if (!*sub) continue;
      if (!config_files[sub].empty()) apply_json_config(sub, config_files[sub]);
      for (const auto& name : required_flags[sub]) {
        if (sub->get_option(name)->count() == 0) throw ConfigError(sub->get_name() + ": " + name + " is required");
      }
    }

    if (*ph) {
      PhantomConfig c;
      c.extent = parse_shape(ph_shape);
      c.subjects = ph_subjects;
      c.gates = ph_gates;
      c.seed = ph_seed;
      c.noise = ph_noise;
      if (!ph_ef.empty()) {
        const auto [a, b] = parse_pair(ph_ef, "--ef-range");
        c.ejection_fraction = {a, b};
      }
      const auto subjects = generate_phantoms(c);
      write_dataset(studies_of(subjects), ph_out);
      for (const auto& s : subjects) std::printf("%s analytic_ef %.4f\n", s.study.id.c_str(), s.analytic_ef());
      return 0;
    }

    if (*tr) {
      auto studies = read_dataset(tr_data);
      const auto spec = tr_model.spec(common_extent(studies));
      auto cfg = tr_flags.config(spec.window_T);
      if (tr_val < 0 || tr_val >= int(studies.size())) throw ConfigError("--val-subjects must leave a training subject");
      std::vector<const GatedStudy*> train_s, val_s;
      for (std::size_t i = 0; i < studies.size(); ++i)
        (int(i) >= int(studies.size()) - tr_val ? val_s : train_s).push_back(&studies[i]);
      const auto training = make_samples(train_s, spec.structure, spec.window_T);
      const auto validation = make_samples(val_s, spec.structure, spec.window_T);
      auto result = train<float>(training, validation, spec, cfg, [](const LogRow& r) {
        std::fprintf(stderr, "epoch %d %s loss %.5f dsc %.4f\n", r.epoch, r.split.c_str(), r.loss, r.dsc);
      });
      fs::create_directories(tr_out);
      save_checkpoint(result.net, fs::path(tr_out) / "model.ckpt", cfg.epochs);
      std::ofstream log(fs::path(tr_out) / "train_log.csv");
      write_log_csv(log, result.log);
      io::write_file(fs::path(tr_out) / "config.json",
                     nlohmann::json{{"spec", to_json(spec)}, {"train", to_json(cfg)}}.dump(2) + "\n");
      return 0;
    }

    if (*cv) {
      const auto studies = read_dataset(cv_data);
      const auto spec = cv_model.spec(common_extent(studies));
      auto cfg = cv_flags.config(spec.window_T);
      cfg.folds = cv_folds;
      CvOptions opt;
      opt.oracle = cv_oracle;
      opt.epicardial_quant = cv_epi_quant;
      opt.progress = log_line;
      opt.on_log = [](int fold, const LogRow& r) {
        std::fprintf(stderr, "fold %d epoch %d loss %.5f dsc %.4f\n", fold, r.epoch, r.loss, r.dsc);
      };
      const auto rep = run_cv(studies, spec, cfg, opt);
      write_cv_outputs(rep, cv_out);
      print_report(rep);
      return 0;
    }

    if (*sg) {
      CheckpointInfo info;
      auto net = load_checkpoint<float>(sg_model, &info);
      const auto studies = read_dataset(sg_data);
      for (const auto& s : studies) {
        if (s.extent != info.spec.input_shape) {
          throw ConfigError("subject " + s.id + " has shape " + to_string(s.extent) + ", model expects " +
                            to_string(info.spec.input_shape));
        }
        const auto samples = make_samples({&s}, info.spec.structure, info.spec.window_T);
        std::vector<Mask> masks;
        std::vector<Volume> probs;
        for (auto& p : predict(net, samples)) {
          masks.push_back(binarize(p));
          probs.push_back(std::move(p));
        }
        write_masks_dir(fs::path(sg_out) / s.id, s, masks, probs, info.spec);
        std::printf("%s: %zu gates\n", s.id.c_str(), masks.size());
      }
      return 0;
    }

    if (*qu) {
      const fs::path root(qu_masks);
      std::vector<fs::path> dirs;
      if (fs::exists(root / "masks.json") || fs::exists(root / "subject.json")) {
        dirs.push_back(root);
      } else if (fs::is_directory(root)) {
        for (const auto& e : fs::directory_iterator(root))
          if (fs::exists(e.path() / "masks.json") || fs::exists(e.path() / "subject.json")) dirs.push_back(e.path());
        std::sort(dirs.begin(), dirs.end());
      }
      if (dirs.empty()) throw FormatError(FormatError::Kind::kMissingFile, root.string(), "no mask directories found");
      std::vector<QuantRow> rows;
      for (const auto& d : dirs) {
        auto [row, analytic] = quantify_dir(d);
        std::printf("%s rvef %.4f", row.subject.c_str(), row.result.rvef);
        if (!analytic.empty()) std::printf(" (analytic %.4f)", rvef(analytic).rvef);
        std::printf("\n");
        rows.push_back(std::move(row));
      }
      if (fs::path(qu_out).has_parent_path()) fs::create_directories(fs::path(qu_out).parent_path());
      std::ofstream f(qu_out);
      if (!f) throw Error("cannot open " + qu_out + " for writing");
      write_quant_csv(f, rows);
      return 0;
    }

    if (*gc) return run_gradcheck(gc_module, gc_seeds);

    if (*sw) {
      const auto studies = read_dataset(sw_data);
      sw_model.gates = sw_tmin;
      const auto spec = sw_model.spec(common_extent(studies));
      auto cfg = sw_flags.config(spec.window_T);
      cfg.folds = sw_folds;
      CvOptions opt;
      opt.progress = log_line;
      const auto rows = sweep_gates(studies, spec, cfg, sw_tmin, sw_tmax, opt, [&](const CvReport& r) {
        write_cv_outputs(r, fs::path(sw_out) / ("T" + std::to_string(r.spec.window_T)));
        print_report(r);
      });
      fs::create_directories(sw_out);
      std::ofstream f(fs::path(sw_out) / "sweep.csv");
      write_sweep_csv(f, rows);
      return 0;
    }
  } catch (const Error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
