#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "stvnet/dataset.hpp"
#include "stvnet/metrics.hpp"
#include "stvnet/quantification.hpp"
#include "stvnet/training.hpp"

namespace stvnet {

// The T gates ending at `target`, wrapping cyclically (gate 1 follows gate G).
inline std::vector<int> sequence_window(int gates, int target, int T_len) {
  if (gates < 1) throw ConfigError("sequence_window: need at least one gate");
  if (T_len < 1 || T_len > gates) {
    throw ConfigError("sequence_window: window length " + std::to_string(T_len) + " must be within [1, " +
                      std::to_string(gates) + "]");
  }
  if (target < 1 || target > gates) {
    throw ConfigError("sequence_window: target gate " + std::to_string(target) + " outside [1, " +
                      std::to_string(gates) + "]");
  }
  std::vector<int> w;
  for (int k = T_len - 1; k >= 0; --k) w.push_back(((target - 1 - k) % gates + gates) % gates + 1);
  return w;
}

struct FoldPlan {
  int fold = 0;
  std::vector<std::string> train;
  std::vector<std::string> test;
};

// Shuffle subject ids with `seed` and cut into k folds whose sizes differ by at
// most one, larger folds first.
inline std::vector<FoldPlan> kfold_split(std::vector<std::string> ids, int k, std::uint64_t seed) {
  if (k < 2) throw ConfigError("kfold_split: k must be >= 2, got " + std::to_string(k));
  if (int(ids.size()) < k) {
    throw ConfigError("kfold_split: " + std::to_string(ids.size()) + " subjects cannot fill " + std::to_string(k) +
                      " folds");
  }
  Rng rng(seed);
  rng.shuffle(ids);
  const std::size_t n = ids.size(), base = n / std::size_t(k), extra = n % std::size_t(k);
  std::vector<FoldPlan> plan;
  std::size_t start = 0;
  for (int f = 0; f < k; ++f) {
    const std::size_t size = base + (std::size_t(f) < extra ? 1 : 0);
    FoldPlan p;
    p.fold = f + 1;
    for (std::size_t i = 0; i < n; ++i) (i >= start && i < start + size ? p.test : p.train).push_back(ids[i]);
    plan.push_back(std::move(p));
    start += size;
  }
  return plan;
}

// One sample per (subject, target gate) for the chosen structure.
inline std::vector<Sample> make_samples(const std::vector<const GatedStudy*>& studies, Structure structure,
                                        int T_len) {
  std::vector<Sample> out;
  for (const auto* s : studies) {
    for (int target = 1; target <= s->gate_count(); ++target) {
      Sample sm;
      sm.subject = s->id;
      sm.target_gate = target;
      for (int g : sequence_window(s->gate_count(), target, T_len)) sm.window.push_back(s->gates[std::size_t(g - 1)]);
      sm.target = s->mask(structure == Structure::kEndocardium, target);
      out.push_back(std::move(sm));
    }
  }
  return out;
}

inline constexpr double kMissing = std::numeric_limits<double>::quiet_NaN();

struct MetricRow {
  std::string subject;
  int gate = 0;
  int fold = 0;
  Structure structure = Structure::kEndocardium;
  Arch arch = Arch::kSTVNet;
  double dsc = 0;
  double hd = kMissing;
  double asd = kMissing;
  double sn = kMissing;
  double sp = kMissing;
};

// Undefined quantities (empty surfaces, empty truth) become NaN.
inline MetricRow evaluate_masks(const Mask& pred, const Mask& truth) {
  MetricRow r;
  r.dsc = dsc(pred, truth);
  const auto sp = surface(pred), st = surface(truth);
  if (!sp.empty() && !st.empty()) {
    r.hd = hausdorff(sp, st);
    r.asd = asd(sp, st);
  }
  const auto c = confusion(pred, truth);
  if (c.tp + c.fn > 0) r.sn = double(c.tp) / double(c.tp + c.fn);
  if (c.tn + c.fp > 0) r.sp = double(c.tn) / double(c.tn + c.fp);
  return r;
}

struct Summary {
  double mean = kMissing;
  double std = kMissing;
  std::size_t n = 0;
};

// Mean and sample standard deviation of the finite entries.
inline Summary summarize(const std::vector<double>& values) {
  Summary s;
  double sum = 0;
  for (double v : values)
    if (std::isfinite(v)) {
      sum += v;
      ++s.n;
    }
  if (s.n == 0) return s;
  s.mean = sum / double(s.n);
  double ss = 0;
  for (double v : values)
    if (std::isfinite(v)) ss += (v - s.mean) * (v - s.mean);
  s.std = s.n > 1 ? std::sqrt(ss / double(s.n - 1)) : 0.0;
  return s;
}

struct VolumePair {
  std::string subject;
  int gate = 0;
  double predicted_ml = 0;
  double truth_ml = 0;
};

inline const std::vector<std::string>& metric_names() {
  static const std::vector<std::string> names{"dsc", "hd", "asd", "sn", "sp"};
  return names;
}

inline double metric_value(const MetricRow& r, const std::string& name) {
  if (name == "dsc") return r.dsc;
  if (name == "hd") return r.hd;
  if (name == "asd") return r.asd;
  if (name == "sn") return r.sn;
  if (name == "sp") return r.sp;
  throw ConfigError("unknown metric " + name);
}

struct CvReport {
  NetworkSpec spec;
  TrainConfig cfg;
  std::vector<FoldPlan> plan;
  std::vector<MetricRow> metrics;
  std::vector<QuantRow> quant_pred;
  std::vector<QuantRow> quant_truth;
  std::optional<Agreement> rvef_agreement;
  std::string agreement_note;
  std::vector<VolumePair> volumes;
  std::vector<std::vector<LogRow>> train_logs;

  // Each subject's gate-averaged value, then mean and std across subjects.
  Summary aggregate(const std::string& metric) const {
    std::map<std::string, std::vector<double>> per_subject;
    for (const auto& r : metrics) per_subject[r.subject].push_back(metric_value(r, metric));
    std::vector<double> means;
    for (const auto& [id, v] : per_subject) means.push_back(summarize(v).mean);
    return summarize(means);
  }

  // Metric summary over test subjects for each target gate.
  std::map<int, Summary> per_gate(const std::string& metric) const {
    std::map<int, std::vector<double>> by_gate;
    for (const auto& r : metrics) by_gate[r.gate].push_back(metric_value(r, metric));
    std::map<int, Summary> out;
    for (const auto& [g, v] : by_gate) out[g] = summarize(v);
    return out;
  }
};

struct CvOptions {
  // Skip training and use the ground-truth masks as predictions.
  bool oracle = false;
  // Quantify from epicardial instead of endocardial masks.
  bool epicardial_quant = false;
  std::function<void(const std::string&)> progress;
  std::function<void(int fold, const LogRow&)> on_log;
};

namespace detail {

inline void require_subject_split(const FoldPlan& f, const std::vector<Sample>& training) {
  const std::set<std::string> test(f.test.begin(), f.test.end());
  for (const auto& id : f.train) {
    if (test.count(id)) throw Error("fold " + std::to_string(f.fold) + ": subject " + id + " on both sides");
  }
  for (const auto& s : training) {
    if (test.count(s.subject)) {
      throw Error("fold " + std::to_string(f.fold) + ": test subject " + s.subject + " leaked into training");
    }
  }
}

}  // namespace detail

// k-fold cross-validation split by subject: one model per fold, evaluated on
// every gate of every held-out subject.
inline CvReport run_cv(const std::vector<GatedStudy>& studies, const NetworkSpec& spec, const TrainConfig& cfg,
                       const CvOptions& opt = {}) {
  cfg.validate();
  spec.validate();
  if (spec.window_T != cfg.window_T) throw ConfigError("run_cv: network and training window lengths differ");
  std::map<std::string, const GatedStudy*> by_id;
  std::vector<std::string> ids;
  for (const auto& s : studies) {
    if (!by_id.emplace(s.id, &s).second) throw ConfigError("run_cv: duplicate subject id " + s.id);
    ids.push_back(s.id);
    if (s.extent != spec.input_shape) {
      throw ConfigError("run_cv: subject " + s.id + " has shape " + to_string(s.extent) + ", network expects " +
                        to_string(spec.input_shape));
    }
  }
  CvReport rep;
  rep.spec = spec;
  rep.cfg = cfg;
  rep.plan = kfold_split(ids, cfg.folds, cfg.seed);
  const bool endo = spec.structure == Structure::kEndocardium;
  const bool quantify = endo != opt.epicardial_quant;

  for (const auto& fold : rep.plan) {
    std::vector<const GatedStudy*> train_s, test_s;
    for (const auto& id : fold.train) train_s.push_back(by_id.at(id));
    for (const auto& id : fold.test) test_s.push_back(by_id.at(id));
    const auto test_samples = make_samples(test_s, spec.structure, spec.window_T);

    std::vector<Mask> predicted;
    if (opt.oracle) {
      for (const auto& s : test_samples) predicted.push_back(s.target);
      rep.train_logs.emplace_back();
    } else {
      const auto train_samples = make_samples(train_s, spec.structure, spec.window_T);
      detail::require_subject_split(fold, train_samples);
      if (opt.progress) {
        opt.progress("fold " + std::to_string(fold.fold) + "/" + std::to_string(rep.plan.size()) + ": training on " +
                     std::to_string(train_samples.size()) + " samples");
      }
      TrainConfig fold_cfg = cfg;
      fold_cfg.seed = cfg.seed + std::uint64_t(fold.fold);
      std::function<void(const LogRow&)> hook;
      if (opt.on_log) hook = [&](const LogRow& r) { opt.on_log(fold.fold, r); };
      TrainResult<float> trained;
      try {
        trained = train<float>(train_samples, {}, spec, fold_cfg, hook);
      } catch (const TrainingError& e) {
        throw TrainingError("fold " + std::to_string(fold.fold) + ": " + e.what());
      }
      rep.train_logs.push_back(trained.log);
      for (const auto& p : predict(trained.net, test_samples, cfg.batch_size)) predicted.push_back(binarize(p));
    }

    std::map<std::string, std::vector<double>> pred_vol, true_vol;
    for (std::size_t i = 0; i < test_samples.size(); ++i) {
      const auto& s = test_samples[i];
      MetricRow r = evaluate_masks(predicted[i], s.target);
      r.subject = s.subject;
      r.gate = s.target_gate;
      r.fold = fold.fold;
      r.structure = spec.structure;
      r.arch = spec.arch;
      rep.metrics.push_back(r);
      const double spacing = by_id.at(s.subject)->spacing_mm;
      const double pv = cavity_volume(predicted[i], spacing).ml, tv = cavity_volume(s.target, spacing).ml;
      rep.volumes.push_back({s.subject, s.target_gate, pv, tv});
      pred_vol[s.subject].push_back(pv);
      true_vol[s.subject].push_back(tv);
    }
    if (quantify) {
      for (const auto& id : fold.test) {
        rep.quant_truth.push_back({id, "truth", rvef(true_vol.at(id))});
        try {
          rep.quant_pred.push_back({id, to_string(spec.arch), rvef(pred_vol.at(id))});
        } catch (const UndefinedError& e) {
          rep.agreement_note += id + ": " + e.what() + "; ";
        }
      }
    }
  }

  if (quantify) {
    std::vector<double> p, t;
    for (const auto& q : rep.quant_pred) {
      p.push_back(q.result.rvef);
      for (const auto& tq : rep.quant_truth)
        if (tq.subject == q.subject) t.push_back(tq.result.rvef);
    }
    try {
      rep.rvef_agreement = agreement(p, t);
    } catch (const Error& e) {
      rep.agreement_note += e.what();
    }
  }
  return rep;
}

namespace detail {

inline std::string csv_number(double v) {
  if (!std::isfinite(v)) return "";
  std::ostringstream os;
  os.precision(10);
  os << v;
  return os.str();
}

inline std::ofstream open_out(const std::filesystem::path& p) {
  std::ofstream f(p);
  if (!f) throw Error("cannot open " + p.string() + " for writing");
  return f;
}

}  // namespace detail

inline void write_metrics_csv(std::ostream& os, const std::vector<MetricRow>& rows) {
  os << "subject,gate,structure,arch,dsc,hd,asd,sn,sp\n";
  for (const auto& r : rows) {
    os << r.subject << ',' << r.gate << ',' << to_string(r.structure) << ',' << to_string(r.arch) << ','
       << detail::csv_number(r.dsc) << ',' << detail::csv_number(r.hd) << ',' << detail::csv_number(r.asd) << ','
       << detail::csv_number(r.sn) << ',' << detail::csv_number(r.sp) << '\n';
  }
}

struct SweepRow {
  int window_T = 0;
  Arch arch = Arch::kSTVNet;
  Structure structure = Structure::kEndocardium;
  std::map<std::string, Summary> metrics;
};

inline SweepRow sweep_row(const CvReport& r) {
  SweepRow row{r.spec.window_T, r.spec.arch, r.spec.structure, {}};
  for (const auto& m : metric_names()) row.metrics[m] = r.aggregate(m);
  return row;
}

inline void write_sweep_csv(std::ostream& os, const std::vector<SweepRow>& rows) {
  os << "T,arch,structure";
  for (const auto& m : metric_names()) os << ',' << m << "_mean," << m << "_std";
  os << ",subjects\n";
  for (const auto& r : rows) {
    os << r.window_T << ',' << to_string(r.arch) << ',' << to_string(r.structure);
    for (const auto& m : metric_names()) {
      const auto& s = r.metrics.at(m);
      os << ',' << detail::csv_number(s.mean) << ',' << detail::csv_number(s.std);
    }
    os << ',' << r.metrics.at("dsc").n << '\n';
  }
}

// metrics.csv, aggregate.csv, per_gate.csv, volumes.csv, quant.csv,
// agreement.csv, sweep.csv, folds.json and one training log per fold.
inline void write_cv_outputs(const CvReport& r, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  {
    auto f = detail::open_out(dir / "metrics.csv");
    write_metrics_csv(f, r.metrics);
  }
  {
    auto f = detail::open_out(dir / "aggregate.csv");
    f << "arch,structure,metric,mean,std,subjects\n";
    for (const auto& m : metric_names()) {
      const auto s = r.aggregate(m);
      f << to_string(r.spec.arch) << ',' << to_string(r.spec.structure) << ',' << m << ','
        << detail::csv_number(s.mean) << ',' << detail::csv_number(s.std) << ',' << s.n << '\n';
    }
  }
  {
    auto f = detail::open_out(dir / "per_gate.csv");
    f << "gate";
    for (const auto& m : metric_names()) f << ',' << m << "_mean," << m << "_std";
    f << '\n';
    std::map<std::string, std::map<int, Summary>> pg;
    for (const auto& m : metric_names()) pg[m] = r.per_gate(m);
    for (const auto& [gate, unused] : pg["dsc"]) {
      f << gate;
      for (const auto& m : metric_names())
        f << ',' << detail::csv_number(pg[m][gate].mean) << ',' << detail::csv_number(pg[m][gate].std);
      f << '\n';
    }
  }
  {
    auto f = detail::open_out(dir / "volumes.csv");
    f << "subject,gate,structure,predicted_ml,truth_ml\n";
    for (const auto& v : r.volumes) {
      f << v.subject << ',' << v.gate << ',' << to_string(r.spec.structure) << ',' << detail::csv_number(v.predicted_ml)
        << ',' << detail::csv_number(v.truth_ml) << '\n';
    }
  }
  {
    auto f = detail::open_out(dir / "quant.csv");
    std::vector<QuantRow> all = r.quant_truth;
    all.insert(all.end(), r.quant_pred.begin(), r.quant_pred.end());
    write_quant_csv(f, all);
  }
  {
    auto f = detail::open_out(dir / "agreement.csv");
    f << "quantity,mae,rmse,pcc,note\n";
    f << "rvef,";
    if (r.rvef_agreement) {
      f << detail::csv_number(r.rvef_agreement->mae) << ',' << detail::csv_number(r.rvef_agreement->rmse) << ','
        << detail::csv_number(r.rvef_agreement->pcc);
    } else {
      f << ",,";
    }
    std::string note = r.agreement_note;
    std::replace(note.begin(), note.end(), ',', ';');
    f << ',' << note << '\n';
  }
  {
    auto f = detail::open_out(dir / "sweep.csv");
    write_sweep_csv(f, {sweep_row(r)});
  }
  {
    nlohmann::json folds = nlohmann::json::array();
    for (const auto& p : r.plan) folds.push_back({{"fold", p.fold}, {"train", p.train}, {"test", p.test}});
    auto f = detail::open_out(dir / "folds.json");
    f << nlohmann::json{{"spec", to_json(r.spec)}, {"train", to_json(r.cfg)}, {"folds", folds}}.dump(2) << '\n';
  }
  for (std::size_t i = 0; i < r.train_logs.size(); ++i) {
    if (r.train_logs[i].empty()) continue;
    auto f = detail::open_out(dir / ("train_log_fold" + std::to_string(i + 1) + ".csv"));
    write_log_csv(f, r.train_logs[i]);
  }
}

// Cross-validate once per window length; every run uses the same fold plan.
inline std::vector<SweepRow> sweep_gates(const std::vector<GatedStudy>& studies, NetworkSpec spec, TrainConfig cfg,
                                         int tmin, int tmax, const CvOptions& opt = {},
                                         const std::function<void(const CvReport&)>& on_report = {}) {
  if (tmin < 1 || tmax < tmin) throw ConfigError("sweep_gates: need 1 <= tmin <= tmax");
  if (spec.arch == Arch::kVNet && tmax > 1) throw ConfigError("sweep_gates: vnet only accepts T = 1");
  std::vector<SweepRow> rows;
  for (int T_len = tmin; T_len <= tmax; ++T_len) {
    spec.window_T = T_len;
    cfg.window_T = T_len;
    if (opt.progress) opt.progress("sweep: T = " + std::to_string(T_len));
    const auto rep = run_cv(studies, spec, cfg, opt);
    if (on_report) on_report(rep);
    rows.push_back(sweep_row(rep));
  }
  return rows;
}

}  // namespace stvnet
