#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <numbers>
#include <ostream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "stvnet/metrics.hpp"
#include "stvnet/network.hpp"

namespace stvnet {

struct TrainConfig {
  double learning_rate = 1e-3;
  int epochs = 300;
  int batch_size = 4;
  double l1_weight = 1e-5;
  // Unweighted |W|_1 (weight 1.0) instead of l1_weight.
  bool literal_l1 = false;
  int window_T = 3;
  std::uint64_t seed = 0;
  bool augment = true;
  int folds = 5;
  // Stop after the first epoch whose training DSC reaches this value; 0 disables.
  double stop_at_train_dsc = 0;

  double effective_l1_weight() const { return literal_l1 ? 1.0 : l1_weight; }

  void validate() const {
    // 0 is accepted as a frozen-weights run.
    if (!(learning_rate >= 0)) throw ConfigError("learning_rate must be >= 0");
    if (epochs < 1) throw ConfigError("epochs must be >= 1");
    // A trailing partial batch may still hold one sample; its statistics pool over space too.
    if (batch_size < 2) throw ConfigError("batch_size must be >= 2 (batch norm trains on batch statistics)");
    if (!(l1_weight >= 0)) throw ConfigError("l1_weight must be >= 0");
    if (window_T < 1) throw ConfigError("window_T must be >= 1");
    if (folds < 2) throw ConfigError("folds must be >= 2");
    if (!(stop_at_train_dsc >= 0 && stop_at_train_dsc <= 1)) throw ConfigError("stop_at_train_dsc must be in [0, 1]");
  }
};

inline nlohmann::json to_json(const TrainConfig& c) {
  return {{"learning_rate", c.learning_rate}, {"epochs", c.epochs},     {"batch_size", c.batch_size},
          {"l1_weight", c.l1_weight},         {"literal_l1", c.literal_l1}, {"window_T", c.window_T},
          {"seed", c.seed},                   {"augment", c.augment},   {"folds", c.folds},
          {"stop_at_train_dsc", c.stop_at_train_dsc}};
}

// Missing keys keep their defaults.
inline TrainConfig train_config_from_json(const nlohmann::json& j, TrainConfig c = {}) {
  c.learning_rate = j.value("learning_rate", c.learning_rate);
  c.epochs = j.value("epochs", c.epochs);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.l1_weight = j.value("l1_weight", c.l1_weight);
  c.literal_l1 = j.value("literal_l1", c.literal_l1);
  c.window_T = j.value("window_T", c.window_T);
  c.seed = j.value("seed", c.seed);
  c.augment = j.value("augment", c.augment);
  c.folds = j.value("folds", c.folds);
  c.stop_at_train_dsc = j.value("stop_at_train_dsc", c.stop_at_train_dsc);
  return c;
}

template <class T>
struct AdamState {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  long step = 0;
  std::vector<Tensor<T>> m, v;
};

// One bias-corrected Adam update using each parameter's accumulated grad.
template <class T>
void adam_step(AdamState<T>& s, const std::vector<Parameter<T>*>& params, double lr) {
  if (s.m.empty()) {
    for (auto* p : params) {
      s.m.push_back(Tensor<T>::zeros_like(p->value));
      s.v.push_back(Tensor<T>::zeros_like(p->value));
    }
  }
  if (s.m.size() != params.size()) {
    throw ShapeError("adam_step", "params",
                     "state tracks " + std::to_string(s.m.size()) + " tensors, got " + std::to_string(params.size()));
  }
  ++s.step;
  const double c1 = 1.0 - std::pow(s.beta1, double(s.step));
  const double c2 = 1.0 - std::pow(s.beta2, double(s.step));
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto& p = *params[k];
    s.m[k].require_same_shape("adam_step", p.value);
    T* w = p.value.ptr();
    const T* g = p.grad.ptr();
    T* m = s.m[k].ptr();
    T* v = s.v[k].ptr();
    for (std::size_t i = 0; i < p.value.size(); ++i) {
      m[i] = T(s.beta1 * m[i] + (1 - s.beta1) * g[i]);
      v[i] = T(s.beta2 * v[i] + (1 - s.beta2) * double(g[i]) * g[i]);
      const double mh = m[i] / c1, vh = v[i] / c2;
      w[i] = T(w[i] - lr * mh / (std::sqrt(vh) + s.eps));
    }
  }
}

// One training example: T chronological gate volumes and the target mask of
// the last gate.
struct Sample {
  std::string subject;
  int target_gate = 0;
  std::vector<Volume> window;
  Mask target;
};

struct AugmentParams {
  bool flip = false;
  double angle_deg = 0;
};

inline AugmentParams draw_augment(Rng& rng) {
  AugmentParams a;
  a.flip = rng.bernoulli(0.5);
  a.angle_deg = rng.uniform(-15.0, 15.0);
  return a;
}

namespace detail {

template <class V>
void flip_x(Grid<V>& g) {
  for (int z = 0; z < g.extent.z; ++z)
    for (int y = 0; y < g.extent.y; ++y)
      for (int x = 0; x < g.extent.x / 2; ++x) std::swap(g.at(x, y, z), g.at(g.extent.x - 1 - x, y, z));
}

// Rotate every axial slice about the slice centre. Each output voxel samples
// the source at the inversely rotated position; outside the grid reads 0.
template <class V, bool kNearest>
Grid<V> rotate_xy(const Grid<V>& g, double angle_deg) {
  if (angle_deg == 0) return g;
  const double a = angle_deg * std::numbers::pi / 180.0, c = std::cos(a), s = std::sin(a);
  const double cx = (g.extent.x - 1) / 2.0, cy = (g.extent.y - 1) / 2.0;
  Grid<V> out(g.extent);
  auto read = [&](int x, int y, int z) -> double { return g.contains(x, y, z) ? double(g.at(x, y, z)) : 0.0; };
  for (int z = 0; z < g.extent.z; ++z)
    for (int y = 0; y < g.extent.y; ++y)
      for (int x = 0; x < g.extent.x; ++x) {
        const double dx = x - cx, dy = y - cy;
        const double sx = c * dx + s * dy + cx, sy = -s * dx + c * dy + cy;
        if constexpr (kNearest) {
          out.at(x, y, z) = V(read(int(std::lround(sx)), int(std::lround(sy)), z));
        } else {
          const int x0 = int(std::floor(sx)), y0 = int(std::floor(sy));
          const double fx = sx - x0, fy = sy - y0;
          const double v = (1 - fy) * ((1 - fx) * read(x0, y0, z) + fx * read(x0 + 1, y0, z)) +
                           fy * ((1 - fx) * read(x0, y0 + 1, z) + fx * read(x0 + 1, y0 + 1, z));
          out.at(x, y, z) = V(v);
        }
      }
  return out;
}

}  // namespace detail

// Same transform for every gate and the mask: optional left-right flip, then
// in-plane rotation (linear for intensities, nearest for the mask).
inline void apply_augment(const AugmentParams& p, std::vector<Volume>& window, Mask& mask) {
  for (auto& v : window) {
    if (v.extent != mask.extent) throw ShapeError("augment", "spatial", to_string(v.extent) + " vs " + to_string(mask.extent));
  }
  if (p.flip) {
    for (auto& v : window) detail::flip_x(v);
    detail::flip_x(mask);
  }
  if (p.angle_deg != 0) {
    for (auto& v : window) v = detail::rotate_xy<float, false>(v, p.angle_deg);
    mask = detail::rotate_xy<std::uint8_t, true>(mask, p.angle_deg);
  }
}

struct LogRow {
  int epoch = 0;
  std::string split;
  double loss = 0;
  double dsc = 0;
};

inline void write_log_csv(std::ostream& os, const std::vector<LogRow>& rows) {
  os << "epoch,split,loss,dsc\n";
  os.precision(17);
  for (const auto& r : rows) os << r.epoch << ',' << r.split << ',' << r.loss << ',' << r.dsc << '\n';
}

template <class T>
Tensor<T> stack_targets(const std::vector<const Mask*>& masks) {
  const Extent3 e = masks.front()->extent;
  Tensor<T> out(volume_shape(int(masks.size()), 1, e));
  for (std::size_t n = 0; n < masks.size(); ++n) {
    if (masks[n]->extent != e) throw ShapeError("stack_targets", "spatial", "ragged masks");
    std::copy(masks[n]->data.begin(), masks[n]->data.end(), out.ptr() + n * e.voxels());
  }
  return out;
}

template <class T>
Tensor<T> stack_samples(const std::vector<const Sample*>& batch) {
  std::vector<std::vector<const Volume*>> windows;
  for (const auto* s : batch) {
    std::vector<const Volume*> w;
    for (const auto& v : s->window) w.push_back(&v);
    windows.push_back(std::move(w));
  }
  return stack_windows<T>(windows);
}

// Per-sample binary DSC of a (N,1,z,y,x) probability tensor against masks.
template <class T>
std::vector<double> batch_dsc(const Tensor<T>& prob, const std::vector<const Mask*>& masks) {
  std::vector<double> out;
  const std::size_t vox = masks.front()->data.size();
  for (std::size_t n = 0; n < masks.size(); ++n) {
    Mask pred(masks[n]->extent);
    for (std::size_t i = 0; i < vox; ++i) pred.data[i] = prob.ptr()[n * vox + i] >= T(0.5) ? 1 : 0;
    out.push_back(dsc(pred, *masks[n]));
  }
  return out;
}

// Eval-mode probability maps for every sample, in order.
template <class T>
std::vector<Grid<T>> predict(Network<T>& net, const std::vector<Sample>& samples, int batch_size = 4) {
  std::vector<Grid<T>> out;
  for (std::size_t start = 0; start < samples.size(); start += std::size_t(batch_size)) {
    std::vector<const Sample*> batch;
    for (std::size_t i = start; i < std::min(samples.size(), start + std::size_t(batch_size)); ++i)
      batch.push_back(&samples[i]);
    Tape<T> tape;
    const auto prob = net.forward(tape, stack_samples<T>(batch), false).value();
    const Extent3 e = samples[start].window.front().extent;
    for (std::size_t n = 0; n < batch.size(); ++n) {
      Grid<T> g(e);
      std::copy_n(prob.ptr() + n * e.voxels(), e.voxels(), g.data.begin());
      out.push_back(std::move(g));
    }
  }
  return out;
}

template <class T>
struct TrainResult {
  Network<T> net;
  std::vector<LogRow> log;
};

// Mini-batch Adam on soft Dice + weighted L1. Each epoch logs a "train" row
// (mean batch loss, mean DSC of the training-mode predictions) and, when
// `validation` is nonempty, a "val" row from an eval-mode pass (Dice loss
// only, no L1 term).
template <class T>
TrainResult<T> train(const std::vector<Sample>& training, const std::vector<Sample>& validation,
                     const NetworkSpec& spec, const TrainConfig& cfg,
                     const std::function<void(const LogRow&)>& on_row = {}) {
  cfg.validate();
  if (training.empty()) throw ConfigError("train: empty dataset");
  if (spec.window_T != cfg.window_T) {
    throw ConfigError("train: network window " + std::to_string(spec.window_T) + " != config window " +
                      std::to_string(cfg.window_T));
  }
  TrainResult<T> result{Network<T>::build(spec, cfg.seed), {}};
  Network<T>& net = result.net;
  const auto params = net.parameters();
  AdamState<T> adam;
  Rng order_rng = Rng(cfg.seed).split(0x5eed0001);
  Rng aug_rng = Rng(cfg.seed).split(0x5eed0002);
  const T l1w = T(cfg.effective_l1_weight());

  std::vector<std::size_t> order(training.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    order_rng.shuffle(order);
    double loss_sum = 0, dsc_sum = 0;
    int batches = 0;
    for (std::size_t start = 0; start < order.size(); start += std::size_t(cfg.batch_size)) {
      const std::size_t stop = std::min(order.size(), start + std::size_t(cfg.batch_size));
      std::vector<Sample> augmented;
      std::vector<const Sample*> batch;
      if (cfg.augment) {
        for (std::size_t i = start; i < stop; ++i) {
          Sample s = training[order[i]];
          apply_augment(draw_augment(aug_rng), s.window, s.target);
          augmented.push_back(std::move(s));
        }
        for (const auto& s : augmented) batch.push_back(&s);
      } else {
        for (std::size_t i = start; i < stop; ++i) batch.push_back(&training[order[i]]);
      }
      std::vector<const Mask*> masks;
      for (const auto* s : batch) masks.push_back(&s->target);

      net.zero_grad();
      Tape<T> tape;
      Var<T> prob = net.forward(tape, stack_samples<T>(batch), true);
      Var<T> dice = dice_loss(prob, stack_targets<T>(masks));
      std::vector<Var<T>> weights;
      for (auto* p : params) weights.push_back(tape.param(*p));
      Var<T> loss = add(dice, l1_penalty(weights, l1w));
      const double value = double(loss.value()[0]);
      if (!std::isfinite(value)) {
        throw TrainingError("non-finite loss at epoch " + std::to_string(epoch) + ", batch " +
                            std::to_string(batches + 1));
      }
      tape.backward(loss);
      adam_step(adam, params, cfg.learning_rate);

      loss_sum += value;
      for (double d : batch_dsc(prob.value(), masks)) dsc_sum += d;
      ++batches;
    }
    LogRow row{epoch, "train", loss_sum / batches, dsc_sum / double(training.size())};
    result.log.push_back(row);
    if (on_row) on_row(row);

    if (!validation.empty()) {
      const auto probs = predict(net, validation, cfg.batch_size);
      double vloss = 0, vdsc = 0;
      for (std::size_t i = 0; i < validation.size(); ++i) {
        Tape<T> tape;
        Tensor<T> p(volume_shape(1, 1, probs[i].extent), probs[i].data);
        std::vector<const Mask*> one{&validation[i].target};
        vloss += double(dice_loss(tape.constant(p), stack_targets<T>(one)).value()[0]);
        vdsc += dsc(binarize(probs[i]), validation[i].target);
      }
      LogRow v{epoch, "val", vloss / double(validation.size()), vdsc / double(validation.size())};
      result.log.push_back(v);
      if (on_row) on_row(v);
    }
    if (cfg.stop_at_train_dsc > 0 && row.dsc >= cfg.stop_at_train_dsc) break;
  }
  return result;
}

}  // namespace stvnet
