#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "stvnet/convlstm.hpp"
#include "stvnet/ops.hpp"
#include "stvnet/rng.hpp"
#include "stvnet/volume.hpp"

namespace stvnet {

enum class Arch { kVNet, kSTNet, kSTVNet };
enum class Structure { kEpicardium, kEndocardium };

inline const char* to_string(Arch a) {
  switch (a) {
    case Arch::kVNet: return "vnet";
    case Arch::kSTNet: return "stnet";
    case Arch::kSTVNet: return "stvnet";
  }
  return "?";
}

inline Arch parse_arch(const std::string& s) {
  if (s == "vnet") return Arch::kVNet;
  if (s == "stnet") return Arch::kSTNet;
  if (s == "stvnet") return Arch::kSTVNet;
  throw ConfigError("unknown architecture '" + s + "' (expected vnet|stnet|stvnet)");
}

inline const char* to_string(Structure s) { return s == Structure::kEpicardium ? "epi" : "endo"; }

inline Structure parse_structure(const std::string& s) {
  if (s == "epi" || s == "epicardium") return Structure::kEpicardium;
  if (s == "endo" || s == "endocardium") return Structure::kEndocardium;
  throw ConfigError("unknown structure '" + s + "' (expected epi|endo)");
}

inline LstmMode parse_lstm_mode(const std::string& s) {
  if (s == "literal") return LstmMode::kLiteral;
  if (s == "conventional") return LstmMode::kConventional;
  throw ConfigError("unknown activation mode '" + s + "' (expected literal|conventional)");
}

struct NetworkSpec {
  Arch arch = Arch::kSTVNet;
  int base_channels = 8;
  int window_T = 3;
  Extent3 input_shape{32, 32, 12};
  Structure structure = Structure::kEndocardium;
  LstmMode activation_mode = LstmMode::kLiteral;

  bool has_lstm() const { return arch != Arch::kVNet; }
  bool has_pooling() const { return arch != Arch::kSTNet; }

  void validate() const {
    if (base_channels < 1) throw ConfigError("base_channels must be >= 1");
    if (window_T < 1) throw ConfigError("window_T must be >= 1");
    if (arch == Arch::kVNet && window_T != 1) {
      throw ConfigError("vnet takes a single gate: window_T must be 1, got " + std::to_string(window_T));
    }
    if (input_shape.x < 1 || input_shape.y < 1 || input_shape.z < 1) throw ConfigError("input_shape extents must be >= 1");
    if (has_pooling() && (input_shape.x % 4 || input_shape.y % 4 || input_shape.z % 4)) {
      throw ConfigError(std::string(to_string(arch)) + " pools twice: every input extent must be divisible by 4, got " +
                        to_string(input_shape));
    }
  }

  friend bool operator==(const NetworkSpec&, const NetworkSpec&) = default;
};

inline nlohmann::json to_json(const NetworkSpec& s) {
  return {{"arch", to_string(s.arch)},
          {"base_channels", s.base_channels},
          {"window_T", s.window_T},
          {"input_shape", {s.input_shape.x, s.input_shape.y, s.input_shape.z}},
          {"structure", to_string(s.structure)},
          {"activation_mode", to_string(s.activation_mode)}};
}

inline NetworkSpec spec_from_json(const nlohmann::json& j) {
  NetworkSpec s;
  s.arch = parse_arch(j.at("arch").get<std::string>());
  s.base_channels = j.at("base_channels").get<int>();
  s.window_T = j.at("window_T").get<int>();
  const auto& shape = j.at("input_shape");
  s.input_shape = {shape.at(0).get<int>(), shape.at(1).get<int>(), shape.at(2).get<int>()};
  s.structure = parse_structure(j.at("structure").get<std::string>());
  s.activation_mode = parse_lstm_mode(j.at("activation_mode").get<std::string>());
  return s;
}

// Convolution (or transposed convolution) with optional batch norm + ReLU.
template <class T>
struct ConvBlock {
  std::string name;
  Parameter<T> kernel;  // conv: (out, in, k, k, k); transpose: (in, out, k, k, k)
  Parameter<T> bias;
  bool transpose = false;
  int stride = 1;
  bool normalized = true;
  Parameter<T> gamma;
  Parameter<T> beta;
  BatchNormState<T> bn;

  static ConvBlock make(std::string name, int in, int out, int k, bool transpose, int stride, bool normalized,
                        Rng& rng) {
    ConvBlock b;
    b.name = name;
    b.transpose = transpose;
    b.stride = stride;
    b.normalized = normalized;
    Tensor<T> w(transpose ? Shape{in, out, k, k, k} : Shape{out, in, k, k, k});
    const double bound = 1.0 / std::sqrt(double(in * k * k * k));
    for (auto& v : w.storage()) v = static_cast<T>(rng.uniform(-bound, bound));
    b.kernel = Parameter<T>(name + ".kernel", std::move(w));
    b.bias = Parameter<T>(name + ".bias", Tensor<T>::zeros({out}));
    if (normalized) {
      b.gamma = Parameter<T>(name + ".gamma", Tensor<T>::ones({out}));
      b.beta = Parameter<T>(name + ".beta", Tensor<T>::zeros({out}));
      b.bn = BatchNormState<T>(out);
    }
    return b;
  }

  Var<T> forward(const Var<T>& x, bool training) {
    Tape<T>& t = *x.tape;
    Var<T> y = transpose ? conv_transpose3d(x, t.param(kernel), t.param(bias), stride)
                         : conv3d(x, t.param(kernel), t.param(bias), stride);
    if (!normalized) return y;
    return relu(batch_norm3d(y, t.param(gamma), t.param(beta), bn, training));
  }

  void collect(std::vector<Parameter<T>*>& out) {
    out.push_back(&kernel);
    out.push_back(&bias);
    if (normalized) {
      out.push_back(&gamma);
      out.push_back(&beta);
    }
  }
};

// One of the three segmentation architectures.
//
// vnet / stvnet layout (C = base_channels):
//   encoder  conv C, conv C | pool | conv 2C, conv 2C | pool | conv 4C, conv 4C
//   decoder  up 2C, concat skip1, conv 2C x3, up C, concat skip0, conv C x4,
//            1x1x1 conv -> 1, sigmoid
// stvnet replaces skip0 by a 2-layer ConvLSTM over the per-gate full-resolution
// features; skip1 and the bottleneck use the last gate only.
//
// stnet drops both pools (and so both transposed convolutions, which become
// stride-1 convolutions); its only skip is the ConvLSTM pathway.
template <class T>
class Network {
 public:
  Network() = default;

  static Network build(const NetworkSpec& spec, std::uint64_t seed) {
    spec.validate();
    Network net;
    net.spec_ = spec;
    net.seed_ = seed;
    Rng rng(seed);
    const int C = spec.base_channels;
    auto add = [&](const char* name, int in, int out, int k = 3, bool transpose = false, int stride = 1,
                   bool normalized = true) {
      net.blocks_.push_back(ConvBlock<T>::make(name, in, out, k, transpose, stride, normalized, rng));
    };
    add("enc0a", 1, C);
    add("enc0b", C, C);
    add("enc1a", C, 2 * C);
    add("enc1b", 2 * C, 2 * C);
    add("enc2a", 2 * C, 4 * C);
    add("enc2b", 4 * C, 4 * C);
    if (spec.has_pooling()) {
      add("up1", 4 * C, 2 * C, 2, true, 2);
      add("dec1a", 4 * C, 2 * C);
    } else {
      add("up1", 4 * C, 2 * C);
      add("dec1a", 2 * C, 2 * C);
    }
    add("dec1b", 2 * C, 2 * C);
    add("dec1c", 2 * C, 2 * C);
    if (spec.has_pooling()) {
      add("up0", 2 * C, C, 2, true, 2);
    } else {
      add("up0", 2 * C, C);
    }
    add("dec0a", 2 * C, C);
    add("dec0b", C, C);
    add("dec0c", C, C);
    add("dec0d", C, C);
    add("head", C, 1, 1, false, 1, false);
    if (spec.has_lstm()) {
      for (int layer = 0; layer < 2; ++layer) {
        net.lstm_.push_back(ConvLSTMCell<T>::make("lstm" + std::to_string(layer + 1), C, C, spec.input_shape, 3,
                                                  spec.activation_mode, rng));
      }
    }
    return net;
  }

  const NetworkSpec& spec() const { return spec_; }
  std::uint64_t seed() const { return seed_; }
  std::vector<ConvBlock<T>>& blocks() { return blocks_; }
  std::vector<ConvLSTMCell<T>>& lstm() { return lstm_; }

  // Trainable parameters in declaration order.
  std::vector<Parameter<T>*> parameters() {
    std::vector<Parameter<T>*> out;
    for (auto& b : blocks_) b.collect(out);
    for (auto& c : lstm_)
      for (auto* p : c.parameters()) out.push_back(p);
    return out;
  }

  // Non-trainable state (batch-norm running statistics) in declaration order.
  std::vector<std::pair<std::string, Tensor<T>*>> buffers() {
    std::vector<std::pair<std::string, Tensor<T>*>> out;
    for (auto& b : blocks_) {
      if (!b.normalized) continue;
      out.emplace_back(b.name + ".running_mean", &b.bn.running_mean);
      out.emplace_back(b.name + ".running_var", &b.bn.running_var);
    }
    return out;
  }

  std::size_t parameter_count() {
    std::size_t n = 0;
    for (auto* p : parameters()) n += p->value.size();
    return n;
  }

  void zero_grad() {
    for (auto* p : parameters()) p->zero_grad();
  }

  // Probability map (N, 1, z, y, x) for the last gate of each window.
  // `windows` is (N, T, z, y, x) with gates in chronological order.
  Var<T> forward(Tape<T>& tape, const Tensor<T>& windows, bool training) {
    windows.require_rank(5, "Network::forward");
    const int N = windows.dim(0), T_len = windows.dim(1);
    const Extent3 e{windows.dim(4), windows.dim(3), windows.dim(2)};
    if (T_len != spec_.window_T) {
      throw ShapeError("Network::forward", "window",
                       "window has " + std::to_string(T_len) + " gates, network expects " +
                           std::to_string(spec_.window_T));
    }
    if (e != spec_.input_shape) {
      throw ShapeError("Network::forward", "spatial",
                       "volume " + to_string(e) + " vs network input " + to_string(spec_.input_shape));
    }
    // Full-resolution encoder for every gate at once, batch index t*N + n.
    const int gates = spec_.has_lstm() ? T_len : 1;
    const int first_gate = T_len - gates;
    Tensor<T> stacked(volume_shape(gates * N, 1, e));
    const std::size_t vox = e.voxels();
    for (int t = 0; t < gates; ++t)
      for (int n = 0; n < N; ++n)
        std::copy_n(windows.ptr() + (std::size_t(n) * T_len + first_gate + t) * vox, vox,
                    stacked.ptr() + (std::size_t(t) * N + n) * vox);

    std::size_t k = 0;
    auto next = [&](const Var<T>& x) { return blocks_[k++].forward(x, training); };

    Var<T> f0 = next(next(tape.constant(std::move(stacked))));
    Var<T> last = gates == 1 ? f0 : slice_batch(f0, (gates - 1) * N, N);

    Var<T> skip0 = last;
    if (spec_.has_lstm()) {
      std::vector<Var<T>> seq;
      for (int t = 0; t < gates; ++t) seq.push_back(gates == 1 ? f0 : slice_batch(f0, t * N, N));
      skip0 = sequence_forward(lstm_, seq);
    }

    if (spec_.has_pooling()) {
      Var<T> f1 = next(next(max_pool3d(last)));
      Var<T> f2 = next(next(max_pool3d(f1)));
      Var<T> d1 = next(next(next(concat_channels(next(f2), f1))));
      Var<T> up0 = next(d1);
      Var<T> d0 = next(next(next(next(concat_channels(up0, skip0)))));
      return sigmoid(next(d0));
    }
    Var<T> f2 = next(next(next(next(last))));
    Var<T> d1 = next(next(next(next(f2))));
    Var<T> up0 = next(d1);
    Var<T> d0 = next(next(next(next(concat_channels(up0, skip0)))));
    return sigmoid(next(d0));
  }

 private:
  NetworkSpec spec_;
  std::uint64_t seed_ = 0;
  std::vector<ConvBlock<T>> blocks_;
  std::vector<ConvLSTMCell<T>> lstm_;
};

// Stack single-sample windows (each a list of T gate volumes) into (N, T, z, y, x).
template <class T>
Tensor<T> stack_windows(std::span<const std::vector<const Volume*>> windows) {
  if (windows.empty() || windows.front().empty()) throw ConfigError("stack_windows: empty input");
  const int N = int(windows.size()), T_len = int(windows.front().size());
  const Extent3 e = windows.front().front()->extent;
  Tensor<T> out({N, T_len, e.z, e.y, e.x});
  const std::size_t vox = e.voxels();
  for (int n = 0; n < N; ++n) {
    if (int(windows[std::size_t(n)].size()) != T_len) throw ShapeError("stack_windows", "window", "ragged windows");
    for (int t = 0; t < T_len; ++t) {
      const Volume& v = *windows[std::size_t(n)][std::size_t(t)];
      if (v.extent != e) throw ShapeError("stack_windows", "spatial", to_string(v.extent) + " vs " + to_string(e));
      std::copy(v.data.begin(), v.data.end(), out.ptr() + (std::size_t(n) * T_len + t) * vox);
    }
  }
  return out;
}

// Eval-mode probability map for the last gate of one window.
template <class T>
Grid<T> forward_segment(Network<T>& net, std::span<const Volume> window) {
  if (int(window.size()) != net.spec().window_T) {
    throw ShapeError("forward_segment", "window",
                     "got " + std::to_string(window.size()) + " gates, expected " +
                         std::to_string(net.spec().window_T));
  }
  std::vector<const Volume*> ptrs;
  for (const auto& v : window) ptrs.push_back(&v);
  std::vector<std::vector<const Volume*>> one{ptrs};
  Tape<T> tape;
  const auto prob = net.forward(tape, stack_windows<T>(one), false).value();
  Grid<T> out(window.front().extent);
  std::copy(prob.storage().begin(), prob.storage().end(), out.data.begin());
  return out;
}

// Voxels with probability >= threshold become foreground.
template <class T>
Mask binarize(const Grid<T>& prob, T threshold = T(0.5)) {
  Mask m(prob.extent);
  for (std::size_t i = 0; i < prob.data.size(); ++i) m.data[i] = prob.data[i] >= threshold ? 1 : 0;
  return m;
}

}  // namespace stvnet
