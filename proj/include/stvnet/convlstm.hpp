#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "stvnet/ops.hpp"
#include "stvnet/rng.hpp"

namespace stvnet {

// How the cell candidate and the hidden output are squashed.
//   kLiteral:      c~ = sigma(...), h = o * sigma(c)
//   kConventional: c~ = tanh(...),  h = o * tanh(c)
enum class LstmMode { kLiteral, kConventional };

inline const char* to_string(LstmMode m) { return m == LstmMode::kLiteral ? "literal" : "conventional"; }

enum class Gate { kInput = 0, kForget = 1, kCell = 2, kOutput = 3 };

template <class T>
struct ConvLSTMState {
  Var<T> h;
  Var<T> c;
};

// One ConvLSTM layer with peephole connections:
//
//   i = sigma(W_i * x + U_i * h + V_i o c_prev + b_i)
//   f = sigma(W_f * x + U_f * h + V_f o c_prev + b_f)
//   c = f o c_prev + i o act(W_c * x + U_c * h + b_c)
//   o = sigma(W_o * x + U_o * h + V_o o c + b_o)
//   h = o o act(c)
//
// The input and recurrent kernels are stored as one stacked kernel applied to
// concat(x, h): output channels are blocked by gate (i, f, c, o), input
// channels [0, in) are W and [in, in + hidden) are U. Peepholes have the full
// spatial extent of the cell state.
template <class T>
struct ConvLSTMCell {
  int in_channels = 0;
  int hidden_channels = 0;
  int kernel = 3;
  Extent3 extent;
  LstmMode mode = LstmMode::kLiteral;

  Parameter<T> weight;  // (4*hidden, in + hidden, k, k, k)
  Parameter<T> bias;    // (4*hidden)
  Parameter<T> peep_i;  // (1, hidden, z, y, x)
  Parameter<T> peep_f;
  Parameter<T> peep_o;

  // Kernels uniform in +-1/sqrt(fan_in); biases and peepholes zero.
  static ConvLSTMCell make(const std::string& name, int in_channels, int hidden, Extent3 extent, int kernel,
                           LstmMode mode, Rng& rng) {
    if (in_channels < 1 || hidden < 1) throw ConfigError("ConvLSTMCell: channel counts must be >= 1");
    if (kernel < 1 || kernel % 2 == 0) throw ConfigError("ConvLSTMCell: kernel must be odd");
    ConvLSTMCell cell;
    cell.in_channels = in_channels;
    cell.hidden_channels = hidden;
    cell.kernel = kernel;
    cell.extent = extent;
    cell.mode = mode;
    Tensor<T> w({4 * hidden, in_channels + hidden, kernel, kernel, kernel});
    const double bound = 1.0 / std::sqrt(double((in_channels + hidden) * kernel * kernel * kernel));
    for (auto& v : w.storage()) v = static_cast<T>(rng.uniform(-bound, bound));
    cell.weight = Parameter<T>(name + ".weight", std::move(w));
    cell.bias = Parameter<T>(name + ".bias", Tensor<T>::zeros({4 * hidden}));
    cell.peep_i = Parameter<T>(name + ".peep_i", Tensor<T>::zeros(volume_shape(1, hidden, extent)));
    cell.peep_f = Parameter<T>(name + ".peep_f", Tensor<T>::zeros(volume_shape(1, hidden, extent)));
    cell.peep_o = Parameter<T>(name + ".peep_o", Tensor<T>::zeros(volume_shape(1, hidden, extent)));
    return cell;
  }

  std::vector<Parameter<T>*> parameters() { return {&weight, &bias, &peep_i, &peep_f, &peep_o}; }

  // Element of W_gate (from_input) or U_gate (!from_input).
  T& kernel_at(Gate gate, bool from_input, int out, int in, int kz = 0, int ky = 0, int kx = 0) {
    const int o = int(gate) * hidden_channels + out;
    const int i = from_input ? in : in_channels + in;
    return weight.value.at(o, i, kz, ky, kx);
  }
  T& bias_at(Gate gate, int out) { return bias.value[std::size_t(int(gate) * hidden_channels + out)]; }
};

// One recurrence step over a batch. x is (N, in, z, y, x); state tensors are
// (N, hidden, z, y, x).
template <class T>
ConvLSTMState<T> cell_step(ConvLSTMCell<T>& cell, const Var<T>& x, const ConvLSTMState<T>& state) {
  Tape<T>& tape = *x.tape;
  const auto& xv = x.value();
  xv.require_rank(5, "cell_step");
  if (xv.channels() != cell.in_channels) {
    throw ShapeError("cell_step", "channel",
                     "input has " + std::to_string(xv.channels()) + " channels, cell expects " +
                         std::to_string(cell.in_channels));
  }
  if (xv.extent() != cell.extent) {
    throw ShapeError("cell_step", "spatial", "input " + to_string(xv.extent()) + " vs cell " + to_string(cell.extent));
  }
  const Shape state_shape = volume_shape(xv.batch(), cell.hidden_channels, cell.extent);
  if (state.h.shape() != state_shape || state.c.shape() != state_shape) {
    throw ShapeError("cell_step", "state",
                     "expected " + to_string(state_shape) + ", got h " + to_string(state.h.shape()) + " c " +
                         to_string(state.c.shape()));
  }
  const int H = cell.hidden_channels;
  const Activation act = cell.mode == LstmMode::kLiteral ? Activation::kSigmoid : Activation::kTanh;

  auto z = conv3d(concat_channels(x, state.h), tape.param(cell.weight), tape.param(cell.bias), 1);
  auto zi = slice_channels(z, 0 * H, H);
  auto zf = slice_channels(z, 1 * H, H);
  auto zc = slice_channels(z, 2 * H, H);
  auto zo = slice_channels(z, 3 * H, H);

  auto i = sigmoid(add(zi, mul_batch_broadcast(tape.param(cell.peep_i), state.c)));
  auto f = sigmoid(add(zf, mul_batch_broadcast(tape.param(cell.peep_f), state.c)));
  auto c = add(mul(f, state.c), mul(i, activation(zc, act)));
  auto o = sigmoid(add(zo, mul_batch_broadcast(tape.param(cell.peep_o), c)));
  auto h = mul(o, activation(c, act));
  return {h, c};
}

// Runs a stack of cells over a sequence and returns the top layer's last hidden
// state. Each layer starts from h0 = c0 = its first input, which is also
// processed as step 1; layer k > 1 consumes the hidden outputs of layer k-1.
template <class T>
Var<T> sequence_forward(std::vector<ConvLSTMCell<T>>& stack, const std::vector<Var<T>>& xs) {
  if (xs.empty()) throw ConfigError("sequence_forward: sequence length must be >= 1");
  if (stack.empty()) throw ConfigError("sequence_forward: empty ConvLSTM stack");
  for (const auto& x : xs) {
    if (x.shape() != xs.front().shape()) {
      throw ShapeError("sequence_forward", "sequence",
                       "all steps must share a shape: " + to_string(x.shape()) + " vs " + to_string(xs.front().shape()));
    }
  }
  std::vector<Var<T>> inputs = xs;
  for (auto& cell : stack) {
    const auto& first = inputs.front().value();
    if (first.channels() != cell.hidden_channels) {
      throw ShapeError("sequence_forward", "channel",
                       "initial state is copied from the first input, so its channel count (" +
                           std::to_string(first.channels()) + ") must equal the hidden channels (" +
                           std::to_string(cell.hidden_channels) + ")");
    }
    ConvLSTMState<T> state{inputs.front(), inputs.front()};
    std::vector<Var<T>> outputs;
    outputs.reserve(inputs.size());
    for (const auto& x : inputs) {
      state = cell_step(cell, x, state);
      outputs.push_back(state.h);
    }
    inputs = std::move(outputs);
  }
  return inputs.back();
}

}  // namespace stvnet
