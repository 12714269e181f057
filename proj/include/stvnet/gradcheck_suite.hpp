#pragma once

#include <functional>
#include <string>
#include <vector>

#include "stvnet/convlstm.hpp"
#include "stvnet/gradcheck.hpp"
#include "stvnet/network.hpp"
#include "stvnet/ops.hpp"

namespace stvnet {

struct GradCheckEntry {
  std::string module;
  std::string name;
  std::uint64_t seed = 0;
  double max_rel_error = 0;
  double tolerance = 0;
  std::size_t checked = 0;

  bool passed() const { return max_rel_error < tolerance; }
};

inline constexpr double kOpGradTolerance = 1e-4;
inline constexpr double kEndToEndGradTolerance = 1e-3;

namespace detail {

inline Tensor<double> uniform_tensor(Shape shape, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
  Rng rng(seed);
  Tensor<double> t(std::move(shape));
  for (auto& v : t.storage()) v = rng.uniform(lo, hi);
  return t;
}

// <r, f(x)> for a fixed random r, so every output coordinate carries gradient.
template <class Build>
GradCheckReport projected_check(std::uint64_t seed, const std::vector<Parameter<double>*>& params, Build build,
                                double h = 1e-4) {
  Tensor<double> proj;
  {
    Tape<double> t;
    proj = uniform_tensor(build(t).value().shape(), seed * 977 + 13);
  }
  auto loss = [&](Tape<double>& t) { return sum(mul(build(t), t.constant(proj))); };
  return finite_diff_check<double>(loss, params, h);
}

}  // namespace detail

// Every differentiable op on random 4^3 inputs.
inline std::vector<GradCheckEntry> tensor_gradchecks(std::uint64_t s) {
  using detail::uniform_tensor;
  Parameter<double> x("x", uniform_tensor({1, 3, 4, 4, 4}, s));
  Parameter<double> x2("x2", uniform_tensor({2, 3, 4, 4, 4}, s + 1));
  Parameter<double> w("w", uniform_tensor({2, 3, 3, 3, 3}, s + 2, -0.5, 0.5));
  Parameter<double> wt("wt", uniform_tensor({3, 2, 2, 2, 2}, s + 3, -0.5, 0.5));
  Parameter<double> b("b", uniform_tensor({2}, s + 4));
  Parameter<double> gamma("gamma", uniform_tensor({3}, s + 5, 0.5, 1.5));
  Parameter<double> beta("beta", uniform_tensor({3}, s + 6));
  Parameter<double> y("y", uniform_tensor({1, 2, 4, 4, 4}, s + 7));
  Parameter<double> v("v", uniform_tensor({1, 3, 4, 4, 4}, s + 8));
  Parameter<double> prob("p", uniform_tensor({1, 1, 4, 4, 4}, s + 9, 0.05, 0.95));
  Tensor<double> target = uniform_tensor({1, 1, 4, 4, 4}, s + 10, 0, 1);
  for (auto& t : target.storage()) t = t > 0.5 ? 1 : 0;

  std::vector<GradCheckEntry> out;
  auto record = [&](const std::string& name, const GradCheckReport& r) {
    out.push_back({"tensor", name, s, r.max_rel_error, kOpGradTolerance, r.checked});
  };
  using P = std::vector<Parameter<double>*>;
  record("conv3d", detail::projected_check(s, P{&x, &w, &b},
                                           [&](Tape<double>& t) { return conv3d(t.param(x), t.param(w), t.param(b)); }));
  record("conv3d_stride2", detail::projected_check(s, P{&x, &w, &b}, [&](Tape<double>& t) {
           return conv3d(t.param(x), t.param(w), t.param(b), 2);
         }));
  record("conv_transpose3d", detail::projected_check(s, P{&x, &wt, &b}, [&](Tape<double>& t) {
           return conv_transpose3d(t.param(x), t.param(wt), t.param(b), 2);
         }));
  record("max_pool3d", detail::projected_check(s, P{&x}, [&](Tape<double>& t) { return max_pool3d(t.param(x)); }));
  record("batch_norm3d_train", detail::projected_check(s, P{&x2, &gamma, &beta}, [&](Tape<double>& t) {
           BatchNormState<double> st(3);
           return batch_norm3d(t.param(x2), t.param(gamma), t.param(beta), st, true);
         }));
  record("batch_norm3d_eval", detail::projected_check(s, P{&x2, &gamma, &beta}, [&](Tape<double>& t) {
           BatchNormState<double> st(3);
           st.running_mean = uniform_tensor({3}, s + 11);
           st.running_var = uniform_tensor({3}, s + 12, 0.5, 2.0);
           return batch_norm3d(t.param(x2), t.param(gamma), t.param(beta), st, false);
         }));
  for (Activation a : {Activation::kRelu, Activation::kSigmoid, Activation::kTanh}) {
    record(to_string(a),
           detail::projected_check(s, P{&x}, [&](Tape<double>& t) { return activation(t.param(x), a); }));
  }
  record("concat_channels", detail::projected_check(s, P{&x, &y}, [&](Tape<double>& t) {
           return concat_channels(t.param(x), t.param(y));
         }));
  record("slice_channels",
         detail::projected_check(s, P{&x}, [&](Tape<double>& t) { return slice_channels(t.param(x), 1, 2); }));
  record("slice_batch",
         detail::projected_check(s, P{&x2}, [&](Tape<double>& t) { return slice_batch(t.param(x2), 1, 1); }));
  record("mul", detail::projected_check(s, P{&x, &v}, [&](Tape<double>& t) { return mul(t.param(x), t.param(v)); }));
  record("mul_batch_broadcast", detail::projected_check(s, P{&v, &x2}, [&](Tape<double>& t) {
           return mul_batch_broadcast(t.param(v), t.param(x2));
         }));
  record("add", detail::projected_check(s, P{&x, &v}, [&](Tape<double>& t) { return add(t.param(x), t.param(v)); }));
  record("dice_loss", finite_diff_check<double>([&](Tape<double>& t) { return dice_loss(t.param(prob), target); },
                                                {&prob}, 1e-6));
  // Kept away from 0, where the subgradient is a convention.
  Parameter<double> l1w("l1w", uniform_tensor({2, 3}, s + 13, 0.1, 1.0));
  for (std::size_t i = 0; i < l1w.value.size(); i += 2) l1w.value[i] = -l1w.value[i];
  record("l1_penalty", finite_diff_check<double>([&](Tape<double>& t) { return l1_penalty<double>({t.param(l1w)}, 0.3); },
                                                 {&l1w}, 1e-4));
  return out;
}

// A 2-layer stack over 3 frames in both activation modes, with non-zero peepholes.
inline std::vector<GradCheckEntry> convlstm_gradchecks(std::uint64_t s) {
  std::vector<GradCheckEntry> out;
  for (LstmMode mode : {LstmMode::kLiteral, LstmMode::kConventional}) {
    Rng rng(s * 31 + 7);
    std::vector<ConvLSTMCell<double>> stack;
    stack.push_back(ConvLSTMCell<double>::make("l1", 2, 2, {3, 3, 2}, 3, mode, rng));
    stack.push_back(ConvLSTMCell<double>::make("l2", 2, 2, {3, 3, 2}, 3, mode, rng));
    for (auto& cell : stack) {
      for (auto& v : cell.peep_i.value.storage()) v = rng.uniform(-0.5, 0.5);
      for (auto& v : cell.peep_o.value.storage()) v = rng.uniform(-0.5, 0.5);
    }
    std::vector<Parameter<double>> frames;
    frames.reserve(3);
    for (int t = 0; t < 3; ++t)
      frames.emplace_back("x" + std::to_string(t), detail::uniform_tensor({1, 2, 2, 3, 3}, s * 101 + std::uint64_t(t)));
    const auto proj = detail::uniform_tensor({1, 2, 2, 3, 3}, s * 101 + 99);
    auto loss = [&](Tape<double>& tape) {
      std::vector<Var<double>> xs;
      for (auto& f : frames) xs.push_back(tape.param(f));
      return sum(mul(sequence_forward(stack, xs), tape.constant(proj)));
    };
    std::vector<Parameter<double>*> params;
    for (auto& cell : stack)
      for (auto* p : cell.parameters()) params.push_back(p);
    for (auto& f : frames) params.push_back(&f);
    const auto r = finite_diff_check<double>(loss, params, 1e-4);
    out.push_back({"convlstm", std::string("sequence_") + to_string(mode), s, r.max_rel_error, kOpGradTolerance,
                   r.checked});
  }
  return out;
}

// Tiny networks (base 2, 8x8x4) under Dice + L1, 1% of coordinates sampled.
inline std::vector<GradCheckEntry> network_gradchecks(std::uint64_t s) {
  std::vector<GradCheckEntry> out;
  for (Arch arch : {Arch::kVNet, Arch::kSTNet, Arch::kSTVNet}) {
    NetworkSpec spec;
    spec.arch = arch;
    spec.base_channels = 2;
    spec.window_T = arch == Arch::kVNet ? 1 : 2;
    spec.input_shape = {8, 8, 4};
    auto net = Network<double>::build(spec, 21 + s);
    const auto x = detail::uniform_tensor({2, spec.window_T, 4, 8, 8}, s * 13 + 22, 0, 1);
    auto y = detail::uniform_tensor({2, 1, 4, 8, 8}, s * 13 + 23, 0, 1);
    for (auto& v : y.storage()) v = v > 0.6 ? 1 : 0;
    const auto params = net.parameters();
    auto loss = [&](Tape<double>& t) {
      std::vector<Var<double>> w;
      for (auto* p : params) w.push_back(t.param(*p));
      return add(dice_loss(net.forward(t, x, true), y), l1_penalty(w, 1e-5));
    };
    const auto r = finite_diff_check<double>(loss, params, 1e-6, 0.01, s + 7, 1e-6);
    out.push_back({"network", to_string(arch), s, r.max_rel_error, kEndToEndGradTolerance, r.checked});
  }
  return out;
}

// module: all | tensor | convlstm | network.
inline std::vector<GradCheckEntry> run_gradchecks(const std::string& module, int seeds,
                                                  const std::function<void(const GradCheckEntry&)>& on_entry = {}) {
  if (module != "all" && module != "tensor" && module != "convlstm" && module != "network") {
    throw ConfigError("unknown gradcheck module '" + module + "' (expected all|tensor|convlstm|network)");
  }
  std::vector<GradCheckEntry> out;
  auto add_all = [&](std::vector<GradCheckEntry> v) {
    for (auto& e : v) {
      if (on_entry) on_entry(e);
      out.push_back(std::move(e));
    }
  };
  for (int i = 0; i < seeds; ++i) {
    const auto s = std::uint64_t(i);
    if (module == "all" || module == "tensor") add_all(tensor_gradchecks(s));
    if (module == "all" || module == "convlstm") add_all(convlstm_gradchecks(s));
    if (module == "all" || module == "network") add_all(network_gradchecks(s));
  }
  return out;
}

}  // namespace stvnet
