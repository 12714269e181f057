#pragma once

// Differentiable operations recorded on a Tape.

#include <cmath>
#include <memory>
#include <string>
#include <vector>

#include "stvnet/autograd.hpp"
#include "stvnet/kernels.hpp"

namespace stvnet {

enum class Activation { kRelu, kSigmoid, kTanh };

inline const char* to_string(Activation a) {
  switch (a) {
    case Activation::kRelu: return "relu";
    case Activation::kSigmoid: return "sigmoid";
    case Activation::kTanh: return "tanh";
  }
  return "?";
}

template <class T>
T sigmoid(T x) {
  return x >= T(0) ? T(1) / (T(1) + std::exp(-x)) : std::exp(x) / (T(1) + std::exp(x));
}

// Per-channel batch-norm statistics. eps and momentum are fixed per layer.
template <class T>
struct BatchNormState {
  Tensor<T> running_mean;
  Tensor<T> running_var;
  T eps = T(1e-5);
  T momentum = T(0.1);

  explicit BatchNormState(int channels = 1)
      : running_mean(Tensor<T>::zeros({channels})), running_var(Tensor<T>::ones({channels})) {}
};

namespace detail {

template <class T>
std::vector<int> ids(std::initializer_list<Var<T>> vars) {
  std::vector<int> out;
  for (const auto& v : vars)
    if (v.valid()) out.push_back(v.id);
  return out;
}

inline void require(bool ok, const char* op, const std::string& axis, const std::string& detail) {
  if (!ok) throw ShapeError(op, axis, detail);
}

template <class T>
void require_same(const char* op, const Var<T>& a, const Var<T>& b) {
  require(a.shape() == b.shape(), op, "all", to_string(a.shape()) + " vs " + to_string(b.shape()));
}

// Kernel shape (out, in, kz, ky, kx) -> spatial extent.
template <class T>
Extent3 kernel_extent(const Tensor<T>& w) {
  return {w.dim(4), w.dim(3), w.dim(2)};
}

}  // namespace detail

template <class T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  detail::require_same("add", a, b);
  Tensor<T> out = a.value();
  out += b.value();
  return a.tape->record(std::move(out), {a.id, b.id}, [a, b, id = a.tape->size()](Tape<T>& t) {
    const Tensor<T>& g = t.grad(static_cast<int>(id));
    if (t.needs_grad(a.id)) t.grad(a.id) += g;
    if (t.needs_grad(b.id)) t.grad(b.id) += g;
  });
}

// Elementwise (Hadamard) product.
template <class T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  detail::require_same("mul", a, b);
  const auto& av = a.value();
  const auto& bv = b.value();
  Tensor<T> out(av.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
  const int self = static_cast<int>(a.tape->size());
  return a.tape->record(std::move(out), {a.id, b.id}, [a, b, self](Tape<T>& t) {
    const Tensor<T>& g = t.grad(self);
    const auto& av = t.value(a.id);
    const auto& bv = t.value(b.id);
    if (t.needs_grad(a.id)) {
      auto& ga = t.grad(a.id);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv[i];
    }
    if (t.needs_grad(b.id)) {
      auto& gb = t.grad(b.id);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * av[i];
    }
  });
}

// Hadamard product of a (1, C, ...) tensor with every batch element of x (N, C, ...).
template <class T>
Var<T> mul_batch_broadcast(const Var<T>& v, const Var<T>& x) {
  const auto& vv = v.value();
  const auto& xv = x.value();
  detail::require(vv.rank() == xv.rank() && vv.dim(0) == 1, "mul_batch_broadcast", "batch",
                  "expected (1,...) against (N,...), got " + to_string(vv.shape()) + " vs " + to_string(xv.shape()));
  for (int i = 1; i < xv.rank(); ++i) {
    detail::require(vv.dim(i) == xv.dim(i), "mul_batch_broadcast", "axis " + std::to_string(i),
                    to_string(vv.shape()) + " vs " + to_string(xv.shape()));
  }
  const std::size_t per = vv.size();
  Tensor<T> out(xv.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = vv[i % per] * xv[i];
  const int self = static_cast<int>(x.tape->size());
  return x.tape->record(std::move(out), {v.id, x.id}, [v, x, self, per](Tape<T>& t) {
    const Tensor<T>& g = t.grad(self);
    const auto& vv = t.value(v.id);
    const auto& xv = t.value(x.id);
    if (t.needs_grad(v.id)) {
      auto& gv = t.grad(v.id);
      for (std::size_t i = 0; i < g.size(); ++i) gv[i % per] += g[i] * xv[i];
    }
    if (t.needs_grad(x.id)) {
      auto& gx = t.grad(x.id);
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * vv[i % per];
    }
  });
}

template <class T>
Var<T> scale(const Var<T>& a, T s) {
  Tensor<T> out = a.value();
  out *= s;
  const int self = static_cast<int>(a.tape->size());
  return a.tape->record(std::move(out), {a.id}, [a, s, self](Tape<T>& t) {
    const Tensor<T>& g = t.grad(self);
    auto& ga = t.grad(a.id);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += s * g[i];
  });
}

// Sum of all elements, as a shape-(1) tensor.
template <class T>
Var<T> sum(const Var<T>& a) {
  Tensor<T> out({1}, a.value().sum());
  const int self = static_cast<int>(a.tape->size());
  return a.tape->record(std::move(out), {a.id}, [a, self](Tape<T>& t) {
    const T g = t.grad(self)[0];
    auto& ga = t.grad(a.id);
    for (auto& v : ga.storage()) v += g;
  });
}

template <class T>
Var<T> activation(const Var<T>& a, Activation kind) {
  const auto& av = a.value();
  Tensor<T> out(av.shape());
  switch (kind) {
    case Activation::kRelu:
      // NaN passes through so a diverged run still surfaces as a NaN loss.
      for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] > T(0) || std::isnan(av[i]) ? av[i] : T(0);
      break;
    case Activation::kSigmoid:
      for (std::size_t i = 0; i < out.size(); ++i) out[i] = sigmoid(av[i]);
      break;
    case Activation::kTanh:
      for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::tanh(av[i]);
      break;
  }
  const int self = static_cast<int>(a.tape->size());
  return a.tape->record(std::move(out), {a.id}, [a, kind, self](Tape<T>& t) {
    const Tensor<T>& g = t.grad(self);
    const Tensor<T>& y = t.value(self);
    auto& ga = t.grad(a.id);
    switch (kind) {
      case Activation::kRelu:
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += y[i] > T(0) ? g[i] : T(0);
        break;
      case Activation::kSigmoid:
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * y[i] * (T(1) - y[i]);
        break;
      case Activation::kTanh:
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * (T(1) - y[i] * y[i]);
        break;
    }
  });
}

template <class T>
Var<T> relu(const Var<T>& a) {
  return activation(a, Activation::kRelu);
}
template <class T>
Var<T> sigmoid(const Var<T>& a) {
  return activation(a, Activation::kSigmoid);
}
template <class T>
Var<T> tanh(const Var<T>& a) {
  return activation(a, Activation::kTanh);
}

// Concatenate along axis 1. An empty (default-constructed) operand is the identity.
template <class T>
Var<T> concat_channels(const Var<T>& a, const Var<T>& b) {
  const auto& av = a.value();
  const auto& bv = b.value();
  if (av.empty()) return b;
  if (bv.empty()) return a;
  detail::require(av.rank() == bv.rank() && av.rank() >= 2, "concat_channels", "rank",
                  to_string(av.shape()) + " vs " + to_string(bv.shape()));
  detail::require(av.dim(0) == bv.dim(0), "concat_channels", "batch",
                  to_string(av.shape()) + " vs " + to_string(bv.shape()));
  for (int i = 2; i < av.rank(); ++i) {
    detail::require(av.dim(i) == bv.dim(i), "concat_channels", "spatial axis " + std::to_string(i),
                    to_string(av.shape()) + " vs " + to_string(bv.shape()));
  }
  const std::size_t inner = numel(av.shape()) / (std::size_t(av.dim(0)) * av.dim(1));
  const std::size_t a_block = std::size_t(av.dim(1)) * inner;
  const std::size_t b_block = std::size_t(bv.dim(1)) * inner;
  Shape shape = av.shape();
  shape[1] += bv.dim(1);
  Tensor<T> out(shape);
  for (int n = 0; n < av.dim(0); ++n) {
    T* dst = out.ptr() + n * (a_block + b_block);
    std::copy_n(av.ptr() + n * a_block, a_block, dst);
    std::copy_n(bv.ptr() + n * b_block, b_block, dst + a_block);
  }
  const int self = static_cast<int>(a.tape->size());
  const int batch = av.dim(0);
  return a.tape->record(std::move(out), {a.id, b.id}, [a, b, self, batch, a_block, b_block](Tape<T>& t) {
    const Tensor<T>& g = t.grad(self);
    for (int n = 0; n < batch; ++n) {
      const T* src = g.ptr() + n * (a_block + b_block);
      if (t.needs_grad(a.id)) {
        T* ga = t.grad(a.id).ptr() + n * a_block;
        for (std::size_t i = 0; i < a_block; ++i) ga[i] += src[i];
      }
      if (t.needs_grad(b.id)) {
        T* gb = t.grad(b.id).ptr() + n * b_block;
        for (std::size_t i = 0; i < b_block; ++i) gb[i] += src[a_block + i];
      }
    }
  });
}

// Channels [start, start+count) of a (N, C, ...) tensor.
template <class T>
Var<T> slice_channels(const Var<T>& a, int start, int count) {
  const auto& av = a.value();
  detail::require(start >= 0 && count >= 1 && start + count <= av.dim(1), "slice_channels", "channel",
                  "range [" + std::to_string(start) + "," + std::to_string(start + count) + ") of " +
                      to_string(av.shape()));
  const std::size_t inner = numel(av.shape()) / (std::size_t(av.dim(0)) * av.dim(1));
  Shape shape = av.shape();
  shape[1] = count;
  Tensor<T> out(shape);
  const int batch = av.dim(0), channels = av.dim(1);
  for (int n = 0; n < batch; ++n) {
    std::copy_n(av.ptr() + (std::size_t(n) * channels + start) * inner, count * inner,
                out.ptr() + std::size_t(n) * count * inner);
  }
  const int self = static_cast<int>(a.tape->size());
  return a.tape->record(std::move(out), {a.id}, [a, self, start, count, batch, channels, inner](Tape<T>& t) {
    const Tensor<T>& g = t.grad(self);
    auto& ga = t.grad(a.id);
    for (int n = 0; n < batch; ++n) {
      T* dst = ga.ptr() + (std::size_t(n) * channels + start) * inner;
      const T* src = g.ptr() + std::size_t(n) * count * inner;
      for (std::size_t i = 0; i < count * inner; ++i) dst[i] += src[i];
    }
  });
}

// Batch elements [start, start+count).
template <class T>
Var<T> slice_batch(const Var<T>& a, int start, int count) {
  const auto& av = a.value();
  detail::require(start >= 0 && count >= 1 && start + count <= av.dim(0), "slice_batch", "batch",
                  "range [" + std::to_string(start) + "," + std::to_string(start + count) + ") of " +
                      to_string(av.shape()));
  const std::size_t per = av.size() / av.dim(0);
  Shape shape = av.shape();
  shape[0] = count;
  Tensor<T> out(shape, std::vector<T>(av.ptr() + start * per, av.ptr() + (start + count) * per));
  const int self = static_cast<int>(a.tape->size());
  return a.tape->record(std::move(out), {a.id}, [a, self, start, per](Tape<T>& t) {
    const Tensor<T>& g = t.grad(self);
    T* dst = t.grad(a.id).ptr() + start * per;
    for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i];
  });
}

// 3-d convolution (cross-correlation) with zero padding (k-1)/2 per axis.
// `weight` is (out, in, kz, ky, kx); `bias` may be an invalid Var.
template <class T>
Var<T> conv3d(const Var<T>& x, const Var<T>& weight, const Var<T>& bias, int stride = 1) {
  const auto& xv = x.value();
  const auto& wv = weight.value();
  xv.require_rank(5, "conv3d");
  wv.require_rank(5, "conv3d");
  detail::require(stride >= 1, "conv3d", "stride", "stride must be >= 1");
  detail::require(xv.channels() == wv.dim(1), "conv3d", "channel",
                  "input has " + std::to_string(xv.channels()) + " channels, kernel expects " +
                      std::to_string(wv.dim(1)));
  const int out_ch = wv.dim(0);
  if (bias.valid()) {
    detail::require(bias.value().size() == std::size_t(out_ch), "conv3d", "bias",
                    "bias has " + std::to_string(bias.value().size()) + " entries for " + std::to_string(out_ch) +
                        " output channels");
  }
  const auto g = kernels::ConvGeometry::make(xv.channels(), xv.extent(), detail::kernel_extent(wv), stride);
  detail::require(g.out.x >= 1 && g.out.y >= 1 && g.out.z >= 1, "conv3d", "spatial",
                  "kernel larger than padded input " + to_string(xv.shape()));
  Tensor<T> out(volume_shape(xv.batch(), out_ch, g.out));
  kernels::conv_forward(xv.ptr(), xv.batch(), g, wv.ptr(), bias.valid() ? bias.value().ptr() : nullptr, out_ch,
                        out.ptr());
  const int self = static_cast<int>(x.tape->size());
  return x.tape->record(std::move(out), detail::ids<T>({x, weight, bias}), [=](Tape<T>& t) {
    const auto& xv = t.value(x.id);
    const auto& wv = t.value(weight.id);
    kernels::conv_backward(xv.ptr(), xv.batch(), g, wv.ptr(), out_ch, t.grad(self).ptr(),
                           t.needs_grad(x.id) ? t.grad(x.id).ptr() : nullptr,
                           t.needs_grad(weight.id) ? t.grad(weight.id).ptr() : nullptr,
                           bias.valid() && t.needs_grad(bias.id) ? t.grad(bias.id).ptr() : nullptr);
  });
}

// Transposed convolution, the adjoint of conv3d with the same kernel and stride.
// `weight` is (in, out, kz, ky, kx); each spatial extent grows by `stride`.
template <class T>
Var<T> conv_transpose3d(const Var<T>& x, const Var<T>& weight, const Var<T>& bias, int stride = 1) {
  const auto& xv = x.value();
  const auto& wv = weight.value();
  xv.require_rank(5, "conv_transpose3d");
  wv.require_rank(5, "conv_transpose3d");
  detail::require(stride >= 1, "conv_transpose3d", "stride", "stride must be >= 1");
  detail::require(xv.channels() == wv.dim(0), "conv_transpose3d", "channel",
                  "input has " + std::to_string(xv.channels()) + " channels, kernel expects " +
                      std::to_string(wv.dim(0)));
  const int out_ch = wv.dim(1);
  const Extent3 in_e = xv.extent();
  const Extent3 out_e{in_e.x * stride, in_e.y * stride, in_e.z * stride};
  const auto g = kernels::ConvGeometry::make(out_ch, out_e, detail::kernel_extent(wv), stride);
  detail::require(g.out == in_e, "conv_transpose3d", "spatial",
                  "kernel " + to_string(detail::kernel_extent(wv)) + " at stride " + std::to_string(stride) +
                      " does not map " + to_string(out_e) + " onto " + to_string(in_e));
  if (bias.valid()) {
    detail::require(bias.value().size() == std::size_t(out_ch), "conv_transpose3d", "bias",
                    "bias size does not match output channels");
  }
  Tensor<T> out(volume_shape(xv.batch(), out_ch, out_e));
  kernels::conv_transpose_forward(xv.ptr(), xv.batch(), xv.channels(), g, wv.ptr(),
                                  bias.valid() ? bias.value().ptr() : nullptr, out.ptr());
  const int self = static_cast<int>(x.tape->size());
  const int in_ch = xv.channels();
  return x.tape->record(std::move(out), detail::ids<T>({x, weight, bias}), [=](Tape<T>& t) {
    const auto& xv = t.value(x.id);
    const auto& wv = t.value(weight.id);
    kernels::conv_transpose_backward(xv.ptr(), xv.batch(), in_ch, g, wv.ptr(), t.grad(self).ptr(),
                                     t.needs_grad(x.id) ? t.grad(x.id).ptr() : nullptr,
                                     t.needs_grad(weight.id) ? t.grad(weight.id).ptr() : nullptr,
                                     bias.valid() && t.needs_grad(bias.id) ? t.grad(bias.id).ptr() : nullptr);
  });
}

template <class T>
Var<T> max_pool3d(const Var<T>& x, int window = 2, int stride = 2) {
  const auto& xv = x.value();
  xv.require_rank(5, "max_pool3d");
  const Extent3 e = xv.extent();
  auto check = [&](int extent, const char* axis) {
    if (extent % stride != 0 || extent < window) {
      throw ShapeError("max_pool3d", axis,
                       "extent " + std::to_string(extent) + " is not divisible by stride " + std::to_string(stride) +
                           "; choose an input shape whose spatial extents are multiples of " +
                           std::to_string(stride) + " at every pooling level");
    }
  };
  check(e.x, "x");
  check(e.y, "y");
  check(e.z, "z");
  const Extent3 oe{(e.x - window) / stride + 1, (e.y - window) / stride + 1, (e.z - window) / stride + 1};
  Tensor<T> out(volume_shape(xv.batch(), xv.channels(), oe));
  auto argmax = std::make_shared<std::vector<std::size_t>>(out.size());
  kernels::max_pool_forward(xv.ptr(), xv.batch() * xv.channels(), e, window, stride, out.ptr(), argmax->data());
  const int self = static_cast<int>(x.tape->size());
  return x.tape->record(std::move(out), {x.id}, [x, self, argmax](Tape<T>& t) {
    const Tensor<T>& g = t.grad(self);
    auto& gx = t.grad(x.id);
    for (std::size_t i = 0; i < g.size(); ++i) gx[(*argmax)[i]] += g[i];
  });
}

// Batch normalization over (batch, spatial) per channel. In training mode the
// batch statistics normalize the input and update `state`'s running averages.
template <class T>
Var<T> batch_norm3d(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, BatchNormState<T>& state,
                    bool training) {
  const auto& xv = x.value();
  xv.require_rank(5, "batch_norm3d");
  const int batch = xv.batch(), channels = xv.channels();
  detail::require(gamma.value().size() == std::size_t(channels) && beta.value().size() == std::size_t(channels),
                  "batch_norm3d", "channel", "gamma/beta size must equal channel count " + std::to_string(channels));
  detail::require(state.running_mean.size() == std::size_t(channels), "batch_norm3d", "channel",
                  "running statistics size must equal channel count");
  if (!(state.eps > T(0))) throw ConfigError("batch_norm3d: epsilon must be > 0");
  const std::size_t vox = xv.voxels();
  const std::size_t count = vox * batch;
  if (training && count < 2) {
    throw ConfigError("batch_norm3d: training mode needs at least 2 values per channel");
  }
  auto xhat = std::make_shared<Tensor<T>>(xv.shape());
  auto inv_std = std::make_shared<std::vector<T>>(std::size_t(channels));
  Tensor<T> out(xv.shape());
  const auto& gv = gamma.value();
  const auto& bv = beta.value();
  for (int c = 0; c < channels; ++c) {
    T mean, var;
    if (training) {
      T s = 0;
      for (int n = 0; n < batch; ++n) {
        const T* p = xv.ptr() + (std::size_t(n) * channels + c) * vox;
        for (std::size_t i = 0; i < vox; ++i) s += p[i];
      }
      mean = s / T(count);
      T ss = 0;
      for (int n = 0; n < batch; ++n) {
        const T* p = xv.ptr() + (std::size_t(n) * channels + c) * vox;
        for (std::size_t i = 0; i < vox; ++i) ss += (p[i] - mean) * (p[i] - mean);
      }
      var = ss / T(count);
      const T unbiased = ss / T(count - 1);
      state.running_mean[c] = (T(1) - state.momentum) * state.running_mean[c] + state.momentum * mean;
      state.running_var[c] = (T(1) - state.momentum) * state.running_var[c] + state.momentum * unbiased;
    } else {
      mean = state.running_mean[c];
      var = state.running_var[c];
    }
    const T is = T(1) / std::sqrt(var + state.eps);
    (*inv_std)[std::size_t(c)] = is;
    for (int n = 0; n < batch; ++n) {
      const std::size_t off = (std::size_t(n) * channels + c) * vox;
      for (std::size_t i = 0; i < vox; ++i) {
        const T h = (xv[off + i] - mean) * is;
        (*xhat)[off + i] = h;
        out[off + i] = gv[c] * h + bv[c];
      }
    }
  }
  const int self = static_cast<int>(x.tape->size());
  return x.tape->record(
      std::move(out), {x.id, gamma.id, beta.id},
      [x, gamma, beta, self, xhat, inv_std, training, batch, channels, vox, count](Tape<T>& t) {
        const Tensor<T>& g = t.grad(self);
        const auto& gv = t.value(gamma.id);
        for (int c = 0; c < channels; ++c) {
          T sum_g = 0, sum_gx = 0;
          for (int n = 0; n < batch; ++n) {
            const std::size_t off = (std::size_t(n) * channels + c) * vox;
            for (std::size_t i = 0; i < vox; ++i) {
              sum_g += g[off + i];
              sum_gx += g[off + i] * (*xhat)[off + i];
            }
          }
          if (t.needs_grad(gamma.id)) t.grad(gamma.id)[c] += sum_gx;
          if (t.needs_grad(beta.id)) t.grad(beta.id)[c] += sum_g;
          if (!t.needs_grad(x.id)) continue;
          auto& gx = t.grad(x.id);
          const T is = (*inv_std)[std::size_t(c)];
          if (training) {
            const T k = gv[c] * is / T(count);
            for (int n = 0; n < batch; ++n) {
              const std::size_t off = (std::size_t(n) * channels + c) * vox;
              for (std::size_t i = 0; i < vox; ++i) {
                gx[off + i] += k * (T(count) * g[off + i] - sum_g - (*xhat)[off + i] * sum_gx);
              }
            }
          } else {
            const T k = gv[c] * is;
            for (int n = 0; n < batch; ++n) {
              const std::size_t off = (std::size_t(n) * channels + c) * vox;
              for (std::size_t i = 0; i < vox; ++i) gx[off + i] += k * g[off + i];
            }
          }
        }
      });
}

// Soft Dice loss averaged over the batch:
//   -(2 sum(p*y) + s) / (sum(p) + sum(y) + s)
// per batch element. `target` must match `pred`'s shape.
template <class T>
Var<T> dice_loss(const Var<T>& pred, const Tensor<T>& target, T smooth = T(1e-6)) {
  const auto& pv = pred.value();
  if (pv.shape() != target.shape()) {
    throw ShapeError("dice_loss", "all", to_string(pv.shape()) + " vs " + to_string(target.shape()));
  }
  const int batch = pv.dim(0);
  const std::size_t per = pv.size() / batch;
  auto inter = std::make_shared<std::vector<T>>(std::size_t(batch));
  auto denom = std::make_shared<std::vector<T>>(std::size_t(batch));
  T loss = 0;
  for (int n = 0; n < batch; ++n) {
    T i_sum = 0, p_sum = 0, y_sum = 0;
    for (std::size_t i = n * per; i < (n + 1) * per; ++i) {
      i_sum += pv[i] * target[i];
      p_sum += pv[i];
      y_sum += target[i];
    }
    (*inter)[std::size_t(n)] = T(2) * i_sum + smooth;
    (*denom)[std::size_t(n)] = p_sum + y_sum + smooth;
    loss -= (*inter)[std::size_t(n)] / (*denom)[std::size_t(n)];
  }
  loss /= T(batch);
  const int self = static_cast<int>(pred.tape->size());
  return pred.tape->record(Tensor<T>({1}, loss), {pred.id}, [pred, target, self, batch, per, inter, denom](Tape<T>& t) {
    const T g = t.grad(self)[0];
    auto& gp = t.grad(pred.id);
    for (int n = 0; n < batch; ++n) {
      const T num = (*inter)[std::size_t(n)];
      const T den = (*denom)[std::size_t(n)];
      const T k = -g / T(batch) / (den * den);
      for (std::size_t i = n * per; i < (n + 1) * per; ++i) gp[i] += k * (T(2) * target[i] * den - num);
    }
  });
}

// weight * sum |w| over the given tensors; subgradient 0 at w == 0.
template <class T>
Var<T> l1_penalty(const std::vector<Var<T>>& weights, T weight) {
  T acc = 0;
  std::vector<int> inputs;
  for (const auto& w : weights) {
    for (T v : w.value().storage()) acc += std::abs(v);
    inputs.push_back(w.id);
  }
  Tape<T>* tape = weights.empty() ? nullptr : weights.front().tape;
  if (tape == nullptr) throw ConfigError("l1_penalty: no parameters");
  const int self = static_cast<int>(tape->size());
  return tape->record(Tensor<T>({1}, weight * acc), std::move(inputs), [weights, weight, self](Tape<T>& t) {
    const T g = t.grad(self)[0] * weight;
    for (const auto& w : weights) {
      if (!t.needs_grad(w.id)) continue;
      const auto& wv = t.value(w.id);
      auto& gw = t.grad(w.id);
      for (std::size_t i = 0; i < wv.size(); ++i) gw[i] += wv[i] > T(0) ? g : (wv[i] < T(0) ? -g : T(0));
    }
  });
}

}  // namespace stvnet
