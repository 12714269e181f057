#pragma once

// Raw compute kernels behind the differentiable ops. Everything here works on
// contiguous buffers; shape validation happens in ops.hpp.

#include <Eigen/Core>

#include <algorithm>
#include <cstdlib>
#include <limits>
#include <string>
#include <thread>
#include <vector>

#include "stvnet/tensor.hpp"

namespace stvnet::kernels {

template <class T>
using RowMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MatMap = Eigen::Map<RowMatrix<T>>;
template <class T>
using ConstMatMap = Eigen::Map<const RowMatrix<T>>;

// Worker count for batch-parallel loops, read once from STVNET_THREADS.
// Results never depend on it: every reduction runs in fixed batch order.
inline int thread_count() {
  static const int n = [] {
    const char* env = std::getenv("STVNET_THREADS");
    if (env == nullptr) return 1;
    const int v = std::atoi(env);
    return v < 1 ? 1 : v;
  }();
  return n;
}

template <class Fn>
void parallel_for(int n, Fn&& fn) {
  const int workers = std::min(thread_count(), n);
  if (workers <= 1) {
    for (int i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::thread> pool;
  pool.reserve(static_cast<std::size_t>(workers));
  for (int w = 0; w < workers; ++w) {
    pool.emplace_back([&, w] {
      for (int i = w; i < n; i += workers) fn(i);
    });
  }
  for (auto& t : pool) t.join();
}

// Geometry of a strided, zero-padded 3-d correlation.
struct ConvGeometry {
  int channels = 1;  // input channels of the correlation
  Extent3 in;
  Extent3 kernel;
  int stride = 1;
  Extent3 pad;
  Extent3 out;

  int col_rows() const { return channels * kernel.x * kernel.y * kernel.z; }
  int col_cols() const { return static_cast<int>(out.voxels()); }

  static int out_extent(int in, int k, int stride, int pad) { return (in + 2 * pad - k) / stride + 1; }

  // Padding (k-1)/2 per axis: "same" for odd kernels at stride 1, none for k=2.
  static ConvGeometry make(int channels, Extent3 in, Extent3 kernel, int stride) {
    ConvGeometry g;
    g.channels = channels;
    g.in = in;
    g.kernel = kernel;
    g.stride = stride;
    g.pad = {(kernel.x - 1) / 2, (kernel.y - 1) / 2, (kernel.z - 1) / 2};
    g.out = {out_extent(in.x, kernel.x, stride, g.pad.x), out_extent(in.y, kernel.y, stride, g.pad.y),
             out_extent(in.z, kernel.z, stride, g.pad.z)};
    return g;
  }
};

// Unfold one batch element (channels x in) into a (col_rows x col_cols) matrix.
// Row order is (channel, kz, ky, kx), matching a kernel of shape
// (out, in, kz, ky, kx) viewed as a row-major (out, in*kz*ky*kx) matrix.
template <class T>
void im2col(const T* in, const ConvGeometry& g, T* col) {
  const int ox_n = g.out.x, oy_n = g.out.y, oz_n = g.out.z;
  const std::size_t in_plane = std::size_t(g.in.x) * g.in.y;
  const std::size_t in_vol = in_plane * g.in.z;
  std::size_t row = 0;
  for (int c = 0; c < g.channels; ++c) {
    const T* src = in + c * in_vol;
    for (int kz = 0; kz < g.kernel.z; ++kz) {
      for (int ky = 0; ky < g.kernel.y; ++ky) {
        for (int kx = 0; kx < g.kernel.x; ++kx, ++row) {
          T* dst = col + row * g.out.voxels();
          // Valid ox range: 0 <= ox*stride - pad + kx < in.x
          int ox_lo = 0, ox_hi = ox_n;
          const int shift_x = kx - g.pad.x;
          while (ox_lo < ox_n && ox_lo * g.stride + shift_x < 0) ++ox_lo;
          while (ox_hi > ox_lo && (ox_hi - 1) * g.stride + shift_x >= g.in.x) --ox_hi;
          for (int oz = 0; oz < oz_n; ++oz) {
            const int iz = oz * g.stride - g.pad.z + kz;
            for (int oy = 0; oy < oy_n; ++oy, dst += ox_n) {
              const int iy = oy * g.stride - g.pad.y + ky;
              if (iz < 0 || iz >= g.in.z || iy < 0 || iy >= g.in.y) {
                std::fill(dst, dst + ox_n, T(0));
                continue;
              }
              const T* line = src + iz * in_plane + std::size_t(iy) * g.in.x;
              std::fill(dst, dst + ox_lo, T(0));
              if (g.stride == 1) {
                std::copy(line + ox_lo + shift_x, line + ox_hi + shift_x, dst + ox_lo);
              } else {
                for (int ox = ox_lo; ox < ox_hi; ++ox) dst[ox] = line[ox * g.stride + shift_x];
              }
              std::fill(dst + ox_hi, dst + ox_n, T(0));
            }
          }
        }
      }
    }
  }
}

// Adjoint of im2col: scatter-add the columns back into the volume.
template <class T>
void col2im_add(const T* col, const ConvGeometry& g, T* in) {
  const int ox_n = g.out.x, oy_n = g.out.y, oz_n = g.out.z;
  const std::size_t in_plane = std::size_t(g.in.x) * g.in.y;
  const std::size_t in_vol = in_plane * g.in.z;
  std::size_t row = 0;
  for (int c = 0; c < g.channels; ++c) {
    T* dstc = in + c * in_vol;
    for (int kz = 0; kz < g.kernel.z; ++kz) {
      for (int ky = 0; ky < g.kernel.y; ++ky) {
        for (int kx = 0; kx < g.kernel.x; ++kx, ++row) {
          const T* src = col + row * g.out.voxels();
          int ox_lo = 0, ox_hi = ox_n;
          const int shift_x = kx - g.pad.x;
          while (ox_lo < ox_n && ox_lo * g.stride + shift_x < 0) ++ox_lo;
          while (ox_hi > ox_lo && (ox_hi - 1) * g.stride + shift_x >= g.in.x) --ox_hi;
          for (int oz = 0; oz < oz_n; ++oz) {
            const int iz = oz * g.stride - g.pad.z + kz;
            for (int oy = 0; oy < oy_n; ++oy, src += ox_n) {
              const int iy = oy * g.stride - g.pad.y + ky;
              if (iz < 0 || iz >= g.in.z || iy < 0 || iy >= g.in.y) continue;
              T* line = dstc + iz * in_plane + std::size_t(iy) * g.in.x;
              for (int ox = ox_lo; ox < ox_hi; ++ox) line[ox * g.stride + shift_x] += src[ox];
            }
          }
        }
      }
    }
  }
}

// out(n) = W * im2col(in(n)) + b for each batch element.
template <class T>
void conv_forward(const T* in, int batch, const ConvGeometry& g, const T* weight, const T* bias,
                  int out_channels, T* out) {
  const int rows = g.col_rows(), cols = g.col_cols();
  const std::size_t in_stride = std::size_t(g.channels) * g.in.voxels();
  const std::size_t out_stride = std::size_t(out_channels) * g.out.voxels();
  ConstMatMap<T> w(weight, out_channels, rows);
  parallel_for(batch, [&](int n) {
    std::vector<T> col(std::size_t(rows) * cols);
    im2col(in + n * in_stride, g, col.data());
    MatMap<T> o(out + n * out_stride, out_channels, cols);
    o.noalias() = w * ConstMatMap<T>(col.data(), rows, cols);
    if (bias != nullptr) {
      for (int c = 0; c < out_channels; ++c) o.row(c).array() += bias[c];
    }
  });
}

// Backward of conv_forward. Any of the gradient outputs may be null.
template <class T>
void conv_backward(const T* in, int batch, const ConvGeometry& g, const T* weight, int out_channels,
                   const T* grad_out, T* grad_in, T* grad_weight, T* grad_bias) {
  const int rows = g.col_rows(), cols = g.col_cols();
  const std::size_t in_stride = std::size_t(g.channels) * g.in.voxels();
  const std::size_t out_stride = std::size_t(out_channels) * g.out.voxels();
  ConstMatMap<T> w(weight, out_channels, rows);
  std::vector<RowMatrix<T>> dw_parts(grad_weight ? std::size_t(batch) : 0);
  parallel_for(batch, [&](int n) {
    ConstMatMap<T> go(grad_out + n * out_stride, out_channels, cols);
    std::vector<T> col(std::size_t(rows) * cols);
    if (grad_weight != nullptr) {
      im2col(in + n * in_stride, g, col.data());
      dw_parts[std::size_t(n)].noalias() = go * ConstMatMap<T>(col.data(), rows, cols).transpose();
    }
    if (grad_in != nullptr) {
      MatMap<T> dcol(col.data(), rows, cols);
      dcol.noalias() = w.transpose() * go;
      col2im_add(col.data(), g, grad_in + n * in_stride);
    }
  });
  if (grad_weight != nullptr) {
    MatMap<T> dw(grad_weight, out_channels, rows);
    for (int n = 0; n < batch; ++n) dw += dw_parts[std::size_t(n)];
  }
  if (grad_bias != nullptr) {
    for (int n = 0; n < batch; ++n) {
      // Plain loop: Eigen's vectorised sum peels by address alignment, which
      // would make the result depend on where the buffer happens to live.
      const T* go = grad_out + n * out_stride;
      for (int c = 0; c < out_channels; ++c) {
        T acc = 0;
        for (std::ptrdiff_t i = 0; i < cols; ++i) acc += go[c * cols + i];
        grad_bias[c] += acc;
      }
    }
  }
}

// Transposed convolution: the exact adjoint of conv_forward (without bias)
// mapping `g.out`-shaped inputs back to `g.in`-shaped outputs.
// `weight` has the conv layout (in_channels, g.channels, kz, ky, kx).
template <class T>
void conv_transpose_forward(const T* in, int batch, int in_channels, const ConvGeometry& g, const T* weight,
                            const T* bias, T* out) {
  const int rows = g.col_rows(), cols = g.col_cols();
  const std::size_t in_stride = std::size_t(in_channels) * g.out.voxels();
  const std::size_t out_stride = std::size_t(g.channels) * g.in.voxels();
  ConstMatMap<T> w(weight, in_channels, rows);
  parallel_for(batch, [&](int n) {
    std::vector<T> col(std::size_t(rows) * cols);
    MatMap<T> c(col.data(), rows, cols);
    c.noalias() = w.transpose() * ConstMatMap<T>(in + n * in_stride, in_channels, cols);
    T* o = out + n * out_stride;
    std::fill(o, o + out_stride, T(0));
    col2im_add(col.data(), g, o);
    if (bias != nullptr) {
      const std::size_t vox = g.in.voxels();
      for (int ch = 0; ch < g.channels; ++ch) {
        T* p = o + ch * vox;
        for (std::size_t i = 0; i < vox; ++i) p[i] += bias[ch];
      }
    }
  });
}

template <class T>
void conv_transpose_backward(const T* in, int batch, int in_channels, const ConvGeometry& g, const T* weight,
                             const T* grad_out, T* grad_in, T* grad_weight, T* grad_bias) {
  const int rows = g.col_rows(), cols = g.col_cols();
  const std::size_t in_stride = std::size_t(in_channels) * g.out.voxels();
  const std::size_t out_stride = std::size_t(g.channels) * g.in.voxels();
  ConstMatMap<T> w(weight, in_channels, rows);
  std::vector<RowMatrix<T>> dw_parts(grad_weight ? std::size_t(batch) : 0);
  parallel_for(batch, [&](int n) {
    std::vector<T> col(std::size_t(rows) * cols);
    im2col(grad_out + n * out_stride, g, col.data());
    ConstMatMap<T> c(col.data(), rows, cols);
    if (grad_in != nullptr) {
      MatMap<T> gi(grad_in + n * in_stride, in_channels, cols);
      gi.noalias() += w * c;
    }
    if (grad_weight != nullptr) {
      dw_parts[std::size_t(n)].noalias() = ConstMatMap<T>(in + n * in_stride, in_channels, cols) * c.transpose();
    }
  });
  if (grad_weight != nullptr) {
    MatMap<T> dw(grad_weight, in_channels, rows);
    for (int n = 0; n < batch; ++n) dw += dw_parts[std::size_t(n)];
  }
  if (grad_bias != nullptr) {
    const std::size_t vox = g.in.voxels();
    for (int n = 0; n < batch; ++n) {
      for (int ch = 0; ch < g.channels; ++ch) {
        const T* p = grad_out + n * out_stride + ch * vox;
        T acc = 0;
        for (std::size_t i = 0; i < vox; ++i) acc += p[i];
        grad_bias[ch] += acc;
      }
    }
  }
}

// Max pooling over (batch*channels) independent volumes. `argmax` receives the
// flat input offset of each output's winning voxel; ties keep the first index
// in (z, y, x) scan order.
template <class T>
void max_pool_forward(const T* in, int planes, Extent3 in_e, int window, int stride, T* out,
                      std::size_t* argmax) {
  const Extent3 oe{(in_e.x - window) / stride + 1, (in_e.y - window) / stride + 1, (in_e.z - window) / stride + 1};
  const std::size_t in_vol = in_e.voxels();
  std::size_t o = 0;
  for (int p = 0; p < planes; ++p) {
    const std::size_t base = p * in_vol;
    for (int oz = 0; oz < oe.z; ++oz) {
      for (int oy = 0; oy < oe.y; ++oy) {
        for (int ox = 0; ox < oe.x; ++ox, ++o) {
          T best = -std::numeric_limits<T>::infinity();
          std::size_t best_i = base;
          bool first = true;
          for (int wz = 0; wz < window; ++wz) {
            for (int wy = 0; wy < window; ++wy) {
              for (int wx = 0; wx < window; ++wx) {
                const std::size_t i = base + (std::size_t(oz * stride + wz) * in_e.y + (oy * stride + wy)) * in_e.x +
                                      (ox * stride + wx);
                if (first || in[i] > best) {
                  best = in[i];
                  best_i = i;
                  first = false;
                }
              }
            }
          }
          out[o] = best;
          argmax[o] = best_i;
        }
      }
    }
  }
}

}  // namespace stvnet::kernels
