#pragma once

#include <cstdint>

#include "stvnet/rng.hpp"
#include "stvnet/tensor.hpp"

namespace stvnet::test {

template <class T = double>
Tensor<T> random_tensor(Shape shape, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
  Rng rng(seed);
  Tensor<T> t(std::move(shape));
  for (auto& v : t.storage()) v = static_cast<T>(rng.uniform(lo, hi));
  return t;
}

// Direct-summation 3-d correlation with zero padding (k-1)/2, used as an
// independent reference for the im2col path.
inline Tensor<double> naive_conv3d(const Tensor<double>& x, const Tensor<double>& w, const Tensor<double>* b,
                                   int stride) {
  const int N = x.dim(0), C = x.dim(1), Z = x.dim(2), Y = x.dim(3), X = x.dim(4);
  const int O = w.dim(0), KZ = w.dim(2), KY = w.dim(3), KX = w.dim(4);
  const int pz = (KZ - 1) / 2, py = (KY - 1) / 2, px = (KX - 1) / 2;
  const int OZ = (Z + 2 * pz - KZ) / stride + 1, OY = (Y + 2 * py - KY) / stride + 1,
            OX = (X + 2 * px - KX) / stride + 1;
  Tensor<double> out({N, O, OZ, OY, OX});
  for (int n = 0; n < N; ++n)
    for (int o = 0; o < O; ++o)
      for (int oz = 0; oz < OZ; ++oz)
        for (int oy = 0; oy < OY; ++oy)
          for (int ox = 0; ox < OX; ++ox) {
            double acc = b ? (*b)[o] : 0.0;
            for (int c = 0; c < C; ++c)
              for (int kz = 0; kz < KZ; ++kz)
                for (int ky = 0; ky < KY; ++ky)
                  for (int kx = 0; kx < KX; ++kx) {
                    const int iz = oz * stride - pz + kz, iy = oy * stride - py + ky, ix = ox * stride - px + kx;
                    if (iz < 0 || iz >= Z || iy < 0 || iy >= Y || ix < 0 || ix >= X) continue;
                    acc += x.at(n, c, iz, iy, ix) * w.at(o, c, kz, ky, kx);
                  }
            out.at(n, o, oz, oy, ox) = acc;
          }
  return out;
}

}  // namespace stvnet::test
