#pragma once

#include <cstdint>
#include <vector>

#include "stvnet/tensor.hpp"

namespace stvnet {

// A single 3-d grid of voxels, x fastest.
template <class V>
struct Grid {
  Extent3 extent;
  std::vector<V> data;

  Grid() = default;
  explicit Grid(Extent3 e, V fill = V{}) : extent(e), data(e.voxels(), fill) {}

  std::size_t index(int x, int y, int z) const {
    return (std::size_t(z) * extent.y + std::size_t(y)) * extent.x + std::size_t(x);
  }
  V& at(int x, int y, int z) { return data[index(x, y, z)]; }
  const V& at(int x, int y, int z) const { return data[index(x, y, z)]; }
  bool contains(int x, int y, int z) const {
    return x >= 0 && y >= 0 && z >= 0 && x < extent.x && y < extent.y && z < extent.z;
  }
  std::size_t size() const { return data.size(); }

  friend bool operator==(const Grid&, const Grid&) = default;
};

using Volume = Grid<float>;
using Mask = Grid<std::uint8_t>;

inline std::size_t count_foreground(const Mask& m) {
  std::size_t n = 0;
  for (auto v : m.data) n += v != 0;
  return n;
}

}  // namespace stvnet
