#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <vector>

#include "stvnet/errors.hpp"
#include "stvnet/volume.hpp"

namespace stvnet {

struct ConfusionCounts {
  std::size_t tp = 0, fp = 0, tn = 0, fn = 0;
  std::size_t total() const { return tp + fp + tn + fn; }
};

inline void require_same_extent(const char* op, const Mask& a, const Mask& b) {
  if (a.extent != b.extent) throw ShapeError(op, "spatial", to_string(a.extent) + " vs " + to_string(b.extent));
}

inline ConfusionCounts confusion(const Mask& pred, const Mask& truth) {
  require_same_extent("confusion", pred, truth);
  ConfusionCounts c;
  for (std::size_t i = 0; i < pred.data.size(); ++i) {
    const bool p = pred.data[i] != 0, t = truth.data[i] != 0;
    if (p && t) ++c.tp;
    else if (p) ++c.fp;
    else if (t) ++c.fn;
    else ++c.tn;
  }
  return c;
}

// Dice similarity coefficient. Two empty masks agree perfectly (1.0).
inline double dsc(const Mask& a, const Mask& b) {
  const auto c = confusion(a, b);
  const std::size_t denom = 2 * c.tp + c.fp + c.fn;
  return denom == 0 ? 1.0 : 2.0 * double(c.tp) / double(denom);
}

struct SensitivitySpecificity {
  double sn = 0;
  double sp = 0;
};

inline SensitivitySpecificity sn_sp(const Mask& pred, const Mask& truth) {
  const auto c = confusion(pred, truth);
  if (c.tp + c.fn == 0) throw UndefinedError("sensitivity undefined: ground truth has no foreground voxels");
  if (c.tn + c.fp == 0) throw UndefinedError("specificity undefined: ground truth has no background voxels");
  return {double(c.tp) / double(c.tp + c.fn), double(c.tn) / double(c.tn + c.fp)};
}

struct Voxel {
  int x = 0, y = 0, z = 0;
  friend bool operator==(const Voxel&, const Voxel&) = default;
  friend auto operator<=>(const Voxel&, const Voxel&) = default;
};

// Foreground voxels with at least one 6-neighbour that is background or
// outside the grid, in x-fastest scan order.
struct SurfacePointSet {
  std::vector<Voxel> points;
  bool empty() const { return points.empty(); }
  std::size_t size() const { return points.size(); }
};

inline SurfacePointSet surface(const Mask& m) {
  static constexpr std::array<std::array<int, 3>, 6> kNeighbours{
      {{1, 0, 0}, {-1, 0, 0}, {0, 1, 0}, {0, -1, 0}, {0, 0, 1}, {0, 0, -1}}};
  SurfacePointSet s;
  for (int z = 0; z < m.extent.z; ++z)
    for (int y = 0; y < m.extent.y; ++y)
      for (int x = 0; x < m.extent.x; ++x) {
        if (!m.at(x, y, z)) continue;
        for (const auto& d : kNeighbours) {
          const int nx = x + d[0], ny = y + d[1], nz = z + d[2];
          if (!m.contains(nx, ny, nz) || !m.at(nx, ny, nz)) {
            s.points.push_back({x, y, z});
            break;
          }
        }
      }
  return s;
}

namespace detail {

// 1-d squared Euclidean distance transform (lower envelope of parabolas) on
// integer data. `f` holds squared distances or `inf`.
inline void edt_1d(const std::vector<std::int64_t>& f, std::vector<std::int64_t>& d, std::vector<int>& v,
                   std::vector<double>& z) {
  constexpr std::int64_t kInf = std::numeric_limits<std::int64_t>::max() / 4;
  const int n = int(f.size());
  int k = -1;
  for (int q = 0; q < n; ++q) {
    if (f[std::size_t(q)] >= kInf) continue;
    while (k >= 0) {
      const int p = v[std::size_t(k)];
      const double s = double((f[std::size_t(q)] + std::int64_t(q) * q) - (f[std::size_t(p)] + std::int64_t(p) * p)) /
                       double(2 * (q - p));
      if (s <= z[std::size_t(k)]) {
        --k;
      } else {
        break;
      }
    }
    ++k;
    v[std::size_t(k)] = q;
    z[std::size_t(k)] = k == 0 ? -std::numeric_limits<double>::infinity()
                               : double((f[std::size_t(q)] + std::int64_t(q) * q) -
                                        (f[std::size_t(v[std::size_t(k - 1)])] +
                                         std::int64_t(v[std::size_t(k - 1)]) * v[std::size_t(k - 1)])) /
                                     double(2 * (q - v[std::size_t(k - 1)]));
  }
  if (k < 0) {
    std::fill(d.begin(), d.end(), kInf);
    return;
  }
  int j = 0;
  for (int q = 0; q < n; ++q) {
    while (j < k && z[std::size_t(j + 1)] < double(q)) ++j;
    const std::int64_t dq = q - v[std::size_t(j)];
    d[std::size_t(q)] = dq * dq + f[std::size_t(v[std::size_t(j)])];
  }
}

// Exact squared distance from every voxel of the box [lo, hi] to the nearest
// point of `targets`, indexed relative to `lo`.
inline std::vector<std::int64_t> squared_distance_field(const std::vector<Voxel>& targets, Voxel lo, Voxel hi) {
  constexpr std::int64_t kInf = std::numeric_limits<std::int64_t>::max() / 4;
  const int nx = hi.x - lo.x + 1, ny = hi.y - lo.y + 1, nz = hi.z - lo.z + 1;
  std::vector<std::int64_t> field(std::size_t(nx) * ny * nz, kInf);
  auto idx = [&](int x, int y, int z) { return (std::size_t(z) * ny + y) * nx + x; };
  for (const auto& p : targets) field[idx(p.x - lo.x, p.y - lo.y, p.z - lo.z)] = 0;

  const int longest = std::max({nx, ny, nz});
  std::vector<std::int64_t> f(static_cast<std::size_t>(longest)), d(static_cast<std::size_t>(longest));
  std::vector<int> v(static_cast<std::size_t>(longest));
  std::vector<double> zb(std::size_t(longest) + 1);
  auto pass = [&](int n, auto&& at) {
    f.resize(std::size_t(n));
    d.resize(std::size_t(n));
    for (int i = 0; i < n; ++i) f[std::size_t(i)] = at(i);
    edt_1d(f, d, v, zb);
    for (int i = 0; i < n; ++i) at(i) = d[std::size_t(i)];
  };
  for (int z = 0; z < nz; ++z)
    for (int y = 0; y < ny; ++y) pass(nx, [&](int i) -> std::int64_t& { return field[idx(i, y, z)]; });
  for (int z = 0; z < nz; ++z)
    for (int x = 0; x < nx; ++x) pass(ny, [&](int i) -> std::int64_t& { return field[idx(x, i, z)]; });
  for (int y = 0; y < ny; ++y)
    for (int x = 0; x < nx; ++x) pass(nz, [&](int i) -> std::int64_t& { return field[idx(x, y, i)]; });
  return field;
}

// For each point of `from`, the exact Euclidean distance to the nearest point of `to`.
inline std::vector<double> nearest_distances(const SurfacePointSet& from, const SurfacePointSet& to) {
  Voxel lo = from.points.front(), hi = lo;
  for (const auto* set : {&from, &to})
    for (const auto& p : set->points) {
      lo = {std::min(lo.x, p.x), std::min(lo.y, p.y), std::min(lo.z, p.z)};
      hi = {std::max(hi.x, p.x), std::max(hi.y, p.y), std::max(hi.z, p.z)};
    }
  const auto field = squared_distance_field(to.points, lo, hi);
  const int nx = hi.x - lo.x + 1, ny = hi.y - lo.y + 1;
  std::vector<double> out;
  out.reserve(from.size());
  for (const auto& p : from.points) {
    const std::int64_t d2 = field[(std::size_t(p.z - lo.z) * ny + (p.y - lo.y)) * nx + (p.x - lo.x)];
    out.push_back(std::sqrt(double(d2)));
  }
  return out;
}

inline void require_nonempty(const SurfacePointSet& a, const SurfacePointSet& b) {
  if (a.empty() || b.empty()) throw UndefinedError("undefined surface distance: empty surface");
}

}  // namespace detail

// Symmetric Hausdorff distance in voxel units.
inline double hausdorff(const SurfacePointSet& a, const SurfacePointSet& b) {
  detail::require_nonempty(a, b);
  double h = 0;
  for (double d : detail::nearest_distances(a, b)) h = std::max(h, d);
  for (double d : detail::nearest_distances(b, a)) h = std::max(h, d);
  return h;
}

// Symmetric average surface distance in voxel units.
inline double asd(const SurfacePointSet& a, const SurfacePointSet& b) {
  detail::require_nonempty(a, b);
  double ab = 0, ba = 0;
  for (double d : detail::nearest_distances(a, b)) ab += d;
  for (double d : detail::nearest_distances(b, a)) ba += d;
  return (ab + ba) / double(a.size() + b.size());
}

struct Agreement {
  double mae = 0;
  double rmse = 0;
  double pcc = 0;
};

// Mean absolute error, root-mean-square error and Pearson correlation.
//
// With `literal_formulas` RMSE is instead the mean over pairs of sqrt(d^2),
// which collapses to MAE; kept for side-by-side comparison.
inline Agreement agreement(std::span<const double> pred, std::span<const double> truth, bool literal_formulas = false) {
  if (pred.size() != truth.size()) {
    throw ShapeError("agreement", "length", std::to_string(pred.size()) + " vs " + std::to_string(truth.size()));
  }
  if (pred.size() < 2) throw UndefinedError("agreement: need at least 2 pairs");
  const double n = double(pred.size());
  double abs_sum = 0, sq_sum = 0, root_sum = 0, mp = 0, mt = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double d = pred[i] - truth[i];
    abs_sum += std::abs(d);
    sq_sum += d * d;
    root_sum += std::sqrt(d * d);
    mp += pred[i];
    mt += truth[i];
  }
  mp /= n;
  mt /= n;
  double cov = 0, vp = 0, vt = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    cov += (pred[i] - mp) * (truth[i] - mt);
    vp += (pred[i] - mp) * (pred[i] - mp);
    vt += (truth[i] - mt) * (truth[i] - mt);
  }
  auto constant = [](std::span<const double> v) {
    return std::all_of(v.begin(), v.end(), [&](double x) { return x == v.front(); });
  };
  if (constant(pred) || constant(truth) || vp == 0 || vt == 0) throw UndefinedError("agreement: Pearson correlation undefined for a zero-variance series");
  Agreement a;
  a.mae = abs_sum / n;
  a.rmse = literal_formulas ? root_sum / n : std::sqrt(sq_sum / n);
  a.pcc = std::clamp(cov / std::sqrt(vp * vt), -1.0, 1.0);
  return a;
}

}  // namespace stvnet
