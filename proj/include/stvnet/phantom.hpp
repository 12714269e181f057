#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numbers>
#include <string>
#include <vector>

#include "stvnet/dataset.hpp"
#include "stvnet/rng.hpp"

namespace stvnet {

struct Range {
  double lo = 0;
  double hi = 0;
  double draw(Rng& rng) const { return lo == hi ? lo : rng.uniform(lo, hi); }
};

struct PhantomConfig {
  Extent3 extent{32, 32, 12};
  int gates = 8;
  double spacing_mm = 6.4;
  int subjects = 20;
  std::uint64_t seed = 0;
  Range ejection_fraction{0.3, 0.6};
  // Wall thickness as a fraction of the smaller in-plane half extent.
  Range wall_fraction{0.08, 0.12};
  // Outer cavity semi-axes as fractions of the room left inside the grid.
  Range inplane_axis_fraction{0.8, 1.0};
  Range axial_axis_fraction{0.8, 1.0};
  // Septal ellipsoid carved out of the cavity: semi-axes relative to the
  // cavity's, and its centre offset towards -x in units of the cavity x axis.
  Range septum_x_ratio{0.5, 0.7};
  Range septum_y_ratio{0.6, 0.9};
  Range septum_offset{0.7, 1.0};
  double noise = 0.1;
  double blur_sigma = 0.8;
  // Shift end-diastole to a random gate instead of gate 1.
  bool random_phase = true;

  void validate() const {
    if (gates < 2) throw ConfigError("phantom: gates must be >= 2");
    if (subjects < 1) throw ConfigError("phantom: subjects must be >= 1");
    if (!(spacing_mm > 0)) throw ConfigError("phantom: spacing must be > 0");
    if (extent.x < 8 || extent.y < 8 || extent.z < 4) throw ConfigError("phantom: grid too small: " + to_string(extent));
    if (ejection_fraction.lo < 0.2 || ejection_fraction.hi > 0.7 || ejection_fraction.lo > ejection_fraction.hi) {
      throw ConfigError("phantom: ejection fraction range must lie within [0.2, 0.7]");
    }
    if (noise < 0 || blur_sigma < 0) throw ConfigError("phantom: noise and blur must be >= 0");
  }
};

// Geometry of one subject at full scale (s = 1). The cavity at scale s is
// E(s*a) minus the septal ellipsoid E(s*b) centred at c + s*d; all lengths in voxels.
struct CrescentGeometry {
  double cx = 0, cy = 0, cz = 0;
  double ax = 0, ay = 0, az = 0;
  double bx = 0, by = 0, bz = 0;
  double dx = 0;
  double wall = 0;

  bool in_endo(double x, double y, double z, double s) const {
    return in_ellipsoid(x - cx, y - cy, z - cz, s * ax, s * ay, s * az) &&
           !in_ellipsoid(x - cx - s * dx, y - cy, z - cz, s * bx, s * by, s * bz);
  }
  bool in_epi(double x, double y, double z, double s) const {
    return in_ellipsoid(x - cx, y - cy, z - cz, s * ax + wall, s * ay + wall, s * az + wall) &&
           !in_ellipsoid(x - cx - s * dx, y - cy, z - cz, s * bx - wall, s * by - wall, s * bz - wall);
  }

  // Continuous cavity volume at s = 1 in voxel units: ellipsoid minus the
  // overlap, integrated exactly along x and by midpoint rule over (y, z).
  double unit_cavity_volume(int n = 1200) const {
    const double full = 4.0 / 3.0 * std::numbers::pi * ax * ay * az;
    const double hy = std::min(ay, by), hz = std::min(az, bz);
    double overlap = 0;
    for (int j = 0; j < n; ++j) {
      const double y = -hy + (j + 0.5) * 2 * hy / n;
      for (int k = 0; k < n; ++k) {
        const double z = -hz + (k + 0.5) * 2 * hz / n;
        const double ra = 1 - (y * y) / (ay * ay) - (z * z) / (az * az);
        const double rb = 1 - (y * y) / (by * by) - (z * z) / (bz * bz);
        if (ra <= 0 || rb <= 0) continue;
        const double ha = ax * std::sqrt(ra), hb = bx * std::sqrt(rb);
        const double lo = std::max(-ha, dx - hb), hi = std::min(ha, dx + hb);
        if (hi > lo) overlap += hi - lo;
      }
    }
    overlap *= (2 * hy / n) * (2 * hz / n);
    return full - overlap;
  }

 private:
  static bool in_ellipsoid(double x, double y, double z, double a, double b, double c) {
    if (a <= 0 || b <= 0 || c <= 0) return false;
    return (x * x) / (a * a) + (y * y) / (b * b) + (z * z) / (c * c) <= 1.0;
  }
};

// Periodic contraction: scale 1 at end-diastole, reaching s_min at the
// sampled gate farthest from it. Volume goes as scale^3.
struct ContractionLaw {
  int gates = 8;
  int phase = 0;
  double s_min = 1;

  double wave(int gate) const {
    return (1 + std::cos(2 * std::numbers::pi * double(gate - 1 - phase) / double(gates))) / 2;
  }
  double scale(int gate) const { return s_min + (1 - s_min) * wave(gate); }

  // Choose s_min so that min over gates of scale^3 equals 1 - ef exactly.
  static ContractionLaw for_ejection_fraction(int gates, int phase, double ef) {
    ContractionLaw law{gates, phase, 1};
    double m = 1;
    for (int g = 1; g <= gates; ++g) m = std::min(m, law.wave(g));
    const double target = std::cbrt(1 - ef);
    law.s_min = (target - m) / (1 - m);
    return law;
  }
};

struct PhantomSubject {
  GatedStudy study;
  CrescentGeometry geometry;
  ContractionLaw law;
  double target_ef = 0;

  // Ejection fraction of the analytic per-gate volumes.
  double analytic_ef() const {
    const auto& v = study.analytic_volumes_ml;
    const double hi = *std::max_element(v.begin(), v.end()), lo = *std::min_element(v.begin(), v.end());
    return (hi - lo) / hi;
  }
};

namespace detail {

// Separable Gaussian blur with zero padding, kernel truncated at 3 sigma.
inline Volume gaussian_blur(const Volume& in, double sigma) {
  if (sigma <= 0) return in;
  const int r = std::max(1, int(std::ceil(3 * sigma)));
  std::vector<double> k(std::size_t(2 * r + 1));
  double total = 0;
  for (int i = -r; i <= r; ++i) total += k[std::size_t(i + r)] = std::exp(-0.5 * i * i / (sigma * sigma));
  for (auto& v : k) v /= total;
  Volume cur = in;
  const Extent3 e = in.extent;
  for (int axis = 0; axis < 3; ++axis) {
    Volume next(e);
    for (int z = 0; z < e.z; ++z)
      for (int y = 0; y < e.y; ++y)
        for (int x = 0; x < e.x; ++x) {
          double acc = 0;
          for (int i = -r; i <= r; ++i) {
            const int sx = x + (axis == 0 ? i : 0), sy = y + (axis == 1 ? i : 0), sz = z + (axis == 2 ? i : 0);
            if (cur.contains(sx, sy, sz)) acc += k[std::size_t(i + r)] * cur.at(sx, sy, sz);
          }
          next.at(x, y, z) = float(acc);
        }
    cur = std::move(next);
  }
  return cur;
}

}  // namespace detail

inline CrescentGeometry draw_geometry(const PhantomConfig& cfg, Rng& rng) {
  const Extent3 e = cfg.extent;
  const double hx = (e.x - 1) / 2.0, hy = (e.y - 1) / 2.0, hz = (e.z - 1) / 2.0;
  CrescentGeometry g;
  g.wall = cfg.wall_fraction.draw(rng) * std::min(hx, hy);
  if (g.wall < 1.0) {
    throw ConfigError("phantom: infeasible geometry, wall thickness " + std::to_string(g.wall) +
                      " voxels is below 1 voxel on grid " + to_string(e));
  }
  const double jx = rng.uniform(-1, 1), jy = rng.uniform(-1, 1), jz = rng.uniform(-0.5, 0.5);
  g.cx = hx + jx;
  g.cy = hy + jy;
  g.cz = hz + jz;
  // Keep the epicardium at least half a voxel inside the grid.
  const double room_x = hx - g.wall - 1.5, room_y = hy - g.wall - 1.5, room_z = hz - g.wall - 1.0;
  if (room_x < 2 || room_y < 2 || room_z < 1) {
    throw ConfigError("phantom: infeasible geometry, no room for a cavity inside a wall of " + std::to_string(g.wall) +
                      " voxels on grid " + to_string(e));
  }
  g.ax = cfg.inplane_axis_fraction.draw(rng) * room_x;
  g.ay = cfg.inplane_axis_fraction.draw(rng) * room_y;
  g.az = cfg.axial_axis_fraction.draw(rng) * room_z;
  g.bx = cfg.septum_x_ratio.draw(rng) * g.ax;
  g.by = cfg.septum_y_ratio.draw(rng) * g.ay;
  g.bz = 1.3 * g.az;
  g.dx = -cfg.septum_offset.draw(rng) * g.ax;
  return g;
}

// Verify the voxelized masks: endo inside epi, at least one voxel of wall
// around every cavity voxel, and the epicardium clear of the grid border.
inline void check_masks(const Mask& epi, const Mask& endo, const std::string& where) {
  const Extent3 e = epi.extent;
  for (int z = 0; z < e.z; ++z)
    for (int y = 0; y < e.y; ++y)
      for (int x = 0; x < e.x; ++x) {
        if (epi.at(x, y, z) && (x == 0 || y == 0 || z == 0 || x == e.x - 1 || y == e.y - 1 || z == e.z - 1)) {
          throw ConfigError("phantom: infeasible geometry, epicardium touches the grid border (" + where + ")");
        }
        if (!endo.at(x, y, z)) continue;
        const int nb[6][3] = {{1, 0, 0}, {-1, 0, 0}, {0, 1, 0}, {0, -1, 0}, {0, 0, 1}, {0, 0, -1}};
        if (!epi.at(x, y, z)) throw ConfigError("phantom: endocardium escapes epicardium (" + where + ")");
        for (const auto& d : nb) {
          if (!epi.contains(x + d[0], y + d[1], z + d[2]) || !epi.at(x + d[0], y + d[1], z + d[2])) {
            throw ConfigError("phantom: infeasible geometry, wall thinner than 1 voxel (" + where + ")");
          }
        }
      }
}

inline PhantomSubject generate_subject(const PhantomConfig& cfg, std::uint64_t subject_seed, std::string id) {
  cfg.validate();
  Rng root(subject_seed);
  Rng geo_rng = root.split(1), noise_rng = root.split(2);
  PhantomSubject out;
  out.geometry = draw_geometry(cfg, geo_rng);
  out.target_ef = cfg.ejection_fraction.draw(geo_rng);
  const int phase = cfg.random_phase ? int(geo_rng.below(std::uint64_t(cfg.gates))) : 0;
  out.law = ContractionLaw::for_ejection_fraction(cfg.gates, phase, out.target_ef);

  GatedStudy& s = out.study;
  s.id = std::move(id);
  s.extent = cfg.extent;
  s.spacing_mm = cfg.spacing_mm;
  const double ml_per_voxel = std::pow(cfg.spacing_mm / 10.0, 3);
  const double unit_volume = out.geometry.unit_cavity_volume();
  const auto& g = out.geometry;
  for (int gate = 1; gate <= cfg.gates; ++gate) {
    const double sc = out.law.scale(gate);
    Mask epi(cfg.extent), endo(cfg.extent);
    Volume myo(cfg.extent);
    for (int z = 0; z < cfg.extent.z; ++z)
      for (int y = 0; y < cfg.extent.y; ++y)
        for (int x = 0; x < cfg.extent.x; ++x) {
          const bool in_epi = g.in_epi(x, y, z, sc), in_endo = g.in_endo(x, y, z, sc);
          epi.at(x, y, z) = in_epi;
          endo.at(x, y, z) = in_endo;
          myo.at(x, y, z) = in_epi && !in_endo ? 1.f : 0.f;
        }
    check_masks(epi, endo, s.id + " gate " + std::to_string(gate));
    Volume img = detail::gaussian_blur(myo, cfg.blur_sigma);
    if (cfg.noise > 0) {
      for (auto& v : img.data) v = float(v + cfg.noise * std::sqrt(std::max(0.f, v)) * noise_rng.normal());
    }
    s.gates.push_back(std::move(img));
    s.epi.push_back(std::move(epi));
    s.endo.push_back(std::move(endo));
    s.analytic_volumes_ml.push_back(unit_volume * sc * sc * sc * ml_per_voxel);
  }
  return out;
}

inline std::string subject_id(int index) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "subject_%03d", index + 1);
  return buf;
}

// Subject i draws from a stream split off the dataset seed, so subjects do
// not depend on how many others are generated.
inline std::vector<PhantomSubject> generate_phantoms(const PhantomConfig& cfg) {
  cfg.validate();
  std::vector<PhantomSubject> out;
  for (int i = 0; i < cfg.subjects; ++i) {
    Rng r(cfg.seed);
    const std::uint64_t subject_seed = r.split(std::uint64_t(i) + 1).next_u64();
    out.push_back(generate_subject(cfg, subject_seed, subject_id(i)));
  }
  return out;
}

inline std::vector<GatedStudy> studies_of(const std::vector<PhantomSubject>& subjects) {
  std::vector<GatedStudy> out;
  for (const auto& s : subjects) out.push_back(s.study);
  return out;
}

}  // namespace stvnet
