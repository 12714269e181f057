#pragma once

#include <algorithm>
#include <cmath>
#include <ostream>
#include <string>
#include <vector>

#include "stvnet/dataset.hpp"
#include "stvnet/errors.hpp"
#include "stvnet/volume.hpp"

namespace stvnet {

struct CavityVolume {
  std::size_t voxels = 0;
  double ml = 0;
};

inline CavityVolume cavity_volume(const Mask& m, double spacing_mm) {
  const std::size_t n = count_foreground(m);
  const double cm = spacing_mm / 10.0;
  return {n, double(n) * cm * cm * cm};
}

struct QuantResult {
  std::vector<double> volumes_ml;
  double edv = 0;
  double esv = 0;
  double rvef = 0;
  int edv_gate = 0;
  int esv_gate = 0;
};

// EDV/ESV are the largest and smallest per-gate volumes (first occurrence on
// ties, gates 1-based); RVEF is returned as a fraction.
inline QuantResult rvef(const std::vector<double>& volumes_ml) {
  if (volumes_ml.size() < 2) throw ConfigError("rvef: need at least 2 gates");
  QuantResult q;
  q.volumes_ml = volumes_ml;
  q.edv = -1;
  q.esv = 0;
  for (std::size_t i = 0; i < volumes_ml.size(); ++i) {
    const double v = volumes_ml[i];
    if (!(v >= 0)) throw ConfigError("rvef: volumes must be >= 0");
    if (v > q.edv) {
      q.edv = v;
      q.edv_gate = int(i) + 1;
    }
    if (i == 0 || v < q.esv) {
      q.esv = v;
      q.esv_gate = int(i) + 1;
    }
  }
  if (q.edv <= 0) throw UndefinedError("no cavity detected: every gate has zero volume");
  q.rvef = (q.edv - q.esv) / q.edv;
  return q;
}

inline QuantResult quantify_masks(const std::vector<Mask>& masks, double spacing_mm) {
  std::vector<double> v;
  for (const auto& m : masks) v.push_back(cavity_volume(m, spacing_mm).ml);
  return rvef(v);
}

// Volumes come from the endocardial (cavity) masks; `epicardial` switches to
// the filled epicardial region instead.
inline QuantResult quantify_study(const GatedStudy& s, bool epicardial = false) {
  return quantify_masks(epicardial ? s.epi : s.endo, s.spacing_mm);
}

struct QuantRow {
  std::string subject;
  std::string arch;
  QuantResult result;
};

inline void write_quant_csv(std::ostream& os, const std::vector<QuantRow>& rows) {
  std::size_t gates = 0;
  for (const auto& r : rows) gates = std::max(gates, r.result.volumes_ml.size());
  os << "subject,arch,edv_ml,esv_ml,rvef,edv_gate,esv_gate";
  for (std::size_t g = 1; g <= gates; ++g) os << ",vol_" << g;
  os << '\n';
  os.precision(10);
  for (const auto& r : rows) {
    const auto& q = r.result;
    os << r.subject << ',' << r.arch << ',' << q.edv << ',' << q.esv << ',' << q.rvef << ',' << q.edv_gate << ','
       << q.esv_gate;
    for (std::size_t g = 0; g < gates; ++g) {
      os << ',';
      if (g < q.volumes_ml.size()) os << q.volumes_ml[g];
    }
    os << '\n';
  }
}

}  // namespace stvnet
