#pragma once

#include <algorithm>
#include <filesystem>
#include <regex>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "stvnet/binary_io.hpp"
#include "stvnet/errors.hpp"
#include "stvnet/volume.hpp"

namespace stvnet {

// One gated acquisition: G intensity volumes with filled epicardial and
// endocardial masks per gate. Gate k (1-based) lives at index k-1.
struct GatedStudy {
  std::string id;
  Extent3 extent;
  double spacing_mm = 6.4;
  std::vector<Volume> gates;
  std::vector<Mask> epi;
  std::vector<Mask> endo;
  // Analytic cavity volume per gate; empty for studies without ground truth geometry.
  std::vector<double> analytic_volumes_ml;

  int gate_count() const { return int(gates.size()); }

  const Mask& mask(bool endocardium, int gate) const {
    return endocardium ? endo.at(std::size_t(gate - 1)) : epi.at(std::size_t(gate - 1));
  }

  friend bool operator==(const GatedStudy&, const GatedStudy&) = default;
};

// "HxWxD" -> extent with x = W, y = H, z = D.
inline Extent3 parse_shape(const std::string& s) {
  static const std::regex re(R"((\d+)x(\d+)x(\d+))");
  std::smatch m;
  if (!std::regex_match(s, m, re)) throw ConfigError("shape must look like HxWxD, got '" + s + "'");
  const Extent3 e{std::stoi(m[2]), std::stoi(m[1]), std::stoi(m[3])};
  if (e.x < 1 || e.y < 1 || e.z < 1) throw ConfigError("shape extents must be positive: " + s);
  return e;
}

inline std::string format_shape(Extent3 e) {
  return std::to_string(e.y) + "x" + std::to_string(e.x) + "x" + std::to_string(e.z);
}

namespace detail {

inline std::filesystem::path gate_file(const std::filesystem::path& dir, const char* stem, int k) {
  return dir / (std::string(stem) + "_" + std::to_string(k) + ".raw");
}

inline Mask read_mask(const std::filesystem::path& path, Extent3 e) {
  Mask m(e);
  m.data = io::read_raw<std::uint8_t>(path, e.voxels());
  for (auto v : m.data) {
    if (v > 1) throw FormatError(FormatError::Kind::kInvalidValue, path.string(), "mask values must be 0 or 1");
  }
  return m;
}

}  // namespace detail

inline void write_study(const GatedStudy& s, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  nlohmann::json h = {{"id", s.id},
                      {"gates", s.gate_count()},
                      {"shape", {s.extent.y, s.extent.x, s.extent.z}},
                      {"spacing_mm", s.spacing_mm},
                      {"dtype", "f32le"},
                      {"analytic_volumes_ml", s.analytic_volumes_ml}};
  io::write_file(dir / "subject.json", h.dump(2) + "\n");
  for (int k = 1; k <= s.gate_count(); ++k) {
    io::write_raw(detail::gate_file(dir, "gate", k), s.gates[std::size_t(k - 1)].data);
    io::write_raw(detail::gate_file(dir, "epi", k), s.epi[std::size_t(k - 1)].data);
    io::write_raw(detail::gate_file(dir, "endo", k), s.endo[std::size_t(k - 1)].data);
  }
}

inline GatedStudy read_study(const std::filesystem::path& dir) {
  const auto header_path = dir / "subject.json";
  const std::string text = io::read_file(header_path);
  GatedStudy s;
  int gates = 0;
  try {
    const auto h = nlohmann::json::parse(text);
    s.id = h.at("id").get<std::string>();
    gates = h.at("gates").get<int>();
    const auto shape = h.at("shape").get<std::vector<int>>();
    if (shape.size() != 3) throw std::runtime_error("shape must have 3 entries");
    s.extent = {shape[1], shape[0], shape[2]};
    s.spacing_mm = h.at("spacing_mm").get<double>();
    if (h.at("dtype").get<std::string>() != "f32le") throw std::runtime_error("dtype must be f32le");
    s.analytic_volumes_ml = h.value("analytic_volumes_ml", std::vector<double>{});
  } catch (const std::exception& e) {
    throw FormatError(FormatError::Kind::kMalformedHeader, header_path.string(), e.what());
  }
  if (gates < 1 || s.extent.x < 1 || s.extent.y < 1 || s.extent.z < 1 || !(s.spacing_mm > 0)) {
    throw FormatError(FormatError::Kind::kMalformedHeader, header_path.string(), "non-positive gates, shape or spacing");
  }
  if (!s.analytic_volumes_ml.empty() && int(s.analytic_volumes_ml.size()) != gates) {
    throw FormatError(FormatError::Kind::kMalformedHeader, header_path.string(),
                      "analytic_volumes_ml has " + std::to_string(s.analytic_volumes_ml.size()) + " entries for " +
                          std::to_string(gates) + " gates");
  }

  // Every gate_k.raw on disk must be one the header announces, and vice versa.
  static const std::regex gate_re(R"(gate_(\d+)\.raw)");
  std::vector<int> present;
  for (const auto& entry : std::filesystem::directory_iterator(dir)) {
    std::smatch m;
    const std::string name = entry.path().filename().string();
    if (std::regex_match(name, m, gate_re)) present.push_back(std::stoi(m[1]));
  }
  std::sort(present.begin(), present.end());
  std::vector<int> expected(static_cast<std::size_t>(gates));
  for (int k = 0; k < gates; ++k) expected[std::size_t(k)] = k + 1;
  if (present != expected) {
    throw FormatError(FormatError::Kind::kGateCountMismatch, dir.string(),
                      "header announces " + std::to_string(gates) + " gates, found " + std::to_string(present.size()) +
                          " gate files");
  }

  for (int k = 1; k <= gates; ++k) {
    Volume v(s.extent);
    v.data = io::read_raw<float>(detail::gate_file(dir, "gate", k), s.extent.voxels());
    s.gates.push_back(std::move(v));
    s.epi.push_back(detail::read_mask(detail::gate_file(dir, "epi", k), s.extent));
    s.endo.push_back(detail::read_mask(detail::gate_file(dir, "endo", k), s.extent));
  }
  return s;
}

// One subdirectory per study, named by id.
inline void write_dataset(const std::vector<GatedStudy>& studies, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  for (const auto& s : studies) write_study(s, dir / s.id);
}

// Every subdirectory holding a subject.json, in name order.
inline std::vector<GatedStudy> read_dataset(const std::filesystem::path& dir) {
  if (!std::filesystem::is_directory(dir)) {
    throw FormatError(FormatError::Kind::kMissingFile, dir.string(), "dataset directory not found");
  }
  std::vector<std::filesystem::path> subjects;
  for (const auto& entry : std::filesystem::directory_iterator(dir)) {
    if (entry.is_directory() && std::filesystem::exists(entry.path() / "subject.json")) subjects.push_back(entry.path());
  }
  std::sort(subjects.begin(), subjects.end());
  if (subjects.empty()) throw FormatError(FormatError::Kind::kMissingFile, dir.string(), "no subject directories");
  std::vector<GatedStudy> out;
  for (const auto& p : subjects) out.push_back(read_study(p));
  return out;
}

}  // namespace stvnet
