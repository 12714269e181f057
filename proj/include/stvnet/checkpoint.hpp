#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <string>
#include <type_traits>

#include <nlohmann/json.hpp>

#include "stvnet/binary_io.hpp"
#include "stvnet/network.hpp"

namespace stvnet {

// Layout: 8-byte magic, u64 little-endian header length, JSON header, then
// every parameter followed by every buffer as little-endian values in the
// order the header lists them.
inline constexpr char kCheckpointMagic[8] = {'S', 'T', 'V', 'N', 'C', 'K', 'P', '1'};

template <class T>
const char* dtype_name() {
  static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>);
  return std::is_same_v<T, float> ? "f32le" : "f64le";
}

struct CheckpointInfo {
  NetworkSpec spec;
  std::uint64_t seed = 0;
  int epoch = 0;
  std::string dtype;
};

namespace detail {

template <class T>
std::vector<std::pair<std::string, Tensor<T>*>> checkpoint_tensors(Network<T>& net) {
  std::vector<std::pair<std::string, Tensor<T>*>> out;
  for (auto* p : net.parameters()) out.emplace_back(p->name, &p->value);
  for (auto& b : net.buffers()) out.push_back(b);
  return out;
}

}  // namespace detail

template <class T>
void save_checkpoint(Network<T>& net, const std::filesystem::path& path, int epoch = 0) {
  const auto tensors = detail::checkpoint_tensors(net);
  nlohmann::json list = nlohmann::json::array();
  for (const auto& [name, t] : tensors) list.push_back({{"name", name}, {"shape", t->shape()}});
  const nlohmann::json header = {{"spec", to_json(net.spec())},
                                 {"seed", net.seed()},
                                 {"epoch", epoch},
                                 {"dtype", dtype_name<T>()},
                                 {"tensors", list}};
  const std::string h = header.dump();
  std::string bytes(kCheckpointMagic, sizeof kCheckpointMagic);
  const std::uint64_t len = h.size();
  io::append_le(bytes, &len, 1);
  bytes += h;
  for (const auto& [name, t] : tensors) io::append_le(bytes, t->ptr(), t->size());
  io::write_file(path, bytes);
}

template <class T>
Network<T> load_checkpoint(const std::filesystem::path& path, CheckpointInfo* info = nullptr) {
  using Kind = FormatError::Kind;
  const std::string file = path.string();
  const std::string bytes = io::read_file(path);
  if (bytes.size() < 16 || std::memcmp(bytes.data(), kCheckpointMagic, 8) != 0) {
    throw FormatError(Kind::kBadMagic, file, "not a checkpoint (expected STVNCKP1)");
  }
  std::uint64_t len = 0;
  io::read_le(bytes.data() + 8, 1, &len);
  if (len > bytes.size() - 16) throw FormatError(Kind::kTruncatedBlob, file, "header runs past end of file");

  nlohmann::json header;
  CheckpointInfo ci;
  try {
    header = nlohmann::json::parse(bytes.substr(16, len));
    ci.spec = spec_from_json(header.at("spec"));
    ci.seed = header.at("seed").get<std::uint64_t>();
    ci.epoch = header.at("epoch").get<int>();
    ci.dtype = header.at("dtype").get<std::string>();
    (void)header.at("tensors").size();
  } catch (const std::exception& e) {
    throw FormatError(Kind::kMalformedHeader, file, e.what());
  }
  if (ci.dtype != dtype_name<T>()) {
    throw FormatError(Kind::kSpecMismatch, file, "stored dtype " + ci.dtype + ", loading as " + dtype_name<T>());
  }

  Network<T> net;
  try {
    net = Network<T>::build(ci.spec, ci.seed);
  } catch (const ConfigError& e) {
    throw FormatError(Kind::kSpecMismatch, file, e.what());
  }
  const auto tensors = detail::checkpoint_tensors(net);
  const auto& listed = header["tensors"];
  if (listed.size() != tensors.size()) {
    throw FormatError(Kind::kSpecMismatch, file,
                      "header lists " + std::to_string(listed.size()) + " tensors, spec builds " +
                          std::to_string(tensors.size()));
  }
  std::size_t offset = 16 + len;
  for (std::size_t i = 0; i < tensors.size(); ++i) {
    auto& [name, t] = tensors[i];
    Shape shape;
    std::string listed_name;
    try {
      listed_name = listed[i].at("name").get<std::string>();
      shape = listed[i].at("shape").get<Shape>();
    } catch (const std::exception& e) {
      throw FormatError(Kind::kMalformedHeader, file, e.what());
    }
    if (listed_name != name || shape != t->shape()) {
      throw FormatError(Kind::kSpecMismatch, file,
                        "tensor " + std::to_string(i) + " is " + listed_name + " " + to_string(shape) + ", expected " +
                            name + " " + to_string(t->shape()));
    }
    const std::size_t need = t->size() * sizeof(T);
    if (bytes.size() - offset < need) {
      throw FormatError(Kind::kTruncatedBlob, file, "tensor " + name + " needs " + std::to_string(need) + " bytes");
    }
    io::read_le(bytes.data() + offset, t->size(), t->ptr());
    offset += need;
  }
  if (offset != bytes.size()) {
    throw FormatError(Kind::kDimensionMismatch, file,
                      std::to_string(bytes.size() - offset) + " trailing bytes after the last tensor");
  }
  if (info != nullptr) *info = ci;
  return net;
}

}  // namespace stvnet
