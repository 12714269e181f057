#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <type_traits>
#include <vector>

#include "stvnet/errors.hpp"

namespace stvnet::io {

template <class V>
V byteswap_if_big(V v) {
  if constexpr (std::endian::native == std::endian::little || sizeof(V) == 1) {
    return v;
  } else {
    unsigned char b[sizeof(V)];
    std::memcpy(b, &v, sizeof(V));
    for (std::size_t i = 0; i < sizeof(V) / 2; ++i) std::swap(b[i], b[sizeof(V) - 1 - i]);
    std::memcpy(&v, b, sizeof(V));
    return v;
  }
}

// Append the little-endian bytes of `values` to `out`.
template <class V>
void append_le(std::string& out, const V* values, std::size_t n) {
  static_assert(std::is_trivially_copyable_v<V>);
  const std::size_t start = out.size();
  out.resize(start + n * sizeof(V));
  for (std::size_t i = 0; i < n; ++i) {
    const V le = byteswap_if_big(values[i]);
    std::memcpy(out.data() + start + i * sizeof(V), &le, sizeof(V));
  }
}

template <class V>
void read_le(const char* bytes, std::size_t n, V* values) {
  for (std::size_t i = 0; i < n; ++i) {
    V v;
    std::memcpy(&v, bytes + i * sizeof(V), sizeof(V));
    values[i] = byteswap_if_big(v);
  }
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError(FormatError::Kind::kMissingFile, path.string(), "cannot open for reading");
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return bytes;
}

inline void write_file(const std::filesystem::path& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot open " + path.string() + " for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error("write failed: " + path.string());
}

// Read exactly `n` little-endian values from a raw file.
template <class V>
std::vector<V> read_raw(const std::filesystem::path& path, std::size_t n) {
  const std::string bytes = read_file(path);
  if (bytes.size() < n * sizeof(V)) {
    throw FormatError(FormatError::Kind::kTruncatedBlob, path.string(),
                      "expected " + std::to_string(n * sizeof(V)) + " bytes, found " + std::to_string(bytes.size()));
  }
  if (bytes.size() > n * sizeof(V)) {
    throw FormatError(FormatError::Kind::kDimensionMismatch, path.string(),
                      "expected " + std::to_string(n * sizeof(V)) + " bytes, found " + std::to_string(bytes.size()));
  }
  std::vector<V> out(n);
  read_le(bytes.data(), n, out.data());
  return out;
}

template <class V>
void write_raw(const std::filesystem::path& path, const std::vector<V>& values) {
  std::string bytes;
  append_le(bytes, values.data(), values.size());
  write_file(path, bytes);
}

}  // namespace stvnet::io
