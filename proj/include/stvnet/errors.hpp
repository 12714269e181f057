#pragma once

#include <stdexcept>
#include <string>

namespace stvnet {

// Base of every error thrown by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Tensor extents disagree. `axis` names the offending dimension.
class ShapeError : public Error {
 public:
  ShapeError(const std::string& op, const std::string& axis, const std::string& detail)
      : Error(op + ": shape mismatch on " + axis + ": " + detail), op_(op), axis_(axis) {}

  const std::string& op() const noexcept { return op_; }
  const std::string& axis() const noexcept { return axis_; }

 private:
  std::string op_;
  std::string axis_;
};

// A configuration or precondition was violated.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// A quantity is mathematically undefined for the given input
// (empty surface, zero-variance series, no cavity, ...).
class UndefinedError : public Error {
 public:
  using Error::Error;
};

// Training diverged or could not start.
class TrainingError : public Error {
 public:
  using Error::Error;
};

// On-disk dataset or checkpoint problems. Each failure mode has its own code.
class FormatError : public Error {
 public:
  enum class Kind {
    kMissingFile,
    kMalformedHeader,
    kTruncatedBlob,
    kDimensionMismatch,
    kGateCountMismatch,
    kBadMagic,
    kSpecMismatch,
    kInvalidValue,
  };

  FormatError(Kind kind, const std::string& path, const std::string& detail)
      : Error(std::string(kind_name(kind)) + " (" + path + "): " + detail), kind_(kind), path_(path) {}

  Kind kind() const noexcept { return kind_; }
  const std::string& path() const noexcept { return path_; }

  static const char* kind_name(Kind kind) {
    switch (kind) {
      case Kind::kMissingFile: return "missing file";
      case Kind::kMalformedHeader: return "malformed header";
      case Kind::kTruncatedBlob: return "truncated blob";
      case Kind::kDimensionMismatch: return "dimension mismatch";
      case Kind::kGateCountMismatch: return "gate count mismatch";
      case Kind::kBadMagic: return "bad magic";
      case Kind::kSpecMismatch: return "spec mismatch";
      case Kind::kInvalidValue: return "invalid value";
    }
    return "format error";
  }

 private:
  Kind kind_;
  std::string path_;
};

}  // namespace stvnet
