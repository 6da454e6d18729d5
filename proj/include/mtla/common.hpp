// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <stdexcept>
#include <string>

namespace mtla {

using index_t = std::int64_t;

/// Numeric precision of a run. All matrices taking part in one
/// computation share a single mode.
enum class Precision { kSingle, kDouble };

inline const char* precision_name(Precision p) {
  return p == Precision::kSingle ? "single" : "double";
}

/// Dimension or shape violation (matmul mismatch, odd RoPE width, ...).
class ShapeError : public std::runtime_error {
 public:
  explicit ShapeError(const std::string& what) : std::runtime_error(what) {}
};

/// Invalid hyper-parameter combination (s == 0, n_h % g != 0, ...).
class ConfigError : public std::runtime_error {
 public:
  explicit ConfigError(const std::string& what) : std::runtime_error(what) {}
};

/// Numerical failure that must not silently produce NaN (fully masked
/// softmax row, divergent training loss, non-finite oracle evaluation).
class NumericError : public std::runtime_error {
 public:
  explicit NumericError(const std::string& what) : std::runtime_error(what) {}
};

/// Filesystem/serialization failure; carries the path and cause.
class IoError : public std::runtime_error {
 public:
  explicit IoError(const std::string& what) : std::runtime_error(what) {}
};

}  // namespace mtla
