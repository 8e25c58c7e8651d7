// Copyright (c) 2026 lwr authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <stdexcept>
#include <string>

namespace lwr {

// Shape or dimensionality violation; message names the offending shapes.
class ShapeError : public std::runtime_error {
 public:
  explicit ShapeError(const std::string& msg) : std::runtime_error(msg) {}
};

// Malformed or truncated on-disk artifact.
class ParseError : public std::runtime_error {
 public:
  explicit ParseError(const std::string& msg) : std::runtime_error(msg) {}
};

// Numerically degenerate input (fully masked row, all-masked loss, ...).
class DegenerateError : public std::runtime_error {
 public:
  explicit DegenerateError(const std::string& msg) : std::runtime_error(msg) {}
};

// Invalid configuration or argument value.
class ConfigError : public std::runtime_error {
 public:
  explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

template <typename T>
inline bool is_finite(T v) {
  return std::isfinite(static_cast<double>(v));
}

}  // namespace lwr
