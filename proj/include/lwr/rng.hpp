// Copyright (c) 2026 lwr authors
// SPDX-License-Identifier: Apache-2.0
//
// Deterministic RNG. mt19937_64 is fully specified by the standard, and the
// distributions below are written out explicitly (std:: distribution objects
// are implementation-defined), so streams are reproducible across platforms.

#pragma once

#include <cstdint>
#include <random>

namespace lwr {

class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }

  // Uniform in [0, 1).
  double next_double() {
    return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
  }

  // Uniform in [0, n). Modulo bias is negligible for n << 2^64.
  std::uint64_t next_below(std::uint64_t n) { return engine_() % n; }

  // Standard normal via Box-Muller.
  double next_normal() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    double u1 = next_double();
    double u2 = next_double();
    while (u1 <= 1e-300) u1 = next_double();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double theta = 6.283185307179586476925286766559 * u2;
    spare_ = r * std::sin(theta);
    have_spare_ = true;
    return r * std::cos(theta);
  }

  // Normal truncated to +-2 sigma (redraw), scaled by sigma.
  double next_trunc_normal(double sigma) {
    double z = next_normal();
    while (z < -2.0 || z > 2.0) z = next_normal();
    return z * sigma;
  }

  // Derives an independent stream: splitmix64 over (seed, tag) so
  // sub-streams do not alias the parent sequence.
  static std::uint64_t derive(std::uint64_t seed, std::uint64_t tag) {
    std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (tag + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

 private:
  std::mt19937_64 engine_;
  double spare_ = 0.0;
  bool have_spare_ = false;
};

}  // namespace lwr
