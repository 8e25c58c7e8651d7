// Copyright (c) 2026 lwr authors
// SPDX-License-Identifier: Apache-2.0

#include "lwr/attention.hpp"

#include <algorithm>

namespace lwr {

void AttentionPattern::rebuild_lookups() {
  is_global.assign(static_cast<std::size_t>(M), 0);
  is_padding.assign(static_cast<std::size_t>(M), 0);
  for (int g : global_indices) is_global[static_cast<std::size_t>(g)] = 1;
  for (int p : padding_indices) is_padding[static_cast<std::size_t>(p)] = 1;
}

bool AttentionPattern::attends(int i, int j) const {
  if (i < 0 || j < 0 || i >= M || j >= M) return false;
  if (is_padding[static_cast<std::size_t>(i)] || is_padding[static_cast<std::size_t>(j)]) {
    return false;
  }
  if (is_global[static_cast<std::size_t>(i)] || is_global[static_cast<std::size_t>(j)]) {
    return true;
  }
  const int d = i > j ? i - j : j - i;
  return d <= window_radius;
}

AttentionPattern build_pattern(const std::vector<TokenMeta>& meta, int window_radius) {
  if (window_radius <= 0) {
    throw ConfigError("build_pattern: window_radius must be >= 1, got " +
                      std::to_string(window_radius));
  }
  AttentionPattern p;
  p.M = static_cast<int>(meta.size());
  p.window_radius = window_radius;
  for (int i = 0; i < p.M; ++i) {
    const TokenMeta& m = meta[static_cast<std::size_t>(i)];
    if (m.is_padding) {
      p.padding_indices.push_back(i);
    } else if (m.role == TokenRole::kQuery || m.role == TokenRole::kSep) {
      p.global_indices.push_back(i);
    }
  }
  p.rebuild_lookups();
  return p;
}

AttentionPattern without_globals(AttentionPattern pattern) {
  pattern.global_indices.clear();
  pattern.rebuild_lookups();
  return pattern;
}

Mat<std::uint8_t> pattern_to_mask(const AttentionPattern& pattern) {
  Mat<std::uint8_t> mask(pattern.M, pattern.M);
  for (int i = 0; i < pattern.M; ++i) {
    for (int j = 0; j < pattern.M; ++j) {
      mask.at(i, j) = pattern.attends(i, j) ? 1 : 0;
    }
  }
  return mask;
}

void allowed_columns(const AttentionPattern& pattern, int i, std::vector<int>& out) {
  const int lo = std::max(0, i - pattern.window_radius);
  const int hi = std::min(pattern.M - 1, i + pattern.window_radius);
  for (int j = lo; j <= hi; ++j) {
    if (!pattern.is_padding[static_cast<std::size_t>(j)]) out.push_back(j);
  }
  for (int g : pattern.global_indices) {
    if (g >= lo && g <= hi) continue;
    if (!pattern.is_padding[static_cast<std::size_t>(g)]) out.push_back(g);
  }
}

namespace {

long long allowed_count(const AttentionPattern& pattern) {
  long long non_pad = 0;
  for (int i = 0; i < pattern.M; ++i) {
    if (!pattern.is_padding[static_cast<std::size_t>(i)]) ++non_pad;
  }
  long long total = 0;
  std::vector<int> cols;
  for (int i = 0; i < pattern.M; ++i) {
    if (pattern.is_padding[static_cast<std::size_t>(i)]) continue;
    if (pattern.is_global[static_cast<std::size_t>(i)]) {
      total += non_pad;
    } else {
      cols.clear();
      allowed_columns(pattern, i, cols);
      total += static_cast<long long>(cols.size());
    }
  }
  return total;
}

long long flops_from_counts(long long non_pad, long long pairs, int h, int heads) {
  // 7 projections (2*M*h*h flops each), scores + value MACs (2*h flops per
  // allowed pair), softmax exp/sum/div (~3 flops per pair per head).
  const long long proj = 14LL * non_pad * h * h;
  const long long core = 4LL * pairs * h;
  const long long softmax = 3LL * pairs * heads;
  return proj + core + softmax;
}

}  // namespace

long long flop_count(const AttentionPattern& pattern, int h, int heads) {
  if (pattern.window_radius <= 0) {
    throw ConfigError("flop_count: window_radius must be >= 1");
  }
  long long non_pad = 0;
  for (int i = 0; i < pattern.M; ++i) {
    if (!pattern.is_padding[static_cast<std::size_t>(i)]) ++non_pad;
  }
  return flops_from_counts(non_pad, allowed_count(pattern), h, heads);
}

long long dense_flop_count(int M, int h, int heads) {
  return flops_from_counts(M, static_cast<long long>(M) * M, h, heads);
}

}  // namespace lwr
