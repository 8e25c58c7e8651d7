// Copyright (c) 2026 lwr authors
// SPDX-License-Identifier: Apache-2.0
//
// Descriptor persistence and shortlist construction. File format ("LCRB")
// is little-endian binary, bit-exact across write/read.

#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "lwr/common.hpp"
#include "lwr/mat.hpp"

namespace lwr {

// L x d local descriptors for one image. Valid rows are L2-normalized;
// rows at index >= valid_count are zero padding.
struct LocalDescriptorSet {
  std::string image_id;
  Mat<float> descriptors;        // L x d
  std::vector<float> weights;    // empty or length L
  int valid_count = 0;

  int capacity() const { return descriptors.rows; }
  int dim() const { return descriptors.cols; }
};

struct GlobalDescriptor {
  std::string image_id;
  std::vector<float> vector;  // L2-normalized
};

struct DescriptorBank {
  int d = 0;
  int L = 0;
  bool normalized = true;
  std::string source_tag;
  std::map<std::string, LocalDescriptorSet> locals;
  std::map<std::string, GlobalDescriptor> globals;

  bool has_globals() const { return !globals.empty(); }
  std::size_t image_count() const { return locals.size(); }
  void validate() const;
};

enum class RelevanceTier { kPositive, kEasy, kJunk, kNegative };

std::string tier_name(RelevanceTier t);
RelevanceTier tier_from_name(const std::string& name);

struct ShortList {
  std::string query_id;
  std::vector<std::pair<std::string, float>> entries;  // (image_id, global_score) desc
  std::map<std::string, RelevanceTier> relevance;
  bool truncated_warning = false;  // set when K exceeded the bank size
};

// Fixed-size file header: magic(4) + version(4) + flags(4) + d(4) + L(4) + count(8).
inline constexpr std::size_t kBankHeaderBytes = 28;
inline constexpr std::uint32_t kBankVersion = 1;

// Atomic whole-file write (temp + rename). Refuses invariant violations.
void write_bank(const DescriptorBank& bank, const std::string& path);

// Validates header and payload; normalizes rows when the file flags say the
// descriptors were stored unnormalized.
DescriptorBank read_bank(const std::string& path);

// Keeps the L rows with the largest weights (ties: original index ascending),
// L2-normalizes them, zero-pads when fewer than L rows exist.
LocalDescriptorSet select_top_l(const std::string& image_id, const Mat<float>& raw,
                                const std::vector<float>& weights, int L);

// Exact top-K by dot product over the bank's global descriptors,
// ties broken by image_id ascending. exclude may name one id to skip.
ShortList global_topk(const GlobalDescriptor& query, const DescriptorBank& bank, int K,
                      const std::string& exclude = std::string(),
                      const std::vector<std::string>* restrict_to = nullptr);

}  // namespace lwr
