// Copyright (c) 2026 lwr authors
// SPDX-License-Identifier: Apache-2.0
//
// Synthetic planted-instance descriptor worlds. Each instance owns a pool of
// unit patch vectors; its images sample patch subsets (noised, renormalized)
// plus fresh random distractor rows. Hard positives share no patch with the
// instance's query-designated subset but overlap the anchor positive, so
// pair-wise scoring fails on them while list-wise scoring can recover them.

#pragma once

#include <cstdint>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "lwr/bank.hpp"
#include "lwr/common.hpp"

namespace lwr {

struct WorldConfig {
  int instance_count = 20;
  int images_per_instance = 6;
  int distractor_images = 60;
  int d = 16;
  int L = 8;
  int patch_pool_per_instance = 8;
  int patches_per_image = 3;
  double noise_sigma = 0.05;
  double transitivity_rate = 0.0;
  double easy_fraction = 0.0;  // fraction of non-anchor positives labeled easy
  double junk_fraction = 0.0;  // fraction labeled junk
  std::uint64_t seed = 1;

  void validate() const;
};

struct WorldTruth {
  // -1 = distractor.
  std::map<std::string, int> instance_of;
  std::set<std::string> hard_images;
  // Image-level tier among its instance mates: positive, easy, or junk.
  std::map<std::string, RelevanceTier> base_tier;

  bool is_distractor(const std::string& id) const {
    auto it = instance_of.find(id);
    return it == instance_of.end() || it->second < 0;
  }

  // Tier of `other` relative to `query` (negative across instances).
  RelevanceTier tier_for(const std::string& query, const std::string& other) const;
};

struct World {
  DescriptorBank bank;
  WorldTruth truth;
};

// Pure function of the config; bitwise deterministic given cfg.seed.
World generate_world(const WorldConfig& cfg);

struct WorldSplit {
  std::vector<std::string> train_ids;
  std::vector<std::string> eval_ids;
  int unsplittable = 0;  // single-image instances forced into train
};

// Stratified by instance (distractors form one stratum); disjoint and
// deterministic given the seed.
WorldSplit split_world(const WorldTruth& truth, double train_fraction, std::uint64_t seed);

WorldConfig world_config_from_json(const std::string& json_text);
std::string world_config_to_json(const WorldConfig& cfg);

}  // namespace lwr
