// Copyright (c) 2026 lwr authors
// SPDX-License-Identifier: Apache-2.0

#include <algorithm>
#include <cmath>
#include <set>

#include "doctest.h"
#include "lwr/synth.hpp"

using namespace lwr;

namespace {

bool rows_equal(const Mat<float>& a, int ra, const Mat<float>& b, int rb) {
  for (int c = 0; c < a.cols; ++c) {
    if (a.at(ra, c) != b.at(rb, c)) return false;
  }
  return true;
}

int shared_rows(const LocalDescriptorSet& a, const LocalDescriptorSet& b) {
  int shared = 0;
  for (int i = 0; i < a.valid_count; ++i) {
    for (int j = 0; j < b.valid_count; ++j) {
      if (rows_equal(a.descriptors, i, b.descriptors, j)) {
        ++shared;
        break;
      }
    }
  }
  return shared;
}

}  // namespace

TEST_CASE("generate_world: bitwise deterministic for a fixed seed") {
  WorldConfig cfg;
  cfg.seed = 7;
  cfg.instance_count = 5;
  cfg.images_per_instance = 4;
  cfg.distractor_images = 10;
  const World a = generate_world(cfg);
  const World b = generate_world(cfg);
  REQUIRE(a.bank.image_count() == b.bank.image_count());
  for (const auto& [id, set] : a.bank.locals) {
    CHECK(set.descriptors.data == b.bank.locals.at(id).descriptors.data);
    CHECK(a.bank.globals.at(id).vector == b.bank.globals.at(id).vector);
  }
}

TEST_CASE("generate_world: noiseless same-instance images share an exact patch row") {
  WorldConfig cfg;
  cfg.seed = 11;
  cfg.instance_count = 4;
  cfg.images_per_instance = 5;
  cfg.distractor_images = 0;
  cfg.noise_sigma = 0.0;
  cfg.transitivity_rate = 0.0;
  const World world = generate_world(cfg);
  for (int inst = 0; inst < cfg.instance_count; ++inst) {
    std::vector<const LocalDescriptorSet*> images;
    for (int img = 0; img < cfg.images_per_instance; ++img) {
      images.push_back(&world.bank.locals.at("inst" + std::to_string(inst) + "_img" +
                                             std::to_string(img)));
    }
    for (std::size_t i = 0; i < images.size(); ++i) {
      for (std::size_t j = i + 1; j < images.size(); ++j) {
        CHECK(shared_rows(*images[i], *images[j]) >= 1);
      }
    }
  }
}

TEST_CASE("generate_world: hard positives are query-disjoint but anchor-linked") {
  WorldConfig cfg;
  cfg.seed = 13;
  cfg.instance_count = 6;
  cfg.images_per_instance = 5;
  cfg.distractor_images = 0;
  cfg.noise_sigma = 0.0;
  cfg.transitivity_rate = 1.0;
  cfg.patch_pool_per_instance = 8;
  cfg.patches_per_image = 3;
  const World world = generate_world(cfg);
  int hard_seen = 0;
  for (int inst = 0; inst < cfg.instance_count; ++inst) {
    const auto name = [&](int img) {
      return "inst" + std::to_string(inst) + "_img" + std::to_string(img);
    };
    const LocalDescriptorSet& query = world.bank.locals.at(name(0));
    const LocalDescriptorSet& anchor = world.bank.locals.at(name(1));
    CHECK(!world.truth.hard_images.count(name(1)));  // anchor forced easy-style
    for (int img = 2; img < cfg.images_per_instance; ++img) {
      const std::string id = name(img);
      REQUIRE(world.truth.hard_images.count(id) == 1);  // rate 1: everything hard
      ++hard_seen;
      const LocalDescriptorSet& hard = world.bank.locals.at(id);
      CHECK(shared_rows(hard, query) == 0);
      CHECK(shared_rows(hard, anchor) >= 1);
    }
  }
  CHECK(hard_seen == cfg.instance_count * (cfg.images_per_instance - 2));
}

TEST_CASE("generate_world: same-instance similarity beats cross-instance (sigma < 0.2)") {
  WorldConfig cfg;
  cfg.seed = 17;
  cfg.instance_count = 8;
  cfg.images_per_instance = 4;
  cfg.distractor_images = 0;
  cfg.noise_sigma = 0.1;
  const World world = generate_world(cfg);
  auto max_row_dot = [&](const LocalDescriptorSet& a, const LocalDescriptorSet& b) {
    double best = -2.0;
    for (int i = 0; i < a.valid_count; ++i) {
      for (int j = 0; j < b.valid_count; ++j) {
        double acc = 0.0;
        for (int c = 0; c < a.descriptors.cols; ++c) {
          acc += static_cast<double>(a.descriptors.at(i, c)) * b.descriptors.at(j, c);
        }
        best = std::max(best, acc);
      }
    }
    return best;
  };
  double same_sum = 0.0, cross_sum = 0.0;
  int same_n = 0, cross_n = 0;
  for (const auto& [ida, a] : world.bank.locals) {
    for (const auto& [idb, b] : world.bank.locals) {
      if (ida >= idb) continue;
      const bool same = world.truth.instance_of.at(ida) == world.truth.instance_of.at(idb);
      const double v = max_row_dot(a, b);
      if (same) {
        same_sum += v;
        ++same_n;
      } else {
        cross_sum += v;
        ++cross_n;
      }
    }
  }
  CHECK(same_sum / same_n > cross_sum / cross_n);
}

TEST_CASE("generate_world: argument errors") {
  WorldConfig cfg;
  cfg.patch_pool_per_instance = 2;
  cfg.patches_per_image = 3;
  CHECK_THROWS_AS(generate_world(cfg), ConfigError);

  WorldConfig cfg2;
  cfg2.patches_per_image = 3;
  cfg2.patch_pool_per_instance = 4;  // < 2 * ppi with transitivity on
  cfg2.transitivity_rate = 0.5;
  CHECK_THROWS_AS(generate_world(cfg2), ConfigError);
}

TEST_CASE("split_world: stratified, disjoint, deterministic") {
  WorldConfig cfg;
  cfg.seed = 19;
  cfg.instance_count = 10;
  cfg.images_per_instance = 4;
  cfg.distractor_images = 6;
  const World world = generate_world(cfg);

  const WorldSplit split = split_world(world.truth, 0.5, 3);
  // 2 per instance per side.
  std::map<int, int> train_per_inst, eval_per_inst;
  for (const auto& id : split.train_ids) {
    const int inst = world.truth.instance_of.at(id);
    if (inst >= 0) train_per_inst[inst]++;
  }
  for (const auto& id : split.eval_ids) {
    const int inst = world.truth.instance_of.at(id);
    if (inst >= 0) eval_per_inst[inst]++;
  }
  for (int i = 0; i < 10; ++i) {
    CHECK(train_per_inst[i] == 2);
    CHECK(eval_per_inst[i] == 2);
  }
  // Partition: union = all ids, intersection empty.
  std::set<std::string> all(split.train_ids.begin(), split.train_ids.end());
  for (const auto& id : split.eval_ids) {
    CHECK(all.insert(id).second);  // no duplicates across sides
  }
  CHECK(all.size() == world.bank.image_count());

  const WorldSplit again = split_world(world.truth, 0.5, 3);
  CHECK(again.train_ids == split.train_ids);
  CHECK(again.eval_ids == split.eval_ids);

  // Stratified ideal within +-1 for many seeds.
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    const WorldSplit s = split_world(world.truth, 0.5, seed);
    std::map<int, int> per_inst;
    for (const auto& id : s.train_ids) {
      const int inst = world.truth.instance_of.at(id);
      if (inst >= 0) per_inst[inst]++;
    }
    for (const auto& [inst, n] : per_inst) CHECK(std::abs(n - 2) <= 1);
  }
}

TEST_CASE("split_world: single-image instance goes to train with a warning") {
  WorldTruth truth;
  truth.instance_of["only"] = 0;
  truth.instance_of["a"] = 1;
  truth.instance_of["b"] = 1;
  const WorldSplit split = split_world(truth, 0.5, 1);
  CHECK(split.unsplittable == 1);
  CHECK(std::find(split.train_ids.begin(), split.train_ids.end(), "only") !=
        split.train_ids.end());
}

TEST_CASE("world config JSON: unknown and ill-typed fields are named") {
  CHECK_THROWS_WITH_AS(world_config_from_json("{\"bogus\": 1}"), doctest::Contains("bogus"),
                       ConfigError);
  CHECK_THROWS_WITH_AS(world_config_from_json("{\"instance_count\": \"five\"}"),
                       doctest::Contains("instance_count"), ConfigError);
  const WorldConfig cfg = world_config_from_json("{\"instance_count\": 3, \"seed\": 42}");
  CHECK(cfg.instance_count == 3);
  CHECK(cfg.seed == 42);
  // Round-trip through JSON.
  const WorldConfig back = world_config_from_json(world_config_to_json(cfg));
  CHECK(back.instance_count == cfg.instance_count);
  CHECK(back.seed == cfg.seed);
}

TEST_CASE("relevance tiers: easy/junk fractions and hard flags surface per query") {
  WorldConfig cfg;
  cfg.seed = 23;
  cfg.instance_count = 12;
  cfg.images_per_instance = 6;
  cfg.distractor_images = 4;
  cfg.easy_fraction = 0.3;
  cfg.junk_fraction = 0.2;
  cfg.transitivity_rate = 0.3;
  const World world = generate_world(cfg);
  int easy = 0, junk = 0, positive = 0;
  const std::string query = "inst0_img0";
  for (const auto& [id, inst] : world.truth.instance_of) {
    const RelevanceTier tier = world.truth.tier_for(query, id);
    if (tier == RelevanceTier::kEasy) ++easy;
    if (tier == RelevanceTier::kJunk) ++junk;
    if (tier == RelevanceTier::kPositive) ++positive;
    if (world.truth.is_distractor(id) || inst != 0) CHECK(tier == RelevanceTier::kNegative);
  }
  CHECK(easy + junk + positive == cfg.images_per_instance - 1);
  // Hard images always stay positive.
  for (const auto& id : world.truth.hard_images) {
    if (world.truth.instance_of.at(id) == 0) {
      CHECK(world.truth.tier_for(query, id) == RelevanceTier::kPositive);
    }
  }
  // Across the whole world the fractions should materialize somewhere.
  int easy_total = 0, junk_total = 0;
  for (const auto& [id, tier] : world.truth.base_tier) {
    if (tier == RelevanceTier::kEasy) ++easy_total;
    if (tier == RelevanceTier::kJunk) ++junk_total;
  }
  CHECK(easy_total > 0);
  CHECK(junk_total > 0);
}
