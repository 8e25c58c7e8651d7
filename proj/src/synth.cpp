// Copyright (c) 2026 lwr authors
// SPDX-License-Identifier: Apache-2.0

#include "lwr/synth.hpp"

#include <algorithm>
#include <cmath>

#include "json.hpp"
#include "lwr/rng.hpp"

namespace lwr {

namespace {

void fill_unit_vector(Rng& rng, float* row, int d) {
  double norm2 = 0.0;
  std::vector<double> tmp(static_cast<std::size_t>(d));
  do {
    norm2 = 0.0;
    for (int i = 0; i < d; ++i) {
      tmp[static_cast<std::size_t>(i)] = rng.next_normal();
      norm2 += tmp[static_cast<std::size_t>(i)] * tmp[static_cast<std::size_t>(i)];
    }
  } while (norm2 < 1e-12);
  const double inv = 1.0 / std::sqrt(norm2);
  for (int i = 0; i < d; ++i) row[i] = static_cast<float>(tmp[static_cast<std::size_t>(i)] * inv);
}

void noised_copy(Rng& rng, const float* src, float* dst, int d, double sigma) {
  double norm2 = 0.0;
  std::vector<double> tmp(static_cast<std::size_t>(d));
  for (int i = 0; i < d; ++i) {
    tmp[static_cast<std::size_t>(i)] = static_cast<double>(src[i]) +
                                       (sigma > 0.0 ? sigma * rng.next_normal() : 0.0);
    norm2 += tmp[static_cast<std::size_t>(i)] * tmp[static_cast<std::size_t>(i)];
  }
  const double inv = norm2 > 0.0 ? 1.0 / std::sqrt(norm2) : 0.0;
  for (int i = 0; i < d; ++i) dst[i] = static_cast<float>(tmp[static_cast<std::size_t>(i)] * inv);
}

// k distinct values from `from`, order preserved by draw.
std::vector<int> sample_without_replacement(Rng& rng, std::vector<int> from, int k) {
  std::vector<int> out;
  out.reserve(static_cast<std::size_t>(k));
  for (int i = 0; i < k; ++i) {
    const std::size_t j = static_cast<std::size_t>(rng.next_below(from.size()));
    out.push_back(from[j]);
    from.erase(from.begin() + static_cast<std::ptrdiff_t>(j));
  }
  return out;
}

GlobalDescriptor mean_global(const std::string& id, const Mat<float>& rows, int valid) {
  GlobalDescriptor g;
  g.image_id = id;
  g.vector.assign(static_cast<std::size_t>(rows.cols), 0.0f);
  for (int r = 0; r < valid; ++r) {
    const float* row = rows.row_ptr(r);
    for (int c = 0; c < rows.cols; ++c) g.vector[static_cast<std::size_t>(c)] += row[c];
  }
  double norm2 = 0.0;
  for (float v : g.vector) norm2 += static_cast<double>(v) * v;
  const double inv = norm2 > 0.0 ? 1.0 / std::sqrt(norm2) : 0.0;
  for (float& v : g.vector) v = static_cast<float>(v * inv);
  return g;
}

}  // namespace

void WorldConfig::validate() const {
  if (instance_count < 1 || images_per_instance < 1 || d < 1 || L < 1) {
    throw ConfigError("world config: counts must be >= 1");
  }
  if (distractor_images < 0) throw ConfigError("world config: distractor_images must be >= 0");
  if (patches_per_image < 1 || patches_per_image > L) {
    throw ConfigError("world config: patches_per_image must be in [1, L]");
  }
  if (patch_pool_per_instance < patches_per_image) {
    throw ConfigError("world config: patch_pool_per_instance " +
                      std::to_string(patch_pool_per_instance) + " < patches_per_image " +
                      std::to_string(patches_per_image));
  }
  if (noise_sigma < 0.0) throw ConfigError("world config: noise_sigma must be >= 0");
  if (transitivity_rate < 0.0 || transitivity_rate > 1.0) {
    throw ConfigError("world config: transitivity_rate must be in [0, 1]");
  }
  if (transitivity_rate > 0.0) {
    // Hard positives draw from pool \ query subset and must still overlap the
    // anchor positive, which requires a second non-query patch slot.
    if (patches_per_image < 2 || patch_pool_per_instance < 2 * patches_per_image) {
      throw ConfigError(
          "world config: transitivity_rate > 0 requires patches_per_image >= 2 and "
          "patch_pool_per_instance >= 2 * patches_per_image");
    }
  }
  if (easy_fraction < 0.0 || junk_fraction < 0.0 || easy_fraction + junk_fraction > 1.0) {
    throw ConfigError("world config: easy/junk fractions must be >= 0 and sum to <= 1");
  }
}

RelevanceTier WorldTruth::tier_for(const std::string& query, const std::string& other) const {
  auto qi = instance_of.find(query);
  auto oi = instance_of.find(other);
  if (qi == instance_of.end() || oi == instance_of.end()) return RelevanceTier::kNegative;
  if (qi->second < 0 || oi->second < 0 || qi->second != oi->second || query == other) {
    return RelevanceTier::kNegative;
  }
  auto t = base_tier.find(other);
  return t == base_tier.end() ? RelevanceTier::kPositive : t->second;
}

World generate_world(const WorldConfig& cfg) {
  cfg.validate();
  World world;
  world.bank.d = cfg.d;
  world.bank.L = cfg.L;
  world.bank.normalized = true;
  world.bank.source_tag = "synth";

  const int ppi = cfg.patches_per_image;
  const int pool_n = cfg.patch_pool_per_instance;

  for (int inst = 0; inst < cfg.instance_count; ++inst) {
    Rng rng(Rng::derive(cfg.seed, 0x100000ULL + static_cast<std::uint64_t>(inst)));
    Mat<float> pool(pool_n, cfg.d);
    for (int p = 0; p < pool_n; ++p) fill_unit_vector(rng, pool.row_ptr(p), cfg.d);

    for (int img = 0; img < cfg.images_per_instance; ++img) {
      const std::string id = "inst" + std::to_string(inst) + "_img" + std::to_string(img);
      bool hard = false;
      std::vector<int> patches;
      if (img == 0) {
        // The query-designated subset: the first ppi pool patches.
        for (int p = 0; p < ppi; ++p) patches.push_back(p);
      } else if (img == 1) {
        // Anchor positive: always easy-style, and it carries the bridge
        // patch (index ppi) that hard positives are forced to include.
        patches.push_back(0);
        std::vector<int> rest;
        if (ppi >= 2 && pool_n > ppi) {
          patches.push_back(ppi);
          for (int p = 1; p < pool_n; ++p) {
            if (p != ppi) rest.push_back(p);
          }
          for (int v : sample_without_replacement(rng, rest, ppi - 2)) patches.push_back(v);
        } else {
          for (int p = 1; p < pool_n; ++p) rest.push_back(p);
          for (int v : sample_without_replacement(rng, rest, ppi - 1)) patches.push_back(v);
        }
      } else {
        hard = rng.next_double() < cfg.transitivity_rate;
        if (hard) {
          // Disjoint from the query subset, overlapping the anchor via `ppi`.
          patches.push_back(ppi);
          std::vector<int> rest;
          for (int p = ppi + 1; p < pool_n; ++p) rest.push_back(p);
          for (int v : sample_without_replacement(rng, rest, ppi - 1)) patches.push_back(v);
        } else {
          patches.push_back(0);
          std::vector<int> rest;
          for (int p = 1; p < pool_n; ++p) rest.push_back(p);
          for (int v : sample_without_replacement(rng, rest, ppi - 1)) patches.push_back(v);
        }
      }

      LocalDescriptorSet set;
      set.image_id = id;
      set.descriptors = Mat<float>(cfg.L, cfg.d);
      set.valid_count = cfg.L;
      for (int r = 0; r < ppi; ++r) {
        noised_copy(rng, pool.row_ptr(patches[static_cast<std::size_t>(r)]),
                    set.descriptors.row_ptr(r), cfg.d, cfg.noise_sigma);
      }
      for (int r = ppi; r < cfg.L; ++r) fill_unit_vector(rng, set.descriptors.row_ptr(r), cfg.d);
      set.weights.resize(static_cast<std::size_t>(cfg.L));
      for (int r = 0; r < cfg.L; ++r) {
        set.weights[static_cast<std::size_t>(r)] = 1.0f - static_cast<float>(r) / (2.0f * cfg.L);
      }
      world.bank.globals.emplace(id, mean_global(id, set.descriptors, set.valid_count));
      world.bank.locals.emplace(id, std::move(set));
      world.truth.instance_of[id] = inst;
      if (hard) world.truth.hard_images.insert(id);
    }

    // Tier flags for non-query, non-hard images, from an independent stream
    // so the fractions do not perturb patch layout.
    Rng tier_rng(Rng::derive(cfg.seed, 0x200000ULL + static_cast<std::uint64_t>(inst)));
    for (int img = 1; img < cfg.images_per_instance; ++img) {
      const std::string id = "inst" + std::to_string(inst) + "_img" + std::to_string(img);
      const double u = tier_rng.next_double();
      if (world.truth.hard_images.count(id)) continue;  // hard stays positive
      if (u < cfg.junk_fraction) {
        world.truth.base_tier[id] = RelevanceTier::kJunk;
      } else if (u < cfg.junk_fraction + cfg.easy_fraction) {
        world.truth.base_tier[id] = RelevanceTier::kEasy;
      }
    }
  }

  for (int k = 0; k < cfg.distractor_images; ++k) {
    Rng rng(Rng::derive(cfg.seed, 0x300000ULL + static_cast<std::uint64_t>(k)));
    const std::string id = "dist" + std::to_string(k);
    LocalDescriptorSet set;
    set.image_id = id;
    set.descriptors = Mat<float>(cfg.L, cfg.d);
    set.valid_count = cfg.L;
    for (int r = 0; r < cfg.L; ++r) fill_unit_vector(rng, set.descriptors.row_ptr(r), cfg.d);
    set.weights.resize(static_cast<std::size_t>(cfg.L));
    for (int r = 0; r < cfg.L; ++r) {
      set.weights[static_cast<std::size_t>(r)] = 1.0f - static_cast<float>(r) / (2.0f * cfg.L);
    }
    world.bank.globals.emplace(id, mean_global(id, set.descriptors, set.valid_count));
    world.bank.locals.emplace(id, std::move(set));
    world.truth.instance_of[id] = -1;
  }
  return world;
}

WorldSplit split_world(const WorldTruth& truth, double train_fraction, std::uint64_t seed) {
  if (train_fraction <= 0.0 || train_fraction >= 1.0) {
    throw ConfigError("split_world: train_fraction must be in (0, 1)");
  }
  std::map<int, std::vector<std::string>> strata;  // instance -> ids, -1 = distractors
  for (const auto& [id, inst] : truth.instance_of) strata[inst].push_back(id);

  WorldSplit split;
  std::uint64_t stratum_tag = 0;
  for (auto& [inst, ids] : strata) {
    std::sort(ids.begin(), ids.end());
    Rng rng(Rng::derive(seed, 0x400000ULL + stratum_tag++));
    for (std::size_t i = ids.size(); i > 1; --i) {
      const std::size_t j = static_cast<std::size_t>(rng.next_below(i));
      std::swap(ids[i - 1], ids[j]);
    }
    if (ids.size() == 1) {
      split.train_ids.push_back(ids[0]);
      ++split.unsplittable;
      continue;
    }
    const auto n_train = static_cast<std::size_t>(
        std::llround(train_fraction * static_cast<double>(ids.size())));
    const std::size_t clamped = std::min(std::max<std::size_t>(n_train, 1), ids.size() - 1);
    for (std::size_t i = 0; i < ids.size(); ++i) {
      (i < clamped ? split.train_ids : split.eval_ids).push_back(ids[i]);
    }
  }
  std::sort(split.train_ids.begin(), split.train_ids.end());
  std::sort(split.eval_ids.begin(), split.eval_ids.end());
  return split;
}

WorldConfig world_config_from_json(const std::string& json_text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(json_text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError(std::string("world config: invalid JSON: ") + e.what());
  }
  WorldConfig cfg;
  auto read_int = [&](const char* key, int& dst) {
    if (j.contains(key)) {
      if (!j[key].is_number_integer()) {
        throw ConfigError(std::string("world config: field '") + key + "' must be an integer");
      }
      dst = j[key].get<int>();
    }
  };
  auto read_double = [&](const char* key, double& dst) {
    if (j.contains(key)) {
      if (!j[key].is_number()) {
        throw ConfigError(std::string("world config: field '") + key + "' must be a number");
      }
      dst = j[key].get<double>();
    }
  };
  static const std::set<std::string> known = {
      "instance_count", "images_per_instance", "distractor_images", "d", "L",
      "patch_pool_per_instance", "patches_per_image", "noise_sigma", "transitivity_rate",
      "easy_fraction", "junk_fraction", "seed"};
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (!known.count(it.key())) {
      throw ConfigError("world config: unknown field '" + it.key() + "'");
    }
  }
  read_int("instance_count", cfg.instance_count);
  read_int("images_per_instance", cfg.images_per_instance);
  read_int("distractor_images", cfg.distractor_images);
  read_int("d", cfg.d);
  read_int("L", cfg.L);
  read_int("patch_pool_per_instance", cfg.patch_pool_per_instance);
  read_int("patches_per_image", cfg.patches_per_image);
  read_double("noise_sigma", cfg.noise_sigma);
  read_double("transitivity_rate", cfg.transitivity_rate);
  read_double("easy_fraction", cfg.easy_fraction);
  read_double("junk_fraction", cfg.junk_fraction);
  if (j.contains("seed")) cfg.seed = j["seed"].get<std::uint64_t>();
  cfg.validate();
  return cfg;
}

std::string world_config_to_json(const WorldConfig& cfg) {
  nlohmann::json j;
  j["instance_count"] = cfg.instance_count;
  j["images_per_instance"] = cfg.images_per_instance;
  j["distractor_images"] = cfg.distractor_images;
  j["d"] = cfg.d;
  j["L"] = cfg.L;
  j["patch_pool_per_instance"] = cfg.patch_pool_per_instance;
  j["patches_per_image"] = cfg.patches_per_image;
  j["noise_sigma"] = cfg.noise_sigma;
  j["transitivity_rate"] = cfg.transitivity_rate;
  j["easy_fraction"] = cfg.easy_fraction;
  j["junk_fraction"] = cfg.junk_fraction;
  j["seed"] = cfg.seed;
  return j.dump(2);
}

}  // namespace lwr
