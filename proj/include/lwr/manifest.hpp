// Copyright (c) 2026 lwr authors
// SPDX-License-Identifier: Apache-2.0
//
// Manifest JSON: per-query gallery orderings (global-retrieval order) plus
// relevance tiers. Absent ids are negatives.

#pragma once

#include <map>
#include <string>
#include <vector>

#include "lwr/bank.hpp"
#include "lwr/synth.hpp"

namespace lwr {

struct ManifestQuery {
  std::string query_id;
  std::vector<std::string> gallery;  // global-retrieval order, query excluded
  std::map<std::string, RelevanceTier> relevance;
};

struct Manifest {
  std::vector<ManifestQuery> queries;
};

void write_manifest(const Manifest& manifest, const std::string& path);
Manifest read_manifest(const std::string& path);

// Builds a manifest over `pool`: each query_id gets the full global ranking of
// pool \ {query} plus the truth-derived relevance map.
Manifest build_manifest(const DescriptorBank& bank, const WorldTruth& truth,
                        const std::vector<std::string>& query_ids,
                        const std::vector<std::string>& pool);

}  // namespace lwr
