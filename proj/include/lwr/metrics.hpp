// Copyright (c) 2026 lwr authors
// SPDX-License-Identifier: Apache-2.0
//
// Retrieval metrics with tiered judgments.
//   MEDIUM: relevant = positive+easy, junk dropped from the list.
//   HARD:   relevant = positive, easy and junk dropped after ranking.
//   HARD*:  like HARD, but easy images were removed from the database before
//           ranking ever ran (caller guarantee, asserted via provenance flag).

#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "lwr/bank.hpp"
#include "lwr/infer.hpp"
#include "lwr/manifest.hpp"

namespace lwr {

enum class Protocol { kMedium, kHard, kHardStar };

Protocol protocol_from_name(const std::string& name);
std::string protocol_name(Protocol p);

struct RankedJudgments {
  std::vector<std::pair<std::string, RelevanceTier>> items;  // system output order
};

// AP over the protocol-filtered list; nullopt when no relevant item exists
// (the query is then skipped and counted).
std::optional<double> average_precision(const RankedJudgments& ranked, Protocol protocol);

// 1 if any relevant item (after protocol filtering) appears in the top k.
std::optional<double> recall_at_k(const RankedJudgments& ranked, Protocol protocol, int k);

// (1/R) sum_{i<=R} P(i) rel(i) with R = number of relevant items in the list.
std::optional<double> map_at_R(const RankedJudgments& ranked, Protocol protocol);

struct EvalReport {
  Protocol protocol = Protocol::kMedium;
  double mean_ap = 0.0;
  double mean_map_at_R = 0.0;
  std::map<int, double> recall_at;
  std::vector<std::pair<std::string, double>> per_query_ap;
  int skipped_queries = 0;  // no relevant items under the protocol
};

// Scores a full result set against the manifest. Each ranking is the
// re-ranked head prepended to the untouched global-order tail. For HARD* the
// results must carry the easy_removed_from_db provenance flag.
EvalReport evaluate(const std::vector<RerankResult>& results, const Manifest& manifest,
                    Protocol protocol, const std::vector<int>& ks);

// Judgment list for one query: re-ranked head + untouched tail.
RankedJudgments judgments_for(const RerankResult& result, const ManifestQuery& query);

std::string report_to_json(const EvalReport& report);
std::string report_to_csv(const EvalReport& report);

}  // namespace lwr
