// Copyright (c) 2026 lwr authors
// SPDX-License-Identifier: Apache-2.0

#include "lwr/metrics.hpp"

#include <algorithm>
#include <set>
#include <sstream>

#include "json.hpp"

namespace lwr {

Protocol protocol_from_name(const std::string& name) {
  if (name == "medium") return Protocol::kMedium;
  if (name == "hard") return Protocol::kHard;
  if (name == "hard-star" || name == "hard_star") return Protocol::kHardStar;
  throw ConfigError("unknown protocol '" + name + "' (expected medium|hard|hard-star)");
}

std::string protocol_name(Protocol p) {
  switch (p) {
    case Protocol::kMedium: return "medium";
    case Protocol::kHard: return "hard";
    case Protocol::kHardStar: return "hard-star";
  }
  return "medium";
}

namespace {

// Applies the protocol: returns the filtered list as relevance bits.
std::vector<bool> filtered_relevance(const RankedJudgments& ranked, Protocol protocol) {
  std::vector<bool> rel;
  rel.reserve(ranked.items.size());
  for (const auto& [id, tier] : ranked.items) {
    switch (protocol) {
      case Protocol::kMedium:
        if (tier == RelevanceTier::kJunk) continue;  // dropped from the list
        rel.push_back(tier == RelevanceTier::kPositive || tier == RelevanceTier::kEasy);
        break;
      case Protocol::kHard:
      case Protocol::kHardStar:
        if (tier == RelevanceTier::kJunk || tier == RelevanceTier::kEasy) continue;
        rel.push_back(tier == RelevanceTier::kPositive);
        break;
    }
  }
  return rel;
}

}  // namespace

std::optional<double> average_precision(const RankedJudgments& ranked, Protocol protocol) {
  const std::vector<bool> rel = filtered_relevance(ranked, protocol);
  long long total_relevant = 0;
  for (bool r : rel) total_relevant += r ? 1 : 0;
  if (total_relevant == 0) return std::nullopt;
  double sum = 0.0;
  long long hits = 0;
  for (std::size_t i = 0; i < rel.size(); ++i) {
    if (!rel[i]) continue;
    ++hits;
    sum += static_cast<double>(hits) / static_cast<double>(i + 1);
  }
  return sum / static_cast<double>(total_relevant);
}

std::optional<double> recall_at_k(const RankedJudgments& ranked, Protocol protocol, int k) {
  if (k < 1) throw ConfigError("recall_at_k: k must be >= 1");
  const std::vector<bool> rel = filtered_relevance(ranked, protocol);
  bool any_relevant = false;
  for (bool r : rel) any_relevant = any_relevant || r;
  if (!any_relevant) return std::nullopt;
  for (std::size_t i = 0; i < rel.size() && i < static_cast<std::size_t>(k); ++i) {
    if (rel[i]) return 1.0;
  }
  return 0.0;
}

std::optional<double> map_at_R(const RankedJudgments& ranked, Protocol protocol) {
  const std::vector<bool> rel = filtered_relevance(ranked, protocol);
  long long R = 0;
  for (bool r : rel) R += r ? 1 : 0;
  if (R == 0) return std::nullopt;
  double sum = 0.0;
  long long hits = 0;
  for (std::size_t i = 0; i < rel.size() && i < static_cast<std::size_t>(R); ++i) {
    if (!rel[i]) continue;
    ++hits;
    sum += static_cast<double>(hits) / static_cast<double>(i + 1);
  }
  return sum / static_cast<double>(R);
}

RankedJudgments judgments_for(const RerankResult& result, const ManifestQuery& query) {
  auto tier_of = [&](const std::string& id) {
    auto it = query.relevance.find(id);
    return it == query.relevance.end() ? RelevanceTier::kNegative : it->second;
  };
  RankedJudgments ranked;
  std::set<std::string> seen;
  for (const auto& [id, score] : result.entries) {
    ranked.items.emplace_back(id, tier_of(id));
    seen.insert(id);
  }
  // Gallery items beyond the re-ranked head keep their global-retrieval order.
  for (const std::string& id : query.gallery) {
    if (seen.count(id)) continue;
    ranked.items.emplace_back(id, tier_of(id));
  }
  return ranked;
}

EvalReport evaluate(const std::vector<RerankResult>& results, const Manifest& manifest,
                    Protocol protocol, const std::vector<int>& ks) {
  std::map<std::string, const ManifestQuery*> by_id;
  for (const ManifestQuery& q : manifest.queries) by_id[q.query_id] = &q;

  EvalReport report;
  report.protocol = protocol;
  std::map<int, double> recall_sum;
  std::map<int, long long> recall_n;
  double ap_sum = 0.0;
  double mapr_sum = 0.0;
  long long ap_n = 0;

  for (const RerankResult& r : results) {
    auto it = by_id.find(r.query_id);
    if (it == by_id.end()) {
      throw ConfigError("evaluate: query '" + r.query_id + "' has no ground truth");
    }
    if (protocol == Protocol::kHardStar && !r.easy_removed_from_db) {
      throw ConfigError("evaluate: HARD* requires results produced with easy images "
                        "removed from the database (provenance flag missing)");
    }
    const RankedJudgments ranked = judgments_for(r, *it->second);
    const auto ap = average_precision(ranked, protocol);
    if (!ap.has_value()) {
      ++report.skipped_queries;
      continue;
    }
    ap_sum += *ap;
    ++ap_n;
    report.per_query_ap.emplace_back(r.query_id, *ap);
    const auto mapr = map_at_R(ranked, protocol);
    mapr_sum += mapr.value_or(0.0);
    for (int k : ks) {
      const auto rec = recall_at_k(ranked, protocol, k);
      if (rec.has_value()) {
        recall_sum[k] += *rec;
        recall_n[k] += 1;
      }
    }
  }
  if (ap_n > 0) {
    report.mean_ap = ap_sum / static_cast<double>(ap_n);
    report.mean_map_at_R = mapr_sum / static_cast<double>(ap_n);
  }
  for (const auto& [k, sum] : recall_sum) {
    report.recall_at[k] = sum / static_cast<double>(recall_n[k]);
  }
  return report;
}

std::string report_to_json(const EvalReport& report) {
  nlohmann::json j;
  j["protocol"] = protocol_name(report.protocol);
  j["mAP"] = report.mean_ap;
  j["mAP@R"] = report.mean_map_at_R;
  nlohmann::json rec = nlohmann::json::object();
  for (const auto& [k, v] : report.recall_at) rec["R@" + std::to_string(k)] = v;
  j["recall"] = std::move(rec);
  j["skipped_queries"] = report.skipped_queries;
  nlohmann::json per = nlohmann::json::array();
  for (const auto& [id, ap] : report.per_query_ap) per.push_back({{"query_id", id}, {"ap", ap}});
  j["per_query_ap"] = std::move(per);
  return j.dump(2);
}

std::string report_to_csv(const EvalReport& report) {
  std::ostringstream os;
  os << "protocol,mAP,mAP@R";
  for (const auto& [k, v] : report.recall_at) os << ",R@" << k;
  os << "\n" << protocol_name(report.protocol) << "," << report.mean_ap << ","
     << report.mean_map_at_R;
  for (const auto& [k, v] : report.recall_at) os << "," << v;
  os << "\n";
  return os.str();
}

}  // namespace lwr
