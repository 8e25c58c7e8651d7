// Copyright (c) 2026 lwr authors
// SPDX-License-Identifier: Apache-2.0

#include "lwr/manifest.hpp"

#include <filesystem>
#include <fstream>

#include "json.hpp"

namespace lwr {

void write_manifest(const Manifest& manifest, const std::string& path) {
  nlohmann::json queries = nlohmann::json::array();
  for (const ManifestQuery& q : manifest.queries) {
    nlohmann::json jq;
    jq["query_id"] = q.query_id;
    jq["gallery"] = q.gallery;
    nlohmann::json rel = nlohmann::json::object();
    for (const auto& [id, tier] : q.relevance) rel[id] = tier_name(tier);
    jq["relevance"] = rel;
    queries.push_back(std::move(jq));
  }
  nlohmann::json root;
  root["queries"] = std::move(queries);
  const std::string tmp = path + ".tmp";
  {
    std::ofstream os(tmp, std::ios::trunc);
    if (!os) throw ParseError("manifest: cannot open " + tmp + " for writing");
    os << root.dump(2) << "\n";
    if (!os) throw ParseError("manifest: write failure on " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

Manifest read_manifest(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ParseError("manifest: cannot open " + path);
  nlohmann::json root;
  try {
    is >> root;
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError(std::string("manifest: invalid JSON: ") + e.what());
  }
  if (!root.contains("queries") || !root["queries"].is_array()) {
    throw ParseError("manifest: missing 'queries' array");
  }
  Manifest m;
  for (const auto& jq : root["queries"]) {
    ManifestQuery q;
    q.query_id = jq.at("query_id").get<std::string>();
    for (const auto& g : jq.at("gallery")) q.gallery.push_back(g.get<std::string>());
    if (jq.contains("relevance")) {
      for (auto it = jq["relevance"].begin(); it != jq["relevance"].end(); ++it) {
        q.relevance[it.key()] = tier_from_name(it.value().get<std::string>());
      }
    }
    m.queries.push_back(std::move(q));
  }
  return m;
}

Manifest build_manifest(const DescriptorBank& bank, const WorldTruth& truth,
                        const std::vector<std::string>& query_ids,
                        const std::vector<std::string>& pool) {
  Manifest m;
  for (const std::string& qid : query_ids) {
    auto git = bank.globals.find(qid);
    if (git == bank.globals.end()) {
      throw ConfigError("build_manifest: query '" + qid + "' has no global descriptor");
    }
    ManifestQuery q;
    q.query_id = qid;
    ShortList full = global_topk(git->second, bank, static_cast<int>(pool.size()), qid, &pool);
    q.gallery.reserve(full.entries.size());
    for (const auto& [id, score] : full.entries) {
      q.gallery.push_back(id);
      const RelevanceTier tier = truth.tier_for(qid, id);
      if (tier != RelevanceTier::kNegative) q.relevance[id] = tier;
    }
    m.queries.push_back(std::move(q));
  }
  return m;
}

}  // namespace lwr
