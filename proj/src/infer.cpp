// Copyright (c) 2026 lwr authors
// SPDX-License-Identifier: Apache-2.0

#include "lwr/infer.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>

#include "json.hpp"

namespace lwr {

AggregatorMode aggregator_from_name(const std::string& name) {
  if (name == "mean") return AggregatorMode::kMeanTokens;
  if (name == "first") return AggregatorMode::kFirstToken;
  if (name == "sep") return AggregatorMode::kSepToken;
  throw ConfigError("unknown aggregator '" + name + "' (expected sep|mean|first)");
}

std::string aggregator_name(AggregatorMode mode) {
  switch (mode) {
    case AggregatorMode::kMeanTokens: return "mean";
    case AggregatorMode::kFirstToken: return "first";
    case AggregatorMode::kSepToken: return "sep";
  }
  return "sep";
}

namespace {

float sigmoid(float z) { return 1.0f / (1.0f + std::exp(-z)); }

}  // namespace

AggregateResult aggregate(const TokenLogits& logits, AggregatorMode mode) {
  if (logits.logits.size() != logits.meta.size()) {
    throw ShapeError("aggregate: logits/meta length mismatch");
  }
  int K = 0;
  for (const TokenMeta& m : logits.meta) K = std::max(K, m.image_slot);
  AggregateResult out;
  out.scores.assign(static_cast<std::size_t>(K), 0.0f);
  out.defined.assign(static_cast<std::size_t>(K), false);
  out.token_scores.resize(static_cast<std::size_t>(K));

  std::vector<double> sum(static_cast<std::size_t>(K), 0.0);
  std::vector<int> count(static_cast<std::size_t>(K), 0);
  std::vector<float> first(static_cast<std::size_t>(K), 0.0f);
  std::vector<bool> first_seen(static_cast<std::size_t>(K), false);
  std::vector<float> sep(static_cast<std::size_t>(K), 0.0f);
  std::vector<bool> sep_seen(static_cast<std::size_t>(K), false);

  for (std::size_t i = 0; i < logits.meta.size(); ++i) {
    const TokenMeta& m = logits.meta[i];
    if (m.image_slot == 0 || m.is_padding) continue;
    const std::size_t slot = static_cast<std::size_t>(m.image_slot - 1);
    const float s = sigmoid(logits.logits[i]);
    out.token_scores[slot].push_back(s);
    sum[slot] += s;
    count[slot] += 1;
    if (m.role == TokenRole::kSep) {
      sep[slot] = s;
      sep_seen[slot] = true;
    } else if (m.within_image_index == 0) {
      first[slot] = s;
      first_seen[slot] = true;
    }
  }
  for (std::size_t slot = 0; slot < static_cast<std::size_t>(K); ++slot) {
    if (count[slot] == 0) continue;  // fully padded image: score 0, flagged
    out.defined[slot] = true;
    switch (mode) {
      case AggregatorMode::kMeanTokens:
        out.scores[slot] = static_cast<float>(sum[slot] / count[slot]);
        break;
      case AggregatorMode::kFirstToken:
        if (!first_seen[slot]) {
          throw DegenerateError("aggregate: image slot " + std::to_string(slot + 1) +
                                " has no first token");
        }
        out.scores[slot] = first[slot];
        break;
      case AggregatorMode::kSepToken:
        if (!sep_seen[slot]) {
          throw DegenerateError("aggregate: image slot " + std::to_string(slot + 1) +
                                " has no SEP token");
        }
        out.scores[slot] = sep[slot];
        break;
    }
  }
  return out;
}

std::vector<std::pair<int, int>> window_schedule(int N, int K, int S) {
  if (K < 1 || N < K) {
    throw ConfigError("window_schedule: need 1 <= K <= N, got K = " + std::to_string(K) +
                      ", N = " + std::to_string(N));
  }
  if (S < 1 || S > K) {
    throw ConfigError("window_schedule: need 1 <= S <= K, got S = " + std::to_string(S) +
                      " (S > K would leave unscored gaps)");
  }
  std::vector<std::pair<int, int>> windows;
  int start = N - K;
  while (true) {
    windows.emplace_back(start, start + K);
    if (start == 0) break;
    start = std::max(0, start - S);
  }
  return windows;
}

RerankResult sliding_rerank_with_scorer(const std::string& query_id,
                                        const std::vector<std::string>& gallery, int K, int S,
                                        const WindowScorer& scorer, bool overwrite_mode) {
  const int N = static_cast<int>(gallery.size());
  RerankResult result;
  result.query_id = query_id;

  if (N <= K) {
    // Degenerate single pass over all candidates.
    std::vector<float> scores = scorer(gallery);
    if (static_cast<int>(scores.size()) != N) {
      throw ShapeError("sliding_rerank: scorer returned " + std::to_string(scores.size()) +
                       " scores for " + std::to_string(N) + " candidates");
    }
    std::vector<int> order(gallery.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
      return scores[static_cast<std::size_t>(a)] > scores[static_cast<std::size_t>(b)];
    });
    for (int idx : order) {
      result.entries.emplace_back(gallery[static_cast<std::size_t>(idx)],
                                  scores[static_cast<std::size_t>(idx)]);
    }
    result.window_log.emplace_back(0, N);
    return result;
  }

  const std::vector<std::pair<int, int>> windows = window_schedule(N, K, S);
  std::vector<std::string> slots = gallery;
  std::vector<float> slot_score(static_cast<std::size_t>(N), 0.0f);

  for (std::size_t w = 0; w < windows.size(); ++w) {
    const auto [s, e] = windows[w];
    std::vector<std::string> window_ids(slots.begin() + s, slots.begin() + e);
    std::vector<float> scores = scorer(window_ids);
    if (scores.size() != window_ids.size()) {
      throw ShapeError("sliding_rerank: scorer returned " + std::to_string(scores.size()) +
                       " scores for window of " + std::to_string(window_ids.size()));
    }
    result.window_log.emplace_back(s, e);
    if (overwrite_mode) {
      // Alternate protocol: no reordering between passes, scores overwritten
      // window by window, one global sort at the end.
      for (std::size_t i = 0; i < window_ids.size(); ++i) {
        slot_score[static_cast<std::size_t>(s) + i] = scores[i];
      }
      continue;
    }
    std::vector<int> order(window_ids.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
      return scores[static_cast<std::size_t>(a)] > scores[static_cast<std::size_t>(b)];
    });
    // Reordering within [s, e) finalizes the slots past the next window's
    // end; the schedule never covers them again.
    for (std::size_t i = 0; i < order.size(); ++i) {
      slots[static_cast<std::size_t>(s) + i] = window_ids[static_cast<std::size_t>(order[i])];
      slot_score[static_cast<std::size_t>(s) + i] = scores[static_cast<std::size_t>(order[i])];
    }
  }

  if (overwrite_mode) {
    std::vector<int> order(static_cast<std::size_t>(N));
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
      return slot_score[static_cast<std::size_t>(a)] > slot_score[static_cast<std::size_t>(b)];
    });
    for (int idx : order) {
      result.entries.emplace_back(slots[static_cast<std::size_t>(idx)],
                                  slot_score[static_cast<std::size_t>(idx)]);
    }
    return result;
  }
  for (int i = 0; i < N; ++i) {
    result.entries.emplace_back(slots[static_cast<std::size_t>(i)],
                                slot_score[static_cast<std::size_t>(i)]);
  }
  return result;
}

std::vector<float> ModelScorer::operator()(const std::vector<std::string>& window_ids) const {
  const int K = model->config.K;
  if (static_cast<int>(window_ids.size()) > K) {
    throw ShapeError("model scorer: window of " + std::to_string(window_ids.size()) +
                     " exceeds model K = " + std::to_string(K));
  }
  const LocalDescriptorSet& query = bank->locals.at(query_id);
  LocalDescriptorSet empty;
  empty.image_id = "";
  empty.descriptors = Mat<float>(bank->L, bank->d);
  empty.valid_count = 0;

  std::vector<const LocalDescriptorSet*> gallery;
  gallery.reserve(static_cast<std::size_t>(K));
  for (const std::string& id : window_ids) {
    auto it = bank->locals.find(id);
    if (it == bank->locals.end()) {
      throw ConfigError("model scorer: image '" + id + "' not in bank");
    }
    gallery.push_back(&it->second);
  }
  for (std::size_t i = window_ids.size(); i < static_cast<std::size_t>(K); ++i) {
    gallery.push_back(&empty);  // fully padded slot, masked everywhere
  }

  TokenLogits logits = forward_eval(*model, query, gallery);
  AggregateResult agg = aggregate(logits, mode);
  if (token_trace) {
    for (std::size_t i = 0; i < window_ids.size(); ++i) {
      (*token_trace)[window_ids[i]] = agg.token_scores[i];
    }
  }
  return std::vector<float>(agg.scores.begin(),
                            agg.scores.begin() + static_cast<std::ptrdiff_t>(window_ids.size()));
}

RerankResult rerank_once(RerankerModel<float>& model, const DescriptorBank& bank,
                         const std::string& query_id, const std::vector<std::string>& gallery,
                         AggregatorMode mode, bool keep_token_trace) {
  RerankResult result;
  std::map<std::string, std::vector<float>> trace;
  ModelScorer scorer{&model, &bank, query_id, mode, keep_token_trace ? &trace : nullptr};
  result = sliding_rerank_with_scorer(query_id, gallery,
                                      std::max(static_cast<int>(gallery.size()), 1),
                                      1, scorer);
  result.per_image_token_scores = std::move(trace);
  return result;
}

RerankResult sliding_rerank(RerankerModel<float>& model, const DescriptorBank& bank,
                            const std::string& query_id, const std::vector<std::string>& gallery,
                            int K, int S, AggregatorMode mode, bool overwrite_mode) {
  ModelScorer scorer{&model, &bank, query_id, mode, nullptr};
  return sliding_rerank_with_scorer(query_id, gallery, K, S, scorer, overwrite_mode);
}

void write_results(const std::vector<RerankResult>& results, const std::string& path) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream os(tmp, std::ios::trunc);
    if (!os) throw ParseError("results: cannot open " + tmp + " for writing");
    for (const RerankResult& r : results) {
      nlohmann::json j;
      j["query_id"] = r.query_id;
      nlohmann::json ranking = nlohmann::json::array();
      nlohmann::json scores = nlohmann::json::array();
      for (const auto& [id, score] : r.entries) {
        ranking.push_back(id);
        scores.push_back(score);
      }
      j["ranking"] = std::move(ranking);
      j["scores"] = std::move(scores);
      nlohmann::json windows = nlohmann::json::array();
      for (const auto& [s, e] : r.window_log) windows.push_back({s, e});
      j["windows"] = std::move(windows);
      if (r.easy_removed_from_db) j["easy_removed_from_db"] = true;
      os << j.dump() << "\n";
    }
    if (!os) throw ParseError("results: write failure on " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

std::vector<RerankResult> read_results(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ParseError("results: cannot open " + path);
  std::vector<RerankResult> out;
  std::string line;
  int line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    if (line.empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw ParseError("results: invalid JSON on line " + std::to_string(line_no) + ": " +
                       e.what());
    }
    RerankResult r;
    r.query_id = j.at("query_id").get<std::string>();
    const auto& ranking = j.at("ranking");
    const auto& scores = j.at("scores");
    if (ranking.size() != scores.size()) {
      throw ParseError("results: ranking/scores length mismatch on line " +
                       std::to_string(line_no));
    }
    for (std::size_t i = 0; i < ranking.size(); ++i) {
      r.entries.emplace_back(ranking[i].get<std::string>(), scores[i].get<float>());
    }
    if (j.contains("windows")) {
      for (const auto& w : j["windows"]) {
        r.window_log.emplace_back(w[0].get<int>(), w[1].get<int>());
      }
    }
    r.easy_removed_from_db = j.value("easy_removed_from_db", false);
    out.push_back(std::move(r));
  }
  return out;
}

}  // namespace lwr
