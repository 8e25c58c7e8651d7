// Copyright (c) 2026 lwr authors
// SPDX-License-Identifier: Apache-2.0
//
// Token logits -> image scores -> (sliding-window) re-ranking. Windows are
// processed tail-first; each pass reorders its window in place and freezes
// the slots the next window does not cover (the trailing S slots, fewer on
// the clamped final step), so every slot is finalized exactly once and raw
// scores from different passes are never compared.

#pragma once

#include <functional>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "lwr/bank.hpp"
#include "lwr/model.hpp"

namespace lwr {

enum class AggregatorMode { kMeanTokens, kFirstToken, kSepToken };

AggregatorMode aggregator_from_name(const std::string& name);
std::string aggregator_name(AggregatorMode mode);

struct AggregateResult {
  std::vector<float> scores;        // length K, sigmoid space
  std::vector<bool> defined;        // false for fully padded images (score 0)
  std::vector<std::vector<float>> token_scores;  // per image, sigmoid per token
};

// Sigmoid per gallery token, then per-image MEAN (non-padding incl. SEP),
// FIRST (within_image_index 0) or SEP token score.
AggregateResult aggregate(const TokenLogits& logits, AggregatorMode mode);

struct RerankResult {
  std::string query_id;
  std::vector<std::pair<std::string, float>> entries;  // finalized order
  std::map<std::string, std::vector<float>> per_image_token_scores;
  std::vector<std::pair<int, int>> window_log;  // [start, end) in processing order
  bool easy_removed_from_db = false;  // provenance for the HARD* protocol
};

// Tail-first overlapping windows: [N-K, N), [N-K-S, N-S), ..., final clamps
// to [0, K). Emitted in processing order.
std::vector<std::pair<int, int>> window_schedule(int N, int K, int S);

// Scores one window of gallery ids against the fixed query; length K (or
// fewer for N < K single-window calls).
using WindowScorer =
    std::function<std::vector<float>(const std::vector<std::string>& window_ids)>;

// Schedule-driven re-ranking over an arbitrary scorer (model or stub).
// overwrite_mode disables freezing: every window just reorders in place.
RerankResult sliding_rerank_with_scorer(const std::string& query_id,
                                        const std::vector<std::string>& gallery,
                                        int K, int S, const WindowScorer& scorer,
                                        bool overwrite_mode = false);

// Model-backed scoring of a single K-window (pads when fewer than K ids).
struct ModelScorer {
  RerankerModel<float>* model = nullptr;
  const DescriptorBank* bank = nullptr;
  std::string query_id;
  AggregatorMode mode = AggregatorMode::kSepToken;
  std::map<std::string, std::vector<float>>* token_trace = nullptr;

  std::vector<float> operator()(const std::vector<std::string>& window_ids) const;
};

// Single-pass re-ranking of exactly K candidates (fewer are padded).
RerankResult rerank_once(RerankerModel<float>& model, const DescriptorBank& bank,
                         const std::string& query_id, const std::vector<std::string>& gallery,
                         AggregatorMode mode, bool keep_token_trace = false);

// N-candidate re-ranking via the window schedule (single pass when N <= K).
RerankResult sliding_rerank(RerankerModel<float>& model, const DescriptorBank& bank,
                            const std::string& query_id, const std::vector<std::string>& gallery,
                            int K, int S, AggregatorMode mode, bool overwrite_mode = false);

// Result files: JSON lines, one record per query.
void write_results(const std::vector<RerankResult>& results, const std::string& path);
std::vector<RerankResult> read_results(const std::string& path);

}  // namespace lwr
