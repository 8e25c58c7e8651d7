// Copyright (c) 2026 lwr authors
// SPDX-License-Identifier: Apache-2.0

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <map>
#include <set>

#include "doctest.h"
#include "lwr/infer.hpp"

using namespace lwr;

namespace {

float sigmoid(float z) { return 1.0f / (1.0f + std::exp(-z)); }

// L=2, K=2 fixture: image1 token logits (0, 2, 4), image2 (-4, -2, 0).
TokenLogits fixture_logits() {
  TokenLogits out;
  out.meta = make_token_meta(2, 2, {2, 2, 2});
  out.logits.assign(out.meta.size(), 0.0f);
  const std::vector<float> img1 = {0.0f, 2.0f, 4.0f};
  const std::vector<float> img2 = {-4.0f, -2.0f, 0.0f};
  for (int r = 0; r < 3; ++r) {
    out.logits[static_cast<std::size_t>(3 + r)] = img1[static_cast<std::size_t>(r)];
    out.logits[static_cast<std::size_t>(6 + r)] = img2[static_cast<std::size_t>(r)];
  }
  return out;
}

// Independent schedule simulation, written plainly over explicit lists.
std::vector<std::string> reference_sliding(const std::vector<std::string>& gallery, int K, int S,
                                           const std::map<std::string, float>& score) {
  std::vector<std::string> work = gallery;
  const int N = static_cast<int>(gallery.size());
  int start = N - K;
  while (true) {
    std::vector<std::string> window(work.begin() + start, work.begin() + start + K);
    std::stable_sort(window.begin(), window.end(), [&](const std::string& a, const std::string& b) {
      return score.at(a) > score.at(b);
    });
    std::copy(window.begin(), window.end(), work.begin() + start);
    if (start == 0) break;
    start = std::max(0, start - S);
  }
  return work;
}

}  // namespace

TEST_CASE("aggregate: constant logits give sigma(z) under every mode") {
  TokenLogits logits;
  logits.meta = make_token_meta(3, 2, {3, 3, 3});
  logits.logits.assign(logits.meta.size(), 1.5f);
  for (AggregatorMode mode :
       {AggregatorMode::kMeanTokens, AggregatorMode::kFirstToken, AggregatorMode::kSepToken}) {
    const AggregateResult r = aggregate(logits, mode);
    REQUIRE(r.scores.size() == 2);
    for (float s : r.scores) CHECK(s == doctest::Approx(sigmoid(1.5f)));
  }
}

TEST_CASE("aggregate: hand-built fixture, values from direct sigmoid arithmetic") {
  const TokenLogits logits = fixture_logits();

  const AggregateResult mean = aggregate(logits, AggregatorMode::kMeanTokens);
  // (sigma(0)+sigma(2)+sigma(4))/3 and (sigma(-4)+sigma(-2)+sigma(0))/3.
  CHECK(mean.scores[0] == doctest::Approx(0.7876036).epsilon(1e-5));
  CHECK(mean.scores[1] == doctest::Approx(0.2123964).epsilon(1e-5));

  const AggregateResult first = aggregate(logits, AggregatorMode::kFirstToken);
  CHECK(first.scores[0] == doctest::Approx(0.5).epsilon(1e-5));
  CHECK(first.scores[1] == doctest::Approx(0.0179862).epsilon(1e-4));

  const AggregateResult sep = aggregate(logits, AggregatorMode::kSepToken);
  CHECK(sep.scores[0] == doctest::Approx(0.9820138).epsilon(1e-5));
  CHECK(sep.scores[1] == doctest::Approx(0.5).epsilon(1e-5));

  for (const auto& agg : {mean, first, sep}) {
    for (float s : agg.scores) {
      CHECK(s > 0.0f);
      CHECK(s < 1.0f);
    }
  }
}

TEST_CASE("aggregate: fully padded image scores 0 with a flag") {
  TokenLogits logits;
  logits.meta = make_token_meta(2, 2, {2, 2, 0});
  logits.logits.assign(logits.meta.size(), 3.0f);
  const AggregateResult r = aggregate(logits, AggregatorMode::kSepToken);
  CHECK(r.defined[0]);
  CHECK_FALSE(r.defined[1]);
  CHECK(r.scores[1] == 0.0f);
}

TEST_CASE("aggregator names round-trip; unknown rejected") {
  CHECK(aggregator_from_name("sep") == AggregatorMode::kSepToken);
  CHECK(aggregator_name(AggregatorMode::kFirstToken) == "first");
  CHECK_THROWS_AS(aggregator_from_name("median"), ConfigError);
}

TEST_CASE("window_schedule: published example, degenerate, arithmetic") {
  using W = std::vector<std::pair<int, int>>;
  CHECK(window_schedule(8, 4, 2) == W{{4, 8}, {2, 6}, {0, 4}});
  CHECK(window_schedule(4, 4, 2) == W{{0, 4}});
  const W big = window_schedule(400, 100, 50);
  CHECK(big.size() == 7);
  CHECK(big.front() == std::pair<int, int>(300, 400));
  CHECK(big.back() == std::pair<int, int>(0, 100));
  CHECK_THROWS_AS(window_schedule(8, 4, 5), ConfigError);   // S > K
  CHECK_THROWS_AS(window_schedule(4, 8, 2), ConfigError);   // K > N
  CHECK_THROWS_AS(window_schedule(8, 4, 0), ConfigError);
}

TEST_CASE("window_schedule: coverage and single finalization, N <= 24 exhaustive") {
  for (int N = 1; N <= 24; ++N) {
    for (int K = 1; K <= N; ++K) {
      for (int S = 1; S <= K; ++S) {
        const auto windows = window_schedule(N, K, S);
        // Union covers [0, N).
        std::vector<int> covered(static_cast<std::size_t>(N), 0);
        for (const auto& [s, e] : windows) {
          REQUIRE(s >= 0);
          REQUIRE(e <= N);
          REQUIRE(e - s == K);
          for (int i = s; i < e; ++i) covered[static_cast<std::size_t>(i)]++;
        }
        for (int i = 0; i < N; ++i) REQUIRE(covered[static_cast<std::size_t>(i)] >= 1);
        // Finalized spans: window i owns [e_{i+1}, e_i), final window owns all.
        std::vector<int> finalized(static_cast<std::size_t>(N), 0);
        for (std::size_t w = 0; w < windows.size(); ++w) {
          const int hi = windows[w].second;
          const int lo = w + 1 < windows.size() ? windows[w + 1].second : 0;
          for (int i = lo; i < hi; ++i) finalized[static_cast<std::size_t>(i)]++;
        }
        for (int i = 0; i < N; ++i) REQUIRE(finalized[static_cast<std::size_t>(i)] == 1);
      }
    }
  }
}

TEST_CASE("sliding_rerank: N=K equals a single sorted pass") {
  const std::vector<std::string> gallery = {"a", "b", "c", "d"};
  const std::map<std::string, float> score = {{"a", 0.1f}, {"b", 0.9f}, {"c", 0.5f}, {"d", 0.3f}};
  WindowScorer scorer = [&](const std::vector<std::string>& ids) {
    std::vector<float> out;
    for (const auto& id : ids) out.push_back(score.at(id));
    return out;
  };
  const RerankResult r = sliding_rerank_with_scorer("q", gallery, 4, 2, scorer);
  REQUIRE(r.window_log.size() == 1);
  CHECK(r.entries[0].first == "b");
  CHECK(r.entries[1].first == "c");
  CHECK(r.entries[2].first == "d");
  CHECK(r.entries[3].first == "a");
  // Scores sorted descending, single pass.
  for (std::size_t i = 0; i + 1 < r.entries.size(); ++i) {
    CHECK(r.entries[i].second >= r.entries[i + 1].second);
  }
}

TEST_CASE("sliding_rerank: monotone stub is a fixed point") {
  std::vector<std::string> gallery;
  std::map<std::string, float> score;
  for (int i = 0; i < 12; ++i) {
    gallery.push_back("g" + std::to_string(i));
    score[gallery.back()] = -static_cast<float>(i);
  }
  WindowScorer scorer = [&](const std::vector<std::string>& ids) {
    std::vector<float> out;
    for (const auto& id : ids) out.push_back(score.at(id));
    return out;
  };
  const RerankResult r = sliding_rerank_with_scorer("q", gallery, 4, 2, scorer);
  for (std::size_t i = 0; i < gallery.size(); ++i) CHECK(r.entries[i].first == gallery[i]);
}

TEST_CASE("sliding_rerank: matches the independent simulation on all 2^8 relevance maps") {
  const int N = 8, K = 4, S = 2;
  std::vector<std::string> gallery;
  for (int i = 0; i < N; ++i) gallery.push_back("g" + std::to_string(i));
  for (int bits = 0; bits < (1 << N); ++bits) {
    std::map<std::string, float> score;
    int positives = 0;
    for (int i = 0; i < N; ++i) {
      const bool rel = (bits >> i) & 1;
      score[gallery[static_cast<std::size_t>(i)]] = rel ? 1.0f : 0.0f;
      positives += rel ? 1 : 0;
    }
    WindowScorer scorer = [&](const std::vector<std::string>& ids) {
      std::vector<float> out;
      for (const auto& id : ids) out.push_back(score.at(id));
      return out;
    };
    const RerankResult got = sliding_rerank_with_scorer("q", gallery, K, S, scorer);
    const std::vector<std::string> want = reference_sliding(gallery, K, S, score);
    REQUIRE(got.entries.size() == want.size());
    for (std::size_t i = 0; i < want.size(); ++i) {
      REQUIRE(got.entries[i].first == want[i]);
    }
    // A single positive always bubbles to the top.
    if (positives == 1) CHECK(score.at(got.entries[0].first) == 1.0f);
    // Positives never move down relative to their start.
    for (int i = 0; i < N; ++i) {
      if (score.at(gallery[static_cast<std::size_t>(i)]) != 1.0f) continue;
      for (int j = 0; j < N; ++j) {
        if (got.entries[static_cast<std::size_t>(j)].first == gallery[static_cast<std::size_t>(i)]) {
          CHECK(j <= i);
        }
      }
    }
    // Sufficient condition for global correctness: no non-final window ever
    // holds more than K - S positives while positives remain unfinished.
    {
      std::vector<std::string> work = gallery;
      bool safe = true;
      const auto windows = window_schedule(N, K, S);
      for (std::size_t w = 0; w + 1 < windows.size() && safe; ++w) {
        const auto [s, e] = windows[w];
        std::vector<std::string> window(work.begin() + s, work.begin() + e);
        int in_window = 0;
        for (const auto& id : window) in_window += score.at(id) == 1.0f ? 1 : 0;
        if (in_window > K - S) safe = false;
        std::stable_sort(window.begin(), window.end(),
                         [&](const std::string& a, const std::string& b) {
                           return score.at(a) > score.at(b);
                         });
        std::copy(window.begin(), window.end(), work.begin() + s);
      }
      if (safe && positives <= K - S) {
        for (int i = 0; i < positives; ++i) {
          CHECK(score.at(got.entries[static_cast<std::size_t>(i)].first) == 1.0f);
        }
      }
    }
  }
}

TEST_CASE("sliding_rerank: overwrite mode compares raw scores globally") {
  // Position-dependent stub: the same id scores higher in earlier windows,
  // so overwrite mode (last write wins) and bubble-up mode diverge.
  std::vector<std::string> gallery;
  for (int i = 0; i < 6; ++i) gallery.push_back("g" + std::to_string(i));
  int call = 0;
  WindowScorer scorer = [&](const std::vector<std::string>& ids) {
    ++call;
    std::vector<float> out;
    for (std::size_t i = 0; i < ids.size(); ++i) {
      out.push_back(static_cast<float>(call) + static_cast<float>(ids.size() - i) * 0.01f);
    }
    return out;
  };
  const RerankResult overwrite = sliding_rerank_with_scorer("q", gallery, 3, 1, scorer, true);
  REQUIRE(overwrite.entries.size() == 6);
  // Later (earlier-window) passes have higher raw scores, so the head of the
  // list is dominated by the final window's items.
  CHECK(overwrite.entries[0].second > overwrite.entries[5].second);
}

TEST_CASE("results: JSONL round-trip") {
  RerankResult r;
  r.query_id = "q1";
  r.entries = {{"a", 0.9f}, {"b", 0.4f}};
  r.window_log = {{4, 8}, {0, 4}};
  r.easy_removed_from_db = true;
  const std::string path =
      (std::filesystem::temp_directory_path() / "lwr_results_test.jsonl").string();
  write_results({r}, path);
  const auto back = read_results(path);
  REQUIRE(back.size() == 1);
  CHECK(back[0].query_id == "q1");
  CHECK(back[0].entries == r.entries);
  CHECK(back[0].window_log == r.window_log);
  CHECK(back[0].easy_removed_from_db);
  std::filesystem::remove(path);
}
