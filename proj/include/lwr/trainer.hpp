// Copyright (c) 2026 lwr authors
// SPDX-License-Identifier: Apache-2.0
//
// List-wise training: shortlist samples from global search, gallery-shuffled
// batches, masked BCE over gallery tokens, gradient accumulation, AdamW.

#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "lwr/adamw.hpp"
#include "lwr/bank.hpp"
#include "lwr/manifest.hpp"
#include "lwr/model.hpp"
#include "lwr/synth.hpp"

namespace lwr {

struct TrainSample {
  std::string query_id;
  std::vector<std::string> gallery_ids;  // length K
  std::vector<float> image_labels;       // 1 for positive images, else 0
  std::vector<bool> image_filler;        // padding images, fully loss-masked
  std::vector<int> permutation;          // last applied gallery permutation
};

struct TrainConfig {
  float learning_rate = 5e-5f;
  float weight_decay = 0.0f;  // disabled
  int micro_batch = 32;
  int accumulation = 4;
  int epochs = 1;
  long long max_steps = 0;  // 0 = unlimited
  std::uint64_t seed = 1;
  bool shuffle_enabled = true;
  bool ensure_positive = false;
  bool recompute_shortlists = false;  // default: cached once per split
  int eval_every = 0;                 // optimizer steps; 0 = never
  int checkpoint_every = 0;

  void validate() const {
    if (learning_rate <= 0.0f) throw ConfigError("train config: learning rate must be positive");
    if (weight_decay < 0.0f) throw ConfigError("train config: weight decay must be >= 0");
    if (micro_batch < 1 || accumulation < 1 || epochs < 1) {
      throw ConfigError("train config: micro_batch/accumulation/epochs must be >= 1");
    }
  }
};

TrainConfig train_config_from_json(const std::string& json_text);
std::string train_config_to_json(const TrainConfig& cfg);

// Builds one training sample: gallery = the query's cached global shortlist
// truncated to K, padded with sampled negatives (loss-masked) when short.
TrainSample sample_from_manifest(const ManifestQuery& query, int K, Rng& pad_rng);

// The same sample derived from scratch: exact global top-K over `pool_ids`
// excluding the query. Used by the recompute path and as the sampling oracle.
TrainSample sample_training_list(const DescriptorBank& bank, const WorldTruth& truth,
                                 const std::vector<std::string>& pool_ids,
                                 const std::string& query_id, int K, Rng& pad_rng);

struct StepOutcome {
  float loss = 0.0f;
  bool applied = false;    // optimizer stepped on this call
  bool aborted = false;    // non-finite loss; state unchanged
};

struct MetricsRecord {
  long long step = 0;
  double loss = 0.0;
  double lr = 0.0;
  std::optional<double> eval_map;
};

class Trainer {
 public:
  Trainer(RerankerModel<float>& model, TrainConfig cfg);

  // One micro-batch: forward/backward per sample, gradients averaged over the
  // batch and accumulated; the optimizer steps once per `accumulation` calls.
  StepOutcome train_step(const std::vector<TrainSample>& micro_batch,
                         const DescriptorBank& bank);

  long long optimizer_steps() const { return opt_state_.step; }
  OptimizerState<float>& optimizer_state() { return opt_state_; }
  Rng& rng() { return rng_; }

 private:
  RerankerModel<float>& model_;
  TrainConfig cfg_;
  OptimizerState<float> opt_state_;
  std::vector<Mat<float>*> param_ptrs_;
  std::vector<std::string> param_names_;
  std::vector<Mat<float>> grad_accum_;
  int pending_micro_batches_ = 0;
  Rng rng_;

  void zero_accum();
};

struct TrainRunResult {
  std::vector<MetricsRecord> metrics;
  long long steps = 0;
};

// Epoch loop over all manifest queries in seeded random order. When
// eval_manifest is provided and cfg.eval_every > 0, logs mAP snapshots.
// Checkpoints land in checkpoint_path when non-empty.
TrainRunResult train(RerankerModel<float>& model, const DescriptorBank& bank,
                     const Manifest& train_manifest, const TrainConfig& cfg,
                     const Manifest* eval_manifest = nullptr,
                     const std::string& checkpoint_path = std::string(),
                     Trainer* external_trainer = nullptr);

// Mean AP of rerank-once over the manifest's top-K shortlists (MEDIUM).
double quick_eval_map(RerankerModel<float>& model, const DescriptorBank& bank,
                      const Manifest& manifest, int N = 0);

// mAP of the manifest's own gallery order (the global-retrieval baseline).
double baseline_map(const Manifest& manifest);

void write_metrics_log(const std::vector<MetricsRecord>& records, const std::string& path);

}  // namespace lwr
