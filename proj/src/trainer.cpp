// Copyright (c) 2026 lwr authors
// SPDX-License-Identifier: Apache-2.0

#include "lwr/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <set>

#include "json.hpp"
#include "lwr/infer.hpp"
#include "lwr/metrics.hpp"

namespace lwr {

TrainConfig train_config_from_json(const std::string& json_text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(json_text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError(std::string("train config: invalid JSON: ") + e.what());
  }
  TrainConfig cfg;
  static const std::set<std::string> known = {
      "learning_rate", "weight_decay", "micro_batch", "accumulation", "epochs",
      "max_steps", "seed", "shuffle_enabled", "ensure_positive", "recompute_shortlists",
      "eval_every", "checkpoint_every"};
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (!known.count(it.key())) {
      throw ConfigError("train config: unknown field '" + it.key() + "'");
    }
  }
  if (j.contains("learning_rate")) cfg.learning_rate = j["learning_rate"].get<float>();
  if (j.contains("weight_decay")) cfg.weight_decay = j["weight_decay"].get<float>();
  if (j.contains("micro_batch")) cfg.micro_batch = j["micro_batch"].get<int>();
  if (j.contains("accumulation")) cfg.accumulation = j["accumulation"].get<int>();
  if (j.contains("epochs")) cfg.epochs = j["epochs"].get<int>();
  if (j.contains("max_steps")) cfg.max_steps = j["max_steps"].get<long long>();
  if (j.contains("seed")) cfg.seed = j["seed"].get<std::uint64_t>();
  if (j.contains("shuffle_enabled")) cfg.shuffle_enabled = j["shuffle_enabled"].get<bool>();
  if (j.contains("ensure_positive")) cfg.ensure_positive = j["ensure_positive"].get<bool>();
  if (j.contains("recompute_shortlists")) {
    cfg.recompute_shortlists = j["recompute_shortlists"].get<bool>();
  }
  if (j.contains("eval_every")) cfg.eval_every = j["eval_every"].get<int>();
  if (j.contains("checkpoint_every")) cfg.checkpoint_every = j["checkpoint_every"].get<int>();
  cfg.validate();
  return cfg;
}

std::string train_config_to_json(const TrainConfig& cfg) {
  nlohmann::json j;
  j["learning_rate"] = cfg.learning_rate;
  j["weight_decay"] = cfg.weight_decay;
  j["micro_batch"] = cfg.micro_batch;
  j["accumulation"] = cfg.accumulation;
  j["epochs"] = cfg.epochs;
  j["max_steps"] = cfg.max_steps;
  j["seed"] = cfg.seed;
  j["shuffle_enabled"] = cfg.shuffle_enabled;
  j["ensure_positive"] = cfg.ensure_positive;
  j["recompute_shortlists"] = cfg.recompute_shortlists;
  j["eval_every"] = cfg.eval_every;
  j["checkpoint_every"] = cfg.checkpoint_every;
  return j.dump(2);
}

namespace {

TrainSample finish_sample(const std::string& query_id,
                          std::vector<std::pair<std::string, RelevanceTier>> ranked, int K,
                          Rng& pad_rng) {
  TrainSample sample;
  sample.query_id = query_id;
  if (static_cast<int>(ranked.size()) > K) ranked.resize(static_cast<std::size_t>(K));
  for (const auto& [id, tier] : ranked) {
    sample.gallery_ids.push_back(id);
    sample.image_labels.push_back(tier == RelevanceTier::kPositive ? 1.0f : 0.0f);
    sample.image_filler.push_back(false);
  }
  // Short shortlist: pad with sampled negatives, fully masked from the loss.
  std::vector<std::string> negatives;
  for (const auto& [id, tier] : ranked) {
    if (tier != RelevanceTier::kPositive) negatives.push_back(id);
  }
  while (static_cast<int>(sample.gallery_ids.size()) < K) {
    if (negatives.empty()) {
      sample.gallery_ids.emplace_back();  // empty id = all-padding slot
    } else {
      sample.gallery_ids.push_back(
          negatives[static_cast<std::size_t>(pad_rng.next_below(negatives.size()))]);
    }
    sample.image_labels.push_back(0.0f);
    sample.image_filler.push_back(true);
  }
  return sample;
}

}  // namespace

TrainSample sample_from_manifest(const ManifestQuery& query, int K, Rng& pad_rng) {
  std::vector<std::pair<std::string, RelevanceTier>> ranked;
  ranked.reserve(query.gallery.size());
  for (const std::string& id : query.gallery) {
    auto it = query.relevance.find(id);
    ranked.emplace_back(id, it == query.relevance.end() ? RelevanceTier::kNegative : it->second);
  }
  return finish_sample(query.query_id, std::move(ranked), K, pad_rng);
}

TrainSample sample_training_list(const DescriptorBank& bank, const WorldTruth& truth,
                                 const std::vector<std::string>& pool_ids,
                                 const std::string& query_id, int K, Rng& pad_rng) {
  if (pool_ids.empty()) throw ConfigError("sample_training_list: empty split");
  auto git = bank.globals.find(query_id);
  if (git == bank.globals.end()) {
    throw ConfigError("sample_training_list: query '" + query_id + "' has no global descriptor");
  }
  ShortList list = global_topk(git->second, bank, K, query_id, &pool_ids);
  std::vector<std::pair<std::string, RelevanceTier>> ranked;
  for (const auto& [id, score] : list.entries) {
    ranked.emplace_back(id, truth.tier_for(query_id, id));
  }
  return finish_sample(query_id, std::move(ranked), K, pad_rng);
}

Trainer::Trainer(RerankerModel<float>& model, TrainConfig cfg)
    : model_(model), cfg_(cfg), rng_(Rng::derive(cfg.seed, 0x7EA1ULL)) {
  cfg_.validate();
  opt_state_.config.learning_rate = cfg_.learning_rate;
  opt_state_.config.weight_decay = cfg_.weight_decay;
  model_.for_each_param([&](const std::string& name, Mat<float>& m, ParamKind) {
    param_names_.push_back(name);
    param_ptrs_.push_back(&m);
  });
  std::vector<const Mat<float>*> views;
  for (Mat<float>* p : param_ptrs_) views.push_back(p);
  opt_state_.init(views);
  for (Mat<float>* p : param_ptrs_) grad_accum_.emplace_back(p->rows, p->cols);
}

void Trainer::zero_accum() {
  for (Mat<float>& g : grad_accum_) g.data.assign(g.data.size(), 0.0f);
  pending_micro_batches_ = 0;
}

StepOutcome Trainer::train_step(const std::vector<TrainSample>& micro_batch,
                                const DescriptorBank& bank) {
  if (micro_batch.empty()) throw ConfigError("train_step: empty micro-batch");
  StepOutcome outcome;
  const int K = model_.config.K;
  const int L = model_.config.L;

  std::vector<Mat<float>> batch_grads;
  for (Mat<float>* p : param_ptrs_) batch_grads.emplace_back(p->rows, p->cols);
  double loss_sum = 0.0;

  LocalDescriptorSet empty;
  empty.descriptors = Mat<float>(bank.L, bank.d);
  empty.valid_count = 0;

  for (const TrainSample& sample_in : micro_batch) {
    TrainSample sample = sample_in;
    if (static_cast<int>(sample.gallery_ids.size()) != K) {
      throw ShapeError("train_step: sample gallery size " +
                       std::to_string(sample.gallery_ids.size()) + " != model K " +
                       std::to_string(K));
    }
    if (cfg_.shuffle_enabled) {
      struct Entry {
        std::string id;
        float label;
        bool filler;
      };
      std::vector<Entry> entries;
      entries.reserve(sample.gallery_ids.size());
      for (std::size_t i = 0; i < sample.gallery_ids.size(); ++i) {
        entries.push_back({sample.gallery_ids[i], sample.image_labels[i],
                           static_cast<bool>(sample.image_filler[i])});
      }
      sample.permutation = shuffle_gallery(entries, rng_);
      for (std::size_t i = 0; i < entries.size(); ++i) {
        sample.gallery_ids[i] = entries[i].id;
        sample.image_labels[i] = entries[i].label;
        sample.image_filler[i] = entries[i].filler;
      }
    }

    const LocalDescriptorSet& query = bank.locals.at(sample.query_id);
    std::vector<const LocalDescriptorSet*> gallery;
    gallery.reserve(static_cast<std::size_t>(K));
    for (const std::string& id : sample.gallery_ids) {
      if (id.empty()) {
        gallery.push_back(&empty);
      } else {
        gallery.push_back(&bank.locals.at(id));
      }
    }

    Tape<float> tape;
    ForwardOnTape<float> fw =
        model_forward_on_tape(tape, model_, query, gallery, RunMode::kTrain, &rng_);

    // Broadcast image labels to all L+1 tokens; mask filler images entirely.
    const std::size_t M = fw.meta.size();
    std::vector<float> labels(M, 0.0f);
    std::vector<float> mask = make_loss_mask(fw.meta);
    for (std::size_t i = 0; i < M; ++i) {
      const TokenMeta& m = fw.meta[i];
      if (m.image_slot == 0) continue;
      const std::size_t gi = static_cast<std::size_t>(m.image_slot - 1);
      labels[i] = sample.image_labels[gi];
      if (sample.image_filler[gi]) mask[i] = 0.0f;
    }
    VarId loss = bce_with_logits(tape, fw.logits, labels, mask);
    const float loss_value = tape.value(loss).data[0];
    if (!is_finite(loss_value)) {
      std::cerr << "train_step: non-finite loss for query " << sample.query_id
                << "; micro-batch dropped, state unchanged\n";
      outcome.aborted = true;
      outcome.loss = loss_value;
      return outcome;
    }
    loss_sum += loss_value;
    tape.backward(loss);
    for (std::size_t p = 0; p < param_ptrs_.size(); ++p) {
      const Mat<float>& g = tape.grad(fw.registry.ids[p]);
      Mat<float>& acc = batch_grads[p];
      for (std::size_t i = 0; i < g.data.size(); ++i) acc.data[i] += g.data[i];
    }
  }

  const float inv_batch = 1.0f / static_cast<float>(micro_batch.size());
  for (std::size_t p = 0; p < grad_accum_.size(); ++p) {
    Mat<float>& acc = grad_accum_[p];
    const Mat<float>& g = batch_grads[p];
    for (std::size_t i = 0; i < g.data.size(); ++i) acc.data[i] += g.data[i] * inv_batch;
  }
  ++pending_micro_batches_;
  outcome.loss = static_cast<float>(loss_sum / static_cast<double>(micro_batch.size()));

  if (pending_micro_batches_ >= cfg_.accumulation) {
    const float inv_accum = 1.0f / static_cast<float>(pending_micro_batches_);
    for (Mat<float>& g : grad_accum_) {
      for (float& v : g.data) v *= inv_accum;
    }
    std::vector<const Mat<float>*> views;
    for (const Mat<float>& g : grad_accum_) views.push_back(&g);
    adamw_step(param_ptrs_, views, opt_state_);
    zero_accum();
    outcome.applied = true;
  }
  return outcome;
}

double baseline_map(const Manifest& manifest) {
  std::vector<RerankResult> identity;
  for (const ManifestQuery& q : manifest.queries) {
    RerankResult r;
    r.query_id = q.query_id;
    identity.push_back(std::move(r));  // empty head: pure global order
  }
  EvalReport report = evaluate(identity, manifest, Protocol::kMedium, {});
  return report.mean_ap;
}

double quick_eval_map(RerankerModel<float>& model, const DescriptorBank& bank,
                      const Manifest& manifest, int N) {
  const int K = model.config.K;
  if (N <= 0) N = K;
  std::vector<RerankResult> results;
  for (const ManifestQuery& q : manifest.queries) {
    std::vector<std::string> head = q.gallery;
    if (static_cast<int>(head.size()) > N) head.resize(static_cast<std::size_t>(N));
    results.push_back(sliding_rerank(model, bank, q.query_id, head, K, std::max(K / 2, 1),
                                     AggregatorMode::kSepToken));
  }
  EvalReport report = evaluate(results, manifest, Protocol::kMedium, {});
  return report.mean_ap;
}

TrainRunResult train(RerankerModel<float>& model, const DescriptorBank& bank,
                     const Manifest& train_manifest, const TrainConfig& cfg,
                     const Manifest* eval_manifest, const std::string& checkpoint_path,
                     Trainer* external_trainer) {
  cfg.validate();
  if (train_manifest.queries.empty()) throw ConfigError("train: empty train manifest");

  Trainer local_trainer(model, cfg);
  Trainer& trainer = external_trainer ? *external_trainer : local_trainer;
  Rng pad_rng(Rng::derive(cfg.seed, 0x9ADULL));

  // Shortlists are cached once per split (the manifest order). The recompute
  // flag is honored by rebuilding manifests upstream.
  std::vector<TrainSample> samples;
  samples.reserve(train_manifest.queries.size());
  for (const ManifestQuery& q : train_manifest.queries) {
    TrainSample s = sample_from_manifest(q, model.config.K, pad_rng);
    if (cfg.ensure_positive) {
      float total = 0.0f;
      for (float l : s.image_labels) total += l;
      if (total == 0.0f) continue;
    }
    samples.push_back(std::move(s));
  }
  if (samples.empty()) throw ConfigError("train: no usable training samples");

  TrainRunResult run;
  Rng order_rng(Rng::derive(cfg.seed, 0x0D8ULL));
  long long micro_steps = 0;
  // max_steps is an absolute optimizer-step budget; a resumed trainer may
  // already be at or past it.
  bool done = cfg.max_steps > 0 && trainer.optimizer_steps() >= cfg.max_steps;
  for (int epoch = 0; epoch < cfg.epochs && !done; ++epoch) {
    std::vector<int> order(samples.size());
    for (std::size_t i = 0; i < samples.size(); ++i) order[i] = static_cast<int>(i);
    for (std::size_t i = order.size(); i > 1; --i) {
      const std::size_t j = static_cast<std::size_t>(order_rng.next_below(i));
      std::swap(order[i - 1], order[j]);
    }
    for (std::size_t at = 0; at < order.size() && !done;) {
      std::vector<TrainSample> batch;
      for (int b = 0; b < cfg.micro_batch && at < order.size(); ++b, ++at) {
        batch.push_back(samples[static_cast<std::size_t>(order[at])]);
      }
      StepOutcome out = trainer.train_step(batch, bank);
      ++micro_steps;
      MetricsRecord rec;
      rec.step = micro_steps;
      rec.loss = out.loss;
      rec.lr = cfg.learning_rate;
      if (out.applied) {
        const long long opt_step = trainer.optimizer_steps();
        if (eval_manifest && cfg.eval_every > 0 && opt_step % cfg.eval_every == 0) {
          rec.eval_map = quick_eval_map(model, bank, *eval_manifest);
        }
        if (!checkpoint_path.empty() && cfg.checkpoint_every > 0 &&
            opt_step % cfg.checkpoint_every == 0) {
          save_checkpoint(model, checkpoint_path);
        }
        if (cfg.max_steps > 0 && opt_step >= cfg.max_steps) done = true;
      }
      run.metrics.push_back(rec);
    }
  }
  run.steps = trainer.optimizer_steps();
  if (!checkpoint_path.empty()) {
    CheckpointExtra extra;
    extra.step = trainer.optimizer_steps();
    OptimizerState<float>& st = trainer.optimizer_state();
    std::size_t idx = 0;
    model.for_each_param([&](const std::string& name, Mat<float>&, ParamKind) {
      extra.tensors.emplace_back("opt.m." + name, st.m[idx]);
      extra.tensors.emplace_back("opt.v." + name, st.v[idx]);
      ++idx;
    });
    save_checkpoint(model, checkpoint_path, &extra);
  }
  return run;
}

void write_metrics_log(const std::vector<MetricsRecord>& records, const std::string& path) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw ParseError("metrics log: cannot open " + path);
  for (const MetricsRecord& r : records) {
    nlohmann::json j;
    j["step"] = r.step;
    j["loss"] = r.loss;
    j["lr"] = r.lr;
    if (r.eval_map.has_value()) j["eval_mAP"] = *r.eval_map;
    os << j.dump() << "\n";
  }
}

}  // namespace lwr
