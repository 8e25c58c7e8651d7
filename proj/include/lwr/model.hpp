// Copyright (c) 2026 lwr authors
// SPDX-License-Identifier: Apache-2.0
//
// The re-ranker: linear projection (optional), dual positional tables, SEP
// embedding, pre-norm transformer blocks over the sparse pattern, and a
// per-token binary classifier head.

#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "lwr/attention.hpp"
#include "lwr/bank.hpp"
#include "lwr/common.hpp"
#include "lwr/mat.hpp"
#include "lwr/ops.hpp"
#include "lwr/rng.hpp"
#include "lwr/sequence.hpp"
#include "lwr/tape.hpp"

namespace lwr {

enum class RunMode { kTrain, kEval };

struct ModelConfig {
  int layers = 4;
  int hidden = 512;
  int intermediate = 2048;
  int heads = 8;
  int window_radius = 512;
  int max_context = 0;  // (L+1)(K+1)
  int L = 50;
  int K = 100;
  int descriptor_dim = 0;  // 0 means equal to hidden, no projection
  float dropout_rate = 0.1f;
  std::uint64_t seed = 1;
  bool use_projection = false;
  bool tie_global_projections = false;
  bool disable_global_attention = false;

  void validate() const {
    if (layers < 1 || hidden < 1 || intermediate < 1 || heads < 1) {
      throw ConfigError("model config: layers/hidden/intermediate/heads must be >= 1");
    }
    if (hidden % heads != 0) {
      throw ConfigError("model config: hidden " + std::to_string(hidden) +
                        " not divisible by heads " + std::to_string(heads));
    }
    if (max_context < sequence_length(L, K)) {
      throw ConfigError("model config: max_context " + std::to_string(max_context) +
                        " < (L+1)(K+1) = " + std::to_string(sequence_length(L, K)));
    }
    if (window_radius < 1) throw ConfigError("model config: window_radius must be >= 1");
    if (dropout_rate < 0.0f || dropout_rate >= 1.0f) {
      throw ConfigError("model config: dropout_rate must be in [0, 1)");
    }
  }
};

enum class ModelVariant { kTiny, kSmall, kBase };

// Published variants. Window radius is one-sided: half the two-sided
// local-attention window (1024 -> 512, 512 -> 256).
ModelConfig make_config(ModelVariant variant, int L = 50, int K = 100);
ModelVariant variant_from_name(const std::string& name);

enum class ParamKind { kWeight, kBias, kGain, kShift };

template <typename T>
struct LayerParams {
  AttentionLayerParams<T> attn;
  Mat<T> ln1_gain, ln1_shift;
  Mat<T> ln2_gain, ln2_shift;
  Mat<T> ff_w1, ff_b1;  // h x intermediate
  Mat<T> ff_w2, ff_b2;  // intermediate x h
};

struct TokenLogits {
  std::vector<float> logits;
  std::vector<TokenMeta> meta;
};

template <typename T>
struct RerankerModel {
  ModelConfig config;
  Mat<T> proj_w, proj_b;    // d x h, 1 x h (empty when no projection)
  Mat<T> seq_positions;     // max_context x h
  Mat<T> img_positions;     // (K+1) x h
  Mat<T> sep_embedding;     // 1 x h
  std::vector<LayerParams<T>> layers;
  Mat<T> final_ln_gain, final_ln_shift;
  Mat<T> cls_w, cls_b;      // h x 1, 1 x 1

  // Visits every trainable tensor in a fixed order. Tied global projections
  // are not separate parameters and are skipped.
  template <typename Fn>
  void for_each_param(Fn&& fn) {
    auto visit = [&](const std::string& name, Mat<T>& m, ParamKind kind) {
      if (m.size() > 0) fn(name, m, kind);
    };
    visit("proj.w", proj_w, ParamKind::kWeight);
    visit("proj.b", proj_b, ParamKind::kBias);
    visit("pos.seq", seq_positions, ParamKind::kWeight);
    visit("pos.img", img_positions, ParamKind::kWeight);
    visit("sep", sep_embedding, ParamKind::kWeight);
    for (std::size_t l = 0; l < layers.size(); ++l) {
      const std::string p = "layer" + std::to_string(l) + ".";
      LayerParams<T>& lp = layers[l];
      visit(p + "ln1.gain", lp.ln1_gain, ParamKind::kGain);
      visit(p + "ln1.shift", lp.ln1_shift, ParamKind::kShift);
      visit(p + "attn.wq", lp.attn.wq, ParamKind::kWeight);
      visit(p + "attn.bq", lp.attn.bq, ParamKind::kBias);
      visit(p + "attn.wk", lp.attn.wk, ParamKind::kWeight);
      visit(p + "attn.bk", lp.attn.bk, ParamKind::kBias);
      visit(p + "attn.wv", lp.attn.wv, ParamKind::kWeight);
      visit(p + "attn.bv", lp.attn.bv, ParamKind::kBias);
      visit(p + "attn.wqg", lp.attn.wqg, ParamKind::kWeight);
      visit(p + "attn.bqg", lp.attn.bqg, ParamKind::kBias);
      visit(p + "attn.wkg", lp.attn.wkg, ParamKind::kWeight);
      visit(p + "attn.bkg", lp.attn.bkg, ParamKind::kBias);
      visit(p + "attn.wvg", lp.attn.wvg, ParamKind::kWeight);
      visit(p + "attn.bvg", lp.attn.bvg, ParamKind::kBias);
      visit(p + "attn.wo", lp.attn.wo, ParamKind::kWeight);
      visit(p + "attn.bo", lp.attn.bo, ParamKind::kBias);
      visit(p + "ln2.gain", lp.ln2_gain, ParamKind::kGain);
      visit(p + "ln2.shift", lp.ln2_shift, ParamKind::kShift);
      visit(p + "ff.w1", lp.ff_w1, ParamKind::kWeight);
      visit(p + "ff.b1", lp.ff_b1, ParamKind::kBias);
      visit(p + "ff.w2", lp.ff_w2, ParamKind::kWeight);
      visit(p + "ff.b2", lp.ff_b2, ParamKind::kBias);
    }
    visit("final_ln.gain", final_ln_gain, ParamKind::kGain);
    visit("final_ln.shift", final_ln_shift, ParamKind::kShift);
    visit("cls.w", cls_w, ParamKind::kWeight);
    visit("cls.b", cls_b, ParamKind::kBias);
  }

  long long param_count() {
    long long n = 0;
    for_each_param([&](const std::string&, Mat<T>& m, ParamKind) {
      n += static_cast<long long>(m.size());
    });
    return n;
  }
};

// Truncated-normal(0, 0.02) weights, zero biases/shifts, unit gains.
// Bit-deterministic given cfg.seed.
template <typename T>
RerankerModel<T> init_model(const ModelConfig& cfg) {
  cfg.validate();
  RerankerModel<T> model;
  model.config = cfg;
  const int h = cfg.hidden;
  const int d = cfg.descriptor_dim > 0 ? cfg.descriptor_dim : h;
  const bool project = cfg.use_projection || d != h;
  if (project) {
    model.proj_w = Mat<T>(d, h);
    model.proj_b = Mat<T>(1, h);
  }
  model.seq_positions = Mat<T>(cfg.max_context, h);
  model.img_positions = Mat<T>(cfg.K + 1, h);
  model.sep_embedding = Mat<T>(1, h);
  model.layers.resize(static_cast<std::size_t>(cfg.layers));
  for (LayerParams<T>& lp : model.layers) {
    lp.attn.heads = cfg.heads;
    lp.attn.wq = Mat<T>(h, h);
    lp.attn.bq = Mat<T>(1, h);
    lp.attn.wk = Mat<T>(h, h);
    lp.attn.bk = Mat<T>(1, h);
    lp.attn.wv = Mat<T>(h, h);
    lp.attn.bv = Mat<T>(1, h);
    if (!cfg.tie_global_projections) {
      lp.attn.wqg = Mat<T>(h, h);
      lp.attn.bqg = Mat<T>(1, h);
      lp.attn.wkg = Mat<T>(h, h);
      lp.attn.bkg = Mat<T>(1, h);
      lp.attn.wvg = Mat<T>(h, h);
      lp.attn.bvg = Mat<T>(1, h);
    }
    lp.attn.wo = Mat<T>(h, h);
    lp.attn.bo = Mat<T>(1, h);
    lp.ln1_gain = Mat<T>(1, h);
    lp.ln1_shift = Mat<T>(1, h);
    lp.ln2_gain = Mat<T>(1, h);
    lp.ln2_shift = Mat<T>(1, h);
    lp.ff_w1 = Mat<T>(h, cfg.intermediate);
    lp.ff_b1 = Mat<T>(1, cfg.intermediate);
    lp.ff_w2 = Mat<T>(cfg.intermediate, h);
    lp.ff_b2 = Mat<T>(1, h);
  }
  model.final_ln_gain = Mat<T>(1, h);
  model.final_ln_shift = Mat<T>(1, h);
  model.cls_w = Mat<T>(h, 1);
  model.cls_b = Mat<T>(1, 1);

  Rng rng(Rng::derive(cfg.seed, 0xC0FFEEULL));
  model.for_each_param([&](const std::string&, Mat<T>& m, ParamKind kind) {
    switch (kind) {
      case ParamKind::kWeight:
        for (T& v : m.data) v = T(rng.next_trunc_normal(0.02));
        break;
      case ParamKind::kGain:
        for (T& v : m.data) v = T(1);
        break;
      case ParamKind::kBias:
      case ParamKind::kShift:
        break;  // zero-initialized
    }
  });
  return model;
}

// On-tape forward pieces -----------------------------------------------------

template <typename T>
struct ParamRegistry {
  std::vector<std::string> names;
  std::vector<Mat<T>*> mats;
  std::vector<VarId> ids;

  VarId id_of(const std::string& name) const {
    for (std::size_t i = 0; i < names.size(); ++i) {
      if (names[i] == name) return ids[i];
    }
    throw ConfigError("param registry: unknown name " + name);
  }
};

// Registers every parameter tensor as a tape leaf.
template <typename T>
ParamRegistry<T> register_params(Tape<T>& tape, RerankerModel<T>& model) {
  ParamRegistry<T> reg;
  model.for_each_param([&](const std::string& name, Mat<T>& m, ParamKind) {
    reg.names.push_back(name);
    reg.mats.push_back(&m);
    reg.ids.push_back(tape.leaf(m));
  });
  return reg;
}

// Pre-norm blocks + final norm + classifier over an assembled token matrix.
template <typename T>
VarId run_blocks_on_tape(Tape<T>& tape, RerankerModel<T>& model, const ParamRegistry<T>& reg,
                         VarId tokens, const AttentionPattern& pattern, RunMode mode,
                         Rng* dropout_rng, AttnWorkspaceStats* stats = nullptr) {
  const T rate = mode == RunMode::kTrain ? T(model.config.dropout_rate) : T(0);
  Rng* rng = rate > T(0) ? dropout_rng : nullptr;
  if (rate > T(0) && rng == nullptr) {
    throw ConfigError("forward: train mode with dropout requires an RNG");
  }
  VarId x = tokens;
  const T eps = T(1e-5);
  for (std::size_t l = 0; l < model.layers.size(); ++l) {
    const std::string p = "layer" + std::to_string(l) + ".";
    const bool tied = model.config.tie_global_projections;
    VarId a = layer_norm(tape, x, reg.id_of(p + "ln1.gain"), reg.id_of(p + "ln1.shift"), eps);
    VarId q = linear(tape, a, reg.id_of(p + "attn.wq"), reg.id_of(p + "attn.bq"));
    VarId k = linear(tape, a, reg.id_of(p + "attn.wk"), reg.id_of(p + "attn.bk"));
    VarId v = linear(tape, a, reg.id_of(p + "attn.wv"), reg.id_of(p + "attn.bv"));
    VarId qg = tied ? q : linear(tape, a, reg.id_of(p + "attn.wqg"), reg.id_of(p + "attn.bqg"));
    VarId kg = tied ? k : linear(tape, a, reg.id_of(p + "attn.wkg"), reg.id_of(p + "attn.bkg"));
    VarId vg = tied ? v : linear(tape, a, reg.id_of(p + "attn.wvg"), reg.id_of(p + "attn.bvg"));
    VarId att = sparse_attention(tape, q, k, v, qg, kg, vg, pattern, model.config.heads, rate,
                                 rng, stats);
    att = linear(tape, att, reg.id_of(p + "attn.wo"), reg.id_of(p + "attn.bo"));
    x = add(tape, x, att);
    VarId b = layer_norm(tape, x, reg.id_of(p + "ln2.gain"), reg.id_of(p + "ln2.shift"), eps);
    VarId f = linear(tape, b, reg.id_of(p + "ff.w1"), reg.id_of(p + "ff.b1"));
    f = gelu(tape, f);
    if (rate > T(0)) f = dropout(tape, f, rate, *rng);
    f = linear(tape, f, reg.id_of(p + "ff.w2"), reg.id_of(p + "ff.b2"));
    x = add(tape, x, f);
  }
  x = layer_norm(tape, x, reg.id_of("final_ln.gain"), reg.id_of("final_ln.shift"), eps);
  return linear(tape, x, reg.id_of("cls.w"), reg.id_of("cls.b"));
}

template <typename T>
AssemblyParams<T> assembly_params_from_registry(const RerankerModel<T>& model,
                                                const ParamRegistry<T>& reg) {
  AssemblyParams<T> p;
  if (model.proj_w.size() > 0) {
    p.projection_weight = reg.id_of("proj.w");
    p.projection_bias = reg.id_of("proj.b");
  }
  p.sequence_positions = reg.id_of("pos.seq");
  p.image_positions = reg.id_of("pos.img");
  p.sep_embedding = reg.id_of("sep");
  return p;
}

template <typename T>
struct ForwardOnTape {
  VarId logits = -1;  // M x 1
  std::vector<TokenMeta> meta;
  AttentionPattern pattern;
  ParamRegistry<T> registry;
};

// Full differentiable pass: assemble -> blocks -> per-token logits.
template <typename T>
ForwardOnTape<T> model_forward_on_tape(Tape<T>& tape, RerankerModel<T>& model,
                                       const LocalDescriptorSet& query,
                                       const std::vector<const LocalDescriptorSet*>& gallery,
                                       RunMode mode, Rng* dropout_rng = nullptr,
                                       AttnWorkspaceStats* stats = nullptr) {
  if (static_cast<int>(gallery.size()) != model.config.K) {
    throw ShapeError("forward: gallery size " + std::to_string(gallery.size()) +
                     " != model K " + std::to_string(model.config.K));
  }
  ForwardOnTape<T> out;
  out.registry = register_params(tape, model);
  AssemblyParams<T> ap = assembly_params_from_registry(model, out.registry);
  VarId tokens = assemble_on_tape(tape, query, gallery, ap, &out.meta);
  out.pattern = build_pattern(out.meta, model.config.window_radius);
  if (model.config.disable_global_attention) out.pattern = without_globals(out.pattern);
  out.logits = run_blocks_on_tape(tape, model, out.registry, tokens, out.pattern, mode,
                                  dropout_rng, stats);
  return out;
}

// Spec-facing eval forward over an already-assembled sequence.
template <typename T>
TokenLogits forward(RerankerModel<T>& model, const TokenSequence<T>& seq,
                    const AttentionPattern& pattern, RunMode mode, Rng* dropout_rng = nullptr) {
  if (seq.embeddings.cols != model.config.hidden) {
    throw ShapeError("forward: sequence hidden " + std::to_string(seq.embeddings.cols) +
                     " != model hidden " + std::to_string(model.config.hidden));
  }
  if (pattern.M != seq.embeddings.rows) {
    throw ShapeError("forward: pattern M " + std::to_string(pattern.M) + " != sequence rows " +
                     std::to_string(seq.embeddings.rows));
  }
  Tape<T> tape;
  ParamRegistry<T> reg = register_params(tape, model);
  VarId tokens = tape.leaf(seq.embeddings);
  VarId logits = run_blocks_on_tape(tape, model, reg, tokens, pattern, mode, dropout_rng);
  TokenLogits out;
  out.meta = seq.meta;
  const Mat<T>& lv = tape.value(logits);
  out.logits.resize(lv.data.size());
  for (std::size_t i = 0; i < lv.data.size(); ++i) out.logits[i] = static_cast<float>(lv.data[i]);
  return out;
}

// Convenience eval pass from descriptor sets (fresh tape, no grads kept).
template <typename T>
TokenLogits forward_eval(RerankerModel<T>& model, const LocalDescriptorSet& query,
                         const std::vector<const LocalDescriptorSet*>& gallery) {
  Tape<T> tape;
  ForwardOnTape<T> f = model_forward_on_tape(tape, model, query, gallery, RunMode::kEval);
  TokenLogits out;
  out.meta = std::move(f.meta);
  const Mat<T>& lv = tape.value(f.logits);
  out.logits.resize(lv.data.size());
  for (std::size_t i = 0; i < lv.data.size(); ++i) out.logits[i] = static_cast<float>(lv.data[i]);
  return out;
}

// Checkpoint I/O ("LCRM", little-endian, bit-exact round-trip). Optimizer
// moments ride along as extra "opt." tensors so training can resume.
struct CheckpointExtra {
  std::vector<std::pair<std::string, Mat<float>>> tensors;
  long long step = 0;
};

void save_checkpoint(RerankerModel<float>& model, const std::string& path,
                     const CheckpointExtra* extra = nullptr);
RerankerModel<float> load_checkpoint(const std::string& path, CheckpointExtra* extra = nullptr);

std::string model_config_to_json(const ModelConfig& cfg);
ModelConfig model_config_from_json(const std::string& json_text);

}  // namespace lwr
