// Copyright (c) 2026 lwr authors
// SPDX-License-Identifier: Apache-2.0
//
// Token sequence layout: [query tokens, SEP, gallery_1 tokens, SEP, ...,
// gallery_K tokens, SEP], M = (L+1)(K+1) tokens total. Slot 0 is the query.

#pragma once

#include <vector>

#include "lwr/bank.hpp"
#include "lwr/common.hpp"
#include "lwr/mat.hpp"
#include "lwr/ops.hpp"
#include "lwr/rng.hpp"
#include "lwr/tape.hpp"

namespace lwr {

enum class TokenRole : std::uint8_t { kQuery, kGallery, kSep };

struct TokenMeta {
  TokenRole role = TokenRole::kGallery;
  int image_slot = 0;          // 0 = query, 1..K = gallery
  int within_image_index = 0;  // 0..L-1 descriptors, L = the SEP
  bool is_padding = false;
};

inline int sequence_length(int L, int K) { return (L + 1) * (K + 1); }

// Builds the per-token metadata for a (L, K) layout given how many rows of
// each image are valid. valid_counts has K+1 entries, query first.
std::vector<TokenMeta> make_token_meta(int L, int K, const std::vector<int>& valid_counts);

// 1 exactly on non-padding gallery tokens and gallery SEP tokens.
std::vector<float> make_loss_mask(const std::vector<TokenMeta>& meta);

template <typename T>
struct TokenSequence {
  Mat<T> embeddings;  // M x h
  std::vector<TokenMeta> meta;
  std::vector<float> loss_mask;
  int L = 0;
  int K = 0;
};

// Inputs to on-tape assembly. The projection is optional: id < 0 means the
// descriptors are used as-is (requires d == h).
template <typename T>
struct AssemblyParams {
  VarId projection_weight = -1;  // d x h
  VarId projection_bias = -1;    // 1 x h
  VarId sequence_positions = -1; // M x h
  VarId image_positions = -1;    // (K+1) x h
  VarId sep_embedding = -1;      // 1 x h
};

// Stacks descriptors into the M x d token matrix (zero rows for SEP and
// padding) and returns the metadata. Shared by the tape path and tests.
template <typename T>
Mat<T> stack_descriptor_rows(const LocalDescriptorSet& query,
                             const std::vector<const LocalDescriptorSet*>& gallery,
                             std::vector<TokenMeta>* meta_out) {
  const int L = query.capacity();
  const int K = static_cast<int>(gallery.size());
  const int d = query.dim();
  for (const LocalDescriptorSet* g : gallery) {
    if (g->capacity() != L || g->dim() != d) {
      throw ShapeError("assemble: descriptor set " + g->image_id + " has shape " +
                       g->descriptors.shape_str() + ", query has " +
                       query.descriptors.shape_str());
    }
  }
  std::vector<int> valid(static_cast<std::size_t>(K) + 1);
  valid[0] = query.valid_count;
  for (int i = 0; i < K; ++i) valid[static_cast<std::size_t>(i) + 1] = gallery[i]->valid_count;
  std::vector<TokenMeta> meta = make_token_meta(L, K, valid);

  const int M = sequence_length(L, K);
  Mat<T> rows(M, d);
  auto copy_image = [&](const LocalDescriptorSet& set, int slot) {
    const int base = slot * (L + 1);
    for (int r = 0; r < set.valid_count; ++r) {
      const float* src = set.descriptors.row_ptr(r);
      T* dst = rows.row_ptr(base + r);
      for (int c = 0; c < d; ++c) dst[c] = T(src[c]);
    }
  };
  copy_image(query, 0);
  for (int i = 0; i < K; ++i) copy_image(*gallery[i], i + 1);
  if (meta_out) *meta_out = std::move(meta);
  return rows;
}

// On-tape assembly: token i = proj(descriptor_i) + sep (for SEP rows)
//                          + sequence_positions[i] + image_positions[slot(i)].
// Padding rows contribute a zero descriptor but still receive positions.
template <typename T>
VarId assemble_on_tape(Tape<T>& tape, const LocalDescriptorSet& query,
                       const std::vector<const LocalDescriptorSet*>& gallery,
                       const AssemblyParams<T>& params, std::vector<TokenMeta>* meta_out) {
  std::vector<TokenMeta> meta;
  Mat<T> rows = stack_descriptor_rows<T>(query, gallery, &meta);
  const int M = rows.rows;

  VarId tokens;
  if (params.projection_weight >= 0) {
    VarId raw = tape.leaf(std::move(rows));
    tokens = linear(tape, raw, params.projection_weight, params.projection_bias);
  } else {
    const int h = tape.value(params.sequence_positions).cols;
    if (rows.cols != h) {
      throw ShapeError("assemble: descriptor dim " + std::to_string(rows.cols) +
                       " != hidden " + std::to_string(h) + " and no projection configured");
    }
    tokens = tape.leaf(std::move(rows));
  }

  std::vector<int> sep_rows;
  std::vector<int> slot_of_token(static_cast<std::size_t>(M));
  std::vector<int> seq_idx(static_cast<std::size_t>(M));
  for (int i = 0; i < M; ++i) {
    if (meta[static_cast<std::size_t>(i)].role == TokenRole::kSep) sep_rows.push_back(i);
    slot_of_token[static_cast<std::size_t>(i)] = meta[static_cast<std::size_t>(i)].image_slot;
    seq_idx[static_cast<std::size_t>(i)] = i;
  }
  tokens = add_to_rows(tape, tokens, sep_rows, params.sep_embedding);

  const Mat<T>& seq_table = tape.value(params.sequence_positions);
  if (seq_table.rows < M) {
    throw ShapeError("assemble: sequence-position table has " + std::to_string(seq_table.rows) +
                     " rows, sequence needs " + std::to_string(M));
  }
  tokens = add(tape, tokens, gather_rows(tape, params.sequence_positions, seq_idx));
  tokens = add(tape, tokens, gather_rows(tape, params.image_positions, slot_of_token));

  if (meta_out) *meta_out = std::move(meta);
  return tokens;
}

// Plain-value assemble for tests and inference plumbing.
template <typename T>
TokenSequence<T> assemble(const LocalDescriptorSet& query,
                          const std::vector<const LocalDescriptorSet*>& gallery,
                          const Mat<T>* projection_weight, const Mat<T>* projection_bias,
                          const Mat<T>& sequence_positions, const Mat<T>& image_positions,
                          const Mat<T>& sep_embedding) {
  Tape<T> tape;
  AssemblyParams<T> p;
  if (projection_weight) {
    p.projection_weight = tape.leaf(*projection_weight);
    if (projection_bias) p.projection_bias = tape.leaf(*projection_bias);
  }
  p.sequence_positions = tape.leaf(sequence_positions);
  p.image_positions = tape.leaf(image_positions);
  p.sep_embedding = tape.leaf(sep_embedding);
  TokenSequence<T> seq;
  VarId tokens = assemble_on_tape(tape, query, gallery, p, &seq.meta);
  seq.embeddings = tape.value(tokens);
  seq.loss_mask = make_loss_mask(seq.meta);
  seq.L = query.capacity();
  seq.K = static_cast<int>(gallery.size());
  return seq;
}

// Uniform Fisher-Yates permutation applied identically to gallery entries and
// labels; the query is untouched. Returns the permutation: out[i] = in[perm[i]].
template <typename Item>
std::vector<int> shuffle_gallery(std::vector<Item>& gallery, Rng& rng) {
  const int n = static_cast<int>(gallery.size());
  std::vector<int> perm(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) perm[static_cast<std::size_t>(i)] = i;
  for (int i = n - 1; i > 0; --i) {
    const int j = static_cast<int>(rng.next_below(static_cast<std::uint64_t>(i) + 1));
    std::swap(perm[static_cast<std::size_t>(i)], perm[static_cast<std::size_t>(j)]);
  }
  std::vector<Item> tmp;
  tmp.reserve(gallery.size());
  for (int i = 0; i < n; ++i) tmp.push_back(std::move(gallery[static_cast<std::size_t>(perm[static_cast<std::size_t>(i)])]));
  gallery = std::move(tmp);
  return perm;
}

}  // namespace lwr
