// Copyright (c) 2026 lwr authors
// SPDX-License-Identifier: Apache-2.0

#include "lwr/sequence.hpp"

namespace lwr {

std::vector<TokenMeta> make_token_meta(int L, int K, const std::vector<int>& valid_counts) {
  if (static_cast<int>(valid_counts.size()) != K + 1) {
    throw ShapeError("make_token_meta: need K+1 = " + std::to_string(K + 1) +
                     " valid counts, got " + std::to_string(valid_counts.size()));
  }
  std::vector<TokenMeta> meta(static_cast<std::size_t>(sequence_length(L, K)));
  int pos = 0;
  for (int slot = 0; slot <= K; ++slot) {
    const int valid = valid_counts[static_cast<std::size_t>(slot)];
    if (valid < 0 || valid > L) {
      throw ShapeError("make_token_meta: valid count " + std::to_string(valid) +
                       " out of range for L = " + std::to_string(L));
    }
    for (int r = 0; r < L; ++r) {
      TokenMeta& m = meta[static_cast<std::size_t>(pos++)];
      m.role = slot == 0 ? TokenRole::kQuery : TokenRole::kGallery;
      m.image_slot = slot;
      m.within_image_index = r;
      m.is_padding = r >= valid;
    }
    // SEP closes every image block; it is padding only for an empty slot.
    TokenMeta& sep = meta[static_cast<std::size_t>(pos++)];
    sep.role = TokenRole::kSep;
    sep.image_slot = slot;
    sep.within_image_index = L;
    sep.is_padding = valid == 0;
  }
  return meta;
}

std::vector<float> make_loss_mask(const std::vector<TokenMeta>& meta) {
  std::vector<float> mask(meta.size(), 0.0f);
  for (std::size_t i = 0; i < meta.size(); ++i) {
    const TokenMeta& m = meta[i];
    if (m.image_slot == 0 || m.is_padding) continue;
    mask[i] = 1.0f;
  }
  return mask;
}

}  // namespace lwr
