// Copyright (c) 2026 lwr authors
// SPDX-License-Identifier: Apache-2.0
//
// Sparse attention: banded local windows plus symmetric global attention for
// query/SEP tokens. Cost is O(M * (2*radius + |global|) * h); no M x M buffer
// is ever allocated. dense_reference_attention is the small-scale oracle.
//
// Projection convention (matching the long-context encoder this follows):
//   - non-global row i: local Q/K/V over band(i) + global columns,
//   - global row g: global Qg against Kg/Vg of every non-padding token.

#pragma once

#include <cstdint>
#include <memory>
#include <vector>

#include "lwr/common.hpp"
#include "lwr/mat.hpp"
#include "lwr/ops.hpp"
#include "lwr/rng.hpp"
#include "lwr/sequence.hpp"
#include "lwr/tape.hpp"

namespace lwr {

struct AttentionPattern {
  int M = 0;
  int window_radius = 0;
  std::vector<int> global_indices;   // sorted ascending
  std::vector<int> padding_indices;  // sorted ascending
  std::vector<std::uint8_t> is_global;
  std::vector<std::uint8_t> is_padding;

  void rebuild_lookups();
  bool attends(int i, int j) const;  // the symmetric allowed-pair relation
};

// Globals = all non-padding QUERY/SEP tokens; band radius in tokens.
AttentionPattern build_pattern(const std::vector<TokenMeta>& meta, int window_radius);

// Same band, empty global set (the no-global-attention ablation).
AttentionPattern without_globals(AttentionPattern pattern);

// Expands the pattern into a dense 0/1 mask (rows attend columns).
Mat<std::uint8_t> pattern_to_mask(const AttentionPattern& pattern);

// Appends the allowed column list for row i: band ascending, then global
// columns outside the band. Deterministic order, padding excluded.
void allowed_columns(const AttentionPattern& pattern, int i, std::vector<int>& out);

template <typename T>
struct AttentionLayerParams {
  int heads = 1;
  Mat<T> wq, wk, wv;     // h x h local projections
  Mat<T> bq, bk, bv;     // 1 x h
  Mat<T> wqg, wkg, wvg;  // h x h global projections
  Mat<T> bqg, bkg, bvg;
  Mat<T> wo;             // h x h output projection
  Mat<T> bo;

  int hidden() const { return wq.rows; }
  int head_dim() const { return wq.rows / heads; }
};

struct AttnWorkspaceStats {
  std::size_t workspace_bytes = 0;   // transient weight + mask + index storage
  std::size_t largest_alloc = 0;
};

namespace detail {

// Forward context kept alive for the backward record.
template <typename T>
struct SparseAttnCtx {
  std::vector<int> allowed;        // concatenated per-row column lists
  std::vector<std::size_t> row_begin;  // size M+1 into `allowed`
  std::vector<T> weights;          // post-softmax, pre-dropout: (row, head, slot)
  std::vector<std::size_t> w_begin;    // size M+1 into `weights` (row stride = heads * n_i)
  std::vector<std::uint8_t> keep;  // dropout keep flags, aligned with weights (empty if no dropout)
  T inv_keep = T(1);
};

}  // namespace detail

// Core sparse attention over already-projected q/k/v (local) and qg/kg/vg
// (global rows). All matrices are M x h with h = heads * head_dim. Output rows
// of padding tokens are zero. When `ctx` is non-null the softmax weights and
// dropout masks are retained for a backward pass.
template <typename T>
Mat<T> sparse_attention_core(const Mat<T>& q, const Mat<T>& k, const Mat<T>& v,
                             const Mat<T>& qg, const Mat<T>& kg, const Mat<T>& vg,
                             const AttentionPattern& pattern, int heads, T dropout_rate,
                             Rng* dropout_rng, detail::SparseAttnCtx<T>* ctx,
                             AttnWorkspaceStats* stats = nullptr) {
  const int M = pattern.M;
  const int h = q.cols;
  if (q.rows != M || k.rows != M || v.rows != M || qg.rows != M || kg.rows != M || vg.rows != M) {
    throw ShapeError("sparse_attention: input rows must equal pattern.M = " + std::to_string(M));
  }
  if (h % heads != 0) {
    throw ShapeError("sparse_attention: hidden " + std::to_string(h) + " not divisible by " +
                     std::to_string(heads) + " heads");
  }
  const int dh = h / heads;
  const T scale = T(1) / std::sqrt(T(dh));
  const bool use_dropout = dropout_rate > T(0) && dropout_rng != nullptr;
  const T inv_keep = use_dropout ? T(1) / (T(1) - dropout_rate) : T(1);

  Mat<T> out(M, h);
  std::vector<int> cols;
  cols.reserve(static_cast<std::size_t>(2 * pattern.window_radius + 1) +
               pattern.global_indices.size());
  std::vector<T> scores;

  detail::SparseAttnCtx<T> local_ctx;
  detail::SparseAttnCtx<T>* c = ctx ? ctx : &local_ctx;
  c->allowed.clear();
  c->weights.clear();
  c->keep.clear();
  c->row_begin.assign(static_cast<std::size_t>(M) + 1, 0);
  c->w_begin.assign(static_cast<std::size_t>(M) + 1, 0);
  c->inv_keep = inv_keep;

  for (int i = 0; i < M; ++i) {
    c->row_begin[static_cast<std::size_t>(i)] = c->allowed.size();
    c->w_begin[static_cast<std::size_t>(i)] = c->weights.size();
    if (pattern.is_padding[static_cast<std::size_t>(i)]) continue;  // zero output row

    const bool g = pattern.is_global[static_cast<std::size_t>(i)] != 0;
    cols.clear();
    if (g) {
      for (int j = 0; j < M; ++j) {
        if (!pattern.is_padding[static_cast<std::size_t>(j)]) cols.push_back(j);
      }
    } else {
      allowed_columns(pattern, i, cols);
    }
    if (cols.empty()) {
      throw DegenerateError("sparse_attention: token " + std::to_string(i) +
                            " has an empty allowed set");
    }
    const std::size_t n = cols.size();
    c->allowed.insert(c->allowed.end(), cols.begin(), cols.end());
    scores.resize(n);

    const Mat<T>& qm = g ? qg : q;
    const Mat<T>& km = g ? kg : k;
    const Mat<T>& vm = g ? vg : v;
    const T* qrow = qm.row_ptr(i);
    T* orow = out.row_ptr(i);
    for (int hd = 0; hd < heads; ++hd) {
      const int off = hd * dh;
      T mx = -std::numeric_limits<T>::infinity();
      for (std::size_t s = 0; s < n; ++s) {
        const T sc = dot(qrow + off, km.row_ptr(cols[s]) + off, dh) * scale;
        scores[s] = sc;
        if (sc > mx) mx = sc;
      }
      T denom = T(0);
      for (std::size_t s = 0; s < n; ++s) {
        scores[s] = std::exp(scores[s] - mx);
        denom += scores[s];
      }
      for (std::size_t s = 0; s < n; ++s) scores[s] /= denom;

      const std::size_t wbase = c->weights.size();
      c->weights.insert(c->weights.end(), scores.begin(), scores.end());
      if (use_dropout) {
        c->keep.resize(wbase + n);
        for (std::size_t s = 0; s < n; ++s) {
          c->keep[wbase + s] = dropout_rng->next_double() >= static_cast<double>(dropout_rate);
        }
      }
      for (std::size_t s = 0; s < n; ++s) {
        T w = c->weights[wbase + s];
        if (use_dropout) w = c->keep[wbase + s] ? w * inv_keep : T(0);
        if (w == T(0)) continue;
        const T* vrow = vm.row_ptr(cols[s]) + off;
        for (int t = 0; t < dh; ++t) orow[off + t] += w * vrow[t];
      }
    }
  }
  c->row_begin[static_cast<std::size_t>(M)] = c->allowed.size();
  c->w_begin[static_cast<std::size_t>(M)] = c->weights.size();

  if (stats) {
    const std::size_t bytes = c->allowed.size() * sizeof(int) + c->weights.size() * sizeof(T) +
                              c->keep.size() + out.size() * sizeof(T);
    stats->workspace_bytes = bytes;
    std::size_t largest = c->weights.size() * sizeof(T);
    largest = std::max(largest, c->allowed.size() * sizeof(int));
    largest = std::max(largest, out.size() * sizeof(T));
    stats->largest_alloc = largest;
  }
  return out;
}

// Tape-recorded sparse attention. q..vg are M x h vars (already projected).
template <typename T>
VarId sparse_attention(Tape<T>& tape, VarId q, VarId k, VarId v, VarId qg, VarId kg, VarId vg,
                       const AttentionPattern& pattern, int heads, T dropout_rate = T(0),
                       Rng* dropout_rng = nullptr, AttnWorkspaceStats* stats = nullptr) {
  auto ctx = std::make_shared<detail::SparseAttnCtx<T>>();
  Mat<T> out = sparse_attention_core(tape.value(q), tape.value(k), tape.value(v), tape.value(qg),
                                     tape.value(kg), tape.value(vg), pattern, heads, dropout_rate,
                                     dropout_rng, ctx.get(), stats);
  const int M = pattern.M;
  const int h = out.cols;
  const int dh = h / heads;
  VarId y = tape.leaf(std::move(out));
  tape.record([&tape, q, k, v, qg, kg, vg, y, ctx, pattern, heads, dh] {
    const T scale = T(1) / std::sqrt(T(dh));
    const Mat<T>& gy = tape.grad(y);
    const Mat<T>& qv = tape.value(q);
    const Mat<T>& qgv = tape.value(qg);
    const Mat<T>& kv = tape.value(k);
    const Mat<T>& kgv = tape.value(kg);
    const Mat<T>& vv = tape.value(v);
    const Mat<T>& vgv = tape.value(vg);
    Mat<T>& dq = tape.grad(q);
    Mat<T>& dk = tape.grad(k);
    Mat<T>& dv = tape.grad(v);
    Mat<T>& dqg = tape.grad(qg);
    Mat<T>& dkg = tape.grad(kg);
    Mat<T>& dvg = tape.grad(vg);
    const bool use_dropout = !ctx->keep.empty();
    std::vector<T> dwt;  // d(post-dropout weight)
    std::vector<T> ds;

    for (int i = 0; i < pattern.M; ++i) {
      if (pattern.is_padding[static_cast<std::size_t>(i)]) continue;
      const std::size_t a0 = ctx->row_begin[static_cast<std::size_t>(i)];
      const std::size_t n = ctx->row_begin[static_cast<std::size_t>(i) + 1] - a0;
      if (n == 0) continue;
      const bool g = pattern.is_global[static_cast<std::size_t>(i)] != 0;
      const Mat<T>& km = g ? kgv : kv;
      const Mat<T>& vm = g ? vgv : vv;
      const Mat<T>& qm = g ? qgv : qv;
      Mat<T>& dkm = g ? dkg : dk;
      Mat<T>& dvm = g ? dvg : dv;
      Mat<T>& dqm = g ? dqg : dq;
      const int* cols = ctx->allowed.data() + a0;
      const T* gyrow = gy.row_ptr(i);
      const T* qrow = qm.row_ptr(i);
      T* dqrow = dqm.row_ptr(i);
      const std::size_t w0 = ctx->w_begin[static_cast<std::size_t>(i)];
      dwt.resize(n);
      ds.resize(n);
      for (int hd = 0; hd < heads; ++hd) {
        const int off = hd * dh;
        const T* w = ctx->weights.data() + w0 + static_cast<std::size_t>(hd) * n;
        const std::uint8_t* keep =
            use_dropout ? ctx->keep.data() + w0 + static_cast<std::size_t>(hd) * n : nullptr;
        // d(weights) and value grads
        for (std::size_t s = 0; s < n; ++s) {
          const T* vrow = vm.row_ptr(cols[s]) + off;
          const T wt = keep ? (keep[s] ? w[s] * ctx->inv_keep : T(0)) : w[s];
          T d = T(0);
          if (wt != T(0)) {
            T* dvrow = dvm.row_ptr(cols[s]) + off;
            for (int t = 0; t < dh; ++t) {
              d += gyrow[off + t] * vrow[t];
              dvrow[t] += wt * gyrow[off + t];
            }
          } else {
            for (int t = 0; t < dh; ++t) d += gyrow[off + t] * vrow[t];
          }
          dwt[s] = keep ? (keep[s] ? d * ctx->inv_keep : T(0)) : d;
        }
        // softmax backward: ds_j = w_j (dw_j - sum_l w_l dw_l)
        T acc = T(0);
        for (std::size_t s = 0; s < n; ++s) acc += w[s] * dwt[s];
        for (std::size_t s = 0; s < n; ++s) ds[s] = w[s] * (dwt[s] - acc);
        // score backward
        for (std::size_t s = 0; s < n; ++s) {
          if (ds[s] == T(0)) continue;
          const T dss = ds[s] * scale;
          const T* krow = km.row_ptr(cols[s]) + off;
          T* dkrow = dkm.row_ptr(cols[s]) + off;
          for (int t = 0; t < dh; ++t) {
            dqrow[off + t] += dss * krow[t];
            dkrow[t] += dss * qrow[off + t];
          }
        }
      }
    }
  });
  return y;
}

// Whole attention layer without a tape: projections, sparse core, output
// projection. Used for oracle comparisons and benchmarking.
template <typename T>
Mat<T> sparse_attention_layer(const Mat<T>& x, const AttentionLayerParams<T>& params,
                              const AttentionPattern& pattern,
                              AttnWorkspaceStats* stats = nullptr) {
  auto project = [&](const Mat<T>& w, const Mat<T>& b) {
    Mat<T> r;
    matmul(x, w, r);
    for (int i = 0; i < r.rows; ++i) {
      for (int j = 0; j < r.cols; ++j) r.at(i, j) += b.data[static_cast<std::size_t>(j)];
    }
    return r;
  };
  const Mat<T> q = project(params.wq, params.bq);
  const Mat<T> k = project(params.wk, params.bk);
  const Mat<T> v = project(params.wv, params.bv);
  const Mat<T> qg = project(params.wqg, params.bqg);
  const Mat<T> kg = project(params.wkg, params.bkg);
  const Mat<T> vg = project(params.wvg, params.bvg);
  Mat<T> ctx = sparse_attention_core<T>(q, k, v, qg, kg, vg, pattern, params.heads, T(0),
                                        nullptr, nullptr, stats);
  Mat<T> out;
  matmul(ctx, params.wo, out);
  for (int i = 0; i < out.rows; ++i) {
    for (int j = 0; j < out.cols; ++j) out.at(i, j) += params.bo.data[static_cast<std::size_t>(j)];
  }
  return out;
}

// Textbook masked multi-head attention over the full M x M mask, with the
// same projection convention as the sparse path. Small-scale oracle only.
template <typename T>
Mat<T> dense_reference_attention(const Mat<T>& x, const AttentionLayerParams<T>& params,
                                 const Mat<std::uint8_t>& mask,
                                 const std::vector<std::uint8_t>& global_rows,
                                 int oracle_ceiling = 512) {
  const int M = x.rows;
  if (M > oracle_ceiling) {
    throw ConfigError("dense_reference_attention: M = " + std::to_string(M) +
                      " above oracle ceiling " + std::to_string(oracle_ceiling));
  }
  if (mask.rows != M || mask.cols != M) {
    throw ShapeError("dense_reference_attention: mask " + mask.shape_str() + " for M = " +
                     std::to_string(M));
  }
  if (!global_rows.empty() && static_cast<int>(global_rows.size()) != M) {
    throw ShapeError("dense_reference_attention: global_rows length mismatch");
  }
  const int h = x.cols;
  const int heads = params.heads;
  const int dh = h / heads;
  const T scale = T(1) / std::sqrt(T(dh));

  auto project = [&](const Mat<T>& w, const Mat<T>& b) {
    Mat<T> r;
    matmul(x, w, r);
    for (int i = 0; i < r.rows; ++i) {
      for (int j = 0; j < r.cols; ++j) r.at(i, j) += b.data[static_cast<std::size_t>(j)];
    }
    return r;
  };
  const Mat<T> q = project(params.wq, params.bq);
  const Mat<T> k = project(params.wk, params.bk);
  const Mat<T> v = project(params.wv, params.bv);
  const Mat<T> qg = project(params.wqg, params.bqg);
  const Mat<T> kg = project(params.wkg, params.bkg);
  const Mat<T> vg = project(params.wvg, params.bvg);

  Mat<T> ctx(M, h);
  std::vector<T> row_scores(static_cast<std::size_t>(M));
  for (int i = 0; i < M; ++i) {
    bool any = false;
    for (int j = 0; j < M; ++j) {
      if (mask.at(i, j)) {
        any = true;
        break;
      }
    }
    if (!any) continue;  // padding row: zero output
    const bool g = !global_rows.empty() && global_rows[static_cast<std::size_t>(i)] != 0;
    const Mat<T>& qm = g ? qg : q;
    const Mat<T>& km = g ? kg : k;
    const Mat<T>& vm = g ? vg : v;
    for (int hd = 0; hd < heads; ++hd) {
      const int off = hd * dh;
      T mx = -std::numeric_limits<T>::infinity();
      for (int j = 0; j < M; ++j) {
        if (!mask.at(i, j)) continue;
        const T sc = dot(qm.row_ptr(i) + off, km.row_ptr(j) + off, dh) * scale;
        row_scores[static_cast<std::size_t>(j)] = sc;
        if (sc > mx) mx = sc;
      }
      T denom = T(0);
      for (int j = 0; j < M; ++j) {
        if (!mask.at(i, j)) continue;
        row_scores[static_cast<std::size_t>(j)] = std::exp(row_scores[static_cast<std::size_t>(j)] - mx);
        denom += row_scores[static_cast<std::size_t>(j)];
      }
      for (int j = 0; j < M; ++j) {
        if (!mask.at(i, j)) continue;
        const T w = row_scores[static_cast<std::size_t>(j)] / denom;
        const T* vrow = vm.row_ptr(j) + off;
        for (int t = 0; t < dh; ++t) ctx.at(i, off + t) += w * vrow[t];
      }
    }
  }
  Mat<T> out;
  matmul(ctx, params.wo, out);
  for (int i = 0; i < out.rows; ++i) {
    for (int j = 0; j < out.cols; ++j) out.at(i, j) += params.bo.data[static_cast<std::size_t>(j)];
  }
  return out;
}

// Deterministic arithmetic-op count of sparse_attention under this pattern:
// 7 h x h projections (q/k/v, qg/kg/vg, output) plus per-row score and value
// MACs over the allowed sets, plus softmax exp/sum/div.
long long flop_count(const AttentionPattern& pattern, int h, int heads);

// The same count with every non-padding row fully connected.
long long dense_flop_count(int M, int h, int heads);

}  // namespace lwr
