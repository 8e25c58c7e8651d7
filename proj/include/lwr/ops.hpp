// Copyright (c) 2026 lwr authors
// SPDX-License-Identifier: Apache-2.0
//
// Differentiable primitives recorded on a Tape. Forward math runs eagerly;
// each op pushes one backward record that accumulates into input grads.

#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <vector>

#include "lwr/common.hpp"
#include "lwr/mat.hpp"
#include "lwr/rng.hpp"
#include "lwr/tape.hpp"

namespace lwr {

// out[i,j] = sum_k x[i,k] w[k,j] + b[j]. b is 1 x cols; pass invalid id < 0 to skip bias.
template <typename T>
VarId linear(Tape<T>& tape, VarId x, VarId w, VarId b = -1) {
  const Mat<T>& xv = tape.value(x);
  const Mat<T>& wv = tape.value(w);
  if (xv.cols != wv.rows) {
    throw ShapeError("linear: x " + xv.shape_str() + " incompatible with weight " + wv.shape_str());
  }
  Mat<T> out;
  matmul(xv, wv, out);
  if (b >= 0) {
    const Mat<T>& bv = tape.value(b);
    if (bv.rows != 1 || bv.cols != wv.cols) {
      throw ShapeError("linear: bias " + bv.shape_str() + " does not match weight " + wv.shape_str());
    }
    for (int i = 0; i < out.rows; ++i) {
      T* row = out.row_ptr(i);
      for (int j = 0; j < out.cols; ++j) row[j] += bv.data[j];
    }
  }
  VarId y = tape.leaf(std::move(out));
  tape.record([&tape, x, w, b, y] {
    const Mat<T>& gy = tape.grad(y);
    matmul_a_bt_accum(gy, tape.value(w), tape.grad(x));   // dX = dY W^T
    matmul_at_b_accum(tape.value(x), gy, tape.grad(w));   // dW = X^T dY
    if (b >= 0) {
      Mat<T>& gb = tape.grad(b);
      for (int i = 0; i < gy.rows; ++i) {
        const T* row = gy.row_ptr(i);
        for (int j = 0; j < gy.cols; ++j) gb.data[j] += row[j];
      }
    }
  });
  return y;
}

template <typename T>
VarId add(Tape<T>& tape, VarId a, VarId b) {
  const Mat<T>& av = tape.value(a);
  const Mat<T>& bv = tape.value(b);
  if (!av.same_shape(bv)) {
    throw ShapeError("add: " + av.shape_str() + " vs " + bv.shape_str());
  }
  Mat<T> out = av;
  for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] += bv.data[i];
  VarId y = tape.leaf(std::move(out));
  tape.record([&tape, a, b, y] {
    const Mat<T>& gy = tape.grad(y);
    Mat<T>& ga = tape.grad(a);
    Mat<T>& gb = tape.grad(b);
    for (std::size_t i = 0; i < gy.data.size(); ++i) {
      ga.data[i] += gy.data[i];
      gb.data[i] += gy.data[i];
    }
  });
  return y;
}

template <typename T>
VarId scale(Tape<T>& tape, VarId a, T s) {
  Mat<T> out = tape.value(a);
  for (T& v : out.data) v *= s;
  VarId y = tape.leaf(std::move(out));
  tape.record([&tape, a, y, s] {
    const Mat<T>& gy = tape.grad(y);
    Mat<T>& ga = tape.grad(a);
    for (std::size_t i = 0; i < gy.data.size(); ++i) ga.data[i] += s * gy.data[i];
  });
  return y;
}

// Row-wise softmax with optional additive mask (0 = keep, -inf marker = drop).
// Stabilized by row-max subtraction. A fully masked row is degenerate.
template <typename T>
VarId softmax_rows(Tape<T>& tape, VarId x, const Mat<T>* mask = nullptr) {
  const Mat<T>& xv = tape.value(x);
  if (mask && !xv.same_shape(*mask)) {
    throw ShapeError("softmax_rows: mask " + mask->shape_str() + " vs x " + xv.shape_str());
  }
  Mat<T> out(xv.rows, xv.cols);
  const T neg_inf = -std::numeric_limits<T>::infinity();
  for (int i = 0; i < xv.rows; ++i) {
    const T* row = xv.row_ptr(i);
    T* orow = out.row_ptr(i);
    T mx = neg_inf;
    for (int j = 0; j < xv.cols; ++j) {
      const T v = mask ? row[j] + mask->at(i, j) : row[j];
      if (v > mx) mx = v;
    }
    if (!is_finite(mx)) {
      throw DegenerateError("softmax_rows: fully masked row " + std::to_string(i));
    }
    T denom = T(0);
    for (int j = 0; j < xv.cols; ++j) {
      const T v = mask ? row[j] + mask->at(i, j) : row[j];
      const T e = is_finite(v) ? std::exp(v - mx) : T(0);
      orow[j] = e;
      denom += e;
    }
    for (int j = 0; j < xv.cols; ++j) orow[j] /= denom;
  }
  VarId y = tape.leaf(std::move(out));
  tape.record([&tape, x, y] {
    const Mat<T>& yv = tape.value(y);
    const Mat<T>& gy = tape.grad(y);
    Mat<T>& gx = tape.grad(x);
    for (int i = 0; i < yv.rows; ++i) {
      const T* yr = yv.row_ptr(i);
      const T* gr = gy.row_ptr(i);
      T s = T(0);
      for (int j = 0; j < yv.cols; ++j) s += yr[j] * gr[j];
      T* gxr = gx.row_ptr(i);
      for (int j = 0; j < yv.cols; ++j) gxr[j] += yr[j] * (gr[j] - s);
    }
  });
  return y;
}

// Per-row standardization then affine: gain * (x - mean)/sqrt(var + eps) + shift.
template <typename T>
VarId layer_norm(Tape<T>& tape, VarId x, VarId gain, VarId shift, T eps) {
  const Mat<T>& xv = tape.value(x);
  const Mat<T>& gv = tape.value(gain);
  const Mat<T>& sv = tape.value(shift);
  if (gv.rows != 1 || gv.cols != xv.cols || sv.rows != 1 || sv.cols != xv.cols) {
    throw ShapeError("layer_norm: gain/shift must be 1x" + std::to_string(xv.cols));
  }
  Mat<T> out(xv.rows, xv.cols);
  Mat<T> xhat(xv.rows, xv.cols);
  std::vector<T> inv_std(static_cast<std::size_t>(xv.rows));
  for (int i = 0; i < xv.rows; ++i) {
    const T* row = xv.row_ptr(i);
    T mean = T(0);
    for (int j = 0; j < xv.cols; ++j) mean += row[j];
    mean /= T(xv.cols);
    T var = T(0);
    for (int j = 0; j < xv.cols; ++j) {
      const T d = row[j] - mean;
      var += d * d;
    }
    var /= T(xv.cols);
    const T istd = T(1) / std::sqrt(var + eps);
    inv_std[static_cast<std::size_t>(i)] = istd;
    T* hrow = xhat.row_ptr(i);
    T* orow = out.row_ptr(i);
    for (int j = 0; j < xv.cols; ++j) {
      hrow[j] = (row[j] - mean) * istd;
      orow[j] = gv.data[j] * hrow[j] + sv.data[j];
    }
  }
  VarId y = tape.leaf(std::move(out));
  tape.record([&tape, x, gain, shift, y, xhat = std::move(xhat), inv_std = std::move(inv_std)] {
    const Mat<T>& gy = tape.grad(y);
    const Mat<T>& gv = tape.value(gain);
    Mat<T>& gx = tape.grad(x);
    Mat<T>& gg = tape.grad(gain);
    Mat<T>& gs = tape.grad(shift);
    const int cols = gy.cols;
    for (int i = 0; i < gy.rows; ++i) {
      const T* gr = gy.row_ptr(i);
      const T* hr = xhat.row_ptr(i);
      // d xhat = gain .* dy ; dx = (dxh - mean(dxh) - xhat*mean(dxh.*xhat)) * inv_std
      T m1 = T(0), m2 = T(0);
      for (int j = 0; j < cols; ++j) {
        const T dxh = gv.data[j] * gr[j];
        m1 += dxh;
        m2 += dxh * hr[j];
      }
      m1 /= T(cols);
      m2 /= T(cols);
      T* gxr = gx.row_ptr(i);
      const T istd = inv_std[static_cast<std::size_t>(i)];
      for (int j = 0; j < cols; ++j) {
        const T dxh = gv.data[j] * gr[j];
        gxr[j] += (dxh - m1 - hr[j] * m2) * istd;
        gg.data[j] += gr[j] * hr[j];
        gs.data[j] += gr[j];
      }
    }
  });
  return y;
}

namespace detail {
// tanh-approximation constants: gelu(x) = 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))
inline constexpr double kGeluRoot2OverPi = 0.7978845608028653558798921198687;
inline constexpr double kGeluCubic = 0.044715;
}  // namespace detail

template <typename T>
VarId gelu(Tape<T>& tape, VarId x) {
  const Mat<T>& xv = tape.value(x);
  Mat<T> out(xv.rows, xv.cols);
  const T c0 = T(detail::kGeluRoot2OverPi);
  const T c1 = T(detail::kGeluCubic);
  for (std::size_t i = 0; i < xv.data.size(); ++i) {
    const T v = xv.data[i];
    const T u = c0 * (v + c1 * v * v * v);
    out.data[i] = T(0.5) * v * (T(1) + std::tanh(u));
  }
  VarId y = tape.leaf(std::move(out));
  tape.record([&tape, x, y, c0, c1] {
    const Mat<T>& xv2 = tape.value(x);
    const Mat<T>& gy = tape.grad(y);
    Mat<T>& gx = tape.grad(x);
    for (std::size_t i = 0; i < xv2.data.size(); ++i) {
      const T v = xv2.data[i];
      const T u = c0 * (v + c1 * v * v * v);
      const T t = std::tanh(u);
      const T sech2 = T(1) - t * t;
      const T du = c0 * (T(1) + T(3) * c1 * v * v);
      gx.data[i] += gy.data[i] * (T(0.5) * (T(1) + t) + T(0.5) * v * sech2 * du);
    }
  });
  return y;
}

// Mean of the stable elementwise BCE over unmasked entries:
//   l(z, y) = max(z, 0) - z y + log(1 + exp(-|z|))
// logits/labels/mask are 1 x n (or n x 1) and equal length.
template <typename T>
VarId bce_with_logits(Tape<T>& tape, VarId logits, const std::vector<T>& labels,
                      const std::vector<T>& mask) {
  const Mat<T>& zv = tape.value(logits);
  const std::size_t n = zv.data.size();
  if (labels.size() != n || mask.size() != n) {
    throw ShapeError("bce_with_logits: logits " + std::to_string(n) + ", labels " +
                     std::to_string(labels.size()) + ", mask " + std::to_string(mask.size()));
  }
  T count = T(0);
  for (std::size_t i = 0; i < n; ++i) count += mask[i];
  if (count == T(0)) {
    throw DegenerateError("bce_with_logits: all entries masked");
  }
  T total = T(0);
  for (std::size_t i = 0; i < n; ++i) {
    if (mask[i] == T(0)) continue;
    const T z = zv.data[i];
    const T y = labels[i];
    total += std::max(z, T(0)) - z * y + std::log1p(std::exp(-std::abs(z)));
  }
  Mat<T> out(1, 1);
  out.data[0] = total / count;
  VarId loss = tape.leaf(std::move(out));
  tape.record([&tape, logits, loss, labels, mask, count] {
    const T g = tape.grad(loss).data[0];
    const Mat<T>& zv2 = tape.value(logits);
    Mat<T>& gz = tape.grad(logits);
    for (std::size_t i = 0; i < zv2.data.size(); ++i) {
      if (mask[i] == T(0)) continue;
      const T z = zv2.data[i];
      const T sig = T(1) / (T(1) + std::exp(-z));
      gz.data[i] += g * (sig - labels[i]) / count;
    }
  });
  return loss;
}

// out[i, :] = table[idx[i], :]; backward scatter-adds into the table rows.
template <typename T>
VarId gather_rows(Tape<T>& tape, VarId table, const std::vector<int>& idx) {
  const Mat<T>& tv = tape.value(table);
  Mat<T> out(static_cast<int>(idx.size()), tv.cols);
  for (std::size_t i = 0; i < idx.size(); ++i) {
    const int r = idx[i];
    if (r < 0 || r >= tv.rows) {
      throw ShapeError("gather_rows: index " + std::to_string(r) + " out of " + tv.shape_str());
    }
    for (int j = 0; j < tv.cols; ++j) out.at(static_cast<int>(i), j) = tv.at(r, j);
  }
  VarId y = tape.leaf(std::move(out));
  tape.record([&tape, table, y, idx] {
    const Mat<T>& gy = tape.grad(y);
    Mat<T>& gt = tape.grad(table);
    for (std::size_t i = 0; i < idx.size(); ++i) {
      const T* src = gy.row_ptr(static_cast<int>(i));
      T* dst = gt.row_ptr(idx[i]);
      for (int j = 0; j < gy.cols; ++j) dst[j] += src[j];
    }
  });
  return y;
}

// Adds a 1 x cols vector to the selected rows of x.
template <typename T>
VarId add_to_rows(Tape<T>& tape, VarId x, const std::vector<int>& rows, VarId vec) {
  const Mat<T>& xv = tape.value(x);
  const Mat<T>& vv = tape.value(vec);
  if (vv.rows != 1 || vv.cols != xv.cols) {
    throw ShapeError("add_to_rows: vec " + vv.shape_str() + " vs x " + xv.shape_str());
  }
  Mat<T> out = xv;
  for (int r : rows) {
    T* row = out.row_ptr(r);
    for (int j = 0; j < out.cols; ++j) row[j] += vv.data[j];
  }
  VarId y = tape.leaf(std::move(out));
  tape.record([&tape, x, vec, y, rows] {
    const Mat<T>& gy = tape.grad(y);
    Mat<T>& gx = tape.grad(x);
    Mat<T>& gv = tape.grad(vec);
    for (std::size_t i = 0; i < gy.data.size(); ++i) gx.data[i] += gy.data[i];
    for (int r : rows) {
      const T* row = gy.row_ptr(r);
      for (int j = 0; j < gy.cols; ++j) gv.data[j] += row[j];
    }
  });
  return y;
}

// Inverted dropout; identity when rate == 0. Mask is drawn once at record time.
template <typename T>
VarId dropout(Tape<T>& tape, VarId x, T rate, Rng& rng) {
  if (rate == T(0)) return x;
  if (rate < T(0) || rate >= T(1)) {
    throw ConfigError("dropout: rate must be in [0, 1), got " + std::to_string(double(rate)));
  }
  const Mat<T>& xv = tape.value(x);
  std::vector<std::uint8_t> keep(xv.data.size());
  const T inv_keep = T(1) / (T(1) - rate);
  Mat<T> out(xv.rows, xv.cols);
  for (std::size_t i = 0; i < xv.data.size(); ++i) {
    keep[i] = rng.next_double() >= static_cast<double>(rate) ? 1 : 0;
    out.data[i] = keep[i] ? xv.data[i] * inv_keep : T(0);
  }
  VarId y = tape.leaf(std::move(out));
  tape.record([&tape, x, y, keep = std::move(keep), inv_keep] {
    const Mat<T>& gy = tape.grad(y);
    Mat<T>& gx = tape.grad(x);
    for (std::size_t i = 0; i < gy.data.size(); ++i) {
      if (keep[i]) gx.data[i] += gy.data[i] * inv_keep;
    }
  });
  return y;
}

}  // namespace lwr
