// Copyright (c) 2026 lwr authors
// SPDX-License-Identifier: Apache-2.0
//
// Row-major 2D tensor. T = float for training/inference, double for the
// 64-bit verification mode used by the gradient-check oracles.

#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "lwr/common.hpp"

namespace lwr {

template <typename T>
struct Mat {
  int rows = 0;
  int cols = 0;
  std::vector<T> data;

  Mat() = default;
  Mat(int r, int c) : rows(r), cols(c), data(static_cast<std::size_t>(r) * c, T(0)) {}
  Mat(int r, int c, std::vector<T> d) : rows(r), cols(c), data(std::move(d)) {
    if (data.size() != static_cast<std::size_t>(r) * c) {
      throw ShapeError("Mat: data length " + std::to_string(data.size()) +
                       " != " + std::to_string(r) + "x" + std::to_string(c));
    }
  }

  T& at(int r, int c) { return data[static_cast<std::size_t>(r) * cols + c]; }
  T at(int r, int c) const { return data[static_cast<std::size_t>(r) * cols + c]; }

  T* row_ptr(int r) { return data.data() + static_cast<std::size_t>(r) * cols; }
  const T* row_ptr(int r) const { return data.data() + static_cast<std::size_t>(r) * cols; }

  std::size_t size() const { return data.size(); }

  bool same_shape(const Mat& o) const { return rows == o.rows && cols == o.cols; }

  bool all_finite() const {
    for (T v : data) {
      if (!is_finite(v)) return false;
    }
    return true;
  }

  std::string shape_str() const {
    return std::to_string(rows) + "x" + std::to_string(cols);
  }

  template <typename U>
  Mat<U> cast() const {
    Mat<U> out(rows, cols);
    for (std::size_t i = 0; i < data.size(); ++i) out.data[i] = static_cast<U>(data[i]);
    return out;
  }
};

// out = a * b, accumulating in T. ikj order for cache friendliness.
template <typename T>
void matmul(const Mat<T>& a, const Mat<T>& b, Mat<T>& out) {
  if (a.cols != b.rows) {
    throw ShapeError("matmul: inner dims differ, " + a.shape_str() + " * " + b.shape_str());
  }
  out.rows = a.rows;
  out.cols = b.cols;
  out.data.assign(static_cast<std::size_t>(a.rows) * b.cols, T(0));
  for (int i = 0; i < a.rows; ++i) {
    const T* arow = a.row_ptr(i);
    T* orow = out.row_ptr(i);
    for (int k = 0; k < a.cols; ++k) {
      const T aik = arow[k];
      if (aik == T(0)) continue;
      const T* brow = b.row_ptr(k);
      for (int j = 0; j < b.cols; ++j) orow[j] += aik * brow[j];
    }
  }
}

// out += a^T * b
template <typename T>
void matmul_at_b_accum(const Mat<T>& a, const Mat<T>& b, Mat<T>& out) {
  if (a.rows != b.rows) {
    throw ShapeError("matmul_at_b: row counts differ, " + a.shape_str() + " vs " + b.shape_str());
  }
  if (out.rows != a.cols || out.cols != b.cols) {
    throw ShapeError("matmul_at_b: bad out shape " + out.shape_str());
  }
  for (int k = 0; k < a.rows; ++k) {
    const T* arow = a.row_ptr(k);
    const T* brow = b.row_ptr(k);
    for (int i = 0; i < a.cols; ++i) {
      const T aki = arow[i];
      if (aki == T(0)) continue;
      T* orow = out.row_ptr(i);
      for (int j = 0; j < b.cols; ++j) orow[j] += aki * brow[j];
    }
  }
}

// out += a * b^T
template <typename T>
void matmul_a_bt_accum(const Mat<T>& a, const Mat<T>& b, Mat<T>& out) {
  if (a.cols != b.cols) {
    throw ShapeError("matmul_a_bt: col counts differ, " + a.shape_str() + " vs " + b.shape_str());
  }
  if (out.rows != a.rows || out.cols != b.rows) {
    throw ShapeError("matmul_a_bt: bad out shape " + out.shape_str());
  }
  for (int i = 0; i < a.rows; ++i) {
    const T* arow = a.row_ptr(i);
    T* orow = out.row_ptr(i);
    for (int j = 0; j < b.rows; ++j) {
      const T* brow = b.row_ptr(j);
      T acc = T(0);
      for (int k = 0; k < a.cols; ++k) acc += arow[k] * brow[k];
      orow[j] += acc;
    }
  }
}

template <typename T>
T dot(const T* a, const T* b, int n) {
  T acc = T(0);
  for (int i = 0; i < n; ++i) acc += a[i] * b[i];
  return acc;
}

}  // namespace lwr
