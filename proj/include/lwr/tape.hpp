// Copyright (c) 2026 lwr authors
// SPDX-License-Identifier: Apache-2.0
//
// Reverse-mode tape, scoped per forward pass. Each primitive appends one op
// record; backward() replays the records exactly once, in reverse order.

#pragma once

#include <cstddef>
#include <functional>
#include <vector>

#include "lwr/common.hpp"
#include "lwr/mat.hpp"

namespace lwr {

using VarId = int;

template <typename T>
class Tape {
 public:
  VarId leaf(Mat<T> value) {
    slots_.push_back(Slot{std::move(value), Mat<T>{}});
    return static_cast<VarId>(slots_.size() - 1);
  }

  const Mat<T>& value(VarId id) const { return slots_[static_cast<std::size_t>(id)].value; }
  Mat<T>& mutable_value(VarId id) { return slots_[static_cast<std::size_t>(id)].value; }

  // Gradient buffer, zero-allocated on first touch.
  Mat<T>& grad(VarId id) {
    Slot& s = slots_[static_cast<std::size_t>(id)];
    if (s.grad.rows != s.value.rows || s.grad.cols != s.value.cols) {
      s.grad = Mat<T>(s.value.rows, s.value.cols);
    }
    return s.grad;
  }

  void record(std::function<void()> backward_fn) {
    ops_.push_back(std::move(backward_fn));
  }

  // Seeds d(loss)/d(loss) = 1 and runs every recorded op once, newest first.
  void backward(VarId loss) {
    const Mat<T>& lv = value(loss);
    if (lv.rows != 1 || lv.cols != 1) {
      throw ShapeError("backward: loss must be 1x1, got " + lv.shape_str());
    }
    grad(loss).data[0] = T(1);
    for (std::size_t i = ops_.size(); i-- > 0;) {
      if (on_backward_op) on_backward_op(i);
      ops_[i]();
    }
  }

  std::size_t op_count() const { return ops_.size(); }
  std::size_t var_count() const { return slots_.size(); }

  // Test hook: called with the op index before each backward record runs.
  std::function<void(std::size_t)> on_backward_op;

 private:
  struct Slot {
    Mat<T> value;
    Mat<T> grad;
  };
  std::vector<Slot> slots_;
  std::vector<std::function<void()>> ops_;
};

}  // namespace lwr
