// Copyright (c) 2026 lwr authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "lwr/common.hpp"
#include "lwr/mat.hpp"

namespace lwr {

template <typename T>
struct AdamWConfig {
  T learning_rate = T(5e-5);
  T beta1 = T(0.9);
  T beta2 = T(0.999);
  T epsilon = T(1e-8);
  T weight_decay = T(0);  // disabled: equals Adam

  void validate() const {
    if (learning_rate <= T(0)) throw ConfigError("adamw: learning rate must be positive");
    if (beta1 <= T(0) || beta1 >= T(1) || beta2 <= T(0) || beta2 >= T(1)) {
      throw ConfigError("adamw: betas must lie in (0, 1)");
    }
    if (epsilon <= T(0)) throw ConfigError("adamw: epsilon must be positive");
    if (weight_decay < T(0)) throw ConfigError("adamw: weight decay must be >= 0");
  }
};

// First/second moments per parameter tensor plus the shared step counter.
template <typename T>
struct OptimizerState {
  AdamWConfig<T> config;
  std::vector<Mat<T>> m;
  std::vector<Mat<T>> v;
  long long step = 0;

  void init(const std::vector<const Mat<T>*>& params) {
    m.clear();
    v.clear();
    for (const Mat<T>* p : params) {
      m.emplace_back(p->rows, p->cols);
      v.emplace_back(p->rows, p->cols);
    }
    step = 0;
  }
};

// Bias-corrected decoupled-weight-decay update. Rejects non-finite gradients
// before touching any state; on rejection params and moments are unchanged.
template <typename T>
void adamw_step(std::vector<Mat<T>*> params, const std::vector<const Mat<T>*>& grads,
                OptimizerState<T>& state) {
  state.config.validate();
  if (params.size() != grads.size() || params.size() != state.m.size()) {
    throw ShapeError("adamw_step: params/grads/state count mismatch");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (!params[i]->same_shape(*grads[i]) || !params[i]->same_shape(state.m[i])) {
      throw ShapeError("adamw_step: shape mismatch at tensor " + std::to_string(i));
    }
    if (!grads[i]->all_finite()) {
      throw DegenerateError("adamw_step: non-finite gradient in tensor " + std::to_string(i) +
                            "; update rejected");
    }
  }

  state.step += 1;
  const T b1 = state.config.beta1;
  const T b2 = state.config.beta2;
  const T bias1 = T(1) - std::pow(b1, T(state.step));
  const T bias2 = T(1) - std::pow(b2, T(state.step));
  const T lr = state.config.learning_rate;
  const T eps = state.config.epsilon;
  const T wd = state.config.weight_decay;

  for (std::size_t i = 0; i < params.size(); ++i) {
    Mat<T>& p = *params[i];
    const Mat<T>& g = *grads[i];
    Mat<T>& m = state.m[i];
    Mat<T>& v = state.v[i];
    for (std::size_t k = 0; k < p.data.size(); ++k) {
      m.data[k] = b1 * m.data[k] + (T(1) - b1) * g.data[k];
      v.data[k] = b2 * v.data[k] + (T(1) - b2) * g.data[k] * g.data[k];
      const T mhat = m.data[k] / bias1;
      const T vhat = v.data[k] / bias2;
      p.data[k] -= lr * (mhat / (std::sqrt(vhat) + eps) + wd * p.data[k]);
    }
  }
}

}  // namespace lwr
