// Copyright (c) 2026 lwr authors
// SPDX-License-Identifier: Apache-2.0

#include <cmath>

#include "doctest.h"
#include "lwr/adamw.hpp"
#include "lwr/ops.hpp"
#include "lwr/tape.hpp"
#include "test_util.hpp"

using namespace lwr;
using lwr_test::fill_normal;
using lwr_test::fill_uniform;
using lwr_test::gradient_check;

namespace {

// Runs central differences on every input of an op wired through a tape.
// Builder gets the tape plus leaf ids and must return the loss id (1x1).
double run_op_gradcheck(const std::vector<Mat<double>*>& inputs,
                        const std::function<VarId(Tape<double>&, const std::vector<VarId>&)>& build) {
  // Analytic grads.
  std::vector<std::vector<double>> analytic;
  {
    Tape<double> tape;
    std::vector<VarId> ids;
    for (Mat<double>* m : inputs) ids.push_back(tape.leaf(*m));
    VarId loss = build(tape, ids);
    tape.backward(loss);
    for (VarId id : ids) analytic.push_back(tape.grad(id).data);
  }
  double worst = 0.0;
  for (std::size_t which = 0; which < inputs.size(); ++which) {
    auto eval = [&]() {
      Tape<double> tape;
      std::vector<VarId> ids;
      for (Mat<double>* m : inputs) ids.push_back(tape.leaf(*m));
      return tape.value(build(tape, ids)).data[0];
    };
    auto res = gradient_check(inputs[which]->data, eval, analytic[which]);
    worst = std::max(worst, res.max_rel_err);
  }
  return worst;
}

// Reduces a matrix to a scalar with fixed random weights so every output
// element contributes to the loss.
VarId weighted_sum(Tape<double>& tape, VarId x, const Mat<double>& w) {
  const Mat<double>& xv = tape.value(x);
  REQUIRE(xv.rows == w.rows);
  REQUIRE(xv.cols == w.cols);
  Mat<double> out(1, 1);
  for (std::size_t i = 0; i < xv.data.size(); ++i) out.data[0] += xv.data[i] * w.data[i];
  VarId y = tape.leaf(out);
  tape.record([&tape, x, y, w] {
    const double g = tape.grad(y).data[0];
    Mat<double>& gx = tape.grad(x);
    for (std::size_t i = 0; i < gx.data.size(); ++i) gx.data[i] += g * w.data[i];
  });
  return y;
}

}  // namespace

TEST_CASE("linear: identity weight and zero-input bias pass-through") {
  Tape<float> tape;
  VarId x = tape.leaf(Mat<float>(1, 2, {1.0f, 2.0f}));
  VarId w = tape.leaf(Mat<float>(2, 2, {1.0f, 0.0f, 0.0f, 1.0f}));
  VarId b = tape.leaf(Mat<float>(1, 2, {0.0f, 0.0f}));
  const Mat<float>& y = tape.value(linear(tape, x, w, b));
  CHECK(y.data[0] == doctest::Approx(1.0f));
  CHECK(y.data[1] == doctest::Approx(2.0f));

  Tape<float> t2;
  VarId x2 = t2.leaf(Mat<float>(1, 2, {0.0f, 0.0f}));
  VarId w2 = t2.leaf(Mat<float>(2, 2, {0.5f, -1.0f, 2.0f, 0.25f}));
  VarId b2 = t2.leaf(Mat<float>(1, 2, {3.0f, 4.0f}));
  const Mat<float>& y2 = t2.value(linear(t2, x2, w2, b2));
  CHECK(y2.data[0] == doctest::Approx(3.0f));
  CHECK(y2.data[1] == doctest::Approx(4.0f));
}

TEST_CASE("linear: shape mismatch names both shapes") {
  Tape<float> tape;
  VarId x = tape.leaf(Mat<float>(1, 3));
  VarId w = tape.leaf(Mat<float>(2, 2));
  CHECK_THROWS_WITH_AS(linear(tape, x, w), doctest::Contains("1x3"), ShapeError);
}

TEST_CASE("linear: gradients match finite differences (4x3 * 3x5, 64-bit)") {
  Rng rng(11);
  Mat<double> x(4, 3), w(3, 5), b(1, 5), lossw(4, 5);
  fill_normal(rng, x);
  fill_normal(rng, w);
  fill_normal(rng, b);
  fill_normal(rng, lossw);
  const double err = run_op_gradcheck({&x, &w, &b}, [&](Tape<double>& t, const std::vector<VarId>& ids) {
    return weighted_sum(t, linear(t, ids[0], ids[1], ids[2]), lossw);
  });
  CHECK(err <= 1e-3);
}

TEST_CASE("softmax_rows: symmetry, stability, high-precision oracle") {
  Tape<float> tape;
  VarId x = tape.leaf(Mat<float>(1, 2, {0.0f, 0.0f}));
  const Mat<float>& y = tape.value(softmax_rows(tape, x));
  CHECK(y.data[0] == doctest::Approx(0.5f));
  CHECK(y.data[1] == doctest::Approx(0.5f));

  Tape<float> t2;
  VarId x2 = t2.leaf(Mat<float>(1, 2, {1000.0f, 0.0f}));
  const Mat<float>& y2 = t2.value(softmax_rows(t2, x2));
  CHECK(y2.data[0] == doctest::Approx(1.0f).epsilon(1e-6));
  CHECK(std::abs(y2.data[1]) <= 1e-6f);

  // Random rows vs direct 64-bit exp/sum.
  Rng rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    Mat<float> m(1, 8);
    fill_uniform(rng, m, -5.0, 5.0);
    Tape<float> t3;
    const Mat<float>& out = t3.value(softmax_rows(t3, t3.leaf(m)));
    double denom = 0.0;
    for (float v : m.data) denom += std::exp(static_cast<double>(v));
    double sum = 0.0;
    for (int j = 0; j < 8; ++j) {
      const double expect = std::exp(static_cast<double>(m.data[static_cast<std::size_t>(j)])) / denom;
      CHECK(std::abs(out.data[static_cast<std::size_t>(j)] - expect) <= 1e-6);
      sum += out.data[static_cast<std::size_t>(j)];
    }
    CHECK(std::abs(sum - 1.0) <= 1e-6);
  }
}

TEST_CASE("softmax_rows: fully masked row is degenerate") {
  Tape<float> tape;
  VarId x = tape.leaf(Mat<float>(1, 2, {1.0f, 2.0f}));
  Mat<float> mask(1, 2);
  mask.data[0] = -std::numeric_limits<float>::infinity();
  mask.data[1] = -std::numeric_limits<float>::infinity();
  CHECK_THROWS_AS(softmax_rows(tape, x, &mask), DegenerateError);
}

TEST_CASE("softmax_rows: gradient vs finite differences") {
  Rng rng(5);
  Mat<double> x(3, 6), lossw(3, 6);
  fill_uniform(rng, x, -2.0, 2.0);
  fill_normal(rng, lossw);
  const double err = run_op_gradcheck({&x}, [&](Tape<double>& t, const std::vector<VarId>& ids) {
    return weighted_sum(t, softmax_rows(t, ids[0]), lossw);
  });
  CHECK(err <= 1e-3);
}

TEST_CASE("layer_norm: constant row, normalized row, gradients") {
  Tape<float> tape;
  VarId x = tape.leaf(Mat<float>(1, 4, {2.5f, 2.5f, 2.5f, 2.5f}));
  VarId g = tape.leaf(Mat<float>(1, 4, {1.0f, 1.0f, 1.0f, 1.0f}));
  VarId s = tape.leaf(Mat<float>(1, 4));
  const Mat<float>& y = tape.value(layer_norm(tape, x, g, s, 1e-5f));
  for (float v : y.data) CHECK(std::abs(v) <= 1e-6f);

  Tape<float> t2;
  VarId x2 = t2.leaf(Mat<float>(1, 2, {1.0f, -1.0f}));
  VarId g2 = t2.leaf(Mat<float>(1, 2, {1.0f, 1.0f}));
  VarId s2 = t2.leaf(Mat<float>(1, 2));
  const Mat<float>& y2 = t2.value(layer_norm(t2, x2, g2, s2, 1e-12f));
  CHECK(y2.data[0] == doctest::Approx(1.0f).epsilon(1e-5));
  CHECK(y2.data[1] == doctest::Approx(-1.0f).epsilon(1e-5));

  Rng rng(7);
  Mat<double> x3(4, 6), g3(1, 6), s3(1, 6), lossw(4, 6);
  fill_normal(rng, x3);
  fill_uniform(rng, g3, 0.5, 1.5);
  fill_normal(rng, s3, 0.1);
  fill_normal(rng, lossw);
  const double err = run_op_gradcheck({&x3, &g3, &s3}, [&](Tape<double>& t, const std::vector<VarId>& ids) {
    return weighted_sum(t, layer_norm(t, ids[0], ids[1], ids[2], 1e-5), lossw);
  });
  CHECK(err <= 1e-3);
}

TEST_CASE("gelu: zero, asymptote, gradient") {
  Tape<float> tape;
  VarId x = tape.leaf(Mat<float>(1, 2, {0.0f, 10.0f}));
  const Mat<float>& y = tape.value(gelu(tape, x));
  CHECK(y.data[0] == doctest::Approx(0.0f));
  CHECK(std::abs(y.data[1] - 10.0f) <= 1e-4f);

  Rng rng(9);
  Mat<double> x2(2, 8), lossw(2, 8);
  fill_uniform(rng, x2, -3.0, 3.0);
  fill_normal(rng, lossw);
  const double err = run_op_gradcheck({&x2}, [&](Tape<double>& t, const std::vector<VarId>& ids) {
    return weighted_sum(t, gelu(t, ids[0]), lossw);
  });
  CHECK(err <= 1e-3);
}

TEST_CASE("bce_with_logits: ln 2 at zero, saturation, oracle, degenerate mask") {
  Tape<float> tape;
  VarId z = tape.leaf(Mat<float>(1, 1, {0.0f}));
  const Mat<float>& l = tape.value(bce_with_logits(tape, z, {1.0f}, {1.0f}));
  CHECK(l.data[0] == doctest::Approx(0.6931472f).epsilon(1e-6));

  Tape<float> t2;
  VarId z2 = t2.leaf(Mat<float>(1, 1, {20.0f}));
  const Mat<float>& l2 = t2.value(bce_with_logits(t2, z2, {1.0f}, {1.0f}));
  CHECK(is_finite(l2.data[0]));
  CHECK(l2.data[0] == doctest::Approx(2.0611537e-9f).epsilon(1e-3));

  // Random batch vs direct 64-bit evaluation.
  Rng rng(13);
  Mat<float> zb(1, 16);
  fill_uniform(rng, zb, -6.0, 6.0);
  std::vector<float> labels(16), mask(16);
  for (int i = 0; i < 16; ++i) {
    labels[static_cast<std::size_t>(i)] = rng.next_double() < 0.5 ? 0.0f : 1.0f;
    mask[static_cast<std::size_t>(i)] = rng.next_double() < 0.25 ? 0.0f : 1.0f;
  }
  mask[0] = 1.0f;
  Tape<float> t3;
  const float got = t3.value(bce_with_logits(t3, t3.leaf(zb), labels, mask)).data[0];
  double total = 0.0, count = 0.0;
  for (int i = 0; i < 16; ++i) {
    if (mask[static_cast<std::size_t>(i)] == 0.0f) continue;
    const double zd = zb.data[static_cast<std::size_t>(i)];
    const double y = labels[static_cast<std::size_t>(i)];
    const double sig = 1.0 / (1.0 + std::exp(-zd));
    total += -(y * std::log(sig) + (1.0 - y) * std::log(1.0 - sig));
    count += 1.0;
  }
  CHECK(std::abs(got - total / count) <= 1e-6);

  Tape<float> t4;
  VarId z4 = t4.leaf(Mat<float>(1, 2));
  CHECK_THROWS_AS(bce_with_logits(t4, z4, {1.0f, 0.0f}, {0.0f, 0.0f}), DegenerateError);
}

TEST_CASE("bce_with_logits: nonnegative and gradient check") {
  Rng rng(17);
  for (int trial = 0; trial < 10; ++trial) {
    Mat<double> z(1, 6);
    fill_uniform(rng, z, -4.0, 4.0);
    std::vector<double> labels(6), mask(6, 1.0);
    for (auto& v : labels) v = rng.next_double() < 0.5 ? 0.0 : 1.0;
    const double err = run_op_gradcheck({&z}, [&](Tape<double>& t, const std::vector<VarId>& ids) {
      return bce_with_logits(t, ids[0], labels, mask);
    });
    CHECK(err <= 1e-3);
    Tape<double> t;
    CHECK(t.value(bce_with_logits(t, t.leaf(z), labels, mask)).data[0] >= 0.0);
  }
}

TEST_CASE("gather_rows and add_to_rows gradients") {
  Rng rng(19);
  Mat<double> table(5, 4), lossw(6, 4);
  fill_normal(rng, table);
  fill_normal(rng, lossw);
  const std::vector<int> idx = {0, 3, 3, 1, 4, 2};
  double err = run_op_gradcheck({&table}, [&](Tape<double>& t, const std::vector<VarId>& ids) {
    return weighted_sum(t, gather_rows(t, ids[0], idx), lossw);
  });
  CHECK(err <= 1e-3);

  Mat<double> x(6, 4), vec(1, 4);
  fill_normal(rng, x);
  fill_normal(rng, vec);
  const std::vector<int> rows = {1, 4};
  err = run_op_gradcheck({&x, &vec}, [&](Tape<double>& t, const std::vector<VarId>& ids) {
    return weighted_sum(t, add_to_rows(t, ids[0], rows, ids[1]), lossw);
  });
  CHECK(err <= 1e-3);
}

TEST_CASE("tape: backward visits each op exactly once, in reverse order") {
  Tape<float> tape;
  VarId x = tape.leaf(Mat<float>(1, 4, {1.0f, 2.0f, 3.0f, 4.0f}));
  VarId g = tape.leaf(Mat<float>(1, 4, {1.0f, 1.0f, 1.0f, 1.0f}));
  VarId s = tape.leaf(Mat<float>(1, 4));
  VarId y = layer_norm(tape, x, g, s, 1e-5f);
  y = gelu(tape, y);
  VarId loss = bce_with_logits(tape, y, {1.0f, 0.0f, 1.0f, 0.0f}, {1.0f, 1.0f, 1.0f, 1.0f});
  std::vector<std::size_t> visited;
  tape.on_backward_op = [&](std::size_t i) { visited.push_back(i); };
  tape.backward(loss);
  REQUIRE(visited.size() == tape.op_count());
  for (std::size_t i = 0; i < visited.size(); ++i) {
    CHECK(visited[i] == tape.op_count() - 1 - i);
  }
}

TEST_CASE("adamw: zero gradient keeps params, first step moves by ~lr") {
  AdamWConfig<double> cfg;
  cfg.learning_rate = 0.1;
  OptimizerState<double> state;
  state.config = cfg;
  Mat<double> p(1, 1, {5.0});
  Mat<double> g(1, 1, {0.0});
  state.init({&p});
  adamw_step<double>({&p}, {&g}, state);
  CHECK(p.data[0] == doctest::Approx(5.0));

  Mat<double> p2(1, 1, {5.0});
  Mat<double> g2(1, 1, {1.0});
  OptimizerState<double> s2;
  s2.config = cfg;
  s2.init({&p2});
  adamw_step<double>({&p2}, {&g2}, s2);
  // First-step bias correction makes mhat/sqrt(vhat) = 1.
  CHECK(p2.data[0] == doctest::Approx(5.0 - 0.1).epsilon(1e-6));
  CHECK(s2.step == 1);
}

TEST_CASE("adamw: 3-step trajectory matches hand-rolled 64-bit reference") {
  AdamWConfig<double> cfg;
  cfg.learning_rate = 0.05;
  OptimizerState<double> state;
  state.config = cfg;
  Mat<double> p(2, 2, {1.0, -2.0, 0.5, 3.0});
  state.init({&p});
  const std::vector<std::vector<double>> grads = {
      {0.3, -0.1, 0.7, 0.2}, {-0.4, 0.6, 0.1, -0.9}, {0.05, 0.05, -0.2, 0.4}};

  // Reference: scalar-by-scalar Adam with bias correction.
  std::vector<double> rp = p.data, m(4, 0.0), v(4, 0.0);
  for (int t = 1; t <= 3; ++t) {
    for (int i = 0; i < 4; ++i) {
      const double g = grads[static_cast<std::size_t>(t - 1)][static_cast<std::size_t>(i)];
      m[static_cast<std::size_t>(i)] = 0.9 * m[static_cast<std::size_t>(i)] + 0.1 * g;
      v[static_cast<std::size_t>(i)] = 0.999 * v[static_cast<std::size_t>(i)] + 0.001 * g * g;
      const double mh = m[static_cast<std::size_t>(i)] / (1.0 - std::pow(0.9, t));
      const double vh = v[static_cast<std::size_t>(i)] / (1.0 - std::pow(0.999, t));
      rp[static_cast<std::size_t>(i)] -= 0.05 * mh / (std::sqrt(vh) + 1e-8);
    }
  }
  for (const auto& gdata : grads) {
    Mat<double> g(2, 2, gdata);
    adamw_step<double>({&p}, {&g}, state);
  }
  for (int i = 0; i < 4; ++i) {
    CHECK(std::abs(p.data[static_cast<std::size_t>(i)] - rp[static_cast<std::size_t>(i)]) <= 1e-7);
  }
}

TEST_CASE("adamw: rejects non-finite gradients with state unchanged") {
  OptimizerState<float> state;
  Mat<float> p(1, 2, {1.0f, 2.0f});
  state.init({&p});
  Mat<float> g(1, 2, {std::numeric_limits<float>::quiet_NaN(), 0.0f});
  CHECK_THROWS_AS(adamw_step<float>({&p}, {&g}, state), DegenerateError);
  CHECK(p.data[0] == 1.0f);
  CHECK(state.step == 0);
}

TEST_CASE("adamw: invariant to parameter shape layout") {
  const std::vector<float> values = {0.1f, -0.2f, 0.3f, 1.0f, -1.5f, 2.0f,
                                     0.7f, -0.7f, 0.25f, -0.05f, 1.1f, 0.9f};
  const std::vector<float> gvals = {0.9f, -0.3f, 0.2f, 0.8f, -0.6f, 0.1f,
                                    -0.4f, 0.5f, -0.9f, 0.3f, -0.1f, 0.6f};
  Mat<float> a(2, 6, values), b(3, 4, values);
  Mat<float> ga(2, 6, gvals), gb(3, 4, gvals);
  OptimizerState<float> sa, sb;
  sa.init({&a});
  sb.init({&b});
  for (int t = 0; t < 3; ++t) {
    adamw_step<float>({&a}, {&ga}, sa);
    adamw_step<float>({&b}, {&gb}, sb);
  }
  for (std::size_t i = 0; i < values.size(); ++i) CHECK(a.data[i] == b.data[i]);
}

TEST_CASE("dropout: rate 0 is identity, scaling preserves expectation") {
  Tape<float> tape;
  Rng rng(23);
  Mat<float> x(1, 4, {1.0f, 2.0f, 3.0f, 4.0f});
  VarId xid = tape.leaf(x);
  CHECK(dropout(tape, xid, 0.0f, rng) == xid);

  Rng rng2(29);
  double sum = 0.0;
  const int trials = 20000;
  for (int t = 0; t < trials; ++t) {
    Tape<float> tp;
    VarId id = tp.leaf(Mat<float>(1, 1, {1.0f}));
    sum += tp.value(dropout(tp, id, 0.25f, rng2)).data[0];
  }
  CHECK(sum / trials == doctest::Approx(1.0).epsilon(0.02));
}
