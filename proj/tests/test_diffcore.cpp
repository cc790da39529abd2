// Copyright 2026 The SparseCBM Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//  http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

#include "doctest.h"

#include "sparsecbm/error.hpp"
#include "sparsecbm/linalg.hpp"
#include "sparsecbm/model.hpp"
#include "sparsecbm/param_vector.hpp"
#include "sparsecbm/rng.hpp"
#include "sparsecbm/training.hpp"
#include "support/fixtures.hpp"
#include "support/reference_model.hpp"

using namespace sparsecbm;

TEST_CASE("affine") {
  RowMatrix eye = RowMatrix::Identity(2, 2);
  Vector x(2);
  x << 1, 2;
  CHECK(affine(eye, Vector::Zero(2), x) == x);

  RowMatrix zero = RowMatrix::Zero(1, 2);
  Vector b(1);
  b << 3;
  CHECK(affine(zero, b, x)(0) == 3.0);

  RowMatrix w(2, 2);
  w << 1, 2, 3, 4;
  Vector ones = Vector::Ones(2);
  const Vector y = affine(w, Vector::Zero(2), ones);
  CHECK(y(0) == 3.0);
  CHECK(y(1) == 7.0);

  CHECK_THROWS_AS(affine(w, Vector::Zero(3), ones), DimensionError);
  CHECK_THROWS_AS(affine(w, Vector::Zero(2), Vector::Ones(3)), DimensionError);
}

TEST_CASE("sigmoid values") {
  CHECK(sigmoid(0.0) == 0.5);
  CHECK(sigmoid(std::log(3.0)) == doctest::Approx(0.75).epsilon(1e-15));
  CHECK(sigmoid(-800.0) >= 0.0);
  CHECK(sigmoid(800.0) == 1.0);
}

TEST_CASE("softmax cross entropy") {
  Vector u = Vector::Constant(5, 0.3);
  for (std::size_t y = 0; y < 5; ++y) CHECK(softmax_cross_entropy(u, y) == doctest::Approx(std::log(5.0)).epsilon(1e-14));

  Vector sat(2);
  sat << 1000, 0;
  CHECK(softmax_cross_entropy(sat, 0) == doctest::Approx(0.0));
  CHECK(std::isfinite(softmax_cross_entropy(sat, 1)));

  Vector l(3);
  l << 1, 2, 3;
  const double expect = -std::log(std::exp(3.0) / (std::exp(1.0) + std::exp(2.0) + std::exp(3.0)));
  CHECK(softmax_cross_entropy(l, 2) == doctest::Approx(expect).epsilon(1e-14));
  CHECK(softmax_cross_entropy(l, 2) == doctest::Approx(0.40761).epsilon(1e-5));

  CHECK_THROWS_AS(softmax_cross_entropy(l, 3), DimensionError);
}

TEST_CASE("cross entropy is shift invariant") {
  Rng rng(11);
  for (int trial = 0; trial < 200; ++trial) {
    Vector l(6);
    for (auto& v : l) v = rng.uniform(-5, 5);
    const double c = rng.uniform(-50, 50);
    const std::size_t y = rng.below(6);
    const Vector shifted = l + Vector::Constant(6, c);
    CHECK(std::abs(softmax_cross_entropy(shifted, y) - softmax_cross_entropy(l, y)) <= 1e-12);
  }
}

TEST_CASE("cross entropy gradient matches differences") {
  Rng rng(3);
  Vector l(4);
  for (auto& v : l) v = rng.uniform(-2, 2);
  const Vector g = softmax_cross_entropy_grad(l, 1);
  CHECK(g.sum() == doctest::Approx(0.0).epsilon(1e-15));
  for (int i = 0; i < 4; ++i) {
    Vector up = l, down = l;
    up(i) += 1e-6;
    down(i) -= 1e-6;
    const double fd = (softmax_cross_entropy(up, 1) - softmax_cross_entropy(down, 1)) / 2e-6;
    CHECK(g(i) == doctest::Approx(fd).epsilon(1e-7));
  }
}

TEST_CASE("argmax ties go low") {
  CHECK(argmax(Vector::Zero(4)) == 0);
  Vector v(4);
  v << 1, 3, 3, 2;
  CHECK(argmax(v) == 1);
  v << 0, 0, 0, 9;
  CHECK(argmax(v) == 3);
}

TEST_CASE("finite difference check on a quadratic") {
  // f(w) = 1/2 w^T A w + b^T w, gradient A w + b.
  RowMatrix a(3, 3);
  a << 4, 1, 0, 1, 3, 1, 0, 1, 2;
  Vector b(3);
  b << 1, -2, 0.5;
  std::vector<double> w{0.3, -0.7, 1.1};
  auto f = [&](std::span<const double> p) {
    Eigen::Map<const Vector> v(p.data(), 3);
    return 0.5 * v.dot(a * v) + b.dot(v);
  };
  Eigen::Map<const Vector> wv(w.data(), 3);
  const Vector g = a * wv + b;
  std::vector<double> grad(g.data(), g.data() + 3);
  const auto rep = finite_difference_check(f, w, grad, 1e-3);
  CHECK(rep.max_relative_error <= 1e-9);

  CHECK_THROWS(finite_difference_check(f, w, grad, 0.0));
  CHECK_THROWS(finite_difference_check(f, w, grad, -1.0));
}

TEST_CASE("sigmoid sum has quarter gradients") {
  std::vector<double> x(5, 0.0);
  auto f = [](std::span<const double> p) {
    double s = 0;
    for (double v : p) s += sigmoid(v);
    return s;
  };
  for (double v : x) {
    const double s = sigmoid(v);
    CHECK(s * (1 - s) == 0.25);
  }
  std::vector<double> grad(5, 0.25);
  CHECK(finite_difference_check(f, x, grad, 1e-6).max_relative_error <= 1e-8);
}

TEST_CASE("param vector layout") {
  ParamVector pv;
  CHECK(pv.add_block("a", 2, 3) == 0);
  CHECK(pv.add_block("b", 1, 4) == 1);
  CHECK(pv.size() == 10);
  CHECK(pv.block("b").offset == 6);
  CHECK(pv.block_name_at(5) == "a");
  CHECK(pv.block_name_at(6) == "b");
  CHECK_THROWS_AS(pv.block("nope"), std::out_of_range);
  pv.matrix(0)(1, 2) = 7.0;
  CHECK(pv.values()[5] == 7.0);
}

TEST_CASE("check_finite names the block") {
  ParamVector pv;
  pv.add_block("enc0.weight", 2, 2);
  pv.add_block("psi0.bias", 3, 1);
  std::vector<double> v(7, 0.0);
  CHECK_NOTHROW(check_finite(v, pv));
  v[5] = std::numeric_limits<double>::quiet_NaN();
  try {
    check_finite(v, pv);
    FAIL("expected NumericError");
  } catch (const NumericError& e) {
    CHECK(e.where() == "psi0.bias");
  }
}

TEST_CASE("model gradients match the long double reference") {
  for (std::uint64_t seed = 0; seed < 6; ++seed) {
    const auto cfg = testing::small_config(seed, 3, seed % 3 == 2);
    auto params = testing::noisy_params(cfg);
    const auto masks = testing::random_masks(3, params.prunable_size(), 0.7, seed + 100);
    const auto ex = testing::random_example(cfg, seed + 200);
    Objective obj;
    obj.concept_weight = 5.0;
    obj.task_term = seed % 2 ? TaskTerm::kPerConcept : TaskTerm::kSingle;
    obj.direct_head = cfg.direct_head;
    const Pathway pw(params, masks, obj.direct_head);
    const auto trace = run_forward(pw, ex.token_ids);
    const auto val = evaluate_objective(trace, ex, obj, cfg);
    const auto rec = backward(pw, trace, val.grads);

    testing::ReferenceModel<long double> ref(params);
    const auto v = params.values().values();
    const long double ref_loss = ref.loss(v, masks, ex, 1.0, 5.0, obj.task_term == TaskTerm::kPerConcept,
                                          obj.direct_head);
    CHECK(val.terms.total == doctest::Approx(static_cast<double>(ref_loss)).epsilon(1e-12));

    const auto chk = testing::reference_gradient_check(params, masks, ex, rec.grads, 1.0, 5.0,
                                                       obj.task_term == TaskTerm::kPerConcept, obj.direct_head);
    CHECK(chk.max_relative_error <= 1e-5);
  }
}

TEST_CASE("library finite difference check on a small graph") {
  const auto cfg = testing::small_config(4);
  const auto params = testing::noisy_params(cfg);
  const auto masks = testing::random_masks(3, params.prunable_size(), 0.8, 9);
  const auto ex = testing::random_example(cfg, 12);
  const auto rep = check_model_gradients(ex, params, masks, Objective{}, 1e-6);
  CHECK(rep.max_relative_error <= 1e-4);
}

TEST_CASE("backward is deterministic and leaves unrelated blocks zero") {
  const auto cfg = testing::small_config(5);
  const auto params = testing::noisy_params(cfg);
  const auto masks = MaskSet::all_ones(3, params.prunable_size());
  const auto ex = testing::random_example(cfg, 1);
  const Pathway pw(params, masks);
  const auto trace = run_forward(pw, ex.token_ids);
  const auto val = evaluate_objective(trace, ex, Objective{}, cfg);
  const auto a = backward(pw, trace, val.grads);
  const auto b = backward(pw, trace, val.grads);
  CHECK(a.grads == b.grads);
  // no direct head in the objective, so its gradient is identically zero
  const auto& pv = params.values();
  for (const char* name : {"head.weight", "head.bias"}) {
    const auto& blk = pv.block(name);
    for (std::size_t i = 0; i < blk.size(); ++i) CHECK(a.grads[blk.offset + i] == 0.0);
  }
  // embedding rows of absent tokens
  const auto& emb = pv.block("embeddings");
  for (std::size_t t = 0; t < cfg.vocab_size; ++t) {
    if (std::find(ex.token_ids.begin(), ex.token_ids.end(), static_cast<int>(t)) != ex.token_ids.end()) continue;
    for (std::size_t c = 0; c < cfg.emb_dim; ++c) CHECK(a.grads[emb.offset + t * cfg.emb_dim + c] == 0.0);
  }
}

TEST_CASE("backward reports non-finite gradients") {
  const auto cfg = testing::small_config(2);
  auto params = testing::noisy_params(cfg);
  const auto masks = MaskSet::all_ones(3, params.prunable_size());
  const auto ex = testing::random_example(cfg, 4);
  const Pathway pw(params, masks);
  const auto trace = run_forward(pw, ex.token_ids);
  OutputGrads up;
  up.task = Vector::Constant(cfg.task_classes, std::numeric_limits<double>::infinity());
  CHECK_THROWS_AS(backward(pw, trace, up), NumericError);
}
