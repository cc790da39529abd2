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
#include <numeric>
#include <vector>

#include "doctest.h"

#include "sparsecbm/error.hpp"
#include "sparsecbm/evaluation.hpp"
#include "sparsecbm/rng.hpp"
#include "support/fixtures.hpp"

using namespace sparsecbm;

using Labels = std::vector<std::size_t>;

TEST_CASE("accuracy") {
  CHECK(accuracy(Labels{1, 2, 0}, Labels{1, 2, 0}) == 1.0);
  CHECK(accuracy(Labels{1, 1}, Labels{0, 0}) == 0.0);
  CHECK(accuracy(Labels{0, 1, 2, 3}, Labels{0, 1, 2, 0}) == 0.75);
  CHECK_THROWS_AS(accuracy(Labels{}, Labels{}), UsageError);
  CHECK_THROWS_AS(accuracy(Labels{1}, Labels{1, 2}), DimensionError);
}

TEST_CASE("macro f1") {
  CHECK(macro_f1(Labels{0, 1, 2}, Labels{0, 1, 2}, 3) == 1.0);
  CHECK(macro_f1(Labels{0, 1, 1, 1}, Labels{0, 0, 1, 1}, 2) == doctest::Approx((2.0 / 3.0 + 0.8) / 2).epsilon(1e-15));
  CHECK(macro_f1(Labels{0, 1, 1, 1}, Labels{0, 0, 1, 1}, 2) == doctest::Approx(0.733333).epsilon(1e-6));
  CHECK(macro_f1(Labels{1, 1, 1}, Labels{0, 0, 0}, 2) == 0.0);
  CHECK_THROWS_AS(macro_f1(Labels{}, Labels{}, 2), UsageError);
  CHECK_THROWS_AS(macro_f1(Labels{3}, Labels{0}, 2), UsageError);
}

TEST_CASE("macro f1 equals accuracy when perfect") {
  Rng rng(5);
  Labels g(40);
  for (auto& v : g) v = rng.below(4);
  CHECK(macro_f1(g, g, 4) == accuracy(g, g));
}

TEST_CASE("metrics are permutation invariant") {
  Rng rng(8);
  Labels p(60), g(60);
  for (std::size_t i = 0; i < 60; ++i) {
    p[i] = rng.below(3);
    g[i] = rng.below(3);
  }
  std::vector<std::size_t> perm(60);
  std::iota(perm.begin(), perm.end(), 0);
  rng.shuffle(std::span<std::size_t>(perm));
  Labels pp(60), gg(60);
  for (std::size_t i = 0; i < 60; ++i) {
    pp[i] = p[perm[i]];
    gg[i] = g[perm[i]];
  }
  CHECK(accuracy(p, g) == accuracy(pp, gg));
  CHECK(macro_f1(p, g, 3) == doctest::Approx(macro_f1(pp, gg, 3)).epsilon(1e-15));
}

TEST_CASE("split evaluation") {
  const auto cfg = testing::small_config(1);
  const auto params = testing::noisy_params(cfg);
  const auto one = testing::random_split(cfg, 1, 3);
  const auto ones = MaskSet::all_ones(3, params.prunable_size());
  const auto rep = evaluate_split(one, params, ones);
  CHECK((rep.task.accuracy == 0.0 || rep.task.accuracy == 1.0));
  for (const auto& c : rep.concepts) CHECK((c.accuracy == 0.0 || c.accuracy == 1.0));

  const auto split = testing::random_split(cfg, 30, 4);
  const auto a = evaluate_split(split, params, ones);
  const auto b = evaluate_split(split, params, MaskSet::all_ones(3, params.prunable_size()));
  CHECK(a.to_json() == b.to_json());
  CHECK(a.concepts.size() == 3);
  double mean = 0;
  for (const auto& c : a.concepts) mean += c.accuracy;
  CHECK(a.concept_mean.accuracy == doctest::Approx(mean / 3));
  for (const auto& c : a.concepts) {
    CHECK(c.accuracy >= 0.0);
    CHECK(c.accuracy <= 1.0);
    CHECK(c.macro_f1 >= 0.0);
    CHECK(c.macro_f1 <= 1.0);
  }

  std::vector<MetricReport> reps{a, a};
  CHECK(average_reports(reps).to_json() == a.to_json());
  CHECK(a.to_text().find("macro-F1") != std::string::npos);
}
