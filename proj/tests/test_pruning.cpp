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
#include <numeric>
#include <vector>

#include "doctest.h"

#include "sparsecbm/error.hpp"
#include "sparsecbm/model.hpp"
#include "sparsecbm/pruning.hpp"
#include "sparsecbm/rng.hpp"
#include "support/fixtures.hpp"
#include "support/qp_oracle.hpp"

using namespace sparsecbm;

namespace {

using Idx = std::vector<std::size_t>;

RowMatrix to_row(const Eigen::MatrixXd& m) { return m; }

FisherEstimate diagonal_fisher(const std::vector<double>& diag, std::size_t block_size) {
  FisherEstimate f;
  f.dim = diag.size();
  f.block_size = block_size;
  for (std::size_t off = 0; off < diag.size(); off += block_size) {
    const auto n = std::min(block_size, diag.size() - off);
    RowMatrix b = RowMatrix::Zero(n, n);
    for (std::size_t i = 0; i < n; ++i) b(i, i) = diag[off + i];
    f.blocks.push_back(b);
  }
  return f;
}

ModelConfig twelve_weight_config() {
  ModelConfig c;
  c.vocab_size = 4;
  c.emb_dim = 2;
  c.hidden_dims = {2};
  c.latent_dim = 4;
  c.num_concepts = 2;
  c.concept_classes = 2;
  c.task_classes = 2;
  return c;
}

}  // namespace

TEST_CASE("fisher from one known gradient") {
  const std::vector<std::vector<double>> g{{1.0, 2.0}};
  const auto f = accumulate_fisher(g, 2, 2, 1e-4);
  REQUIRE(f.blocks.size() == 1);
  CHECK(f.blocks[0](0, 0) == doctest::Approx(1.0001).epsilon(1e-15));
  CHECK(f.blocks[0](0, 1) == 2.0);
  CHECK(f.blocks[0](1, 0) == 2.0);
  CHECK(f.blocks[0](1, 1) == doctest::Approx(4.0001).epsilon(1e-15));
}

TEST_CASE("zero gradients give a dampened identity") {
  const std::vector<std::vector<double>> g(5, std::vector<double>(7, 0.0));
  const auto f = accumulate_fisher(g, 7, 3, 1e-4);
  CHECK(f.blocks.size() == 3);
  CHECK(f.blocks[2].rows() == 1);
  for (const auto& b : f.blocks) CHECK(b == RowMatrix(1e-4 * RowMatrix::Identity(b.rows(), b.cols())));
}

TEST_CASE("fisher eigenvalues are bounded below by zeta") {
  Rng rng(4);
  for (int t = 0; t < 20; ++t) {
    std::vector<std::vector<double>> g(1 + rng.below(10), std::vector<double>(13));
    for (auto& row : g) for (auto& v : row) v = rng.uniform(-3, 3);
    const auto f = accumulate_fisher(g, 13, 5, 1e-4);
    for (const auto& b : f.blocks) {
      CHECK(b == b.transpose());
      Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(b);
      CHECK(es.eigenvalues().minCoeff() >= 1e-4 - 1e-12);
    }
  }
}

TEST_CASE("fisher of a model with zero phi and gamma zero") {
  const auto cfg = testing::small_config(3);
  auto p = testing::noisy_params(cfg);
  for (std::size_t k = 0; k < 3; ++k) p.matrix(p.phi_block(k)).setZero();
  PruneConfig pc;
  pc.gamma = 0.0;
  pc.block_size = 8;
  pc.fisher_samples = 10;
  const auto data = testing::random_split(cfg, 10, 1);
  const auto f = estimate_fisher(data, p, MaskSet::all_ones(3, p.prunable_size()), 1, pc, 3);
  for (const auto& b : f.blocks) CHECK(b == RowMatrix(1e-4 * RowMatrix::Identity(b.rows(), b.cols())));
}

TEST_CASE("obs closed forms on hand examples") {
  Vector theta(2);
  theta << 1, 3;
  RowMatrix diag = RowMatrix::Zero(2, 2);
  diag(0, 0) = 2;
  diag(1, 1) = 4;
  CHECK(obs_score(Idx{1}, theta, diag) == doctest::Approx(18.0).epsilon(1e-14));
  const Vector dd = obs_update(Idx{1}, theta, diag);
  CHECK(dd(0) == 0.0);
  CHECK(dd(1) == doctest::Approx(-3.0).epsilon(1e-15));

  RowMatrix f(2, 2);
  f << 2, 1, 1, 2;
  theta << 1, 1;
  CHECK(obs_score(Idx{0}, theta, f) == doctest::Approx(0.75).epsilon(1e-14));
  const Vector d = obs_update(Idx{0}, theta, f);
  CHECK(d(0) == doctest::Approx(-1.0).epsilon(1e-14));
  CHECK(d(1) == doctest::Approx(0.5).epsilon(1e-14));
  const Vector after = theta + d;
  CHECK(after(0) == doctest::Approx(0.0).epsilon(1e-14));
  CHECK(after(1) == doctest::Approx(1.5).epsilon(1e-14));

  theta << 0, 1;
  CHECK(obs_score(Idx{0}, theta, f) == 0.0);
  CHECK(obs_update(Idx{0}, theta, f).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("diagonal fisher updates only the pruned entries") {
  Rng rng(9);
  Vector theta(6);
  for (auto& v : theta) v = rng.uniform(-2, 2);
  RowMatrix f = RowMatrix::Zero(6, 6);
  for (int i = 0; i < 6; ++i) f(i, i) = rng.uniform(0.5, 3);
  const Idx q{1, 4};
  const Vector d = obs_update(q, theta, f);
  for (int i = 0; i < 6; ++i) {
    if (i == 1 || i == 4) {
      CHECK(d(i) == doctest::Approx(-theta(i)).epsilon(1e-14));
    } else {
      CHECK(std::abs(d(i)) <= 1e-15);
    }
  }
}

TEST_CASE("obs agrees with a brute force quadratic program") {
  Rng rng(77);
  for (int t = 0; t < 100; ++t) {
    const std::size_t dim = 1 + rng.below(20);
    const auto f = testing::random_fisher(rng, dim);
    Eigen::VectorXd theta(dim);
    for (auto& v : theta) v = rng.uniform(-2, 2);
    const auto q = testing::random_subset(rng, dim, 1 + rng.below(std::min<std::size_t>(3, dim)));
    const auto sol = obs_solve(q, theta, to_row(f));
    const auto qp = testing::constrained_qp(q, theta, f);
    CHECK(std::abs(sol.rho - qp.value) <= 1e-8 * std::max(1.0, std::abs(qp.value)));
    CHECK((sol.delta - qp.delta).cwiseAbs().maxCoeff() <= 1e-8 * std::max(1.0, qp.delta.cwiseAbs().maxCoeff()));
    // quadratic model of the loss change
    CHECK(std::abs(0.5 * sol.delta.dot(f * sol.delta) - sol.rho) <= 1e-10 * std::max(1.0, sol.rho));
    if (q.size() == 1) {
      const Eigen::MatrixXd finv = f.inverse();
      const double b = theta(q[0]);
      CHECK(std::abs(sol.rho - b * b / (2 * finv(q[0], q[0]))) <= 1e-10 * std::max(1.0, sol.rho));
    }
  }
}

TEST_CASE("global index forms over a fisher estimate") {
  Rng rng(5);
  std::vector<std::vector<double>> g(6, std::vector<double>(10));
  for (auto& row : g) for (auto& v : row) v = rng.uniform(-1, 1);
  const auto f = accumulate_fisher(g, 10, 4, 1e-4);
  std::vector<double> theta(10);
  for (auto& v : theta) v = rng.uniform(-1, 1);
  // indices 5 and 6 live in block 1 (offset 4)
  Vector local(4);
  for (int i = 0; i < 4; ++i) local(i) = theta[4 + i];
  CHECK(obs_score(Idx{5, 6}, theta, f) == obs_score(Idx{1, 2}, local, f.blocks[1]));
  CHECK(obs_update(Idx{5, 6}, theta, f) == obs_update(Idx{1, 2}, local, f.blocks[1]));
  CHECK_THROWS(obs_score(Idx{3, 4}, theta, f));
}

TEST_CASE("pruned counts are exact") {
  CHECK(pruned_count_for(0.25, 100) == 25);
  CHECK(pruned_count_for(0.0, 100) == 0);
  CHECK(pruned_count_for(0.75, 10240) == 7680);
  CHECK(pruned_count_for(0.1875, 10240) == 1920);
  CHECK(pruned_count_for(0.3, 10) == 3);
  CHECK(pruned_count_for(0.33, 10) == 4);
  for (std::size_t L : {7u, 100u, 10240u}) {
    for (int p = 1; p <= 4; ++p) {
      const double s = 0.75 * p / 4;
      const auto n = pruned_count_for(s, L);
      CHECK(static_cast<double>(n) / L >= s - 1e-12);
      if (n > 0) CHECK(static_cast<double>(n - 1) / L < s);
    }
  }
}

TEST_CASE("prune step clears exactly the scheduled count") {
  const auto cfg = testing::small_config(1);
  auto p = testing::noisy_params(cfg);
  auto masks = MaskSet::all_ones(3, p.prunable_size());
  const auto L = p.prunable_size();
  Rng rng(2);
  std::vector<std::vector<double>> g(8, std::vector<double>(L));
  for (auto& row : g) for (auto& v : row) v = rng.uniform(-1, 1);
  PruneConfig pc;
  pc.block_size = 16;
  const auto f = accumulate_fisher(g, L, 16, 1e-4);
  for (double s : {0.1, 0.3, 0.3, 0.55}) {
    const auto before = masks[0];
    const auto rep = prune_step(p, masks, 0, s, pc, f);
    CHECK(L - masks.popcount(0) == pruned_count_for(s, L));
    CHECK(rep.achieved_sparsity >= s);
    for (std::size_t i = 0; i < L; ++i) CHECK(masks[0][i] <= before[i]);
  }
  CHECK(masks[1] == Mask(L, 1));
  CHECK_THROWS_AS(prune_step(p, masks, 0, 1.0, pc, f), UsageError);
}

TEST_CASE("prune step picks the cheapest set on a diagonal fisher") {
  const auto cfg = twelve_weight_config();
  Rng rng(31);
  for (int trial = 0; trial < 10; ++trial) {
    auto p = ModelParams::initialize(cfg);
    REQUIRE(p.prunable_size() == 12);
    std::vector<double> diag(12);
    for (auto& v : diag) v = rng.uniform(0.1, 2.0);
    for (auto& v : p.theta()) v = rng.uniform(-1, 1);
    const auto f = diagonal_fisher(diag, 1);
    PruneConfig pc;
    pc.block_size = 1;
    auto masks = MaskSet::all_ones(2, 12);
    const std::size_t need = 5;
    prune_step(p, masks, 1, 5.0 / 12.0, pc, f);
    double chosen = 0;
    for (std::size_t i = 0; i < 12; ++i) {
      if (!masks[1][i]) chosen += p.theta()[i] * p.theta()[i] * diag[i] / 2;
    }
    // exhaustive search over all 5-subsets
    double best = 1e300;
    for (unsigned bits = 0; bits < (1u << 12); ++bits) {
      if (static_cast<std::size_t>(__builtin_popcount(bits)) != need) continue;
      double c = 0;
      for (std::size_t i = 0; i < 12; ++i) {
        if (bits & (1u << i)) c += p.theta()[i] * p.theta()[i] * diag[i] / 2;
      }
      best = std::min(best, c);
    }
    CHECK(chosen == doctest::Approx(best).epsilon(1e-14));
    CHECK(masks.popcount(1) == 7);
  }
}

TEST_CASE("step target equal to current sparsity leaves the mask") {
  const auto cfg = twelve_weight_config();
  auto p = testing::noisy_params(cfg);
  auto masks = MaskSet::all_ones(2, 12);
  masks[0][3] = 0;
  masks[0][7] = 0;
  masks[0][8] = 0;
  const auto before = masks;
  PruneConfig pc;
  prune_step(p, masks, 0, 0.25, pc, diagonal_fisher(std::vector<double>(12, 1.0), 4));
  CHECK(masks == before);
}

TEST_CASE("per concept compensation zeroes the pruned weights") {
  const auto cfg = twelve_weight_config();
  auto p = testing::noisy_params(cfg);
  Rng rng(3);
  std::vector<std::vector<double>> g(5, std::vector<double>(12));
  for (auto& row : g) for (auto& v : row) v = rng.uniform(-1, 1);
  const auto f = accumulate_fisher(g, 12, 4, 1e-4);
  PruneConfig pc;
  pc.compensation = Compensation::kPerConceptDelta;
  auto masks = MaskSet::all_ones(2, 12);
  const auto theta = std::vector<double>(p.theta().begin(), p.theta().end());
  prune_step(p, masks, 0, 0.5, pc, f);
  REQUIRE(p.concept_deltas.size() == 2);
  for (std::size_t i = 0; i < 12; ++i) {
    if (!masks[0][i]) CHECK(std::abs(theta[i] + p.concept_deltas[0][i]) <= 1e-12);
    CHECK(p.concept_deltas[1][i] == 0.0);
  }
  CHECK(std::vector<double>(p.theta().begin(), p.theta().end()) == theta);
}

TEST_CASE("schedule with zero sparsity is a pass through") {
  const auto cfg = testing::small_config(2);
  auto p = testing::noisy_params(cfg);
  const auto before = p;
  auto masks = MaskSet::all_ones(3, p.prunable_size());
  PruneConfig pc;
  pc.target_sparsity = 0.0;
  pc.steps = 1;
  pc.block_size = 16;
  pc.fisher_samples = 8;
  prune_to_sparsity(testing::random_split(cfg, 12, 3), p, masks, pc);
  CHECK(masks == MaskSet::all_ones(3, p.prunable_size()));
  CHECK(p == before);
}

TEST_CASE("four concepts default to three quarters") {
  PruneConfig pc;
  CHECK(pc.resolved_sparsity(4) == 0.75);
  CHECK(pc.resolved_sparsity(2) == 0.5);
  const auto cfg = testing::small_config(4, 4);
  auto p = testing::noisy_params(cfg);
  auto masks = MaskSet::all_ones(4, p.prunable_size());
  pc.block_size = 16;
  pc.fisher_samples = 16;
  const auto rep = prune_to_sparsity(testing::random_split(cfg, 16, 5), p, masks, pc);
  CHECK(rep.steps.size() == 4);
  const auto L = p.prunable_size();
  for (std::size_t k = 0; k < 4; ++k) {
    CHECK(masks.popcount(k) <= L / 4);
    CHECK(L - masks.popcount(k) == pruned_count_for(0.75, L));
  }
  for (std::size_t s = 0; s < 4; ++s) {
    for (const auto& c : rep.steps[s].concepts) {
      CHECK(c.achieved_sparsity >= c.scheduled_sparsity - 1e-12);
    }
  }
  CHECK(nlohmann::json::parse(rep.to_json().dump())["steps"].size() == 4);
}

TEST_CASE("masks are monotone across steps") {
  const auto cfg = testing::small_config(6, 2);
  auto p = testing::noisy_params(cfg);
  auto masks = MaskSet::all_ones(2, p.prunable_size());
  const auto data = testing::random_split(cfg, 10, 2);
  PruneConfig pc;
  pc.block_size = 16;
  pc.fisher_samples = 10;
  pc.steps = 1;
  for (double s : {0.2, 0.4, 0.6}) {
    const auto before = masks;
    pc.target_sparsity = s;
    prune_to_sparsity(data, p, masks, pc);
    for (std::size_t k = 0; k < 2; ++k) {
      for (std::size_t i = 0; i < p.prunable_size(); ++i) CHECK(masks[k][i] <= before[k][i]);
      CHECK(p.prunable_size() - masks.popcount(k) == pruned_count_for(s, p.prunable_size()));
    }
  }
}

TEST_CASE("prune config validation") {
  PruneConfig pc;
  pc.target_sparsity = 1.0;
  CHECK_THROWS_AS(pc.validate(4), UsageError);
  pc.target_sparsity = 0.5;
  pc.zeta = 0;
  CHECK_THROWS_AS(pc.validate(4), UsageError);
  pc.zeta = 1e-4;
  pc.block_size = 0;
  CHECK_THROWS_AS(pc.validate(4), UsageError);
  pc.block_size = 4;
  pc.fisher_samples = 0;
  CHECK_THROWS_AS(pc.validate(4), UsageError);
}

TEST_CASE("fisher sample is seeded and cycles") {
  CHECK(fisher_sample(10, 4, 1) == fisher_sample(10, 4, 1));
  const auto s = fisher_sample(3, 7, 2);
  CHECK(s.size() == 7);
  for (auto i : s) CHECK(i < 3);
}
