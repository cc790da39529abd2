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

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "doctest.h"

#include "sparsecbm/explain.hpp"
#include "sparsecbm/model.hpp"
#include "sparsecbm/rng.hpp"
#include "support/fixtures.hpp"
#include "support/reference_model.hpp"

using namespace sparsecbm;

namespace {

Vocabulary small_vocab() {
  Vocabulary v;
  for (const char* w : {"food", "was", "great", "service", "slow", "quiet"}) v.add(w);
  return v;
}

DatasetSchema small_schema() {
  DatasetSchema s;
  s.concept_names = {"Food", "Service", "Noise"};
  s.task_class_count = 4;
  return s;
}

Mask bits(const char* s) {
  Mask m;
  for (const char* c = s; *c; ++c) m.push_back(*c == '1');
  return m;
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

TEST_CASE("duplicate tokens get equal saliency") {
  const auto p = testing::noisy_params(testing::small_config(1));
  Example ex = testing::random_example(p.config(), 1);
  ex.token_ids = {3, 5, 3, 6};
  const auto masks = testing::random_masks(3, p.prunable_size(), 0.6, 1);
  const auto s = token_saliency(ex, p, masks);
  CHECK(s.rows() == 3);
  CHECK(s.cols() == 4);
  for (Eigen::Index k = 0; k < 3; ++k) {
    CHECK(s(k, 0) == s(k, 2));
    for (Eigen::Index d = 0; d < 4; ++d) {
      CHECK(s(k, d) >= 0.0);
      CHECK(std::isfinite(s(k, d)));
    }
  }
  const auto a = token_attribution(ex, p, masks);
  for (Eigen::Index k = 0; k < 3; ++k) CHECK(a(k, 0) == a(k, 2));
}

TEST_CASE("zero psi gives a zero saliency row") {
  auto p = testing::noisy_params(testing::small_config(2));
  p.matrix(p.psi_weight_block(1)).setZero();
  const auto ex = testing::random_example(p.config(), 4, 3);
  const auto s = token_saliency(ex, p, MaskSet::all_ones(3, p.prunable_size()));
  CHECK(s.row(1).cwiseAbs().maxCoeff() == 0.0);
  CHECK(s.row(0).cwiseAbs().maxCoeff() > 0.0);
}

TEST_CASE("token saliency matches differences on the embeddings") {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const auto p = testing::noisy_params(testing::small_config(seed));
    Example ex = testing::random_example(p.config(), seed);
    ex.token_ids = {2, 4};
    const auto masks = testing::random_masks(3, p.prunable_size(), 0.7, seed);
    const auto s = token_saliency(ex, p, masks);
    const auto pred = predict(ex, p, masks);
    const auto& emb = p.values().block("embeddings");
    const auto D = p.config().emb_dim;
    for (std::size_t k = 0; k < 3; ++k) {
      for (std::size_t d = 0; d < 2; ++d) {
        long double sq = 0;
        for (std::size_t c = 0; c < D; ++c) {
          const std::size_t idx = emb.offset + static_cast<std::size_t>(ex.token_ids[d]) * D + c;
          auto logit = [&](long double shift) {
            std::vector<long double> v(p.values().values().begin(), p.values().values().end());
            v[idx] += shift;
            testing::ReferenceModel<long double> ref(p);
            return ref.forward(v, masks, ex.token_ids).concept_logits[k][pred.concepts[k]];
          };
          const long double g = (logit(1e-6L) - logit(-1e-6L)) / 2e-6L;
          sq += g * g;
        }
        const double fd = static_cast<double>(std::sqrt(sq));
        CHECK(std::abs(s(k, d) - fd) <= 1e-5 * (fd + 1e-12));
      }
    }
  }
}

TEST_CASE("contributions and ranking") {
  auto cfg = testing::small_config(3, 2);
  auto p = testing::noisy_params(cfg);
  const auto masks = MaskSet::all_ones(2, p.prunable_size());
  const auto ex = testing::random_example(cfg, 3);

  SUBCASE("zero phi ranks last") {
    p.matrix(p.phi_block(0)).setZero();
    const auto r = concept_contributions(forward_pathway(ex, p, masks));
    CHECK(r.contributions.row(0).cwiseAbs().maxCoeff() == 0.0);
    CHECK(r.order.back() == 0);
    CHECK(r.impact[0] == 0.0);
  }
  SUBCASE("both positive, larger phi first") {
    // both concepts confidently class 1, phi only differs in scale
    for (std::size_t k = 0; k < 2; ++k) {
      p.matrix(p.psi_weight_block(k)).setZero();
      p.matrix(p.psi_bias_block(k)) << -5.0, 5.0, -5.0;
      p.matrix(p.phi_block(k)).setZero();
    }
    p.matrix(p.phi_block(0))(2, 1) = 1.0;
    p.matrix(p.phi_block(1))(2, 1) = 3.0;
    const auto t = forward_pathway(ex, p, masks);
    const auto r = concept_contributions(t);
    CHECK(r.predicted == 2);
    CHECK(r.order == std::vector<std::size_t>{1, 0});
    CHECK(r.impact[1] > r.impact[0]);
  }
  SUBCASE("single concept equals the task logits") {
    auto c1 = testing::small_config(3, 1);
    const auto q = testing::noisy_params(c1);
    const auto t = forward_pathway(testing::random_example(c1, 2), q, MaskSet::all_ones(1, q.prunable_size()));
    const auto r = concept_contributions(t);
    CHECK((r.contributions.row(0).transpose() - t.task_logits).cwiseAbs().maxCoeff() == 0.0);
  }
}

TEST_CASE("jaccard") {
  CHECK(jaccard(bits("1011"), bits("1011")) == 1.0);
  CHECK(jaccard(bits("1010"), bits("0101")) == 0.0);
  CHECK(jaccard(bits("0000"), bits("0000")) == 0.0);
  // enumeration: intersection and union counted bit by bit
  const auto a = bits("10110010"), b = bits("10010110");
  int inter = 0, uni = 0;
  for (std::size_t i = 0; i < 8; ++i) {
    inter += a[i] && b[i];
    uni += a[i] || b[i];
  }
  CHECK(inter == 3);
  CHECK(uni == 5);
  CHECK(jaccard(a, b) == doctest::Approx(0.6).epsilon(1e-15));
}

TEST_CASE("mask stats") {
  const auto p = testing::noisy_params(testing::small_config(4));
  const auto masks = testing::random_masks(3, p.prunable_size(), 0.4, 4);
  const auto st = mask_overlap(masks, p);
  CHECK(st.overlap == st.overlap.transpose());
  for (Eigen::Index k = 0; k < 3; ++k) CHECK(st.overlap(k, k) == 1.0);
  REQUIRE(st.layers.size() == p.num_layers());
  for (std::size_t i = 0; i < st.layers.size(); ++i) {
    const auto& blk = p.values().block(p.layer_weight_block(i));
    CHECK(st.layers[i].rows == blk.rows);
    CHECK(st.layers[i].cols == blk.cols);
    CHECK(st.layers[i].offset == blk.offset);
  }
  for (std::size_t k = 0; k < 3; ++k) CHECK(st.sparsity[k] == masks.sparsity(k));
}

TEST_CASE("pgm rendering") {
  const auto p = testing::noisy_params(testing::small_config(5));
  const auto ones = MaskSet::all_ones(3, p.prunable_size());
  const auto st = mask_overlap(ones, p);
  for (const auto& layer : st.layers) {
    std::istringstream in(mask_pgm(ones[0], layer));
    std::string magic;
    std::size_t w = 0, h = 0, maxv = 0;
    in >> magic >> w >> h >> maxv;
    CHECK(magic == "P2");
    CHECK(w == layer.cols);
    CHECK(h == layer.rows);
    CHECK(maxv == 255);
    std::size_t count = 0;
    int px = 0;
    while (in >> px) {
      CHECK(px == 255);
      ++count;
    }
    CHECK(count == layer.rows * layer.cols);
  }
  Mask zero(p.prunable_size(), 0);
  CHECK(mask_pgm(zero, st.layers[0]).find("255\n0") != std::string::npos);
}

TEST_CASE("rendered report round trips") {
  const auto vocab = small_vocab();
  const auto schema = small_schema();
  auto cfg = testing::small_config(6);
  cfg.vocab_size = vocab.size();
  const auto p = testing::noisy_params(cfg);
  const auto masks = testing::random_masks(3, p.prunable_size(), 0.5, 6);
  Example ex;
  ex.token_ids = {2, 3, 4, 1};
  ex.concept_labels = {0, 1, 2};
  const auto trace = explain_example(ex, p, masks, vocab);
  CHECK(trace.tokens == std::vector<std::string>{"food", "was", "great", "<unk>"});
  const auto dir = std::filesystem::temp_directory_path() / "sparsecbm_explain_report";
  std::filesystem::remove_all(dir);
  render_report(trace, mask_overlap(masks, p), masks, schema, dir);

  const auto j = nlohmann::json::parse(slurp(dir / "report.json"));
  CHECK(j["tokens"].size() == 4);
  std::vector<double> sum(4, 0.0);
  for (const auto& c : j["concepts"]) {
    for (std::size_t i = 0; i < 4; ++i) sum[i] += c["contribution"][i].get<double>();
  }
  for (std::size_t i = 0; i < 4; ++i) CHECK(std::abs(sum[i] - j["task_logits"][i].get<double>()) <= 1e-10);
  CHECK(j["task_prediction"] == trace.task_prediction);
  CHECK(j["mask_stats"].contains("overlap"));

  for (const char* c : {"Food", "Service", "Noise"}) {
    for (std::size_t i = 0; i < p.num_layers(); ++i) {
      CHECK(std::filesystem::exists(dir / ("mask_" + std::string(c) + "_enc" + std::to_string(i) + ".weight.pgm")));
    }
  }
  const auto csv = slurp(dir / "token_saliency.csv");
  CHECK(csv.rfind("concept,food,was,great,<unk>\n", 0) == 0);
  std::size_t lines = 0;
  for (char ch : csv) lines += ch == '\n';
  CHECK(lines == 4);

  // rendering is deterministic
  const auto first = slurp(dir / "report.json");
  render_report(trace, mask_overlap(masks, p), masks, schema, dir);
  CHECK(slurp(dir / "report.json") == first);
  std::filesystem::remove_all(dir);
}

TEST_CASE("empty input explains the pad embedding") {
  const auto vocab = small_vocab();
  auto cfg = testing::small_config(7);
  cfg.vocab_size = vocab.size();
  const auto p = testing::noisy_params(cfg);
  Example ex;
  ex.concept_labels = {0, 0, 0};
  const auto trace = explain_example(ex, p, MaskSet::all_ones(3, p.prunable_size()), vocab);
  CHECK(trace.tokens.empty());
  CHECK(trace.token_saliency.cols() == 0);
  CHECK(trace.token_saliency.rows() == 3);
  const auto t = forward_pathway(ex, p, MaskSet::all_ones(3, p.prunable_size()));
  CHECK(trace.task_logits == t.task_logits);
}
