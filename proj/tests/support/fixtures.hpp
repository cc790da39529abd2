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

#pragma once

#include <cstdint>
#include <vector>

#include "sparsecbm/data.hpp"
#include "sparsecbm/model.hpp"
#include "sparsecbm/rng.hpp"

namespace sparsecbm::testing {

/// A few hundred parameters, every block present.
inline ModelConfig small_config(std::uint64_t seed = 0, std::size_t K = 3, bool direct_head = false) {
  ModelConfig c;
  c.vocab_size = 8;
  c.emb_dim = 4;
  c.hidden_dims = {6};
  c.latent_dim = 5;
  c.num_concepts = K;
  c.concept_classes = 3;
  c.task_classes = 4;
  c.seed = seed;
  c.direct_head = direct_head;
  return c;
}

/// Initialized parameters with extra uniform noise on every entry so that no
/// block sits at exactly zero.
inline ModelParams noisy_params(const ModelConfig& c, double scale = 0.3) {
  auto p = ModelParams::initialize(c);
  Rng rng(mix_seed(c.seed, 99));
  for (auto& v : p.values().values()) v += rng.uniform(-scale, scale);
  return p;
}

inline MaskSet random_masks(std::size_t K, std::size_t L, double keep, std::uint64_t seed) {
  Rng rng(seed);
  auto m = MaskSet::all_ones(K, L);
  for (std::size_t k = 0; k < K; ++k) {
    for (std::size_t i = 0; i < L; ++i) m[k][i] = rng.bernoulli(keep) ? 1 : 0;
  }
  return m;
}

inline Example random_example(const ModelConfig& c, std::uint64_t seed, std::size_t min_len = 1,
                              std::size_t max_len = 6) {
  Rng rng(seed);
  Example ex;
  const std::size_t n = min_len + rng.below(max_len - min_len + 1);
  for (std::size_t i = 0; i < n; ++i) ex.token_ids.push_back(static_cast<int>(2 + rng.below(c.vocab_size - 2)));
  for (std::size_t k = 0; k < c.num_concepts; ++k) ex.concept_labels.push_back(rng.below(c.concept_classes));
  ex.task_label = rng.below(c.task_classes);
  return ex;
}

inline Split random_split(const ModelConfig& c, std::size_t n, std::uint64_t seed) {
  Split s;
  for (std::size_t i = 0; i < n; ++i) s.examples.push_back(random_example(c, mix_seed(seed, i)));
  s.records.resize(n);
  return s;
}

}  // namespace sparsecbm::testing
