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

#include <cstddef>
#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"

#include "sparsecbm/data.hpp"
#include "sparsecbm/linalg.hpp"
#include "sparsecbm/model.hpp"

namespace sparsecbm {

/// K x D. Entry (k, d) is the l2 norm of d(logit of concept k's predicted
/// class)/d(embedding of token d), taken through mask k.
RowMatrix token_saliency(const Example& example, const ModelParams& params, const MaskSet& masks);

/// K x D gradient-times-input version of the above (signed). Mean pooling
/// makes the plain gradient identical at every position; this one is not.
RowMatrix token_attribution(const Example& example, const ModelParams& params, const MaskSet& masks);

struct ContributionRanking {
  RowMatrix contributions;     // K x C, row k = phi_k a_k
  std::size_t predicted = 0;   // task class the ranking refers to
  std::vector<double> impact;  // contribution of each concept to the predicted logit
  std::vector<std::size_t> order;  // concepts by |impact|, largest first, ties low index
};

ContributionRanking concept_contributions(const ForwardTrace& trace);

double jaccard(const Mask& a, const Mask& b);

struct LayerGrid {
  std::string name;
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::size_t offset = 0;
  std::vector<std::size_t> kept;  // per concept
};

struct MaskStats {
  std::vector<double> sparsity;
  RowMatrix overlap;  // K x K Jaccard
  std::vector<LayerGrid> layers;

  nlohmann::json to_json() const;
};

MaskStats mask_overlap(const MaskSet& masks, const ModelParams& params);

struct PathwayTrace {
  std::vector<std::string> tokens;
  std::vector<int> token_ids;
  RowMatrix token_saliency;
  RowMatrix token_attribution;
  std::vector<std::size_t> concept_predictions;
  RowMatrix concept_logits;
  RowMatrix concept_activations;
  ContributionRanking contributions;
  Vector task_logits;
  std::size_t task_prediction = 0;

  nlohmann::json to_json(const DatasetSchema& schema) const;
};

PathwayTrace explain_example(const Example& example, const ModelParams& params, const MaskSet& masks,
                             const Vocabulary& vocab);

/// Writes report.json, mask_<concept>_<layer>.pgm per layer and concept, and
/// token_saliency.csv into `dir`. Throws DataError on I/O failure.
void render_report(const PathwayTrace& trace, const MaskStats& stats, const MaskSet& masks,
                   const DatasetSchema& schema, const std::filesystem::path& dir);

/// Plain PGM (P2), kept = 255, pruned = 0.
std::string mask_pgm(const Mask& mask, const LayerGrid& layer);

}  // namespace sparsecbm
