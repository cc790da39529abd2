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
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "sparsecbm/data.hpp"
#include "sparsecbm/model.hpp"

namespace sparsecbm {

/// Fraction of equal entries. Throws UsageError on empty input, DimensionError
/// on mismatched lengths.
double accuracy(std::span<const std::size_t> preds, std::span<const std::size_t> golds);

/// Unweighted mean of per-class F1. Classes absent from both preds and golds
/// are left out; a class with P + R = 0 contributes 0.
double macro_f1(std::span<const std::size_t> preds, std::span<const std::size_t> golds, std::size_t num_classes);

struct Score {
  double accuracy = 0.0;
  double macro_f1 = 0.0;
};

struct MetricReport {
  Score task;
  std::vector<Score> concepts;
  Score concept_mean;

  nlohmann::json to_json(const DatasetSchema* schema = nullptr) const;
  /// Percentages with one decimal.
  std::string to_text(const DatasetSchema* schema = nullptr) const;
};

MetricReport evaluate_split(const Split& split, const ModelParams& params, const MaskSet& masks);

/// Mean of several reports, field by field.
MetricReport average_reports(std::span<const MetricReport> reports);

}  // namespace sparsecbm
