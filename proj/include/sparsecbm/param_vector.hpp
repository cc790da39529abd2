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
#include <functional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Dense>

#include "sparsecbm/linalg.hpp"

namespace sparsecbm {

/// One named matrix inside a flat parameter vector. Storage is row-major.
struct BlockInfo {
  std::string name;
  std::size_t offset = 0;
  std::size_t rows = 0;
  std::size_t cols = 0;

  std::size_t size() const { return rows * cols; }
  bool operator==(const BlockInfo&) const = default;
};

/// Flat vector of 64-bit reals partitioned into contiguous named blocks.
/// The block order is fixed once built; mask files index into it.
class ParamVector {
 public:
  /// Appends a zero-filled rows x cols block and returns its index.
  std::size_t add_block(std::string name, std::size_t rows, std::size_t cols);

  std::size_t size() const { return values_.size(); }
  std::span<double> values() { return values_; }
  std::span<const double> values() const { return values_; }

  const std::vector<BlockInfo>& block_map() const { return blocks_; }
  const BlockInfo& block(std::size_t index) const { return blocks_.at(index); }
  /// Throws std::out_of_range for an unknown name.
  const BlockInfo& block(std::string_view name) const;
  /// Name of the block containing flat index i.
  const std::string& block_name_at(std::size_t i) const;

  Eigen::Map<RowMatrix> matrix(std::size_t index);
  Eigen::Map<const RowMatrix> matrix(std::size_t index) const;

  bool operator==(const ParamVector&) const = default;

 private:
  std::vector<double> values_;
  std::vector<BlockInfo> blocks_;
};

/// Gradients aligned index-for-index with a ParamVector, plus per-token
/// gradients with respect to the embedding inputs (tokens x emb_dim).
struct GradRecord {
  std::vector<double> grads;
  RowMatrix input_grads;
};

/// Throws NumericError naming the first block holding a non-finite entry.
void check_finite(std::span<const double> values, const ParamVector& layout);

struct FiniteDifferenceReport {
  double max_relative_error = 0.0;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
};

/// Central differences of `loss` around `point`, compared against `analytic`.
/// The error per coordinate is |analytic - numeric| / (|numeric| + 1e-12).
/// `indices` restricts the check to a subset; empty means every coordinate.
FiniteDifferenceReport finite_difference_check(
    const std::function<double(std::span<const double>)>& loss,
    std::span<const double> point, std::span<const double> analytic, double eps,
    std::span<const std::size_t> indices = {});

}  // namespace sparsecbm
