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

#include "sparsecbm/param_vector.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

#include "sparsecbm/error.hpp"

namespace sparsecbm {

std::size_t ParamVector::add_block(std::string name, std::size_t rows, std::size_t cols) {
  const std::size_t offset = values_.size();
  blocks_.push_back(BlockInfo{std::move(name), offset, rows, cols});
  values_.resize(offset + rows * cols, 0.0);
  return blocks_.size() - 1;
}

const BlockInfo& ParamVector::block(std::string_view name) const {
  for (const auto& b : blocks_) {
    if (b.name == name) return b;
  }
  throw std::out_of_range("no parameter block named '" + std::string(name) + "'");
}

const std::string& ParamVector::block_name_at(std::size_t i) const {
  auto it = std::upper_bound(blocks_.begin(), blocks_.end(), i,
                             [](std::size_t v, const BlockInfo& b) { return v < b.offset; });
  if (it == blocks_.begin() || i >= values_.size()) {
    throw std::out_of_range("flat index " + std::to_string(i) + " outside parameter vector");
  }
  return std::prev(it)->name;
}

Eigen::Map<RowMatrix> ParamVector::matrix(std::size_t index) {
  const auto& b = blocks_.at(index);
  return {values_.data() + b.offset, static_cast<Eigen::Index>(b.rows),
          static_cast<Eigen::Index>(b.cols)};
}

Eigen::Map<const RowMatrix> ParamVector::matrix(std::size_t index) const {
  const auto& b = blocks_.at(index);
  return {values_.data() + b.offset, static_cast<Eigen::Index>(b.rows),
          static_cast<Eigen::Index>(b.cols)};
}

void check_finite(std::span<const double> values, const ParamVector& layout) {
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (!std::isfinite(values[i])) {
      throw NumericError(layout.block_name_at(i), "non-finite gradient");
    }
  }
}

FiniteDifferenceReport finite_difference_check(
    const std::function<double(std::span<const double>)>& loss,
    std::span<const double> point, std::span<const double> analytic, double eps,
    std::span<const std::size_t> indices) {
  if (!(eps > 0.0)) throw std::invalid_argument("finite_difference_check: eps must be > 0");
  if (analytic.size() != point.size()) {
    throw DimensionError("finite_difference_check: gradient/point size mismatch");
  }
  std::vector<double> probe(point.begin(), point.end());
  FiniteDifferenceReport report;
  auto visit = [&](std::size_t i) {
    const double saved = probe[i];
    probe[i] = saved + eps;
    const double up = loss(probe);
    probe[i] = saved - eps;
    const double down = loss(probe);
    probe[i] = saved;
    const double numeric = (up - down) / (2.0 * eps);
    const double err = std::abs(analytic[i] - numeric) / (std::abs(numeric) + 1e-12);
    if (err > report.max_relative_error) {
      report.max_relative_error = err;
      report.worst_index = i;
      report.worst_analytic = analytic[i];
      report.worst_numeric = numeric;
    }
  };
  if (indices.empty()) {
    for (std::size_t i = 0; i < point.size(); ++i) visit(i);
  } else {
    for (std::size_t i : indices) visit(i);
  }
  return report;
}

}  // namespace sparsecbm
