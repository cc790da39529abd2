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

// Dense building blocks shared by the fixed model graph.
#pragma once

#include <cstddef>

#include <Eigen/Dense>

namespace sparsecbm {

using Vector = Eigen::VectorXd;
using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatrixRef = Eigen::Ref<const RowMatrix>;

/// weights * input + bias. Throws DimensionError on shape mismatch.
Vector affine(const MatrixRef& weights, const Vector& bias, const Vector& input);

double sigmoid(double v);
Vector sigmoid(const Vector& v);

Vector softmax(const Vector& logits);

/// -log softmax(logits)[label], max-shifted. Throws DimensionError when the
/// label is out of range.
double softmax_cross_entropy(const Vector& logits, std::size_t label);

/// d/dlogits of softmax_cross_entropy: softmax(logits) - onehot(label).
Vector softmax_cross_entropy_grad(const Vector& logits, std::size_t label);

/// Index of the largest entry; ties go to the lowest index.
std::size_t argmax(const Vector& v);

}  // namespace sparsecbm
