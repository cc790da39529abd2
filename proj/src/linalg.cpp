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

#include "sparsecbm/linalg.hpp"

#include <cmath>
#include <string>

#include "sparsecbm/error.hpp"

namespace sparsecbm {

Vector affine(const MatrixRef& weights, const Vector& bias, const Vector& input) {
  if (weights.cols() != input.size() || weights.rows() != bias.size()) {
    throw DimensionError("affine: weights " + std::to_string(weights.rows()) + "x" +
                         std::to_string(weights.cols()) + ", bias " +
                         std::to_string(bias.size()) + ", input " +
                         std::to_string(input.size()));
  }
  return weights * input + bias;
}

double sigmoid(double v) {
  // Branch on sign so exp() never overflows.
  if (v >= 0.0) {
    return 1.0 / (1.0 + std::exp(-v));
  }
  const double e = std::exp(v);
  return e / (1.0 + e);
}

Vector sigmoid(const Vector& v) {
  Vector out(v.size());
  for (Eigen::Index i = 0; i < v.size(); ++i) out[i] = sigmoid(v[i]);
  return out;
}

Vector softmax(const Vector& logits) {
  const double shift = logits.maxCoeff();
  Vector e = (logits.array() - shift).exp();
  return e / e.sum();
}

double softmax_cross_entropy(const Vector& logits, std::size_t label) {
  if (label >= static_cast<std::size_t>(logits.size())) {
    throw DimensionError("softmax_cross_entropy: label " + std::to_string(label) +
                         " out of range for " + std::to_string(logits.size()) +
                         " classes");
  }
  const double shift = logits.maxCoeff();
  const double lse = shift + std::log((logits.array() - shift).exp().sum());
  return lse - logits[static_cast<Eigen::Index>(label)];
}

Vector softmax_cross_entropy_grad(const Vector& logits, std::size_t label) {
  Vector g = softmax(logits);
  g[static_cast<Eigen::Index>(label)] -= 1.0;
  return g;
}

std::size_t argmax(const Vector& v) {
  std::size_t best = 0;
  for (Eigen::Index i = 1; i < v.size(); ++i) {
    if (v[i] > v[static_cast<Eigen::Index>(best)]) best = static_cast<std::size_t>(i);
  }
  return best;
}

}  // namespace sparsecbm
