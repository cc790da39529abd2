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

// Concept bottleneck model with per-concept encoder masks:
//   tokens -> mean-pooled embedding -> MLP (weights M_k * theta) -> z_k
//   -> concept logits psi_k z_k + b_k -> sigmoid -> phi_k a_k -> sum_k = task logits
#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "json.hpp"

#include "sparsecbm/linalg.hpp"
#include "sparsecbm/param_vector.hpp"

namespace sparsecbm {

struct Example;

struct ModelConfig {
  std::size_t vocab_size = 0;
  std::size_t emb_dim = 32;
  std::vector<std::size_t> hidden_dims{64, 64};
  std::size_t latent_dim = 64;
  std::size_t num_concepts = 4;
  std::size_t concept_classes = 3;
  std::size_t task_classes = 5;
  std::uint64_t seed = 0;
  /// Vanilla fine-tuning baseline: task logits come from a direct z -> C head
  /// on the unmasked encoder instead of the bottleneck.
  bool direct_head = false;

  /// Throws UsageError when any dimension is zero.
  void validate() const;
  nlohmann::json to_json() const;
  static ModelConfig from_json(const nlohmann::json& j);

  bool operator==(const ModelConfig&) const = default;
};

/// One bit per prunable weight; 1 keeps the weight.
using Mask = std::vector<std::uint8_t>;

class MaskSet {
 public:
  MaskSet() = default;
  explicit MaskSet(std::vector<Mask> masks);
  static MaskSet all_ones(std::size_t num_concepts, std::size_t length);

  std::size_t size() const { return masks_.size(); }
  std::size_t length() const { return masks_.empty() ? 0 : masks_.front().size(); }
  Mask& operator[](std::size_t k) { return masks_.at(k); }
  const Mask& operator[](std::size_t k) const { return masks_.at(k); }

  std::size_t popcount(std::size_t k) const;
  /// Fraction of cleared bits in mask k.
  double sparsity(std::size_t k) const;
  /// 1 where any mask keeps the weight.
  Mask union_mask() const;

  bool operator==(const MaskSet&) const = default;

 private:
  std::vector<Mask> masks_;
};

/// All model parameters in one flat vector. The prunable encoder weight
/// matrices come first, so flat indices [0, prunable_size()) are the mask
/// index space. Layout: enc{i}.weight..., enc{i}.bias..., embeddings,
/// (psi{k}.weight, psi{k}.bias)..., phi{k}..., head.weight, head.bias.
class ModelParams {
 public:
  /// Zero-initialized parameters with the layout implied by `config`.
  explicit ModelParams(const ModelConfig& config);
  /// Glorot-uniform weights, zero biases, seeded by config.seed.
  static ModelParams initialize(const ModelConfig& config);

  const ModelConfig& config() const { return config_; }
  ModelConfig& config() { return config_; }
  ParamVector& values() { return values_; }
  const ParamVector& values() const { return values_; }
  std::size_t prunable_size() const { return prunable_; }
  std::size_t num_layers() const { return config_.hidden_dims.size() + 1; }

  std::size_t layer_weight_block(std::size_t i) const { return i; }
  std::size_t layer_bias_block(std::size_t i) const { return num_layers() + i; }
  std::size_t embedding_block() const { return 2 * num_layers(); }
  std::size_t psi_weight_block(std::size_t k) const { return 2 * num_layers() + 1 + 2 * k; }
  std::size_t psi_bias_block(std::size_t k) const { return 2 * num_layers() + 2 + 2 * k; }
  std::size_t phi_block(std::size_t k) const {
    return 2 * num_layers() + 1 + 2 * config_.num_concepts + k;
  }
  std::size_t head_weight_block() const { return 2 * num_layers() + 1 + 3 * config_.num_concepts; }
  std::size_t head_bias_block() const { return head_weight_block() + 1; }

  Eigen::Map<RowMatrix> matrix(std::size_t block) { return values_.matrix(block); }
  Eigen::Map<const RowMatrix> matrix(std::size_t block) const { return values_.matrix(block); }
  std::span<const double> theta() const { return values_.values().first(prunable_); }
  std::span<double> theta() { return values_.values().first(prunable_); }

  /// Optional per-concept OBS compensation over the prunable space, applied
  /// only inside concept k's subnetwork. Empty, or num_concepts vectors of
  /// length prunable_size().
  std::vector<std::vector<double>> concept_deltas;

  bool operator==(const ModelParams&) const = default;

 private:
  ModelConfig config_;
  ParamVector values_;
  std::size_t prunable_ = 0;
};

struct ConceptActivations {
  RowMatrix logits;       // K x V, pre-sigmoid
  RowMatrix activations;  // K x V, sigmoid(logits)
};

/// Effective encoder weights for each distinct subnetwork of a (params, masks)
/// pair. Concepts whose masks (and compensation deltas) coincide share one
/// branch. Holds references: params and masks must outlive it.
class Pathway {
 public:
  Pathway(const ModelParams& params, const MaskSet& masks, bool with_dense_branch = false);

  const ModelParams& params() const { return *params_; }
  const MaskSet& masks() const { return *masks_; }
  std::size_t num_branches() const { return weights_.size(); }
  std::size_t branch_of(std::size_t k) const { return branch_of_.at(k); }
  /// Branch computing the plain unmasked encoder, when requested.
  std::optional<std::size_t> dense_branch() const { return dense_branch_; }
  std::span<const double> branch_weights(std::size_t b) const { return weights_.at(b); }
  /// Mask applied by branch b; empty for the unmasked branch.
  std::span<const std::uint8_t> branch_mask(std::size_t b) const;

 private:
  const ModelParams* params_;
  const MaskSet* masks_;
  std::vector<std::size_t> branch_of_;
  std::vector<std::vector<double>> weights_;
  std::vector<std::optional<std::size_t>> branch_mask_owner_;
  std::optional<std::size_t> dense_branch_;
};

struct BranchTrace {
  std::vector<Vector> pre;   // per layer, pre-activation
  std::vector<Vector> post;  // per layer, post-activation; post.back() = z
};

/// Everything a backward pass needs from one forward evaluation.
struct ForwardTrace {
  std::vector<int> tokens;
  Vector pooled;
  std::vector<BranchTrace> branches;
  ConceptActivations concepts;
  RowMatrix contributions;  // K x C, row k = phi_k a_k
  Vector task_logits;       // sum of contribution rows
  Vector head_logits;       // direct head, only with a dense branch
};

/// Mean-pooled embedding; the PAD row for an empty sequence.
Vector pool_embeddings(const ModelParams& params, std::span<const int> tokens);

/// Runs every branch of `pathway` on one token sequence.
ForwardTrace run_forward(const Pathway& pathway, std::span<const int> tokens);

/// Latent z under a single mask; an empty mask means all-ones.
Vector encode(const Example& example, const ModelParams& params,
              std::span<const std::uint8_t> mask = {});

ForwardTrace forward_pathway(const Example& example, const ModelParams& params, const MaskSet& masks);

struct Prediction {
  std::size_t task = 0;
  std::vector<std::size_t> concepts;
};

Prediction predict_from_trace(const ForwardTrace& trace, const ModelConfig& config);
Prediction predict(const Example& example, const ModelParams& params, const MaskSet& masks);

/// Upstream gradients on the model outputs. Empty members count as zero.
struct OutputGrads {
  Vector task;              // d/d task logits (C)
  RowMatrix contributions;  // d/d contribution rows (K x C), per-branch task terms
  RowMatrix concepts;       // d/d concept logits (K x V)
  Vector head;         // d/d direct-head logits (C)
};

/// Adds d(objective)/d(params) into `grads` (full parameter layout). Weight
/// gradients pass through the mask: a cleared bit contributes exactly zero.
/// When `input_grads` is given it receives d/d(token embedding), tokens x emb_dim.
void backward_into(const Pathway& pathway, const ForwardTrace& trace, const OutputGrads& upstream,
                   std::span<double> grads, RowMatrix* input_grads = nullptr);

/// backward_into on fresh buffers; throws NumericError naming the first block
/// with a non-finite gradient.
GradRecord backward(const Pathway& pathway, const ForwardTrace& trace, const OutputGrads& upstream);

/// Gradient with respect to the effective encoder weights of concept k's
/// subnetwork, through concept k's logits only, at every prunable position
/// (pruned positions included, as if the weight were present). Optionally
/// returns d/d(pooled embedding) along the same path.
std::vector<double> concept_branch_gradient(const Pathway& pathway, const ForwardTrace& trace,
                                            std::size_t k, const OutputGrads& upstream,
                                            Vector* pooled_grad = nullptr);

}  // namespace sparsecbm
