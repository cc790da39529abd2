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

// Concept-specific second-order (OBS) pruning with a block-diagonal dampened
// empirical Fisher as the Hessian surrogate.
#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "sparsecbm/data.hpp"
#include "sparsecbm/linalg.hpp"
#include "sparsecbm/model.hpp"
#include "sparsecbm/training.hpp"

namespace sparsecbm {

enum class Compensation { kNone, kPerConceptDelta };
/// Weight of the concept CE in the per-concept Fisher gradient: gamma (as in
/// the decomposed objective) or 1.
enum class ConceptWeighting { kGamma, kUnit };

Compensation parse_compensation(std::string_view s);
std::string to_string(Compensation c);
ConceptWeighting parse_concept_weighting(std::string_view s);
std::string to_string(ConceptWeighting w);

struct PruneConfig {
  /// Defaults to 1 - 1/K when unset.
  std::optional<double> target_sparsity;
  std::size_t steps = 4;
  std::size_t finetune_epochs = 1;
  std::size_t block_size = 64;
  double zeta = 1e-4;
  std::size_t fisher_samples = 128;
  std::size_t group_size = 1;
  Compensation compensation = Compensation::kNone;
  ConceptWeighting concept_weighting = ConceptWeighting::kGamma;
  // Objective and optimizer for the per-step fine-tune.
  double gamma = 5.0;
  TaskTerm task_term = TaskTerm::kSingle;
  double lr = 1e-3;
  std::size_t batch_size = 8;
  std::uint64_t seed = 0;

  double resolved_sparsity(std::size_t num_concepts) const;
  /// Throws UsageError on out-of-range values.
  void validate(std::size_t num_concepts) const;
};

/// Symmetric blocks tiling [0, dim) in runs of block_size (the last may be
/// shorter): zeta * I + (1/m) sum_i g_i g_i^T restricted to each block.
struct FisherEstimate {
  std::size_t concept_index = 0;
  std::size_t dim = 0;
  std::size_t block_size = 0;
  std::vector<RowMatrix> blocks;

  std::size_t block_of(std::size_t i) const { return i / block_size; }
  std::size_t block_offset(std::size_t b) const { return b * block_size; }
};

FisherEstimate accumulate_fisher(std::span<const std::vector<double>> gradients, std::size_t dim,
                                 std::size_t block_size, double zeta, std::size_t concept_index = 0);

/// Gradient of CE(task) + w * CE(concept k) with respect to the effective
/// weights of concept k's subnetwork, over the whole prunable space.
std::vector<double> concept_loss_gradient(const Pathway& pathway, const ForwardTrace& trace,
                                          const Example& example, std::size_t k, double concept_weight);

/// Seed-deterministic sample of m example indices (cycling when m > n).
std::vector<std::size_t> fisher_sample(std::size_t n, std::size_t m, std::uint64_t seed);

FisherEstimate estimate_fisher(const Split& data, const ModelParams& params, const MaskSet& masks,
                               std::size_t k, const PruneConfig& config, std::uint64_t sample_seed);

struct ObsSolution {
  double rho = 0.0;  // loss increase 1/2 theta_Q^T [(F^-1)_QQ]^-1 theta_Q
  Vector delta;      // optimal compensation over the block; zeroes the Q entries
};

/// Closed-form OBS solve for pruning local indices `q` of one block.
ObsSolution obs_solve(std::span<const std::size_t> q, const Vector& theta, const RowMatrix& fisher);
double obs_score(std::span<const std::size_t> q, const Vector& theta, const RowMatrix& fisher);
Vector obs_update(std::span<const std::size_t> q, const Vector& theta, const RowMatrix& fisher);

/// Global-index forms over a FisherEstimate. All of `q` must lie in one block;
/// `theta` spans the whole prunable space. The update is over that block.
double obs_score(std::span<const std::size_t> q, std::span<const double> theta, const FisherEstimate& fisher);
Vector obs_update(std::span<const std::size_t> q, std::span<const double> theta, const FisherEstimate& fisher);

/// Number of cleared bits a mask of length L needs to reach `sparsity`.
std::size_t pruned_count_for(double sparsity, std::size_t length);

struct RhoSummary {
  double min = 0.0;
  double median = 0.0;
  double max = 0.0;
  double mean = 0.0;
};

struct ConceptStepReport {
  std::size_t concept_index = 0;
  double scheduled_sparsity = 0.0;
  double achieved_sparsity = 0.0;
  std::size_t pruned = 0;
  double loss_before = 0.0;
  double loss_after = 0.0;
  RhoSummary rho_pruned;      // scores of the weights removed this step
  RhoSummary rho_candidates;  // scores of every candidate this step
};

/// Clears the lowest-rho unpruned weights of mask k until exactly
/// pruned_count_for(step_target, L) bits are cleared. With per-concept
/// compensation the OBS update is accumulated into params.concept_deltas[k].
ConceptStepReport prune_step(ModelParams& params, MaskSet& masks, std::size_t k, double step_target,
                             const PruneConfig& config, const FisherEstimate& fisher);

struct PruneStepReport {
  std::size_t step = 0;
  double target = 0.0;
  std::vector<ConceptStepReport> concepts;
  std::optional<double> finetune_loss;
};

struct PruneReport {
  double target_sparsity = 0.0;
  std::vector<PruneStepReport> steps;

  nlohmann::json to_json(const DatasetSchema* schema = nullptr) const;
};

/// Iterative schedule: for p = 1..P each concept is pruned to s*p/P against a
/// fresh Fisher estimate, then all unmasked parameters are fine-tuned on the
/// decomposed objective.
PruneReport prune_to_sparsity(const Split& data, ModelParams& params, MaskSet& masks, const PruneConfig& config,
                              std::ostream* log = nullptr);

}  // namespace sparsecbm
