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
#include <iosfwd>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

#include "sparsecbm/data.hpp"
#include "sparsecbm/model.hpp"

namespace sparsecbm {

enum class InterventionMode { kOracle, kSparsity };

InterventionMode parse_intervention_mode(std::string_view s);
std::string to_string(InterventionMode m);

/// How cleared bits are ranked for growing. Set bits are always ranked by |g * w|.
enum class GrowRule { kMagnitude, kFirstOrder };
GrowRule parse_grow_rule(std::string_view s);
std::string to_string(GrowRule g);

/// kWeighted: task CE + gamma * concept CE. kBalanced: the two gradients
/// rescaled to unit norm before summing.
enum class SaliencyObjective { kBalanced, kWeighted };
SaliencyObjective parse_saliency_objective(std::string_view s);
std::string to_string(SaliencyObjective o);

struct InterventionConfig {
  double r = 0.01;
  InterventionMode mode = InterventionMode::kSparsity;
  /// Max drop/grow rounds per mispredicted concept.
  std::size_t rounds = 1;
  GrowRule grow_rule = GrowRule::kFirstOrder;
  SaliencyObjective objective = SaliencyObjective::kBalanced;
  /// Weight of the concept term under the weighted objective.
  double gamma = 5.0;
  /// Include the task CE in the saliency objective. Off when no task label exists.
  bool saliency_task_term = true;

  void validate() const;
};

struct InterventionEvent {
  std::size_t example_id = 0;
  std::size_t concept_index = 0;
  std::size_t target = 0;
  std::size_t pre_concept = 0;
  std::size_t post_concept = 0;
  std::size_t pre_task = 0;
  std::size_t post_task = 0;
  std::size_t rounds = 0;
  std::size_t dropped = 0;
  std::size_t grown = 0;
  bool clamped = false;
};

nlohmann::json event_to_json(const InterventionEvent& e);
void write_events_jsonl(std::ostream& out, std::span<const InterventionEvent> events);

struct OracleResult {
  RowMatrix activations;  // K x V after replacement
  Vector task_logits;
  std::size_t task = 0;
};

/// Replaces a_k with the one-hot of the corrected class and reclassifies.
OracleResult oracle_intervene(const ForwardTrace& trace, const std::map<std::size_t, std::size_t>& corrections,
                              const ModelParams& params);

/// Pre-mask gradient of the intervention objective w.r.t. concept k's effective weights.
std::vector<double> saliency_gradient(const Example& example, std::size_t k, const ModelParams& params,
                                      const MaskSet& masks, SaliencyObjective objective, double gamma,
                                      bool task_term = true);

/// |g_i * theta_i| over the whole prunable space for concept k, where g is the
/// pre-mask gradient of the concept-k loss term at the effective weights.
std::vector<double> saliency_scores(const Example& example, std::size_t k, const ModelParams& params,
                                    const MaskSet& masks, double concept_weight, bool task_term = true);

/// Per-bit ranking used by sparsity_intervene: |g * w| on set bits, and on
/// cleared bits either |g * w| or the first-order loss decrease -g * w.
std::vector<double> intervention_scores(const Example& example, std::size_t k, const ModelParams& params,
                                        const MaskSet& masks, const InterventionConfig& config);

struct DropGrowResult {
  std::size_t dropped = 0;
  std::size_t grown = 0;
  bool clamped = false;
};

std::size_t drop_grow_count(double r, std::size_t length);

/// Clears the lowest-scoring set bits and sets the highest-scoring cleared bits,
/// round(r * L) of each, ties to the lowest index.
DropGrowResult drop_grow(Mask& mask, std::span<const double> scores, double r);

/// Edits masks until each concept in `targets` predicts its target class or
/// `rounds` is exhausted. Parameters are never touched.
std::vector<InterventionEvent> sparsity_intervene(const Example& example,
                                                  const std::map<std::size_t, std::size_t>& targets,
                                                  const ModelParams& params, MaskSet& masks,
                                                  const InterventionConfig& config, std::size_t example_id = 0);

/// Concepts whose prediction disagrees with the example's labels.
std::map<std::size_t, std::size_t> mispredicted_concepts(const Example& example, const Prediction& pred);

struct InterventionRow {
  double r = 0.0;
  double ni_task = 0.0;
  double ni_concept = 0.0;
  double si_task = 0.0;      // in-stream, after each example's own intervention
  double si_concept = 0.0;
  double replay_task = 0.0;  // whole split re-evaluated with the final masks
  double replay_concept = 0.0;
  double modified_fraction = 0.0;  // prunable positions whose bit changed in any mask
  std::size_t events = 0;
  std::size_t clamps = 0;
};

struct InterventionTable {
  InterventionMode mode = InterventionMode::kSparsity;
  std::vector<InterventionRow> rows;

  nlohmann::json to_json() const;
  std::string to_text() const;
};

InterventionTable evaluate_intervention(const Split& split, const ModelParams& params, const MaskSet& masks,
                                        std::span<const double> r_grid, const InterventionConfig& config,
                                        std::vector<InterventionEvent>* events = nullptr);

}  // namespace sparsecbm
