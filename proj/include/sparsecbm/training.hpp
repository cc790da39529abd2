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

// Joint / decomposed CBM objectives, Adam, and the four training strategies.
#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "sparsecbm/data.hpp"
#include "sparsecbm/model.hpp"
#include "sparsecbm/param_vector.hpp"

namespace sparsecbm {

enum class Strategy { kVanilla, kIndependent, kSequential, kJoint };
/// kSingle: one task CE on the summed pathway. kPerConcept: one task CE per
/// concept branch on that branch's contribution alone.
enum class TaskTerm { kSingle, kPerConcept };

Strategy parse_strategy(std::string_view s);
std::string to_string(Strategy s);
TaskTerm parse_task_term(std::string_view s);
std::string to_string(TaskTerm t);

struct TrainConfig {
  Strategy strategy = Strategy::kJoint;
  double gamma = 5.0;
  double lr = 1e-3;
  std::size_t epochs = 20;
  std::size_t batch_size = 8;
  std::uint64_t seed = 0;
  TaskTerm task_term = TaskTerm::kSingle;

  /// Throws UsageError unless gamma >= 0, lr >= 0, batch_size >= 1.
  void validate() const;
};

struct AdamState {
  explicit AdamState(std::size_t n) : m(n, 0.0), v(n, 0.0) {}

  std::vector<double> m;
  std::vector<double> v;
  std::uint64_t step = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Bias-corrected Adam. Entries whose `update_mask` bit is 0 are left
/// untouched, moments included; an empty mask updates everything.
void adam_step(AdamState& state, std::span<const double> grads, std::span<double> params, double lr,
               std::span<const std::uint8_t> update_mask = {});

struct LossTerms {
  double total = 0.0;
  double task = 0.0;
  std::vector<double> concepts;  // unweighted CE per concept
};

/// What a forward trace is scored against.
struct Objective {
  double task_weight = 1.0;
  double concept_weight = 5.0;  // gamma
  TaskTerm task_term = TaskTerm::kSingle;
  bool direct_head = false;  // task CE on the direct head instead of the pathway
};

struct ObjectiveValue {
  LossTerms terms;
  OutputGrads grads;
};

ObjectiveValue evaluate_objective(const ForwardTrace& trace, const Example& example, const Objective& obj,
                                  const ModelConfig& config);

/// CE(task logits, y) + gamma * sum_k CE(concept k logits, c_k).
double joint_loss(const Example& example, const ModelParams& params, const MaskSet& masks, double gamma);

/// Same objective with each concept term produced by its own masked encoder
/// pass; per-concept terms are returned alongside the total.
LossTerms decomposed_joint_loss(const Example& example, const ModelParams& params, const MaskSet& masks,
                                double gamma, TaskTerm task_term = TaskTerm::kSingle);

struct EpochLog {
  std::string stage;
  std::size_t epoch = 0;
  double loss = 0.0;
  double task_loss = 0.0;
  double concept_loss = 0.0;
  double train_task_acc = 0.0;
  double train_concept_acc = 0.0;
  std::optional<double> dev_task_acc;
  std::optional<double> dev_concept_acc;
};

std::string epoch_log_json(const EpochLog& e);

/// Selects which flat parameter indices an optimizer may touch.
struct TrainableSet {
  bool encoder = false;  // prunable weights, encoder biases, embeddings
  bool psi = false;
  bool phi = false;
  bool head = false;
};

std::vector<std::uint8_t> trainable_mask(const ModelParams& params, const TrainableSet& set,
                                         const MaskSet& masks);

struct EpochRunOptions {
  std::string stage = "train";
  std::size_t epochs = 1;
  std::size_t batch_size = 8;
  double lr = 1e-3;
  std::uint64_t seed = 0;
  const Split* dev = nullptr;
  std::ostream* log = nullptr;
};

/// Mini-batch Adam on `objective` over `data` with a fresh optimizer state.
/// Prunable weights whose bit is cleared in every mask never move.
std::vector<EpochLog> run_epochs(const Split& data, const Objective& objective, const TrainableSet& set,
                                 ModelParams& params, const MaskSet& masks, const EpochRunOptions& opts);

/// Trains `params` in place with the configured strategy. Throws NumericError
/// naming the stage, epoch and batch on non-finite gradients.
std::vector<EpochLog> train(const Split& data, const TrainConfig& config, ModelParams& params,
                            const MaskSet& masks, const Split* dev = nullptr, std::ostream* log = nullptr);

/// Central-difference check of the analytic gradient of `objective` for one
/// example over all parameters (or `indices`).
FiniteDifferenceReport check_model_gradients(const Example& example, const ModelParams& params,
                                             const MaskSet& masks, const Objective& objective,
                                             double eps, std::span<const std::size_t> indices = {});

}  // namespace sparsecbm
