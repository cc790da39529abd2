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

#include "sparsecbm/training.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <ostream>

#include "json.hpp"

#include "sparsecbm/error.hpp"
#include "sparsecbm/rng.hpp"

namespace sparsecbm {

using nlohmann::json;

Strategy parse_strategy(std::string_view s) {
  if (s == "vanilla") return Strategy::kVanilla;
  if (s == "independent") return Strategy::kIndependent;
  if (s == "sequential") return Strategy::kSequential;
  if (s == "joint") return Strategy::kJoint;
  throw UsageError("unknown strategy '" + std::string(s) + "'");
}

std::string to_string(Strategy s) {
  switch (s) {
    case Strategy::kVanilla: return "vanilla";
    case Strategy::kIndependent: return "independent";
    case Strategy::kSequential: return "sequential";
    case Strategy::kJoint: return "joint";
  }
  return "joint";
}

TaskTerm parse_task_term(std::string_view s) {
  if (s == "single") return TaskTerm::kSingle;
  if (s == "per_concept") return TaskTerm::kPerConcept;
  throw UsageError("unknown task term '" + std::string(s) + "'");
}

std::string to_string(TaskTerm t) { return t == TaskTerm::kSingle ? "single" : "per_concept"; }

void TrainConfig::validate() const {
  if (!(gamma >= 0.0)) throw UsageError("gamma must be >= 0");
  if (!(lr >= 0.0)) throw UsageError("lr must be >= 0");
  if (batch_size < 1) throw UsageError("batch_size must be >= 1");
}

void adam_step(AdamState& s, std::span<const double> grads, std::span<double> params, double lr,
               std::span<const std::uint8_t> update_mask) {
  if (grads.size() != params.size() || s.m.size() != params.size() ||
      (!update_mask.empty() && update_mask.size() != params.size())) {
    throw DimensionError("adam_step: misaligned lengths");
  }
  ++s.step;
  const double t = static_cast<double>(s.step);
  const double c1 = 1.0 - std::pow(s.beta1, t);
  const double c2 = 1.0 - std::pow(s.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (!update_mask.empty() && !update_mask[i]) continue;
    const double g = grads[i];
    s.m[i] = s.beta1 * s.m[i] + (1.0 - s.beta1) * g;
    s.v[i] = s.beta2 * s.v[i] + (1.0 - s.beta2) * g * g;
    const double m_hat = s.m[i] / c1;
    const double v_hat = s.v[i] / c2;
    params[i] -= lr * m_hat / (std::sqrt(v_hat) + s.eps);
  }
}

ObjectiveValue evaluate_objective(const ForwardTrace& t, const Example& ex, const Objective& obj,
                                  const ModelConfig& cfg) {
  const auto K = cfg.num_concepts;
  if (ex.concept_labels.size() != K) throw DimensionError("example has wrong number of concept labels");
  ObjectiveValue out;
  auto& terms = out.terms;
  auto& g = out.grads;
  if (obj.direct_head) {
    if (t.head_logits.size() == 0) throw DimensionError("objective needs direct-head logits");
    terms.task = softmax_cross_entropy(t.head_logits, ex.task_label);
    g.head = obj.task_weight * softmax_cross_entropy_grad(t.head_logits, ex.task_label);
  } else if (obj.task_term == TaskTerm::kSingle) {
    terms.task = softmax_cross_entropy(t.task_logits, ex.task_label);
    g.task = obj.task_weight * softmax_cross_entropy_grad(t.task_logits, ex.task_label);
  } else {
    g.contributions.resize(t.contributions.rows(), t.contributions.cols());
    for (std::size_t k = 0; k < K; ++k) {
      const auto row = static_cast<Eigen::Index>(k);
      const Vector c = t.contributions.row(row).transpose();
      terms.task += softmax_cross_entropy(c, ex.task_label);
      g.contributions.row(row) = obj.task_weight * softmax_cross_entropy_grad(c, ex.task_label).transpose();
    }
  }
  terms.concepts.resize(K);
  g.concepts.resize(t.concepts.logits.rows(), t.concepts.logits.cols());
  double concept_sum = 0.0;
  for (std::size_t k = 0; k < K; ++k) {
    const auto row = static_cast<Eigen::Index>(k);
    const Vector l = t.concepts.logits.row(row).transpose();
    terms.concepts[k] = softmax_cross_entropy(l, ex.concept_labels[k]);
    concept_sum += terms.concepts[k];
    g.concepts.row(row) = obj.concept_weight * softmax_cross_entropy_grad(l, ex.concept_labels[k]).transpose();
  }
  terms.total = obj.task_weight * terms.task + obj.concept_weight * concept_sum;
  if (!std::isfinite(terms.total)) throw NumericError("loss", "non-finite loss");
  return out;
}

double joint_loss(const Example& example, const ModelParams& params, const MaskSet& masks, double gamma) {
  const auto trace = forward_pathway(example, params, masks);
  Objective obj;
  obj.concept_weight = gamma;
  return evaluate_objective(trace, example, obj, params.config()).terms.total;
}

LossTerms decomposed_joint_loss(const Example& example, const ModelParams& params, const MaskSet& masks,
                                double gamma, TaskTerm task_term) {
  Pathway pathway(params, masks);
  const auto trace = run_forward(pathway, example.token_ids);
  Objective obj;
  obj.concept_weight = gamma;
  obj.task_term = task_term;
  return evaluate_objective(trace, example, obj, params.config()).terms;
}

std::string epoch_log_json(const EpochLog& e) {
  json j{{"stage", e.stage},
         {"epoch", e.epoch},
         {"loss", e.loss},
         {"task_loss", e.task_loss},
         {"concept_loss", e.concept_loss},
         {"train_task_acc", e.train_task_acc},
         {"train_concept_acc", e.train_concept_acc}};
  if (e.dev_task_acc) j["dev_task_acc"] = *e.dev_task_acc;
  if (e.dev_concept_acc) j["dev_concept_acc"] = *e.dev_concept_acc;
  return j.dump();
}

std::vector<std::uint8_t> trainable_mask(const ModelParams& params, const TrainableSet& set,
                                         const MaskSet& masks) {
  const auto& pv = params.values();
  std::vector<std::uint8_t> out(pv.size(), 0);
  auto fill_block = [&](std::size_t block, bool on) {
    const auto& b = pv.block(block);
    std::fill_n(out.begin() + static_cast<std::ptrdiff_t>(b.offset), b.size(), on ? 1 : 0);
  };
  if (set.encoder) {
    const auto u = masks.size() > 0 ? masks.union_mask() : Mask(params.prunable_size(), 1);
    std::copy(u.begin(), u.end(), out.begin());
  }
  for (std::size_t i = 0; i < params.num_layers(); ++i) fill_block(params.layer_bias_block(i), set.encoder);
  fill_block(params.embedding_block(), set.encoder);
  for (std::size_t k = 0; k < params.config().num_concepts; ++k) {
    fill_block(params.psi_weight_block(k), set.psi);
    fill_block(params.psi_bias_block(k), set.psi);
    fill_block(params.phi_block(k), set.phi);
  }
  fill_block(params.head_weight_block(), set.head);
  fill_block(params.head_bias_block(), set.head);
  return out;
}

namespace {

struct Accuracies {
  double task = 0.0;
  double concepts = 0.0;
};

Accuracies split_accuracies(const Split& split, const ModelParams& params, const MaskSet& masks) {
  Pathway pathway(params, masks, params.config().direct_head);
  std::size_t task_hits = 0, concept_hits = 0;
  for (const auto& ex : split.examples) {
    const auto pred = predict_from_trace(run_forward(pathway, ex.token_ids), params.config());
    task_hits += pred.task == ex.task_label;
    for (std::size_t k = 0; k < pred.concepts.size(); ++k) concept_hits += pred.concepts[k] == ex.concept_labels[k];
  }
  const double n = static_cast<double>(std::max<std::size_t>(split.size(), 1));
  return {static_cast<double>(task_hits) / n,
          static_cast<double>(concept_hits) / (n * static_cast<double>(params.config().num_concepts))};
}

NumericError locate(const NumericError& e, const std::string& stage, std::size_t epoch, std::size_t batch) {
  return NumericError(stage + " epoch " + std::to_string(epoch) + " batch " + std::to_string(batch) + ": " +
                          e.where(),
                      "non-finite value");
}

void emit(std::ostream* log, const EpochLog& e) {
  if (log) *log << epoch_log_json(e) << '\n';
}

void check_data(const Split& data) {
  if (data.size() == 0) throw DataError("training split is empty");
}

/// Independent strategy, second stage: phi learns task labels from one-hot
/// ground-truth concepts, bypassing the encoder.
std::vector<EpochLog> run_onehot_classifier(const Split& data, ModelParams& params, const EpochRunOptions& opts) {
  const auto& cfg = params.config();
  const auto K = cfg.num_concepts;
  std::vector<std::uint8_t> upd(params.values().size(), 0);
  for (std::size_t k = 0; k < K; ++k) {
    const auto& b = params.values().block(params.phi_block(k));
    std::fill_n(upd.begin() + static_cast<std::ptrdiff_t>(b.offset), b.size(), 1);
  }
  AdamState state(params.values().size());
  Rng rng(mix_seed(opts.seed, 0xC1A5));
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), 0);
  std::vector<double> grads(params.values().size());
  std::vector<EpochLog> logs;
  for (std::size_t epoch = 0; epoch < opts.epochs; ++epoch) {
    rng.shuffle(std::span<std::size_t>(order));
    EpochLog log;
    log.stage = opts.stage;
    log.epoch = epoch;
    std::size_t hits = 0;
    for (std::size_t start = 0, batch = 0; start < order.size(); start += opts.batch_size, ++batch) {
      const std::size_t end = std::min(order.size(), start + opts.batch_size);
      std::fill(grads.begin(), grads.end(), 0.0);
      for (std::size_t i = start; i < end; ++i) {
        const auto& ex = data.examples[order[i]];
        Vector logits = Vector::Zero(static_cast<Eigen::Index>(cfg.task_classes));
        for (std::size_t k = 0; k < K; ++k) {
          logits += params.matrix(params.phi_block(k)).col(static_cast<Eigen::Index>(ex.concept_labels[k]));
        }
        const double ce = softmax_cross_entropy(logits, ex.task_label);
        if (!std::isfinite(ce)) throw NumericError(opts.stage + " epoch " + std::to_string(epoch), "non-finite loss");
        log.loss += ce;
        log.task_loss += ce;
        hits += argmax(logits) == ex.task_label;
        const Vector g = softmax_cross_entropy_grad(logits, ex.task_label);
        for (std::size_t k = 0; k < K; ++k) {
          const auto& b = params.values().block(params.phi_block(k));
          Eigen::Map<RowMatrix> gphi(grads.data() + b.offset, static_cast<Eigen::Index>(b.rows),
                                     static_cast<Eigen::Index>(b.cols));
          gphi.col(static_cast<Eigen::Index>(ex.concept_labels[k])) += g;
        }
      }
      const double scale = 1.0 / static_cast<double>(end - start);
      for (double& g : grads) g *= scale;
      adam_step(state, grads, params.values().values(), opts.lr, upd);
    }
    const double n = static_cast<double>(data.size());
    log.loss /= n;
    log.task_loss /= n;
    log.train_task_acc = static_cast<double>(hits) / n;
    logs.push_back(log);
    emit(opts.log, log);
  }
  return logs;
}

}  // namespace

std::vector<EpochLog> run_epochs(const Split& data, const Objective& objective, const TrainableSet& set,
                                 ModelParams& params, const MaskSet& masks, const EpochRunOptions& opts) {
  check_data(data);
  if (opts.batch_size < 1) throw UsageError("batch_size must be >= 1");
  const auto& cfg = params.config();
  const auto K = cfg.num_concepts;
  const auto upd = trainable_mask(params, set, masks);
  AdamState state(params.values().size());
  Rng rng(mix_seed(opts.seed, 0xBA7C));
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), 0);
  std::vector<double> grads(params.values().size());
  std::vector<EpochLog> logs;
  for (std::size_t epoch = 0; epoch < opts.epochs; ++epoch) {
    rng.shuffle(std::span<std::size_t>(order));
    EpochLog log;
    log.stage = opts.stage;
    log.epoch = epoch;
    std::size_t task_hits = 0, concept_hits = 0;
    for (std::size_t start = 0, batch = 0; start < order.size(); start += opts.batch_size, ++batch) {
      const std::size_t end = std::min(order.size(), start + opts.batch_size);
      std::fill(grads.begin(), grads.end(), 0.0);
      try {
        Pathway pathway(params, masks, objective.direct_head);
        for (std::size_t i = start; i < end; ++i) {
          const auto& ex = data.examples[order[i]];
          const auto trace = run_forward(pathway, ex.token_ids);
          const auto value = evaluate_objective(trace, ex, objective, cfg);
          backward_into(pathway, trace, value.grads, grads);
          log.loss += value.terms.total;
          log.task_loss += value.terms.task;
          for (double c : value.terms.concepts) log.concept_loss += c;
          const auto pred = predict_from_trace(trace, cfg);
          task_hits += pred.task == ex.task_label;
          for (std::size_t k = 0; k < K; ++k) concept_hits += pred.concepts[k] == ex.concept_labels[k];
        }
        const double scale = 1.0 / static_cast<double>(end - start);
        for (double& g : grads) g *= scale;
        check_finite(grads, params.values());
      } catch (const NumericError& e) {
        throw locate(e, opts.stage, epoch, batch);
      }
      adam_step(state, grads, params.values().values(), opts.lr, upd);
    }
    const double n = static_cast<double>(data.size());
    log.loss /= n;
    log.task_loss /= n;
    log.concept_loss /= n;
    log.train_task_acc = static_cast<double>(task_hits) / n;
    log.train_concept_acc = static_cast<double>(concept_hits) / (n * static_cast<double>(K));
    if (opts.dev && opts.dev->size() > 0) {
      const auto acc = split_accuracies(*opts.dev, params, masks);
      log.dev_task_acc = acc.task;
      log.dev_concept_acc = acc.concepts;
    }
    logs.push_back(log);
    emit(opts.log, log);
  }
  return logs;
}

std::vector<EpochLog> train(const Split& data, const TrainConfig& config, ModelParams& params,
                            const MaskSet& masks, const Split* dev, std::ostream* log) {
  config.validate();
  check_data(data);
  EpochRunOptions opts;
  opts.epochs = config.epochs;
  opts.batch_size = config.batch_size;
  opts.lr = config.lr;
  opts.seed = config.seed;
  opts.dev = dev;
  opts.log = log;

  Objective concepts_only;
  concepts_only.task_weight = 0.0;
  concepts_only.concept_weight = 1.0;

  std::vector<EpochLog> logs;
  auto append = [&](std::vector<EpochLog> more) { logs.insert(logs.end(), more.begin(), more.end()); };
  switch (config.strategy) {
    case Strategy::kVanilla: {
      params.config().direct_head = true;
      Objective obj;
      obj.direct_head = true;
      obj.concept_weight = 0.0;
      opts.stage = "vanilla";
      append(run_epochs(data, obj, {.encoder = true, .head = true}, params, masks, opts));
      break;
    }
    case Strategy::kIndependent: {
      opts.stage = "concepts";
      append(run_epochs(data, concepts_only, {.encoder = true, .psi = true}, params, masks, opts));
      opts.stage = "classifier";
      opts.seed = mix_seed(config.seed, 1);
      append(run_onehot_classifier(data, params, opts));
      break;
    }
    case Strategy::kSequential: {
      opts.stage = "concepts";
      append(run_epochs(data, concepts_only, {.encoder = true, .psi = true}, params, masks, opts));
      Objective task_only;
      task_only.concept_weight = 0.0;
      opts.stage = "classifier";
      opts.seed = mix_seed(config.seed, 1);
      append(run_epochs(data, task_only, {.phi = true}, params, masks, opts));
      break;
    }
    case Strategy::kJoint: {
      Objective obj;
      obj.concept_weight = config.gamma;
      obj.task_term = config.task_term;
      opts.stage = "joint";
      append(run_epochs(data, obj, {.encoder = true, .psi = true, .phi = true}, params, masks, opts));
      break;
    }
  }
  return logs;
}

FiniteDifferenceReport check_model_gradients(const Example& example, const ModelParams& params,
                                             const MaskSet& masks, const Objective& objective, double eps,
                                             std::span<const std::size_t> indices) {
  Pathway pathway(params, masks, objective.direct_head);
  const auto trace = run_forward(pathway, example.token_ids);
  const auto value = evaluate_objective(trace, example, objective, params.config());
  const auto analytic = backward(pathway, trace, value.grads).grads;

  ModelParams work = params;
  auto loss = [&](std::span<const double> point) {
    std::copy(point.begin(), point.end(), work.values().values().begin());
    Pathway pw(work, masks, objective.direct_head);
    const auto t = run_forward(pw, example.token_ids);
    return evaluate_objective(t, example, objective, work.config()).terms.total;
  };
  const auto point = params.values().values();
  return finite_difference_check(loss, point, analytic, eps, indices);
}

}  // namespace sparsecbm
