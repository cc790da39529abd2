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

#include "sparsecbm/intervention.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <ostream>
#include <sstream>
#include <stdexcept>

#include "sparsecbm/error.hpp"
#include "sparsecbm/linalg.hpp"

namespace sparsecbm {

using nlohmann::json;

InterventionMode parse_intervention_mode(std::string_view s) {
  if (s == "oracle") return InterventionMode::kOracle;
  if (s == "sparsity") return InterventionMode::kSparsity;
  throw UsageError("unknown intervention mode '" + std::string(s) + "'");
}

std::string to_string(InterventionMode m) { return m == InterventionMode::kOracle ? "oracle" : "sparsity"; }

GrowRule parse_grow_rule(std::string_view s) {
  if (s == "magnitude") return GrowRule::kMagnitude;
  if (s == "first_order") return GrowRule::kFirstOrder;
  throw UsageError("unknown grow rule '" + std::string(s) + "'");
}

std::string to_string(GrowRule g) { return g == GrowRule::kMagnitude ? "magnitude" : "first_order"; }

SaliencyObjective parse_saliency_objective(std::string_view s) {
  if (s == "balanced") return SaliencyObjective::kBalanced;
  if (s == "weighted") return SaliencyObjective::kWeighted;
  throw UsageError("unknown saliency objective '" + std::string(s) + "'");
}

std::string to_string(SaliencyObjective o) { return o == SaliencyObjective::kBalanced ? "balanced" : "weighted"; }

void InterventionConfig::validate() const {
  if (!(r >= 0.0 && r <= 1.0)) throw UsageError("intervention r must lie in [0, 1]");
  if (rounds < 1) throw UsageError("intervention rounds must be >= 1");
  if (!(gamma >= 0.0)) throw UsageError("gamma must be >= 0");
}

json event_to_json(const InterventionEvent& e) {
  return json{{"example_id", e.example_id}, {"concept", e.concept_index}, {"target", e.target},
              {"pre_concept", e.pre_concept}, {"post_concept", e.post_concept}, {"pre_task", e.pre_task},
              {"post_task", e.post_task},     {"rounds", e.rounds},             {"dropped", e.dropped},
              {"grown", e.grown},             {"clamped", e.clamped}};
}

void write_events_jsonl(std::ostream& out, std::span<const InterventionEvent> events) {
  for (const auto& e : events) out << event_to_json(e).dump() << '\n';
}

OracleResult oracle_intervene(const ForwardTrace& trace, const std::map<std::size_t, std::size_t>& corrections,
                              const ModelParams& params) {
  const auto& cfg = params.config();
  OracleResult out;
  out.activations = trace.concepts.activations;
  for (const auto& [k, cls] : corrections) {
    if (k >= cfg.num_concepts || cls >= cfg.concept_classes) {
      throw UsageError("oracle correction references an unknown concept or class");
    }
    const auto row = static_cast<Eigen::Index>(k);
    out.activations.row(row).setZero();
    out.activations(row, static_cast<Eigen::Index>(cls)) = 1.0;
  }
  out.task_logits = Vector::Zero(static_cast<Eigen::Index>(cfg.task_classes));
  for (std::size_t k = 0; k < cfg.num_concepts; ++k) {
    out.task_logits += params.matrix(params.phi_block(k)) * out.activations.row(static_cast<Eigen::Index>(k)).transpose();
  }
  out.task = argmax(out.task_logits);
  return out;
}

namespace {

OutputGrads saliency_upstream(const ForwardTrace& trace, const Example& example, std::size_t k,
                              const ModelConfig& cfg, double task_weight, double concept_weight) {
  OutputGrads up;
  if (task_weight != 0.0) up.task = task_weight * softmax_cross_entropy_grad(trace.task_logits, example.task_label);
  up.concepts = RowMatrix::Zero(static_cast<Eigen::Index>(cfg.num_concepts),
                                static_cast<Eigen::Index>(cfg.concept_classes));
  const auto row = static_cast<Eigen::Index>(k);
  up.concepts.row(row) =
      concept_weight *
      softmax_cross_entropy_grad(trace.concepts.logits.row(row).transpose(), example.concept_labels.at(k)).transpose();
  return up;
}

void check_concept(const ModelParams& params, std::size_t k) {
  if (k >= params.config().num_concepts) throw UsageError("saliency: concept index out of range");
}

double l2(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  return std::sqrt(s);
}

std::vector<double> effective_theta(const ModelParams& params, std::size_t k) {
  std::vector<double> w(params.theta().begin(), params.theta().end());
  if (!params.concept_deltas.empty()) {
    for (std::size_t i = 0; i < w.size(); ++i) w[i] += params.concept_deltas[k][i];
  }
  return w;
}

}  // namespace

std::vector<double> saliency_gradient(const Example& example, std::size_t k, const ModelParams& params,
                                      const MaskSet& masks, SaliencyObjective objective, double gamma,
                                      bool task_term) {
  check_concept(params, k);
  const auto& cfg = params.config();
  Pathway pathway(params, masks);
  const auto trace = run_forward(pathway, example.token_ids);
  if (objective == SaliencyObjective::kWeighted || !task_term) {
    return concept_branch_gradient(pathway, trace, k,
                                   saliency_upstream(trace, example, k, cfg, task_term ? 1.0 : 0.0, gamma));
  }
  const auto gt = concept_branch_gradient(pathway, trace, k, saliency_upstream(trace, example, k, cfg, 1.0, 0.0));
  auto g = concept_branch_gradient(pathway, trace, k, saliency_upstream(trace, example, k, cfg, 0.0, 1.0));
  const double nt = l2(gt);
  const double nc = l2(g);
  for (std::size_t i = 0; i < g.size(); ++i) {
    g[i] = (nc > 0.0 ? g[i] / nc : 0.0) + (nt > 0.0 ? gt[i] / nt : 0.0);
  }
  return g;
}

std::vector<double> saliency_scores(const Example& example, std::size_t k, const ModelParams& params,
                                    const MaskSet& masks, double concept_weight, bool task_term) {
  auto g = saliency_gradient(example, k, params, masks, SaliencyObjective::kWeighted, concept_weight, task_term);
  const auto w = effective_theta(params, k);
  for (std::size_t i = 0; i < g.size(); ++i) g[i] = std::abs(g[i] * w[i]);
  return g;
}

std::vector<double> intervention_scores(const Example& example, std::size_t k, const ModelParams& params,
                                        const MaskSet& masks, const InterventionConfig& config) {
  auto g = saliency_gradient(example, k, params, masks, config.objective, config.gamma, config.saliency_task_term);
  const auto w = effective_theta(params, k);
  const Mask& mask = masks[k];
  for (std::size_t i = 0; i < g.size(); ++i) {
    const double gw = g[i] * w[i];
    // Growing bit i moves the loss by about g_i * w_i; with frozen weights the sign matters.
    g[i] = mask[i] || config.grow_rule == GrowRule::kMagnitude ? std::abs(gw) : -gw;
  }
  return g;
}

std::size_t drop_grow_count(double r, std::size_t length) {
  if (!(r >= 0.0 && r <= 1.0)) throw UsageError("drop/grow r must lie in [0, 1]");
  return static_cast<std::size_t>(std::llround(r * static_cast<double>(length)));
}

DropGrowResult drop_grow(Mask& mask, std::span<const double> scores, double r) {
  if (scores.size() != mask.size()) throw DimensionError("drop_grow: scores and mask differ in length");
  const std::size_t want = drop_grow_count(r, mask.size());
  std::vector<std::size_t> on, off;
  for (std::size_t i = 0; i < mask.size(); ++i) (mask[i] ? on : off).push_back(i);
  DropGrowResult res;
  const std::size_t n = std::min({want, on.size(), off.size()});
  res.clamped = n < want;
  if (n == 0) return res;
  // Both candidate lists are in index order, so stable sorts break ties low.
  std::stable_sort(on.begin(), on.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  std::stable_sort(off.begin(), off.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  for (std::size_t j = 0; j < n; ++j) {
    mask[on[j]] = 0;
    mask[off[j]] = 1;
  }
  res.dropped = res.grown = n;
  return res;
}

std::map<std::size_t, std::size_t> mispredicted_concepts(const Example& example, const Prediction& pred) {
  std::map<std::size_t, std::size_t> wrong;
  for (std::size_t k = 0; k < pred.concepts.size(); ++k) {
    if (pred.concepts[k] != example.concept_labels.at(k)) wrong.emplace(k, example.concept_labels[k]);
  }
  return wrong;
}

std::vector<InterventionEvent> sparsity_intervene(const Example& example,
                                                  const std::map<std::size_t, std::size_t>& targets,
                                                  const ModelParams& params, MaskSet& masks,
                                                  const InterventionConfig& config, std::size_t example_id) {
  config.validate();
  const auto& cfg = params.config();
  const ModelParams frozen = params;
  std::vector<InterventionEvent> events;
  Example work = example;
  for (const auto& [k, cls] : targets) {
    if (k >= cfg.num_concepts || cls >= cfg.concept_classes) {
      throw UsageError("intervention target references an unknown concept or class");
    }
    work.concept_labels.at(k) = cls;
  }
  for (const auto& [k, cls] : targets) {
    InterventionEvent ev;
    ev.example_id = example_id;
    ev.concept_index = k;
    ev.target = cls;
    auto pred = predict(work, params, masks);
    ev.pre_concept = pred.concepts[k];
    ev.pre_task = pred.task;
    while (ev.rounds < config.rounds && pred.concepts[k] != cls) {
      const auto scores = intervention_scores(work, k, params, masks, config);
      const auto res = drop_grow(masks[k], scores, config.r);
      ev.dropped += res.dropped;
      ev.grown += res.grown;
      ev.clamped = ev.clamped || res.clamped;
      ++ev.rounds;
      pred = predict(work, params, masks);
    }
    ev.post_concept = pred.concepts[k];
    ev.post_task = pred.task;
    events.push_back(ev);
  }
  if (!(frozen == params)) throw std::logic_error("intervention modified frozen parameters");
  return events;
}

namespace {

struct Hits {
  std::size_t task = 0;
  std::size_t concepts = 0;
  void add(const Example& ex, const Prediction& p) {
    task += p.task == ex.task_label;
    for (std::size_t k = 0; k < p.concepts.size(); ++k) concepts += p.concepts[k] == ex.concept_labels[k];
  }
};

double frac(std::size_t hits, std::size_t total) { return static_cast<double>(hits) / static_cast<double>(total); }

}  // namespace

InterventionTable evaluate_intervention(const Split& split, const ModelParams& params, const MaskSet& masks,
                                        std::span<const double> r_grid, const InterventionConfig& config,
                                        std::vector<InterventionEvent>* events) {
  config.validate();
  if (split.size() == 0) throw DataError("intervention split is empty");
  const auto& cfg = params.config();
  const std::size_t n = split.size();
  const std::size_t nk = n * cfg.num_concepts;

  Hits ni;
  std::vector<Prediction> base;
  base.reserve(n);
  for (const auto& ex : split.examples) {
    base.push_back(predict(ex, params, masks));
    ni.add(ex, base.back());
  }

  InterventionTable table;
  table.mode = config.mode;
  auto blank_row = [&](double r) {
    InterventionRow row;
    row.r = r;
    row.ni_task = frac(ni.task, n);
    row.ni_concept = frac(ni.concepts, nk);
    return row;
  };

  if (config.mode == InterventionMode::kOracle) {
    InterventionRow row = blank_row(0.0);
    Hits si;
    for (std::size_t i = 0; i < n; ++i) {
      const auto& ex = split.examples[i];
      const auto wrong = mispredicted_concepts(ex, base[i]);
      Prediction p = base[i];
      if (!wrong.empty()) {
        const auto trace = forward_pathway(ex, params, masks);
        p.task = oracle_intervene(trace, wrong, params).task;
        for (const auto& [k, cls] : wrong) p.concepts[k] = cls;
        row.events += wrong.size();
      }
      si.add(ex, p);
    }
    row.si_task = row.replay_task = frac(si.task, n);
    row.si_concept = row.replay_concept = frac(si.concepts, nk);
    table.rows.push_back(row);
    return table;
  }

  for (double r : r_grid) {
    InterventionConfig rc = config;
    rc.r = r;
    rc.validate();
    InterventionRow row = blank_row(r);
    MaskSet work = masks;
    Hits si;
    for (std::size_t i = 0; i < n; ++i) {
      const auto& ex = split.examples[i];
      auto pred = predict(ex, params, work);
      const auto wrong = mispredicted_concepts(ex, pred);
      if (!wrong.empty() && drop_grow_count(r, work.length()) > 0) {
        const auto evs = sparsity_intervene(ex, wrong, params, work, rc, i);
        for (const auto& e : evs) row.clamps += e.clamped;
        row.events += evs.size();
        if (events) events->insert(events->end(), evs.begin(), evs.end());
        pred = predict(ex, params, work);
      }
      si.add(ex, pred);
    }
    row.si_task = frac(si.task, n);
    row.si_concept = frac(si.concepts, nk);
    Hits replay;
    for (const auto& ex : split.examples) replay.add(ex, predict(ex, params, work));
    row.replay_task = frac(replay.task, n);
    row.replay_concept = frac(replay.concepts, nk);
    std::size_t changed = 0;
    for (std::size_t j = 0; j < work.length(); ++j) {
      for (std::size_t k = 0; k < work.size(); ++k) {
        if (work[k][j] != masks[k][j]) {
          ++changed;
          break;
        }
      }
    }
    row.modified_fraction = frac(changed, work.length());
    table.rows.push_back(row);
  }
  return table;
}

json InterventionTable::to_json() const {
  json rows_json = json::array();
  for (const auto& r : rows) {
    rows_json.push_back(json{{"r", r.r},
                             {"ni", {{"task_acc", r.ni_task}, {"concept_acc", r.ni_concept}}},
                             {"si", {{"task_acc", r.si_task}, {"concept_acc", r.si_concept}}},
                             {"si_replay", {{"task_acc", r.replay_task}, {"concept_acc", r.replay_concept}}},
                             {"modified_fraction", r.modified_fraction},
                             {"events", r.events},
                             {"clamps", r.clamps}});
  }
  return json{{"mode", sparsecbm::to_string(mode)}, {"rows", rows_json}};
}

std::string InterventionTable::to_text() const {
  std::ostringstream out;
  char line[256];
  std::snprintf(line, sizeof line, "%-8s %9s %9s %9s %9s %9s %9s %9s\n", "r", "NI-task", "NI-conc", "SI-task",
                "SI-conc", "RP-task", "RP-conc", "modified");
  out << line;
  for (const auto& r : rows) {
    std::snprintf(line, sizeof line, "%-8g %9.1f %9.1f %9.1f %9.1f %9.1f %9.1f %8.2f%%\n", r.r, 100 * r.ni_task,
                  100 * r.ni_concept, 100 * r.si_task, 100 * r.si_concept, 100 * r.replay_task,
                  100 * r.replay_concept, 100 * r.modified_fraction);
    out << line;
  }
  return out.str();
}

}  // namespace sparsecbm
