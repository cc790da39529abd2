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

#include "sparsecbm/evaluation.hpp"

#include <cstdio>
#include <sstream>

#include "sparsecbm/error.hpp"

namespace sparsecbm {

using nlohmann::json;

namespace {

void check_inputs(std::span<const std::size_t> preds, std::span<const std::size_t> golds) {
  if (preds.empty()) throw UsageError("metrics need at least one prediction");
  if (preds.size() != golds.size()) throw DimensionError("predictions and gold labels differ in length");
}

json score_json(const Score& s) { return json{{"accuracy", s.accuracy}, {"macro_f1", s.macro_f1}}; }

std::string pct(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.1f", 100.0 * v);
  return buf;
}

}  // namespace

double accuracy(std::span<const std::size_t> preds, std::span<const std::size_t> golds) {
  check_inputs(preds, golds);
  std::size_t hits = 0;
  for (std::size_t i = 0; i < preds.size(); ++i) hits += preds[i] == golds[i];
  return static_cast<double>(hits) / static_cast<double>(preds.size());
}

double macro_f1(std::span<const std::size_t> preds, std::span<const std::size_t> golds, std::size_t num_classes) {
  check_inputs(preds, golds);
  std::vector<std::size_t> tp(num_classes, 0), pred_n(num_classes, 0), gold_n(num_classes, 0);
  for (std::size_t i = 0; i < preds.size(); ++i) {
    if (preds[i] >= num_classes || golds[i] >= num_classes) throw UsageError("label outside the class range");
    ++pred_n[preds[i]];
    ++gold_n[golds[i]];
    tp[preds[i]] += preds[i] == golds[i];
  }
  double total = 0.0;
  std::size_t counted = 0;
  for (std::size_t c = 0; c < num_classes; ++c) {
    if (pred_n[c] == 0 && gold_n[c] == 0) continue;
    ++counted;
    const double p = pred_n[c] ? static_cast<double>(tp[c]) / static_cast<double>(pred_n[c]) : 0.0;
    const double r = gold_n[c] ? static_cast<double>(tp[c]) / static_cast<double>(gold_n[c]) : 0.0;
    if (p + r > 0.0) total += 2.0 * p * r / (p + r);
  }
  return total / static_cast<double>(counted);
}

MetricReport evaluate_split(const Split& split, const ModelParams& params, const MaskSet& masks) {
  if (split.size() == 0) throw DataError("cannot evaluate an empty split");
  const auto& cfg = params.config();
  const std::size_t K = cfg.num_concepts;
  std::vector<std::size_t> task_pred, task_gold;
  std::vector<std::vector<std::size_t>> c_pred(K), c_gold(K);
  for (const auto& ex : split.examples) {
    const auto p = predict(ex, params, masks);
    task_pred.push_back(p.task);
    task_gold.push_back(ex.task_label);
    for (std::size_t k = 0; k < K; ++k) {
      c_pred[k].push_back(p.concepts[k]);
      c_gold[k].push_back(ex.concept_labels.at(k));
    }
  }
  MetricReport r;
  r.task = {accuracy(task_pred, task_gold), macro_f1(task_pred, task_gold, cfg.task_classes)};
  for (std::size_t k = 0; k < K; ++k) {
    r.concepts.push_back({accuracy(c_pred[k], c_gold[k]), macro_f1(c_pred[k], c_gold[k], cfg.concept_classes)});
    r.concept_mean.accuracy += r.concepts.back().accuracy / static_cast<double>(K);
    r.concept_mean.macro_f1 += r.concepts.back().macro_f1 / static_cast<double>(K);
  }
  return r;
}

MetricReport average_reports(std::span<const MetricReport> reports) {
  if (reports.empty()) throw UsageError("nothing to average");
  MetricReport out;
  out.concepts.resize(reports.front().concepts.size());
  const double n = static_cast<double>(reports.size());
  auto add = [n](Score& into, const Score& s) {
    into.accuracy += s.accuracy / n;
    into.macro_f1 += s.macro_f1 / n;
  };
  for (const auto& r : reports) {
    if (r.concepts.size() != out.concepts.size()) throw DimensionError("reports disagree on concept count");
    add(out.task, r.task);
    add(out.concept_mean, r.concept_mean);
    for (std::size_t k = 0; k < r.concepts.size(); ++k) add(out.concepts[k], r.concepts[k]);
  }
  return out;
}

json MetricReport::to_json(const DatasetSchema* schema) const {
  json per = json::array();
  for (std::size_t k = 0; k < concepts.size(); ++k) {
    json c = score_json(concepts[k]);
    c["concept"] = schema ? schema->concept_names.at(k) : std::to_string(k);
    per.push_back(std::move(c));
  }
  json mean = score_json(concept_mean);
  return json{{"task", score_json(task)}, {"concepts", {{"per_concept", per}, {"mean", mean}}}};
}

std::string MetricReport::to_text(const DatasetSchema* schema) const {
  std::ostringstream out;
  out << "task      acc " << pct(task.accuracy) << "  macro-F1 " << pct(task.macro_f1) << '\n';
  out << "concepts  acc " << pct(concept_mean.accuracy) << "  macro-F1 " << pct(concept_mean.macro_f1) << '\n';
  for (std::size_t k = 0; k < concepts.size(); ++k) {
    out << "  " << (schema ? schema->concept_names.at(k) : std::to_string(k)) << "  acc "
        << pct(concepts[k].accuracy) << "  macro-F1 " << pct(concepts[k].macro_f1) << '\n';
  }
  return out.str();
}

}  // namespace sparsecbm
