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

#include "sparsecbm/explain.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <sstream>

#include "sparsecbm/error.hpp"

namespace sparsecbm {

using nlohmann::json;

namespace {

/// d(predicted-class logit of concept k)/d(pooled embedding), through branch k.
Vector pooled_logit_grad(const Pathway& pathway, const ForwardTrace& trace, std::size_t k) {
  const auto& cfg = pathway.params().config();
  OutputGrads up;
  up.concepts = RowMatrix::Zero(static_cast<Eigen::Index>(cfg.num_concepts),
                                static_cast<Eigen::Index>(cfg.concept_classes));
  const auto row = static_cast<Eigen::Index>(k);
  up.concepts(row, static_cast<Eigen::Index>(argmax(trace.concepts.logits.row(row).transpose()))) = 1.0;
  Vector pooled;
  concept_branch_gradient(pathway, trace, k, up, &pooled);
  return pooled;
}

template <typename Fn>
RowMatrix per_token(const Example& example, const ModelParams& params, const MaskSet& masks, Fn cell) {
  const auto K = params.config().num_concepts;
  const auto D = example.token_ids.size();
  RowMatrix out = RowMatrix::Zero(static_cast<Eigen::Index>(K), static_cast<Eigen::Index>(D));
  if (D == 0) return out;
  Pathway pathway(params, masks);
  const auto trace = run_forward(pathway, example.token_ids);
  const auto emb = params.matrix(params.embedding_block());
  for (std::size_t k = 0; k < K; ++k) {
    // Mean pooling: every position receives the pooled gradient divided by D.
    const Vector g = pooled_logit_grad(pathway, trace, k) / static_cast<double>(D);
    for (std::size_t d = 0; d < D; ++d) {
      out(static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(d)) =
          cell(g, emb.row(example.token_ids[d]).transpose());
    }
  }
  return out;
}

std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

json matrix_json(const RowMatrix& m) {
  json rows = json::array();
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    json row = json::array();
    for (Eigen::Index c = 0; c < m.cols(); ++c) row.push_back(m(r, c));
    rows.push_back(std::move(row));
  }
  return rows;
}

void write_file(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  out << text;
  if (!out) throw DataError("cannot write " + path.string());
}

std::string file_safe(std::string s) {
  for (char& c : s) {
    if (!std::isalnum(static_cast<unsigned char>(c)) && c != '.' && c != '-') c = '_';
  }
  return s;
}

}  // namespace

RowMatrix token_saliency(const Example& example, const ModelParams& params, const MaskSet& masks) {
  return per_token(example, params, masks, [](const Vector& g, const Vector&) { return g.norm(); });
}

RowMatrix token_attribution(const Example& example, const ModelParams& params, const MaskSet& masks) {
  return per_token(example, params, masks, [](const Vector& g, const Vector& e) { return g.dot(e); });
}

ContributionRanking concept_contributions(const ForwardTrace& trace) {
  ContributionRanking r;
  r.contributions = trace.contributions;
  r.predicted = argmax(trace.task_logits);
  const auto K = static_cast<std::size_t>(trace.contributions.rows());
  for (std::size_t k = 0; k < K; ++k) {
    r.impact.push_back(trace.contributions(static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(r.predicted)));
  }
  r.order.resize(K);
  std::iota(r.order.begin(), r.order.end(), 0);
  std::stable_sort(r.order.begin(), r.order.end(),
                   [&](std::size_t a, std::size_t b) { return std::abs(r.impact[a]) > std::abs(r.impact[b]); });
  return r;
}

double jaccard(const Mask& a, const Mask& b) {
  if (a.size() != b.size()) throw DimensionError("jaccard: masks differ in length");
  std::size_t inter = 0, uni = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    inter += a[i] && b[i];
    uni += a[i] || b[i];
  }
  return uni == 0 ? 0.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

MaskStats mask_overlap(const MaskSet& masks, const ModelParams& params) {
  const std::size_t K = masks.size();
  if (K == 0) throw UsageError("mask statistics need at least one mask");
  if (masks.length() != params.prunable_size()) throw DimensionError("mask length does not match the model");
  MaskStats s;
  s.overlap = RowMatrix::Identity(static_cast<Eigen::Index>(K), static_cast<Eigen::Index>(K));
  for (std::size_t k = 0; k < K; ++k) {
    s.sparsity.push_back(masks.sparsity(k));
    for (std::size_t j = k + 1; j < K; ++j) {
      const double v = jaccard(masks[k], masks[j]);
      s.overlap(static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(j)) = v;
      s.overlap(static_cast<Eigen::Index>(j), static_cast<Eigen::Index>(k)) = v;
    }
  }
  for (std::size_t layer = 0; layer < params.num_layers(); ++layer) {
    const auto& b = params.values().block(params.layer_weight_block(layer));
    LayerGrid g{b.name, b.rows, b.cols, b.offset, {}};
    for (std::size_t k = 0; k < K; ++k) {
      g.kept.push_back(static_cast<std::size_t>(
          std::count(masks[k].begin() + static_cast<std::ptrdiff_t>(b.offset),
                     masks[k].begin() + static_cast<std::ptrdiff_t>(b.offset + b.size()), std::uint8_t{1})));
    }
    s.layers.push_back(std::move(g));
  }
  return s;
}

json MaskStats::to_json() const {
  json layers_json = json::array();
  for (const auto& l : layers) {
    layers_json.push_back(json{{"name", l.name}, {"rows", l.rows}, {"cols", l.cols}, {"kept", l.kept}});
  }
  return json{{"sparsity", sparsity}, {"overlap", matrix_json(overlap)}, {"layers", layers_json}};
}

PathwayTrace explain_example(const Example& example, const ModelParams& params, const MaskSet& masks,
                             const Vocabulary& vocab) {
  PathwayTrace t;
  t.token_ids = example.token_ids;
  for (int id : example.token_ids) t.tokens.push_back(vocab.token(id));
  const auto trace = forward_pathway(example, params, masks);
  const auto pred = predict_from_trace(trace, params.config());
  t.token_saliency = token_saliency(example, params, masks);
  t.token_attribution = token_attribution(example, params, masks);
  t.concept_predictions = pred.concepts;
  t.concept_logits = trace.concepts.logits;
  t.concept_activations = trace.concepts.activations;
  t.contributions = concept_contributions(trace);
  t.task_logits = trace.task_logits;
  t.task_prediction = argmax(trace.task_logits);
  return t;
}

json PathwayTrace::to_json(const DatasetSchema& schema) const {
  json concepts = json::array();
  for (std::size_t k = 0; k < concept_predictions.size(); ++k) {
    const auto row = static_cast<Eigen::Index>(k);
    json acts = json::array(), logits = json::array(), contrib = json::array();
    for (Eigen::Index v = 0; v < concept_activations.cols(); ++v) {
      acts.push_back(concept_activations(row, v));
      logits.push_back(concept_logits(row, v));
    }
    for (Eigen::Index c = 0; c < contributions.contributions.cols(); ++c) {
      contrib.push_back(contributions.contributions(row, c));
    }
    concepts.push_back(json{{"name", schema.concept_names.at(k)},
                            {"prediction", schema.concept_class_names.at(concept_predictions[k])},
                            {"activations", acts},
                            {"logits", logits},
                            {"contribution", contrib},
                            {"impact", contributions.impact[k]}});
  }
  json ranking = json::array();
  for (auto k : contributions.order) ranking.push_back(schema.concept_names.at(k));
  json logits = json::array();
  for (Eigen::Index c = 0; c < task_logits.size(); ++c) logits.push_back(task_logits[c]);
  return json{{"tokens", tokens},
              {"token_ids", token_ids},
              {"token_saliency", matrix_json(token_saliency)},
              {"token_attribution", matrix_json(token_attribution)},
              {"concepts", concepts},
              {"ranking", ranking},
              {"task_logits", logits},
              {"task_prediction", task_prediction}};
}

std::string mask_pgm(const Mask& mask, const LayerGrid& layer) {
  if (layer.offset + layer.rows * layer.cols > mask.size()) throw DimensionError("layer grid exceeds mask");
  std::ostringstream out;
  out << "P2\n" << layer.cols << ' ' << layer.rows << "\n255\n";
  for (std::size_t r = 0; r < layer.rows; ++r) {
    for (std::size_t c = 0; c < layer.cols; ++c) {
      if (c) out << ' ';
      out << (mask[layer.offset + r * layer.cols + c] ? 255 : 0);
    }
    out << '\n';
  }
  return out.str();
}

void render_report(const PathwayTrace& trace, const MaskStats& stats, const MaskSet& masks,
                   const DatasetSchema& schema, const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw DataError("cannot create " + dir.string() + ": " + ec.message());

  json report = trace.to_json(schema);
  report["mask_stats"] = stats.to_json();
  write_file(dir / "report.json", report.dump(2) + "\n");

  for (std::size_t k = 0; k < masks.size(); ++k) {
    for (const auto& layer : stats.layers) {
      const auto name = "mask_" + file_safe(schema.concept_names.at(k)) + "_" + file_safe(layer.name) + ".pgm";
      write_file(dir / name, mask_pgm(masks[k], layer));
    }
  }

  std::ostringstream csv;
  csv << "concept";
  for (const auto& tok : trace.tokens) csv << ',' << csv_field(tok);
  csv << '\n';
  for (Eigen::Index k = 0; k < trace.token_saliency.rows(); ++k) {
    csv << csv_field(schema.concept_names.at(static_cast<std::size_t>(k)));
    for (Eigen::Index d = 0; d < trace.token_saliency.cols(); ++d) {
      char buf[40];
      std::snprintf(buf, sizeof buf, ",%.17g", trace.token_saliency(k, d));
      csv << buf;
    }
    csv << '\n';
  }
  write_file(dir / "token_saliency.csv", csv.str());
}

}  // namespace sparsecbm
