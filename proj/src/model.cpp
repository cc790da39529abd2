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

#include "sparsecbm/model.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "sparsecbm/data.hpp"
#include "sparsecbm/error.hpp"
#include "sparsecbm/rng.hpp"

namespace sparsecbm {

using nlohmann::json;

void ModelConfig::validate() const {
  auto need = [](std::size_t v, const char* what) {
    if (v < 1) throw UsageError(std::string("model config: ") + what + " must be >= 1");
  };
  need(vocab_size, "vocab_size");
  need(emb_dim, "emb_dim");
  need(latent_dim, "latent_dim");
  need(num_concepts, "num_concepts");
  for (auto h : hidden_dims) need(h, "hidden dim");
  if (concept_classes < 2) throw UsageError("model config: concept_classes must be >= 2");
  if (task_classes < 2) throw UsageError("model config: task_classes must be >= 2");
}

json ModelConfig::to_json() const {
  return json{{"vocab_size", vocab_size},     {"emb_dim", emb_dim},
              {"hidden_dims", hidden_dims},   {"latent_dim", latent_dim},
              {"num_concepts", num_concepts}, {"concept_classes", concept_classes},
              {"task_classes", task_classes}, {"seed", seed},
              {"direct_head", direct_head}};
}

ModelConfig ModelConfig::from_json(const json& j) {
  ModelConfig c;
  try {
    c.vocab_size = j.at("vocab_size").get<std::size_t>();
    c.emb_dim = j.at("emb_dim").get<std::size_t>();
    c.hidden_dims = j.at("hidden_dims").get<std::vector<std::size_t>>();
    c.latent_dim = j.at("latent_dim").get<std::size_t>();
    c.num_concepts = j.at("num_concepts").get<std::size_t>();
    c.concept_classes = j.at("concept_classes").get<std::size_t>();
    c.task_classes = j.at("task_classes").get<std::size_t>();
    c.seed = j.at("seed").get<std::uint64_t>();
    c.direct_head = j.value("direct_head", false);
  } catch (const json::exception& e) {
    throw DataError(std::string("model config: ") + e.what());
  }
  return c;
}

// --- masks --------------------------------------------------------------------

MaskSet::MaskSet(std::vector<Mask> masks) : masks_(std::move(masks)) {
  for (const auto& m : masks_) {
    if (m.size() != length()) throw DimensionError("MaskSet: masks differ in length");
  }
}

MaskSet MaskSet::all_ones(std::size_t num_concepts, std::size_t length) {
  return MaskSet(std::vector<Mask>(num_concepts, Mask(length, 1)));
}

std::size_t MaskSet::popcount(std::size_t k) const {
  const auto& m = masks_.at(k);
  return static_cast<std::size_t>(std::count(m.begin(), m.end(), std::uint8_t{1}));
}

double MaskSet::sparsity(std::size_t k) const {
  const auto len = length();
  return len == 0 ? 0.0 : 1.0 - static_cast<double>(popcount(k)) / static_cast<double>(len);
}

Mask MaskSet::union_mask() const {
  Mask u(length(), 0);
  for (const auto& m : masks_) {
    for (std::size_t i = 0; i < m.size(); ++i) u[i] |= m[i];
  }
  return u;
}

// --- parameters -----------------------------------------------------------------

ModelParams::ModelParams(const ModelConfig& config) : config_(config) {
  config_.validate();
  const auto n = num_layers();
  std::vector<std::size_t> in_dims{config_.emb_dim};
  std::vector<std::size_t> out_dims = config_.hidden_dims;
  out_dims.push_back(config_.latent_dim);
  in_dims.insert(in_dims.end(), config_.hidden_dims.begin(), config_.hidden_dims.end());
  for (std::size_t i = 0; i < n; ++i) {
    values_.add_block("enc" + std::to_string(i) + ".weight", out_dims[i], in_dims[i]);
  }
  prunable_ = values_.size();
  for (std::size_t i = 0; i < n; ++i) {
    values_.add_block("enc" + std::to_string(i) + ".bias", out_dims[i], 1);
  }
  values_.add_block("embeddings", config_.vocab_size, config_.emb_dim);
  const auto K = config_.num_concepts, V = config_.concept_classes, C = config_.task_classes;
  for (std::size_t k = 0; k < K; ++k) {
    values_.add_block("psi" + std::to_string(k) + ".weight", V, config_.latent_dim);
    values_.add_block("psi" + std::to_string(k) + ".bias", V, 1);
  }
  for (std::size_t k = 0; k < K; ++k) values_.add_block("phi" + std::to_string(k), C, V);
  values_.add_block("head.weight", C, config_.latent_dim);
  values_.add_block("head.bias", C, 1);
}

ModelParams ModelParams::initialize(const ModelConfig& config) {
  ModelParams p(config);
  Rng rng(mix_seed(config.seed, 0x1417));
  auto glorot = [&](std::size_t block) {
    auto m = p.matrix(block);
    const double a = std::sqrt(6.0 / static_cast<double>(m.rows() + m.cols()));
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.uniform(-a, a);
  };
  for (std::size_t i = 0; i < p.num_layers(); ++i) glorot(p.layer_weight_block(i));
  {
    auto e = p.matrix(p.embedding_block());
    for (Eigen::Index i = 0; i < e.size(); ++i) e.data()[i] = rng.uniform(-1.0, 1.0);
  }
  for (std::size_t k = 0; k < config.num_concepts; ++k) {
    glorot(p.psi_weight_block(k));
    glorot(p.phi_block(k));
  }
  glorot(p.head_weight_block());
  return p;
}

// --- forward ----------------------------------------------------------------------

namespace {

bool is_all_ones(std::span<const std::uint8_t> m) {
  return std::all_of(m.begin(), m.end(), [](std::uint8_t b) { return b == 1; });
}

bool delta_is_zero(const ModelParams& p, std::size_t k) {
  if (p.concept_deltas.empty()) return true;
  const auto& d = p.concept_deltas.at(k);
  return std::all_of(d.begin(), d.end(), [](double v) { return v == 0.0; });
}

bool same_branch(const ModelParams& p, const MaskSet& masks, std::size_t a, std::size_t b) {
  if (masks[a] != masks[b]) return false;
  if (p.concept_deltas.empty()) return true;
  return p.concept_deltas[a] == p.concept_deltas[b];
}

Eigen::Map<const RowMatrix> layer_view(const ModelParams& p, std::span<const double> weights,
                                       std::size_t layer) {
  const auto& b = p.values().block(p.layer_weight_block(layer));
  return {weights.data() + b.offset, static_cast<Eigen::Index>(b.rows),
          static_cast<Eigen::Index>(b.cols)};
}

void check_trace_finite(const ForwardTrace& t) {
  if (!t.concepts.logits.allFinite()) throw NumericError("psi", "non-finite concept logits");
  if (!t.task_logits.allFinite()) throw NumericError("phi", "non-finite task logits");
  if (t.head_logits.size() > 0 && !t.head_logits.allFinite()) {
    throw NumericError("head.weight", "non-finite head logits");
  }
}

BranchTrace run_branch(const ModelParams& p, std::span<const double> weights, const Vector& pooled) {
  BranchTrace bt;
  const auto n = p.num_layers();
  bt.pre.reserve(n);
  bt.post.reserve(n);
  const Vector* x = &pooled;
  for (std::size_t i = 0; i < n; ++i) {
    auto w = layer_view(p, weights, i);
    auto b = p.matrix(p.layer_bias_block(i));
    Vector pre = w * (*x) + Vector(b.col(0));
    bt.post.push_back(i + 1 < n ? Vector(pre.cwiseMax(0.0)) : pre);
    bt.pre.push_back(std::move(pre));
    x = &bt.post.back();
  }
  return bt;
}

}  // namespace

std::span<const std::uint8_t> Pathway::branch_mask(std::size_t b) const {
  const auto& owner = branch_mask_owner_.at(b);
  if (!owner) return {};
  return (*masks_)[*owner];
}

Pathway::Pathway(const ModelParams& params, const MaskSet& masks, bool with_dense_branch)
    : params_(&params), masks_(&masks) {
  const auto K = params.config().num_concepts;
  const auto L = params.prunable_size();
  if (masks.size() != K) {
    throw DimensionError("pathway: expected " + std::to_string(K) + " masks, got " +
                         std::to_string(masks.size()));
  }
  if (masks.length() != L) {
    throw DimensionError("pathway: mask length " + std::to_string(masks.length()) +
                         " != prunable size " + std::to_string(L));
  }
  if (!params.concept_deltas.empty() && params.concept_deltas.size() != K) {
    throw DimensionError("pathway: concept_deltas must be empty or one per concept");
  }
  const auto theta = params.theta();
  branch_of_.assign(K, 0);
  for (std::size_t k = 0; k < K; ++k) {
    bool found = false;
    for (std::size_t b = 0; b < branch_mask_owner_.size(); ++b) {
      if (same_branch(params, masks, *branch_mask_owner_[b], k)) {
        branch_of_[k] = b;
        found = true;
        break;
      }
    }
    if (found) continue;
    std::vector<double> w(L);
    const auto& m = masks[k];
    if (params.concept_deltas.empty()) {
      for (std::size_t i = 0; i < L; ++i) w[i] = m[i] ? theta[i] : 0.0;
    } else {
      const auto& d = params.concept_deltas[k];
      for (std::size_t i = 0; i < L; ++i) w[i] = m[i] ? theta[i] + d[i] : 0.0;
    }
    branch_of_[k] = weights_.size();
    weights_.push_back(std::move(w));
    branch_mask_owner_.push_back(k);
    if (!dense_branch_ && is_all_ones(m) && delta_is_zero(params, k)) dense_branch_ = branch_of_[k];
  }
  // The head is evaluated only on request, even when a masked branch happens to be dense.
  if (!with_dense_branch) dense_branch_.reset();
  if (with_dense_branch && !dense_branch_) {
    weights_.emplace_back(theta.begin(), theta.end());
    branch_mask_owner_.push_back(std::nullopt);
    dense_branch_ = weights_.size() - 1;
  }
}

Vector pool_embeddings(const ModelParams& params, std::span<const int> tokens) {
  auto emb = params.matrix(params.embedding_block());
  if (tokens.empty()) return emb.row(Vocabulary::kPad).transpose();
  Vector pooled = Vector::Zero(emb.cols());
  for (int t : tokens) {
    if (t < 0 || t >= emb.rows()) {
      throw DimensionError("token id " + std::to_string(t) + " outside vocabulary of " +
                           std::to_string(emb.rows()));
    }
    pooled += emb.row(t).transpose();
  }
  return pooled / static_cast<double>(tokens.size());
}

ForwardTrace run_forward(const Pathway& pathway, std::span<const int> tokens) {
  const auto& p = pathway.params();
  const auto& cfg = p.config();
  const auto K = cfg.num_concepts, V = cfg.concept_classes, C = cfg.task_classes;
  ForwardTrace t;
  t.tokens.assign(tokens.begin(), tokens.end());
  t.pooled = pool_embeddings(p, tokens);
  t.branches.reserve(pathway.num_branches());
  for (std::size_t b = 0; b < pathway.num_branches(); ++b) {
    t.branches.push_back(run_branch(p, pathway.branch_weights(b), t.pooled));
  }
  t.concepts.logits.resize(static_cast<Eigen::Index>(K), static_cast<Eigen::Index>(V));
  t.concepts.activations.resize(static_cast<Eigen::Index>(K), static_cast<Eigen::Index>(V));
  t.contributions.resize(static_cast<Eigen::Index>(K), static_cast<Eigen::Index>(C));
  t.task_logits = Vector::Zero(static_cast<Eigen::Index>(C));
  for (std::size_t k = 0; k < K; ++k) {
    const Vector& z = t.branches[pathway.branch_of(k)].post.back();
    const Vector logits = affine(p.matrix(p.psi_weight_block(k)),
                                 p.matrix(p.psi_bias_block(k)).col(0), z);
    const Vector a = sigmoid(logits);
    const Vector contrib = p.matrix(p.phi_block(k)) * a;
    const auto row = static_cast<Eigen::Index>(k);
    t.concepts.logits.row(row) = logits.transpose();
    t.concepts.activations.row(row) = a.transpose();
    t.contributions.row(row) = contrib.transpose();
    t.task_logits += contrib;
  }
  if (auto d = pathway.dense_branch()) {
    t.head_logits = affine(p.matrix(p.head_weight_block()), p.matrix(p.head_bias_block()).col(0),
                           t.branches[*d].post.back());
  }
  check_trace_finite(t);
  return t;
}

Vector encode(const Example& example, const ModelParams& params, std::span<const std::uint8_t> mask) {
  const auto L = params.prunable_size();
  if (!mask.empty() && mask.size() != L) {
    throw DimensionError("encode: mask length " + std::to_string(mask.size()) + " != " + std::to_string(L));
  }
  const auto theta = params.theta();
  std::vector<double> w(theta.begin(), theta.end());
  if (!mask.empty()) {
    for (std::size_t i = 0; i < L; ++i) w[i] = mask[i] ? w[i] : 0.0;
  }
  return run_branch(params, w, pool_embeddings(params, example.token_ids)).post.back();
}

ForwardTrace forward_pathway(const Example& example, const ModelParams& params, const MaskSet& masks) {
  Pathway pathway(params, masks, params.config().direct_head);
  return run_forward(pathway, example.token_ids);
}

Prediction predict_from_trace(const ForwardTrace& trace, const ModelConfig& config) {
  Prediction pred;
  pred.task = config.direct_head && trace.head_logits.size() > 0 ? argmax(trace.head_logits)
                                                                 : argmax(trace.task_logits);
  pred.concepts.resize(config.num_concepts);
  for (std::size_t k = 0; k < config.num_concepts; ++k) {
    pred.concepts[k] = argmax(trace.concepts.logits.row(static_cast<Eigen::Index>(k)).transpose());
  }
  return pred;
}

Prediction predict(const Example& example, const ModelParams& params, const MaskSet& masks) {
  return predict_from_trace(forward_pathway(example, params, masks), params.config());
}

// --- backward ---------------------------------------------------------------------

namespace {

/// d/d(contribution row k); empty when no task-side gradient flows.
Vector contribution_grad(const ModelParams& p, const OutputGrads& up, std::size_t k) {
  const auto C = static_cast<Eigen::Index>(p.config().task_classes);
  if (up.task.size() == 0 && up.contributions.size() == 0) return {};
  Vector d = Vector::Zero(C);
  if (up.task.size() > 0) d += up.task;
  if (up.contributions.size() > 0) d += up.contributions.row(static_cast<Eigen::Index>(k)).transpose();
  return d;
}

/// d/d(concept k logits), combining the direct concept term and the task term
/// routed through phi_k and the sigmoid.
Vector concept_logit_grad(const ModelParams& p, const ForwardTrace& t, const OutputGrads& up,
                          std::size_t k) {
  const auto row = static_cast<Eigen::Index>(k);
  const auto V = static_cast<Eigen::Index>(p.config().concept_classes);
  Vector d = Vector::Zero(V);
  if (up.concepts.size() > 0) d += up.concepts.row(row).transpose();
  const Vector dc = contribution_grad(p, up, k);
  if (dc.size() > 0) {
    const Vector a = t.concepts.activations.row(row).transpose();
    const Vector da = p.matrix(p.phi_block(k)).transpose() * dc;
    d += da.cwiseProduct(a.cwiseProduct(Vector::Ones(V) - a));
  }
  return d;
}

/// Backpropagates dz through one branch. Adds effective-weight gradients into
/// `weight_grad` (length L) and bias gradients into `bias_grads` (full layout)
/// when non-empty. Returns d/d(pooled).
Vector backprop_branch(const ModelParams& p, std::span<const double> weights, const BranchTrace& bt,
                       const Vector& pooled, Vector d, std::span<double> weight_grad,
                       std::span<double> bias_grads) {
  const auto n = p.num_layers();
  for (std::size_t li = n; li-- > 0;) {
    if (li + 1 < n) d = d.cwiseProduct((bt.pre[li].array() > 0.0).cast<double>().matrix());
    const Vector& x = li == 0 ? pooled : bt.post[li - 1];
    const auto& wb = p.values().block(p.layer_weight_block(li));
    if (!weight_grad.empty()) {
      Eigen::Map<RowMatrix> gw(weight_grad.data() + wb.offset, static_cast<Eigen::Index>(wb.rows),
                               static_cast<Eigen::Index>(wb.cols));
      gw.noalias() += d * x.transpose();
    }
    if (!bias_grads.empty()) {
      const auto& bb = p.values().block(p.layer_bias_block(li));
      Eigen::Map<Vector>(bias_grads.data() + bb.offset, static_cast<Eigen::Index>(bb.rows)) += d;
    }
    d = layer_view(p, weights, li).transpose() * d;
  }
  return d;
}

void add_embedding_grads(const ModelParams& p, const ForwardTrace& t, const Vector& dpooled,
                         std::span<double> grads, RowMatrix* input_grads) {
  const auto& eb = p.values().block(p.embedding_block());
  const auto E = static_cast<Eigen::Index>(eb.cols);
  Eigen::Map<RowMatrix> ge(grads.data() + eb.offset, static_cast<Eigen::Index>(eb.rows), E);
  const auto D = static_cast<Eigen::Index>(t.tokens.size());
  if (input_grads) input_grads->setZero(D, E);
  if (D == 0) {
    ge.row(Vocabulary::kPad) += dpooled.transpose();
    return;
  }
  const Vector per_token = dpooled / static_cast<double>(D);
  for (Eigen::Index d = 0; d < D; ++d) {
    ge.row(t.tokens[static_cast<std::size_t>(d)]) += per_token.transpose();
    if (input_grads) input_grads->row(d) = per_token.transpose();
  }
}

}  // namespace

void backward_into(const Pathway& pathway, const ForwardTrace& t, const OutputGrads& up,
                   std::span<double> grads, RowMatrix* input_grads) {
  const auto& p = pathway.params();
  const auto& cfg = p.config();
  if (grads.size() != p.values().size()) throw DimensionError("backward: gradient buffer size mismatch");
  const auto K = cfg.num_concepts;
  const auto L = p.prunable_size();

  std::vector<Vector> dz(pathway.num_branches());
  for (std::size_t b = 0; b < dz.size(); ++b) {
    dz[b] = Vector::Zero(static_cast<Eigen::Index>(cfg.latent_dim));
  }
  for (std::size_t k = 0; k < K; ++k) {
    const Vector dl = concept_logit_grad(p, t, up, k);
    const std::size_t b = pathway.branch_of(k);
    const Vector& z = t.branches[b].post.back();
    const auto& wb = p.values().block(p.psi_weight_block(k));
    Eigen::Map<RowMatrix> gpsi(grads.data() + wb.offset, static_cast<Eigen::Index>(wb.rows),
                               static_cast<Eigen::Index>(wb.cols));
    gpsi.noalias() += dl * z.transpose();
    const auto& bb = p.values().block(p.psi_bias_block(k));
    Eigen::Map<Vector>(grads.data() + bb.offset, static_cast<Eigen::Index>(bb.rows)) += dl;
    dz[b].noalias() += p.matrix(p.psi_weight_block(k)).transpose() * dl;
    const Vector dc = contribution_grad(p, up, k);
    if (dc.size() > 0) {
      const auto& pb = p.values().block(p.phi_block(k));
      Eigen::Map<RowMatrix> gphi(grads.data() + pb.offset, static_cast<Eigen::Index>(pb.rows),
                                 static_cast<Eigen::Index>(pb.cols));
      gphi.noalias() += dc * t.concepts.activations.row(static_cast<Eigen::Index>(k));
    }
  }
  if (up.head.size() > 0) {
    const auto d = pathway.dense_branch();
    if (!d) throw DimensionError("backward: head gradient without a dense branch");
    const Vector& z = t.branches[*d].post.back();
    const auto& hw = p.values().block(p.head_weight_block());
    Eigen::Map<RowMatrix> ghw(grads.data() + hw.offset, static_cast<Eigen::Index>(hw.rows),
                              static_cast<Eigen::Index>(hw.cols));
    ghw.noalias() += up.head * z.transpose();
    const auto& hb = p.values().block(p.head_bias_block());
    Eigen::Map<Vector>(grads.data() + hb.offset, static_cast<Eigen::Index>(hb.rows)) += up.head;
    dz[*d].noalias() += p.matrix(p.head_weight_block()).transpose() * up.head;
  }

  Vector dpooled = Vector::Zero(t.pooled.size());
  std::vector<double> weight_grad(L);
  for (std::size_t b = 0; b < pathway.num_branches(); ++b) {
    if (dz[b].isZero(0.0)) continue;
    std::fill(weight_grad.begin(), weight_grad.end(), 0.0);
    dpooled += backprop_branch(p, pathway.branch_weights(b), t.branches[b], t.pooled, dz[b],
                               weight_grad, grads);
    const auto mask = pathway.branch_mask(b);
    if (mask.empty()) {
      for (std::size_t i = 0; i < L; ++i) grads[i] += weight_grad[i];
    } else {
      for (std::size_t i = 0; i < L; ++i) {
        if (mask[i]) grads[i] += weight_grad[i];
      }
    }
  }
  add_embedding_grads(p, t, dpooled, grads, input_grads);
}

GradRecord backward(const Pathway& pathway, const ForwardTrace& trace, const OutputGrads& upstream) {
  GradRecord rec;
  rec.grads.assign(pathway.params().values().size(), 0.0);
  backward_into(pathway, trace, upstream, rec.grads, &rec.input_grads);
  check_finite(rec.grads, pathway.params().values());
  return rec;
}

std::vector<double> concept_branch_gradient(const Pathway& pathway, const ForwardTrace& t,
                                            std::size_t k, const OutputGrads& upstream,
                                            Vector* pooled_grad) {
  const auto& p = pathway.params();
  const Vector dl = concept_logit_grad(p, t, upstream, k);
  const Vector dz = p.matrix(p.psi_weight_block(k)).transpose() * dl;
  const std::size_t b = pathway.branch_of(k);
  std::vector<double> g(p.prunable_size(), 0.0);
  Vector dp = backprop_branch(p, pathway.branch_weights(b), t.branches[b], t.pooled, dz, g, {});
  if (pooled_grad) *pooled_grad = std::move(dp);
  for (double v : g) {
    if (!std::isfinite(v)) throw NumericError("enc", "non-finite concept branch gradient");
  }
  return g;
}

}  // namespace sparsecbm
