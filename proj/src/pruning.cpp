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

#include "sparsecbm/pruning.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <ostream>
#include <set>

#include "sparsecbm/error.hpp"
#include "sparsecbm/rng.hpp"

namespace sparsecbm {

using nlohmann::json;

Compensation parse_compensation(std::string_view s) {
  if (s == "none") return Compensation::kNone;
  if (s == "per_concept_delta") return Compensation::kPerConceptDelta;
  throw UsageError("unknown compensation '" + std::string(s) + "'");
}

std::string to_string(Compensation c) { return c == Compensation::kNone ? "none" : "per_concept_delta"; }

ConceptWeighting parse_concept_weighting(std::string_view s) {
  if (s == "gamma") return ConceptWeighting::kGamma;
  if (s == "unit") return ConceptWeighting::kUnit;
  throw UsageError("unknown concept weighting '" + std::string(s) + "'");
}

std::string to_string(ConceptWeighting w) { return w == ConceptWeighting::kGamma ? "gamma" : "unit"; }

double PruneConfig::resolved_sparsity(std::size_t num_concepts) const {
  if (target_sparsity) return *target_sparsity;
  return 1.0 - 1.0 / static_cast<double>(num_concepts);
}

void PruneConfig::validate(std::size_t num_concepts) const {
  const double s = resolved_sparsity(num_concepts);
  if (!(s >= 0.0 && s < 1.0)) throw UsageError("target sparsity must lie in [0, 1)");
  if (steps < 1) throw UsageError("prune steps must be >= 1");
  if (block_size < 1) throw UsageError("block size must be >= 1");
  if (!(zeta > 0.0)) throw UsageError("dampening zeta must be > 0");
  if (fisher_samples < 1) throw UsageError("fisher samples must be >= 1");
  if (group_size < 1) throw UsageError("group size must be >= 1");
  if (!(gamma >= 0.0) || !(lr >= 0.0) || batch_size < 1) throw UsageError("invalid fine-tune settings");
}

FisherEstimate accumulate_fisher(std::span<const std::vector<double>> gradients, std::size_t dim,
                                 std::size_t block_size, double zeta, std::size_t concept_index) {
  if (block_size < 1) throw UsageError("block size must be >= 1");
  if (gradients.empty()) throw UsageError("need at least one gradient");
  FisherEstimate f;
  f.concept_index = concept_index;
  f.dim = dim;
  f.block_size = block_size;
  const auto m = static_cast<Eigen::Index>(gradients.size());
  for (std::size_t off = 0; off < dim; off += block_size) {
    const auto n = static_cast<Eigen::Index>(std::min(block_size, dim - off));
    RowMatrix g(m, n);
    for (Eigen::Index i = 0; i < m; ++i) {
      const auto& grad = gradients[static_cast<std::size_t>(i)];
      if (grad.size() != dim) throw DimensionError("accumulate_fisher: gradient length mismatch");
      for (Eigen::Index j = 0; j < n; ++j) g(i, j) = grad[off + static_cast<std::size_t>(j)];
    }
    RowMatrix block = (g.transpose() * g) / static_cast<double>(m);
    block.diagonal().array() += zeta;
    // Exact symmetry; the product above can differ in the last bit across the diagonal.
    block = 0.5 * (block + block.transpose()).eval();
    f.blocks.push_back(std::move(block));
  }
  return f;
}

std::vector<double> concept_loss_gradient(const Pathway& pathway, const ForwardTrace& trace,
                                          const Example& example, std::size_t k, double concept_weight) {
  const auto& cfg = pathway.params().config();
  OutputGrads up;
  up.task = softmax_cross_entropy_grad(trace.task_logits, example.task_label);
  up.concepts = RowMatrix::Zero(static_cast<Eigen::Index>(cfg.num_concepts),
                                static_cast<Eigen::Index>(cfg.concept_classes));
  const auto row = static_cast<Eigen::Index>(k);
  up.concepts.row(row) =
      concept_weight *
      softmax_cross_entropy_grad(trace.concepts.logits.row(row).transpose(), example.concept_labels.at(k)).transpose();
  return concept_branch_gradient(pathway, trace, k, up);
}

std::vector<std::size_t> fisher_sample(std::size_t n, std::size_t m, std::uint64_t seed) {
  if (n == 0) throw DataError("cannot sample from an empty split");
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), 0);
  Rng rng(seed);
  rng.shuffle(std::span<std::size_t>(perm));
  std::vector<std::size_t> out(m);
  for (std::size_t i = 0; i < m; ++i) out[i] = perm[i % n];
  return out;
}

FisherEstimate estimate_fisher(const Split& data, const ModelParams& params, const MaskSet& masks,
                               std::size_t k, const PruneConfig& config, std::uint64_t sample_seed) {
  const double w = config.concept_weighting == ConceptWeighting::kGamma ? config.gamma : 1.0;
  Pathway pathway(params, masks);
  std::vector<std::vector<double>> grads;
  grads.reserve(config.fisher_samples);
  for (std::size_t idx : fisher_sample(data.size(), config.fisher_samples, sample_seed)) {
    const auto& ex = data.examples[idx];
    const auto trace = run_forward(pathway, ex.token_ids);
    grads.push_back(concept_loss_gradient(pathway, trace, ex, k, w));
  }
  return accumulate_fisher(grads, params.prunable_size(), config.block_size, config.zeta, k);
}

namespace {

RowMatrix inverse_spd(const RowMatrix& f) {
  Eigen::LLT<RowMatrix> llt(f);
  if (llt.info() != Eigen::Success) throw NumericError("fisher", "Fisher block is not positive definite");
  return llt.solve(RowMatrix::Identity(f.rows(), f.cols()));
}

void check_q(std::span<const std::size_t> q, Eigen::Index n) {
  if (q.empty()) throw UsageError("OBS: empty prune set");
  std::set<std::size_t> seen;
  for (auto i : q) {
    if (static_cast<Eigen::Index>(i) >= n || !seen.insert(i).second) {
      throw DimensionError("OBS: prune set indices must be distinct and inside the block");
    }
  }
}

/// OBS solve against a precomputed inverse.
ObsSolution obs_from_inverse(std::span<const std::size_t> q, const Vector& theta, const RowMatrix& finv) {
  const auto nq = static_cast<Eigen::Index>(q.size());
  RowMatrix s(nq, nq);
  Vector theta_q(nq);
  for (Eigen::Index a = 0; a < nq; ++a) {
    theta_q[a] = theta[static_cast<Eigen::Index>(q[static_cast<std::size_t>(a)])];
    for (Eigen::Index b = 0; b < nq; ++b) {
      s(a, b) = finv(static_cast<Eigen::Index>(q[static_cast<std::size_t>(a)]),
                     static_cast<Eigen::Index>(q[static_cast<std::size_t>(b)]));
    }
  }
  Eigen::LLT<RowMatrix> llt(s);
  if (llt.info() != Eigen::Success) throw NumericError("fisher", "singular OBS constraint system");
  const Vector lambda = llt.solve(theta_q);
  ObsSolution out;
  out.rho = 0.5 * theta_q.dot(lambda);
  out.delta = Vector::Zero(theta.size());
  for (Eigen::Index a = 0; a < nq; ++a) {
    out.delta -= finv.col(static_cast<Eigen::Index>(q[static_cast<std::size_t>(a)])) * lambda[a];
  }
  return out;
}

const RowMatrix& block_for(std::span<const std::size_t> q, const FisherEstimate& f, std::size_t& block,
                           std::vector<std::size_t>& local) {
  if (q.empty()) throw UsageError("OBS: empty prune set");
  block = f.block_of(q.front());
  local.clear();
  for (auto i : q) {
    if (i >= f.dim || f.block_of(i) != block) throw DimensionError("OBS: prune set spans several Fisher blocks");
    local.push_back(i - f.block_offset(block));
  }
  return f.blocks.at(block);
}

Vector block_theta(std::span<const double> theta, const FisherEstimate& f, std::size_t block) {
  const auto& fb = f.blocks.at(block);
  Vector t(fb.rows());
  for (Eigen::Index i = 0; i < t.size(); ++i) t[i] = theta[f.block_offset(block) + static_cast<std::size_t>(i)];
  return t;
}

RhoSummary summarize(std::vector<double> v) {
  RhoSummary s;
  if (v.empty()) return s;
  std::sort(v.begin(), v.end());
  s.min = v.front();
  s.max = v.back();
  s.median = v.size() % 2 ? v[v.size() / 2] : 0.5 * (v[v.size() / 2 - 1] + v[v.size() / 2]);
  s.mean = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
  return s;
}

json rho_json(const RhoSummary& r) {
  return json{{"min", r.min}, {"median", r.median}, {"max", r.max}, {"mean", r.mean}};
}

}  // namespace

ObsSolution obs_solve(std::span<const std::size_t> q, const Vector& theta, const RowMatrix& fisher) {
  if (fisher.rows() != fisher.cols() || fisher.rows() != theta.size()) {
    throw DimensionError("OBS: Fisher block and theta disagree in size");
  }
  check_q(q, theta.size());
  return obs_from_inverse(q, theta, inverse_spd(fisher));
}

double obs_score(std::span<const std::size_t> q, const Vector& theta, const RowMatrix& fisher) {
  return obs_solve(q, theta, fisher).rho;
}

Vector obs_update(std::span<const std::size_t> q, const Vector& theta, const RowMatrix& fisher) {
  return obs_solve(q, theta, fisher).delta;
}

double obs_score(std::span<const std::size_t> q, std::span<const double> theta, const FisherEstimate& fisher) {
  std::size_t block = 0;
  std::vector<std::size_t> local;
  const auto& fb = block_for(q, fisher, block, local);
  return obs_score(local, block_theta(theta, fisher, block), fb);
}

Vector obs_update(std::span<const std::size_t> q, std::span<const double> theta, const FisherEstimate& fisher) {
  std::size_t block = 0;
  std::vector<std::size_t> local;
  const auto& fb = block_for(q, fisher, block, local);
  return obs_update(local, block_theta(theta, fisher, block), fb);
}

std::size_t pruned_count_for(double sparsity, std::size_t length) {
  const double exact = sparsity * static_cast<double>(length);
  // Absorb representation error such as 0.75 * 4 / 4 landing a hair above an integer.
  const double c = std::ceil(exact - 1e-9 * std::max(1.0, exact));
  return static_cast<std::size_t>(std::max(0.0, c));
}

ConceptStepReport prune_step(ModelParams& params, MaskSet& masks, std::size_t k, double step_target,
                             const PruneConfig& config, const FisherEstimate& fisher) {
  const auto L = params.prunable_size();
  if (fisher.dim != L) throw DimensionError("prune_step: Fisher dimension does not match the model");
  Mask& mask = masks[k];
  const std::size_t already = L - masks.popcount(k);
  const std::size_t target = pruned_count_for(step_target, L);
  if (target >= L) throw UsageError("sparsity target unreachable: every weight of the subnetwork would be pruned");

  ConceptStepReport report;
  report.concept_index = k;
  report.scheduled_sparsity = step_target;
  const std::size_t need = target > already ? target - already : 0;

  // Concept k's effective (pre-mask) weights.
  std::vector<double> theta(params.theta().begin(), params.theta().end());
  if (!params.concept_deltas.empty()) {
    for (std::size_t i = 0; i < L; ++i) theta[i] += params.concept_deltas[k][i];
  }

  struct Candidate {
    double rho;
    std::size_t block;
    std::vector<std::size_t> members;  // positions within the block's active list
  };
  struct ActiveBlock {
    std::vector<std::size_t> active;  // global indices still kept
    RowMatrix finv;                   // inverse of the Fisher restricted to `active`
    Vector theta;
  };
  std::vector<ActiveBlock> blocks(fisher.blocks.size());
  std::vector<Candidate> candidates;
  std::vector<double> all_rho;
  if (need > 0) {
    for (std::size_t b = 0; b < fisher.blocks.size(); ++b) {
      auto& ab = blocks[b];
      const auto off = fisher.block_offset(b);
      const auto& fb = fisher.blocks[b];
      for (Eigen::Index i = 0; i < fb.rows(); ++i) {
        if (mask[off + static_cast<std::size_t>(i)]) ab.active.push_back(off + static_cast<std::size_t>(i));
      }
      if (ab.active.empty()) continue;
      const auto na = static_cast<Eigen::Index>(ab.active.size());
      RowMatrix sub(na, na);
      ab.theta.resize(na);
      for (Eigen::Index a = 0; a < na; ++a) {
        ab.theta[a] = theta[ab.active[static_cast<std::size_t>(a)]];
        for (Eigen::Index c = 0; c < na; ++c) {
          sub(a, c) = fb(static_cast<Eigen::Index>(ab.active[static_cast<std::size_t>(a)] - off),
                         static_cast<Eigen::Index>(ab.active[static_cast<std::size_t>(c)] - off));
        }
      }
      ab.finv = inverse_spd(sub);
      for (std::size_t start = 0; start < ab.active.size(); start += config.group_size) {
        Candidate cand{0.0, b, {}};
        for (std::size_t j = start; j < std::min(ab.active.size(), start + config.group_size); ++j) {
          cand.members.push_back(j);
        }
        if (cand.members.size() == 1) {
          const auto j = static_cast<Eigen::Index>(cand.members[0]);
          cand.rho = ab.theta[j] * ab.theta[j] / (2.0 * ab.finv(j, j));
        } else {
          cand.rho = obs_from_inverse(cand.members, ab.theta, ab.finv).rho;
        }
        all_rho.push_back(cand.rho);
        candidates.push_back(std::move(cand));
      }
    }
    std::sort(candidates.begin(), candidates.end(), [&](const Candidate& a, const Candidate& b) {
      if (a.rho != b.rho) return a.rho < b.rho;
      return blocks[a.block].active[a.members.front()] < blocks[b.block].active[b.members.front()];
    });
  }

  std::vector<std::vector<std::size_t>> chosen(blocks.size());
  std::vector<double> pruned_rho;
  std::size_t taken = 0;
  for (const auto& cand : candidates) {
    if (taken == need) break;
    pruned_rho.push_back(cand.rho);
    for (std::size_t j : cand.members) {
      if (taken == need) break;
      chosen[cand.block].push_back(j);
      ++taken;
    }
  }
  if (taken < need) throw UsageError("sparsity target unreachable: not enough unpruned weights");

  const bool compensate = config.compensation == Compensation::kPerConceptDelta;
  if (compensate && params.concept_deltas.empty()) {
    params.concept_deltas.assign(params.config().num_concepts, std::vector<double>(L, 0.0));
  }
  for (std::size_t b = 0; b < blocks.size(); ++b) {
    if (chosen[b].empty()) continue;
    const auto& ab = blocks[b];
    if (compensate) {
      const auto sol = obs_from_inverse(chosen[b], ab.theta, ab.finv);
      auto& delta = params.concept_deltas[k];
      for (std::size_t a = 0; a < ab.active.size(); ++a) delta[ab.active[a]] += sol.delta[static_cast<Eigen::Index>(a)];
    }
    for (std::size_t j : chosen[b]) mask[ab.active[j]] = 0;
  }

  report.pruned = taken;
  report.achieved_sparsity = masks.sparsity(k);
  report.rho_pruned = summarize(std::move(pruned_rho));
  report.rho_candidates = summarize(std::move(all_rho));
  return report;
}

json PruneReport::to_json(const DatasetSchema* schema) const {
  json steps_json = json::array();
  for (const auto& s : steps) {
    json concepts = json::array();
    for (const auto& c : s.concepts) {
      json cj{{"concept_index", c.concept_index},
              {"scheduled_sparsity", c.scheduled_sparsity},
              {"achieved_sparsity", c.achieved_sparsity},
              {"pruned", c.pruned},
              {"loss_before", c.loss_before},
              {"loss_after", c.loss_after},
              {"rho_pruned", rho_json(c.rho_pruned)},
              {"rho_candidates", rho_json(c.rho_candidates)}};
      if (schema) cj["concept"] = schema->concept_names.at(c.concept_index);
      concepts.push_back(std::move(cj));
    }
    json sj{{"step", s.step}, {"target", s.target}, {"concepts", concepts}};
    if (s.finetune_loss) sj["finetune_loss"] = *s.finetune_loss;
    steps_json.push_back(std::move(sj));
  }
  return json{{"target_sparsity", target_sparsity}, {"steps", steps_json}};
}

namespace {

double mean_concept_term(const Split& data, std::span<const std::size_t> sample, const ModelParams& params,
                         const MaskSet& masks, std::size_t k, double concept_weight) {
  Pathway pathway(params, masks);
  double total = 0.0;
  for (std::size_t idx : sample) {
    const auto& ex = data.examples[idx];
    const auto trace = run_forward(pathway, ex.token_ids);
    const auto row = static_cast<Eigen::Index>(k);
    total += softmax_cross_entropy(trace.task_logits, ex.task_label) +
             concept_weight * softmax_cross_entropy(trace.concepts.logits.row(row).transpose(), ex.concept_labels[k]);
  }
  return total / static_cast<double>(sample.size());
}

}  // namespace

PruneReport prune_to_sparsity(const Split& data, ModelParams& params, MaskSet& masks, const PruneConfig& config,
                              std::ostream* log) {
  const auto K = params.config().num_concepts;
  config.validate(K);
  if (data.size() == 0) throw DataError("pruning split is empty");
  if (masks.size() != K || masks.length() != params.prunable_size()) {
    throw DimensionError("prune_to_sparsity: masks do not match the model");
  }
  const double s = config.resolved_sparsity(K);
  const double w = config.concept_weighting == ConceptWeighting::kGamma ? config.gamma : 1.0;
  PruneReport report;
  report.target_sparsity = s;
  for (std::size_t p = 1; p <= config.steps; ++p) {
    PruneStepReport step;
    step.step = p;
    step.target = s * static_cast<double>(p) / static_cast<double>(config.steps);
    std::size_t pruned_now = 0;
    for (std::size_t k = 0; k < K; ++k) {
      const auto seed = mix_seed(config.seed, p * 131 + k);
      const auto sample = fisher_sample(data.size(), config.fisher_samples, seed);
      const double before = mean_concept_term(data, sample, params, masks, k, w);
      const auto fisher = estimate_fisher(data, params, masks, k, config, seed);
      auto cr = prune_step(params, masks, k, step.target, config, fisher);
      cr.loss_before = before;
      cr.loss_after = mean_concept_term(data, sample, params, masks, k, w);
      pruned_now += cr.pruned;
      step.concepts.push_back(cr);
    }
    if (pruned_now > 0 && config.finetune_epochs > 0) {
      Objective obj;
      obj.concept_weight = config.gamma;
      obj.task_term = config.task_term;
      EpochRunOptions opts;
      opts.stage = "finetune" + std::to_string(p);
      opts.epochs = config.finetune_epochs;
      opts.batch_size = config.batch_size;
      opts.lr = config.lr;
      opts.seed = mix_seed(config.seed, 0xF1E7 + p);
      opts.log = log;
      const auto logs = run_epochs(data, obj, {.encoder = true, .psi = true, .phi = true}, params, masks, opts);
      step.finetune_loss = logs.back().loss;
    }
    report.steps.push_back(std::move(step));
  }
  return report;
}

}  // namespace sparsecbm
