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

#include "sparsecbm/cli.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"

#include "sparsecbm/checkpoint.hpp"
#include "sparsecbm/data.hpp"
#include "sparsecbm/error.hpp"
#include "sparsecbm/evaluation.hpp"
#include "sparsecbm/explain.hpp"
#include "sparsecbm/intervention.hpp"
#include "sparsecbm/model.hpp"
#include "sparsecbm/pruning.hpp"
#include "sparsecbm/training.hpp"

namespace sparsecbm {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr const char* kSeedEnv = "SPARSECBM_SEED";

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
}

std::vector<double> parse_list(const std::string& text, const char* what) {
  std::vector<double> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (item.empty()) continue;
    try {
      std::size_t used = 0;
      out.push_back(std::stod(item, &used));
      if (used != item.size()) throw std::invalid_argument(item);
    } catch (const std::exception&) {
      throw UsageError(std::string("bad number '") + item + "' in " + what);
    }
  }
  if (out.empty()) throw UsageError(std::string(what) + " is empty");
  return out;
}

std::vector<std::size_t> parse_dims(const std::string& text) {
  std::vector<std::size_t> dims;
  for (double d : parse_list(text, "--hidden")) {
    if (d < 1 || d != static_cast<double>(static_cast<std::size_t>(d))) throw UsageError("hidden dims must be positive integers");
    dims.push_back(static_cast<std::size_t>(d));
  }
  return dims;
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  out << text;
  if (!out) throw DataError("cannot write " + path.string());
}

const Split& pick_split(const DatasetDir& data, const std::string& name) {
  const auto it = data.splits.find(name);
  if (it == data.splits.end()) throw DataError("dataset has no '" + name + "' split");
  return it->second;
}

/// Checks that a checkpoint and a dataset directory describe the same task.
void check_compatible(const Checkpoint& ckpt, const DatasetDir& data) {
  if (!(ckpt.schema == data.schema) || !(ckpt.vocab == data.vocab)) {
    throw DataError("checkpoint schema/vocabulary do not match the dataset");
  }
}

struct Common {
  std::string data_dir;
  std::string ckpt;
  std::string out;
  std::string split = "test";
  std::uint64_t seed = 0;
};

// --- gen-data --------------------------------------------------------------

struct GenArgs {
  GenerateOptions gen;
  std::string out;
};

void add_gen(CLI::App& app, GenArgs& a) {
  app.add_option("--out", a.out, "output directory")->required();
  app.add_option("--seed", a.gen.seed, "generator seed")->envname(kSeedEnv);
  app.add_option("--n-train", a.gen.n_train, "training examples");
  app.add_option("--n-dev", a.gen.n_dev, "dev examples");
  app.add_option("--n-test", a.gen.n_test, "test examples");
  app.add_option("--concepts", a.gen.num_concepts, "number of concepts K (<= 4)");
  app.add_option("--concept-classes", a.gen.concept_classes, "classes per concept V (2 or 3)");
  app.add_option("--task-classes", a.gen.task_classes, "task classes C");
  app.add_option("--max-len", a.gen.max_len, "max tokens per example");
  app.add_flag("--shift", a.gen.shift, "use the disjoint template pool for half the test phrases");
}

int cmd_gen(const GenArgs& a, std::ostream& out) {
  if (a.gen.n_train == 0 || a.gen.n_dev == 0 || a.gen.n_test == 0) throw UsageError("split sizes must be >= 1");
  const auto data = generate_dataset(a.gen);
  write_dataset_dir(a.out, data);
  out << "wrote " << a.gen.n_train << "/" << a.gen.n_dev << "/" << a.gen.n_test << " examples, vocabulary "
      << data.vocab.size() << ", to " << a.out << '\n';
  return kExitOk;
}

// --- train -----------------------------------------------------------------

struct TrainArgs {
  Common c;
  TrainConfig train;
  std::string strategy = "joint";
  std::string task_term = "single";
  std::size_t emb_dim = 32;
  std::string hidden = "64,64";
  std::size_t latent_dim = 64;
  std::size_t seeds = 1;
  std::string log;
  std::string report;
};

void add_train(CLI::App& app, TrainArgs& a) {
  app.add_option("--data", a.c.data_dir, "dataset directory")->required();
  app.add_option("--out", a.c.out, "checkpoint path")->required();
  app.add_option("--seed", a.c.seed, "model and shuffle seed")->envname(kSeedEnv);
  app.add_option("--strategy", a.strategy, "vanilla|independent|sequential|joint");
  app.add_option("--gamma", a.train.gamma, "concept loss weight");
  app.add_option("--lr", a.train.lr, "Adam learning rate");
  app.add_option("--epochs", a.train.epochs, "epochs per stage");
  app.add_option("--batch-size", a.train.batch_size, "mini-batch size");
  app.add_option("--task-term", a.task_term, "single|per_concept");
  app.add_option("--emb-dim", a.emb_dim, "embedding width");
  app.add_option("--hidden", a.hidden, "hidden layer widths, comma separated");
  app.add_option("--latent-dim", a.latent_dim, "encoder output width E");
  app.add_option("--seeds", a.seeds, "train this many seeds and average the test metrics");
  app.add_option("--log", a.log, "training log (JSONL)");
  app.add_option("--report", a.report, "write the test MetricReport as JSON");
}

int cmd_train(const TrainArgs& a, std::ostream& out) {
  TrainConfig tc = a.train;
  tc.strategy = parse_strategy(a.strategy);
  tc.task_term = parse_task_term(a.task_term);
  tc.validate();
  if (a.seeds < 1) throw UsageError("--seeds must be >= 1");
  const auto data = load_dataset_dir(a.c.data_dir);
  const Split& train_split = pick_split(data, "train");
  const Split* dev = data.splits.count("dev") ? &data.splits.at("dev") : nullptr;
  const Split* test = data.splits.count("test") ? &data.splits.at("test") : nullptr;

  ModelConfig mc;
  mc.vocab_size = data.vocab.size();
  mc.emb_dim = a.emb_dim;
  mc.hidden_dims = parse_dims(a.hidden);
  mc.latent_dim = a.latent_dim;
  mc.num_concepts = data.schema.num_concepts();
  mc.concept_classes = data.schema.num_concept_classes();
  mc.task_classes = data.schema.task_class_count;
  mc.validate();

  std::ofstream log_file;
  if (!a.log.empty()) {
    if (fs::path(a.log).has_parent_path()) fs::create_directories(fs::path(a.log).parent_path());
    log_file.open(a.log, std::ios::binary);
    if (!log_file) throw DataError("cannot write " + a.log);
  }

  std::vector<MetricReport> reports;
  for (std::size_t run = 0; run < a.seeds; ++run) {
    mc.seed = a.c.seed + run;
    tc.seed = a.c.seed + run;
    auto params = ModelParams::initialize(mc);
    const auto masks = MaskSet::all_ones(mc.num_concepts, params.prunable_size());
    train(train_split, tc, params, masks, dev, log_file.is_open() && run == 0 ? &log_file : nullptr);
    if (test) reports.push_back(evaluate_split(*test, params, masks));
    if (run == 0) {
      Checkpoint ckpt{params, masks, data.schema, data.vocab, json::object()};
      ckpt.info["train"] = {{"strategy", to_string(tc.strategy)}, {"gamma", tc.gamma},
                            {"lr", tc.lr},                        {"epochs", tc.epochs},
                            {"batch_size", tc.batch_size},        {"seed", tc.seed},
                            {"task_term", to_string(tc.task_term)}};
      save_checkpoint(ckpt, a.c.out);
    }
  }
  out << "saved " << a.c.out << '\n';
  if (!reports.empty()) {
    const auto avg = average_reports(reports);
    if (a.seeds > 1) out << "test metrics, mean over " << a.seeds << " seeds\n";
    else out << "test metrics\n";
    out << avg.to_text(&data.schema);
    if (!a.report.empty()) write_text(a.report, avg.to_json(&data.schema).dump(2) + "\n");
  }
  return kExitOk;
}

// --- prune -----------------------------------------------------------------

struct PruneArgs {
  Common c;
  PruneConfig prune;
  double sparsity = -1.0;
  std::string compensation = "none";
  std::string weighting = "gamma";
  std::string task_term = "single";
  std::string report;
};

void add_prune(CLI::App& app, PruneArgs& a) {
  app.add_option("--ckpt", a.c.ckpt, "input checkpoint")->required();
  app.add_option("--data", a.c.data_dir, "dataset directory (train split drives the Fisher)")->required();
  app.add_option("--out", a.c.out, "output checkpoint")->required();
  app.add_option("--seed", a.c.seed, "sampling and fine-tune seed")->envname(kSeedEnv);
  app.add_option("--sparsity", a.sparsity, "target sparsity per concept (default 1 - 1/K)");
  app.add_option("--steps", a.prune.steps, "pruning steps P");
  app.add_option("--block-size", a.prune.block_size, "Fisher block size B");
  app.add_option("--zeta", a.prune.zeta, "Fisher dampening");
  app.add_option("--fisher-samples", a.prune.fisher_samples, "gradients per Fisher estimate");
  app.add_option("--group-size", a.prune.group_size, "weights removed together");
  app.add_option("--compensation", a.compensation, "none|per_concept_delta");
  app.add_option("--concept-weighting", a.weighting, "gamma|unit");
  app.add_option("--finetune-epochs", a.prune.finetune_epochs, "fine-tune epochs after each step");
  app.add_option("--gamma", a.prune.gamma, "concept loss weight");
  app.add_option("--lr", a.prune.lr, "fine-tune learning rate");
  app.add_option("--batch-size", a.prune.batch_size, "fine-tune batch size");
  app.add_option("--task-term", a.task_term, "single|per_concept");
  app.add_option("--report", a.report, "write the pruning report as JSON");
}

int cmd_prune(const PruneArgs& a, std::ostream& out) {
  auto ckpt = load_checkpoint(a.c.ckpt);
  const auto data = load_dataset_dir(a.c.data_dir);
  check_compatible(ckpt, data);
  PruneConfig pc = a.prune;
  if (a.sparsity >= 0.0) pc.target_sparsity = a.sparsity;
  else if (a.sparsity != -1.0) throw UsageError("--sparsity must lie in [0, 1)");
  pc.compensation = parse_compensation(a.compensation);
  pc.concept_weighting = parse_concept_weighting(a.weighting);
  pc.task_term = parse_task_term(a.task_term);
  pc.seed = a.c.seed;
  const auto K = ckpt.params.config().num_concepts;
  pc.validate(K);
  const auto report = prune_to_sparsity(pick_split(data, "train"), ckpt.params, ckpt.masks, pc);
  ckpt.info["prune"] = {{"sparsity", pc.resolved_sparsity(K)}, {"steps", pc.steps},
                        {"block_size", pc.block_size},          {"zeta", pc.zeta},
                        {"fisher_samples", pc.fisher_samples},  {"compensation", to_string(pc.compensation)},
                        {"seed", pc.seed}};
  save_checkpoint(ckpt, a.c.out);
  out << "saved " << a.c.out << '\n';
  for (std::size_t k = 0; k < K; ++k) {
    out << "  " << ckpt.schema.concept_names.at(k) << " sparsity " << ckpt.masks.sparsity(k) << '\n';
  }
  if (data.splits.count("test")) out << "test metrics\n" << evaluate_split(data.splits.at("test"), ckpt.params, ckpt.masks).to_text(&ckpt.schema);
  if (!a.report.empty()) write_text(a.report, report.to_json(&ckpt.schema).dump(2) + "\n");
  return kExitOk;
}

// --- eval ------------------------------------------------------------------

struct EvalArgs {
  Common c;
  std::string format = "text";
};

void add_eval(CLI::App& app, EvalArgs& a) {
  app.add_option("--ckpt", a.c.ckpt, "checkpoint")->required();
  app.add_option("--data", a.c.data_dir, "dataset directory")->required();
  app.add_option("--split", a.c.split, "split name");
  app.add_option("--format", a.format, "text|json");
  app.add_option("--out", a.c.out, "also write the JSON report here");
}

int cmd_eval(const EvalArgs& a, std::ostream& out) {
  if (a.format != "text" && a.format != "json") throw UsageError("--format must be text or json");
  const auto ckpt = load_checkpoint(a.c.ckpt);
  const auto data = load_dataset_dir(a.c.data_dir);
  check_compatible(ckpt, data);
  const auto report = evaluate_split(pick_split(data, a.c.split), ckpt.params, ckpt.masks);
  const auto j = report.to_json(&ckpt.schema).dump(2) + "\n";
  out << (a.format == "json" ? j : report.to_text(&ckpt.schema));
  if (!a.c.out.empty()) write_text(a.c.out, j);
  return kExitOk;
}

// --- intervene -------------------------------------------------------------

struct InterveneArgs {
  Common c;
  InterventionConfig ic;
  std::string r_grid = "0.005,0.01,0.05";
  std::string mode = "sparsity";
  std::string grow_rule = "first_order";
  std::string objective = "balanced";
  bool no_task_term = false;
  std::string events;
  bool interactive = false;
  std::string input;
  long example_id = -1;
  std::string save;
};

void add_intervene(CLI::App& app, InterveneArgs& a) {
  app.add_option("--ckpt", a.c.ckpt, "checkpoint")->required();
  app.add_option("--data", a.c.data_dir, "dataset directory");
  app.add_option("--split", a.c.split, "split name");
  app.add_option("--r-grid", a.r_grid, "comma-separated r values");
  app.add_option("--mode", a.mode, "sparsity|oracle");
  app.add_option("--rounds", a.ic.rounds, "max drop/grow rounds per concept");
  app.add_option("--grow-rule", a.grow_rule, "first_order|magnitude");
  app.add_option("--objective", a.objective, "balanced|weighted");
  app.add_option("--gamma", a.ic.gamma, "concept weight for the weighted objective");
  app.add_flag("--no-task-term", a.no_task_term, "leave the task CE out of the saliency objective");
  app.add_option("--out", a.c.out, "write the NI/SI table as JSON");
  app.add_option("--events", a.events, "write intervention events as JSONL");
  app.add_flag("--interactive", a.interactive, "prompt for concept corrections on stdin");
  app.add_option("--input", a.input, "text to intervene on (interactive)");
  app.add_option("--example-id", a.example_id, "example index in --split (interactive)");
  app.add_option("--save", a.save, "interactive sparsity mode: checkpoint with the edited masks");
}

std::optional<std::size_t> parse_class(const std::string& answer, const DatasetSchema& schema) {
  if (const auto idx = schema.class_index(answer)) return idx;
  for (std::size_t v = 0; v < schema.num_concept_classes(); ++v) {
    std::string lower = schema.concept_class_names[v];
    std::string a = answer;
    std::transform(lower.begin(), lower.end(), lower.begin(), ::tolower);
    std::transform(a.begin(), a.end(), a.begin(), ::tolower);
    if (lower == a || a == std::to_string(v)) return v;
  }
  return std::nullopt;
}

Example example_from_args(const InterveneArgs& a, const Checkpoint& ckpt) {
  if (!a.input.empty() && a.example_id >= 0) throw UsageError("give either --input or --example-id");
  if (a.example_id >= 0) {
    if (a.c.data_dir.empty()) throw UsageError("--example-id needs --data");
    const auto data = load_dataset_dir(a.c.data_dir);
    check_compatible(ckpt, data);
    const auto& split = pick_split(data, a.c.split);
    if (static_cast<std::size_t>(a.example_id) >= split.size()) throw UsageError("--example-id out of range");
    return split.examples[static_cast<std::size_t>(a.example_id)];
  }
  Example ex;
  ex.token_ids = tokenize(a.input, ckpt.vocab, ckpt.schema.max_len);
  ex.concept_labels.assign(ckpt.schema.num_concepts(), 0);
  return ex;
}

int cmd_intervene_interactive(const InterveneArgs& a, InterventionConfig ic, std::istream& in, std::ostream& out) {
  auto ckpt = load_checkpoint(a.c.ckpt);
  Example ex = example_from_args(a, ckpt);
  const auto& schema = ckpt.schema;
  const auto trace = forward_pathway(ex, ckpt.params, ckpt.masks);
  const auto pred = predict_from_trace(trace, ckpt.params.config());
  out << "task prediction: " << pred.task << '\n';
  std::map<std::size_t, std::size_t> corrections;
  for (std::size_t k = 0; k < schema.num_concepts(); ++k) {
    out << schema.concept_names[k] << " [" << schema.concept_class_names.at(pred.concepts[k])
        << "] correction (empty keeps): " << std::flush;
    std::string line;
    if (!std::getline(in, line)) break;
    line = trim(line);
    if (line.empty()) continue;
    const auto cls = parse_class(line, schema);
    if (!cls) throw UsageError("unknown class '" + line + "'");
    if (*cls != pred.concepts[k]) corrections[k] = *cls;
  }
  json result{{"before", {{"task", pred.task}, {"concepts", pred.concepts}}}, {"corrections", json::object()}};
  for (const auto& [k, v] : corrections) result["corrections"][schema.concept_names[k]] = schema.concept_class_names[v];
  if (ic.mode == InterventionMode::kOracle) {
    const auto r = oracle_intervene(trace, corrections, ckpt.params);
    result["after"] = {{"task", r.task}};
  } else {
    // A human supplies concepts only; there is no task label to aim at.
    ic.saliency_task_term = false;
    const auto events = sparsity_intervene(ex, corrections, ckpt.params, ckpt.masks, ic);
    const auto post = predict(ex, ckpt.params, ckpt.masks);
    result["after"] = {{"task", post.task}, {"concepts", post.concepts}};
    json evs = json::array();
    for (const auto& e : events) evs.push_back(event_to_json(e));
    result["events"] = evs;
    if (!a.save.empty()) save_checkpoint(ckpt, a.save);
  }
  out << result.dump(2) << '\n';
  return kExitOk;
}

int cmd_intervene(const InterveneArgs& a, std::istream& in, std::ostream& out) {
  InterventionConfig ic = a.ic;
  ic.mode = parse_intervention_mode(a.mode);
  ic.grow_rule = parse_grow_rule(a.grow_rule);
  ic.objective = parse_saliency_objective(a.objective);
  ic.saliency_task_term = !a.no_task_term;
  const auto grid = parse_list(a.r_grid, "--r-grid");
  if (a.interactive) {
    ic.r = grid.front();
    ic.validate();
    return cmd_intervene_interactive(a, ic, in, out);
  }
  if (!a.input.empty() || a.example_id >= 0) throw UsageError("--input/--example-id need --interactive");
  if (a.c.data_dir.empty()) throw UsageError("--data is required");
  ic.validate();
  const auto ckpt = load_checkpoint(a.c.ckpt);
  const auto data = load_dataset_dir(a.c.data_dir);
  check_compatible(ckpt, data);
  std::vector<InterventionEvent> events;
  const auto table = evaluate_intervention(pick_split(data, a.c.split), ckpt.params, ckpt.masks, grid, ic, &events);
  out << table.to_text();
  if (!a.c.out.empty()) write_text(a.c.out, table.to_json().dump(2) + "\n");
  if (!a.events.empty()) {
    std::ostringstream s;
    write_events_jsonl(s, events);
    write_text(a.events, s.str());
  }
  return kExitOk;
}

// --- explain ---------------------------------------------------------------

struct ExplainArgs {
  Common c;
  std::string input;
  bool has_input = false;
  long example_id = -1;
};

void add_explain(CLI::App& app, ExplainArgs& a) {
  app.add_option("--ckpt", a.c.ckpt, "checkpoint")->required();
  app.add_option("--out", a.c.out, "report directory")->required();
  app.add_option("--input", a.input, "text to explain");
  app.add_option("--example-id", a.example_id, "example index in --split");
  app.add_option("--data", a.c.data_dir, "dataset directory (with --example-id)");
  app.add_option("--split", a.c.split, "split name");
}

int cmd_explain(const ExplainArgs& a, std::ostream& out) {
  const auto ckpt = load_checkpoint(a.c.ckpt);
  Example ex;
  if (a.has_input == (a.example_id >= 0)) throw UsageError("give exactly one of --input and --example-id");
  if (a.has_input) {
    ex.token_ids = tokenize(a.input, ckpt.vocab, ckpt.schema.max_len);
  } else {
    if (a.c.data_dir.empty()) throw UsageError("--example-id needs --data");
    const auto data = load_dataset_dir(a.c.data_dir);
    check_compatible(ckpt, data);
    const auto& split = pick_split(data, a.c.split);
    if (static_cast<std::size_t>(a.example_id) >= split.size()) throw UsageError("--example-id out of range");
    ex = split.examples[static_cast<std::size_t>(a.example_id)];
  }
  const auto trace = explain_example(ex, ckpt.params, ckpt.masks, ckpt.vocab);
  const auto stats = mask_overlap(ckpt.masks, ckpt.params);
  render_report(trace, stats, ckpt.masks, ckpt.schema, a.c.out);
  out << "task prediction " << trace.task_prediction << "; concepts:";
  for (std::size_t k = 0; k < trace.concept_predictions.size(); ++k) {
    out << ' ' << ckpt.schema.concept_names[k] << '=' << ckpt.schema.concept_class_names[trace.concept_predictions[k]];
  }
  out << "\nwrote " << a.c.out << '\n';
  return kExitOk;
}

// --- config file -----------------------------------------------------------

/// Splits `--config` out of args and returns the remaining args.
std::vector<std::string> strip_config(const std::vector<std::string>& args, std::optional<std::string>& path) {
  std::vector<std::string> rest;
  for (std::size_t i = 0; i < args.size(); ++i) {
    const auto& a = args[i];
    if (a == "--config") {
      if (i + 1 >= args.size()) throw UsageError("--config needs a path");
      path = args[++i];
    } else if (a.rfind("--config=", 0) == 0) {
      path = a.substr(9);
    } else {
      rest.push_back(a);
    }
  }
  return rest;
}

}  // namespace

std::vector<std::string> read_config_args(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw UsageError("cannot read config " + path);
  std::vector<std::string> out;
  std::string line;
  for (std::size_t n = 1; std::getline(in, line); ++n) {
    line = trim(line);
    if (line.empty() || line[0] == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw UsageError(path + ":" + std::to_string(n) + ": expected key=value");
    auto key = trim(line.substr(0, eq));
    std::replace(key.begin(), key.end(), '_', '-');
    if (key.empty()) throw UsageError(path + ":" + std::to_string(n) + ": empty key");
    out.push_back("--" + key + "=" + trim(line.substr(eq + 1)));
  }
  return out;
}

int run_cli(const std::vector<std::string>& raw_args, std::istream& in, std::ostream& out, std::ostream& err) {
  CLI::App app{"Sparse concept bottleneck models: train, prune, intervene, explain"};
  app.name("sparsecbm");
  app.option_defaults()->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
  app.require_subcommand(1);

  GenArgs gen;
  TrainArgs tr;
  PruneArgs pr;
  EvalArgs ev;
  InterveneArgs iv;
  ExplainArgs ex;
  auto* gen_cmd = app.add_subcommand("gen-data", "write a synthetic dataset directory");
  add_gen(*gen_cmd, gen);
  auto* train_cmd = app.add_subcommand("train", "train a dense concept bottleneck model");
  add_train(*train_cmd, tr);
  auto* prune_cmd = app.add_subcommand("prune", "mine per-concept subnetworks");
  add_prune(*prune_cmd, pr);
  auto* eval_cmd = app.add_subcommand("eval", "task and concept metrics");
  add_eval(*eval_cmd, ev);
  auto* iv_cmd = app.add_subcommand("intervene", "test-time intervention (NI/SI table)");
  add_intervene(*iv_cmd, iv);
  auto* ex_cmd = app.add_subcommand("explain", "decision pathway report for one input");
  add_explain(*ex_cmd, ex);
  auto* input_opt = ex_cmd->get_option("--input");

  try {
    std::optional<std::string> config;
    auto args = strip_config(raw_args, config);
    if (config) {
      // Config values go right after the subcommand so that flags override them.
      const auto sub = std::find_if(args.begin(), args.end(), [&](const std::string& a) {
        return app.get_subcommand_no_throw(a) != nullptr;
      });
      if (sub == args.end()) throw UsageError("--config needs a subcommand");
      auto* cmd = app.get_subcommand(*sub);
      std::vector<std::string> applied;
      const auto subs = app.get_subcommands({});
      for (const auto& kv : read_config_args(*config)) {
        const auto name = kv.substr(0, kv.find('='));
        if (cmd->get_option_no_throw(name)) {
          applied.push_back(kv);
          continue;
        }
        const bool known = std::any_of(subs.begin(), subs.end(),
                                       [&](const CLI::App* s) { return s->get_option_no_throw(name) != nullptr; });
        if (!known) throw UsageError("unknown config key '" + name.substr(2) + "'");
      }
      args.insert(sub + 1, applied.begin(), applied.end());
    }
    std::reverse(args.begin(), args.end());
    app.parse(args);
  } catch (const CLI::ParseError& e) {
    return app.exit(e, out, err) == 0 ? kExitOk : kExitUsage;
  } catch (const UsageError& e) {
    err << "usage error: " << e.what() << '\n';
    return kExitUsage;
  }

  try {
    if (*gen_cmd) return cmd_gen(gen, out);
    if (*train_cmd) return cmd_train(tr, out);
    if (*prune_cmd) return cmd_prune(pr, out);
    if (*eval_cmd) return cmd_eval(ev, out);
    if (*iv_cmd) return cmd_intervene(iv, in, out);
    ex.has_input = input_opt->count() > 0;
    return cmd_explain(ex, out);
  } catch (const UsageError& e) {
    err << "usage error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const DimensionError& e) {
    err << "usage error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const DataError& e) {
    err << "data error: " << e.what() << '\n';
    return kExitData;
  } catch (const NumericError& e) {
    err << "numeric failure: " << e.what() << '\n';
    return kExitNumeric;
  } catch (const fs::filesystem_error& e) {
    err << "data error: " << e.what() << '\n';
    return kExitData;
  }
}

}  // namespace sparsecbm
