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

#include "sparsecbm/data.hpp"

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

#include "sparsecbm/error.hpp"
#include "sparsecbm/rng.hpp"

namespace sparsecbm {

using nlohmann::json;

Vocabulary::Vocabulary() {
  add("<pad>");
  add("<unk>");
}

int Vocabulary::add(const std::string& token) {
  auto it = token_to_id_.find(token);
  if (it != token_to_id_.end()) return it->second;
  const int id = static_cast<int>(id_to_token_.size());
  token_to_id_.emplace(token, id);
  id_to_token_.push_back(token);
  return id;
}

int Vocabulary::lookup(std::string_view token) const {
  auto it = token_to_id_.find(token);
  return it == token_to_id_.end() ? kUnk : it->second;
}

json Vocabulary::to_json() const {
  json j = json::object();
  for (const auto& [tok, id] : token_to_id_) j[tok] = id;
  return j;
}

Vocabulary Vocabulary::from_json(const json& j) {
  if (!j.is_object()) throw DataError("vocab: expected a JSON object of token -> id");
  std::vector<std::string> by_id(j.size());
  std::vector<bool> seen(j.size(), false);
  for (const auto& [tok, id_json] : j.items()) {
    if (!id_json.is_number_integer()) throw DataError("vocab: id of '" + tok + "' is not an integer");
    const auto id = id_json.get<long long>();
    if (id < 0 || static_cast<std::size_t>(id) >= by_id.size() || seen[static_cast<std::size_t>(id)]) {
      throw DataError("vocab: ids must be dense and unique; bad id for '" + tok + "'");
    }
    seen[static_cast<std::size_t>(id)] = true;
    by_id[static_cast<std::size_t>(id)] = tok;
  }
  if (by_id.size() < 2 || by_id[0] != "<pad>" || by_id[1] != "<unk>") {
    throw DataError("vocab: <pad> and <unk> must have ids 0 and 1");
  }
  Vocabulary v;
  for (std::size_t i = 2; i < by_id.size(); ++i) v.add(by_id[i]);
  return v;
}

void DatasetSchema::validate() const {
  if (concept_names.empty()) throw DataError("schema: need at least one concept");
  if (concept_class_names.size() < 2) throw DataError("schema: need at least two concept classes");
  if (task_class_count < 2) throw DataError("schema: need at least two task classes");
  if (max_len < 1) throw DataError("schema: max_len must be >= 1");
  std::set<std::string> names(concept_names.begin(), concept_names.end());
  if (names.size() != concept_names.size()) throw DataError("schema: duplicate concept name");
  std::set<std::string> classes(concept_class_names.begin(), concept_class_names.end());
  if (classes.size() != concept_class_names.size()) throw DataError("schema: duplicate class name");
}

std::optional<std::size_t> DatasetSchema::concept_index(std::string_view name) const {
  for (std::size_t i = 0; i < concept_names.size(); ++i) {
    if (concept_names[i] == name) return i;
  }
  return std::nullopt;
}

std::optional<std::size_t> DatasetSchema::class_index(std::string_view name) const {
  for (std::size_t i = 0; i < concept_class_names.size(); ++i) {
    if (concept_class_names[i] == name) return i;
  }
  return std::nullopt;
}

json DatasetSchema::to_json() const {
  return json{{"concept_names", concept_names},
              {"concept_class_names", concept_class_names},
              {"task_class_count", task_class_count},
              {"max_len", max_len}};
}

DatasetSchema DatasetSchema::from_json(const json& j) {
  DatasetSchema s;
  try {
    s.concept_names = j.at("concept_names").get<std::vector<std::string>>();
    if (j.contains("concept_class_names")) {
      s.concept_class_names = j.at("concept_class_names").get<std::vector<std::string>>();
    }
    s.task_class_count = j.at("task_class_count").get<std::size_t>();
    if (j.contains("max_len")) s.max_len = j.at("max_len").get<std::size_t>();
  } catch (const json::exception& e) {
    throw DataError(std::string("schema: ") + e.what());
  }
  s.validate();
  return s;
}

std::vector<std::string> split_words(std::string_view text) {
  std::vector<std::string> out;
  std::string cur;
  auto flush = [&] {
    if (!cur.empty()) out.push_back(std::move(cur));
    cur.clear();
  };
  for (char ch : text) {
    const auto c = static_cast<unsigned char>(ch);
    if (std::isspace(c)) {
      flush();
    } else if (c < 0x80 && std::ispunct(c)) {
      flush();
      out.emplace_back(1, ch);
    } else {
      cur.push_back(static_cast<char>(std::tolower(c)));
    }
  }
  flush();
  return out;
}

std::vector<int> tokenize(std::string_view text, const Vocabulary& vocab, std::size_t max_len) {
  if (max_len < 1) throw UsageError("tokenize: max_len must be >= 1");
  std::vector<int> ids;
  for (const auto& w : split_words(text)) {
    if (ids.size() == max_len) break;
    ids.push_back(vocab.lookup(w));
  }
  return ids;
}

namespace {

Example make_example(const Record& r, const Vocabulary& vocab, const DatasetSchema& schema) {
  return Example{tokenize(r.text, vocab, schema.max_len), r.concepts, r.label};
}

Record parse_record(const std::string& line, std::size_t line_no, const DatasetSchema& schema) {
  auto fail = [&](const std::string& msg) -> DataError {
    return DataError("line " + std::to_string(line_no) + ": " + msg);
  };
  json j;
  try {
    j = json::parse(line);
  } catch (const json::parse_error& e) {
    throw fail(std::string("malformed JSON: ") + e.what());
  }
  if (!j.is_object()) throw fail("expected a JSON object");
  Record r;
  if (!j.contains("text") || !j["text"].is_string()) throw fail("missing string field \"text\"");
  r.text = j["text"].get<std::string>();
  if (!j.contains("label") || !j["label"].is_number_integer()) {
    throw fail("missing integer field \"label\"");
  }
  const auto label = j["label"].get<long long>();
  if (label < 0 || static_cast<std::size_t>(label) >= schema.task_class_count) {
    throw fail("label " + std::to_string(label) + " outside [0, " +
               std::to_string(schema.task_class_count) + ")");
  }
  r.label = static_cast<std::size_t>(label);

  if (!j.contains("concepts") || !j["concepts"].is_object()) throw fail("missing object field \"concepts\"");
  const auto unknown = schema.class_index("unknown");
  std::vector<std::optional<std::size_t>> concepts(schema.num_concepts());
  for (const auto& [name, value] : j["concepts"].items()) {
    const auto k = schema.concept_index(name);
    if (!k) throw fail("unknown concept '" + name + "'");
    if (!value.is_string()) throw fail("concept '" + name + "' must map to a class name");
    const auto c = schema.class_index(value.get<std::string>());
    if (!c) throw fail("unknown class '" + value.get<std::string>() + "' for concept '" + name + "'");
    concepts[*k] = *c;
  }
  r.concepts.resize(schema.num_concepts());
  for (std::size_t k = 0; k < concepts.size(); ++k) {
    if (concepts[k]) {
      r.concepts[k] = *concepts[k];
    } else if (unknown) {
      r.concepts[k] = *unknown;
    } else {
      throw fail("concept '" + schema.concept_names[k] + "' missing and schema has no 'unknown' class");
    }
  }
  if (j.contains("debug") && j["debug"].is_object() && j["debug"].contains("noise")) {
    r.noise = j["debug"]["noise"].get<int>();
  }
  return r;
}

}  // namespace

Split parse_jsonl(std::istream& in, const DatasetSchema& schema, const Vocabulary& vocab) {
  Split split;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    split.records.push_back(parse_record(line, line_no, schema));
    split.examples.push_back(make_example(split.records.back(), vocab, schema));
  }
  return split;
}

Split load_jsonl(const std::filesystem::path& path, const DatasetSchema& schema,
                 const Vocabulary& vocab) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path.string());
  try {
    return parse_jsonl(in, schema, vocab);
  } catch (const DataError& e) {
    throw DataError(path.string() + ": " + e.what());
  }
}

json record_to_json(const Record& r, const DatasetSchema& schema) {
  json concepts = json::object();
  for (std::size_t k = 0; k < r.concepts.size(); ++k) {
    concepts[schema.concept_names.at(k)] = schema.concept_class_names.at(r.concepts[k]);
  }
  json j{{"text", r.text}, {"concepts", concepts}, {"label", r.label}};
  if (r.noise) j["debug"] = json{{"noise", *r.noise}};
  return j;
}

void write_jsonl(std::ostream& out, const Split& split, const DatasetSchema& schema) {
  for (const auto& r : split.records) out << record_to_json(r, schema).dump() << '\n';
}

void write_jsonl(const std::filesystem::path& path, const Split& split,
                 const DatasetSchema& schema) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  write_jsonl(out, split, schema);
}

// --- synthetic generator ----------------------------------------------------

namespace {

struct PhrasePool {
  std::array<const char*, 2> nouns;
  std::array<const char*, 4> positive;
  std::array<const char*, 4> negative;
};

struct ConceptBank {
  const char* name;
  std::array<PhrasePool, 2> pools;  // [0] regular, [1] shifted (disjoint words)
};

// clang-format off
constexpr std::array<ConceptBank, kMaxSynthConcepts> kBanks{{
    {"Food",
     {{{{"food", "dishes"}, {"delicious", "tasty", "flavorful", "superb"},
        {"bland", "stale", "greasy", "inedible"}},
       {{"meal", "cuisine"}, {"scrumptious", "savory", "mouthwatering", "delectable"},
        {"tasteless", "soggy", "overcooked", "rancid"}}}}},
    {"Ambiance",
     {{{{"ambiance", "decor"}, {"cozy", "charming", "elegant", "inviting"},
        {"dreary", "drab", "tacky", "gloomy"}},
       {{"atmosphere", "interior"}, {"romantic", "stylish", "warm", "enchanting"},
        {"sterile", "shabby", "dingy", "cramped"}}}}},
    {"Service",
     {{{{"service", "staff"}, {"attentive", "friendly", "prompt", "courteous"},
        {"rude", "slow", "careless", "dismissive"}},
       {{"waiter", "server"}, {"gracious", "helpful", "welcoming", "professional"},
        {"surly", "inattentive", "sloppy", "arrogant"}}}}},
    {"Noise",
     {{{{"noise", "music"}, {"quiet", "calm", "peaceful", "soothing"},
        {"loud", "deafening", "noisy", "blaring"}},
       {{"sound", "volume"}, {"hushed", "tranquil", "mellow", "serene"},
        {"chaotic", "clamorous", "booming", "raucous"}}}}},
}};

// {n} = noun, {a} = adjective. Pool 1 frames share no content words with pool 0.
constexpr std::array<std::array<const char*, 4>, 2> kFrames{{
    {"the {n} was {a}", "really {a} {n}", "we found the {n} {a}", "{a} {n} overall"},
    {"honestly the {n} seemed {a}", "what {a} {n}", "the {n} felt {a} tonight", "such {a} {n} here"},
}};

constexpr std::array<const char*, 4> kFillers{
    "we visited last week", "it was a saturday night", "came here with friends", ""};
// clang-format on

constexpr std::array<double, kMaxSynthConcepts> kWeights{1.0, 0.5, 0.75, 0.25};

std::string render(const char* frame, const char* noun, const char* adj) {
  std::string out = frame;
  auto sub = [&](const std::string& key, const char* val) {
    for (auto pos = out.find(key); pos != std::string::npos; pos = out.find(key)) {
      out.replace(pos, key.size(), val);
    }
  };
  sub("{n}", noun);
  sub("{a}", adj);
  return out;
}

std::string phrase(std::size_t k, int polarity, std::size_t pool, std::size_t j) {
  const auto& p = kBanks[k].pools[pool];
  const char* adj = polarity > 0 ? p.positive[j] : p.negative[j];
  return render(kFrames[pool][j], p.nouns[j % 2], adj);
}

void check_synth_shape(std::size_t k, std::size_t v, std::size_t c) {
  if (k < 1 || k > kMaxSynthConcepts) {
    throw UsageError("synthetic data supports 1.." + std::to_string(kMaxSynthConcepts) + " concepts");
  }
  if (v != 2 && v != 3) throw UsageError("synthetic data supports 2 or 3 concept classes");
  if (c < 2) throw UsageError("need at least 2 task classes");
}

}  // namespace

std::vector<double> synth_concept_weights(std::size_t num_concepts) {
  return {kWeights.begin(), kWeights.begin() + static_cast<std::ptrdiff_t>(num_concepts)};
}

DatasetSchema synth_schema(std::size_t num_concepts, std::size_t concept_classes,
                           std::size_t task_classes, std::size_t max_len) {
  check_synth_shape(num_concepts, concept_classes, task_classes);
  DatasetSchema s;
  for (std::size_t k = 0; k < num_concepts; ++k) s.concept_names.emplace_back(kBanks[k].name);
  s.concept_class_names = {"Negative", "Positive"};
  if (concept_classes == 3) s.concept_class_names.emplace_back("unknown");
  s.task_class_count = task_classes;
  s.max_len = max_len;
  return s;
}

Vocabulary synth_vocabulary(std::size_t num_concepts) {
  std::set<std::string> words{"and", "."};
  auto add_words = [&](const std::string& text) {
    for (auto& w : split_words(text)) words.insert(std::move(w));
  };
  for (std::size_t k = 0; k < num_concepts; ++k) {
    for (std::size_t pool = 0; pool < 2; ++pool) {
      for (std::size_t j = 0; j < 4; ++j) {
        add_words(phrase(k, +1, pool, j));
        add_words(phrase(k, -1, pool, j));
      }
    }
  }
  for (const char* f : kFillers) add_words(f);
  Vocabulary v;
  for (const auto& w : words) v.add(w);
  return v;
}

int concept_polarity(const DatasetSchema& schema, std::size_t concept_class) {
  const auto& name = schema.concept_class_names.at(concept_class);
  if (name == "Negative") return -1;
  if (name == "Positive") return +1;
  return 0;
}

std::size_t synth_label_rule(const DatasetSchema& schema, const std::vector<std::size_t>& concepts) {
  const auto w = synth_concept_weights(schema.num_concepts());
  const double c = static_cast<double>(schema.task_class_count);
  double score = (c - 1.0) / 2.0;
  for (std::size_t k = 0; k < concepts.size(); ++k) score += w[k] * concept_polarity(schema, concepts[k]);
  const double rounded = std::clamp(std::round(score), 0.0, c - 1.0);
  return static_cast<std::size_t>(rounded);
}

SynthResult synth_generate(const SynthSpec& spec) {
  if (spec.n < 1) throw UsageError("synth_generate: n must be >= 1");
  SynthResult out{synth_schema(spec.num_concepts, spec.concept_classes, spec.task_classes, spec.max_len),
                  synth_vocabulary(spec.num_concepts), {}};
  const auto& schema = out.schema;
  const auto num_classes = static_cast<int>(schema.task_class_count);
  Rng rng(spec.seed);
  out.split.records.reserve(spec.n);
  out.split.examples.reserve(spec.n);
  for (std::size_t i = 0; i < spec.n; ++i) {
    Record r;
    r.concepts.resize(spec.num_concepts);
    for (auto& c : r.concepts) c = rng.below(spec.concept_classes);

    std::string filler = kFillers[rng.below(kFillers.size())];
    std::vector<std::string> phrases;
    for (std::size_t k = 0; k < spec.num_concepts; ++k) {
      const int pol = concept_polarity(schema, r.concepts[k]);
      if (pol == 0) continue;
      const std::size_t pool = spec.shift && rng.bernoulli(0.5) ? 1 : 0;
      phrases.push_back(phrase(k, pol, pool, rng.below(4)));
    }
    rng.shuffle(std::span<std::string>(phrases));

    std::string text = filler;
    for (std::size_t p = 0; p < phrases.size(); ++p) {
      if (!text.empty()) text += p == 0 ? " . " : " and ";
      text += phrases[p];
    }
    r.text = std::move(text);

    int label = static_cast<int>(synth_label_rule(schema, r.concepts));
    int delta = 0;
    if (rng.bernoulli(spec.label_noise)) {
      delta = rng.bernoulli(0.5) ? 1 : -1;
      if (label + delta < 0 || label + delta >= num_classes) delta = -delta;
      label += delta;
    }
    r.label = static_cast<std::size_t>(label);
    r.noise = delta;

    out.split.examples.push_back(make_example(r, out.vocab, schema));
    out.split.records.push_back(std::move(r));
  }
  return out;
}

// --- dataset directories ----------------------------------------------------

const Split& DatasetDir::split(const std::string& name) const {
  auto it = splits.find(name);
  if (it == splits.end()) throw DataError("dataset has no '" + name + "' split");
  return it->second;
}

DatasetDir generate_dataset(const GenerateOptions& o) {
  const std::array<std::pair<const char*, std::size_t>, 3> plan{
      {{"train", o.n_train}, {"dev", o.n_dev}, {"test", o.n_test}}};
  DatasetDir d{synth_schema(o.num_concepts, o.concept_classes, o.task_classes, o.max_len),
               synth_vocabulary(o.num_concepts), {}};
  for (std::size_t s = 0; s < plan.size(); ++s) {
    const auto& [name, n] = plan[s];
    if (n == 0) throw UsageError(std::string("split '") + name + "' must have at least one example");
    SynthSpec spec;
    spec.seed = mix_seed(o.seed, s);
    spec.n = n;
    spec.num_concepts = o.num_concepts;
    spec.concept_classes = o.concept_classes;
    spec.task_classes = o.task_classes;
    spec.shift = o.shift && std::string(name) == "test";
    spec.max_len = o.max_len;
    d.splits[name] = synth_generate(spec).split;
  }
  return d;
}

void write_dataset_dir(const std::filesystem::path& dir, const DatasetDir& data) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw DataError("cannot create " + dir.string() + ": " + ec.message());
  for (const auto& [name, split] : data.splits) write_jsonl(dir / (name + ".jsonl"), split, data.schema);
  auto write_json = [&](const std::filesystem::path& p, const json& j) {
    std::ofstream out(p, std::ios::binary);
    if (!out) throw DataError("cannot write " + p.string());
    out << j.dump(2) << '\n';
  };
  write_json(dir / "vocab.json", data.vocab.to_json());
  write_json(dir / "schema.json", data.schema.to_json());
}

DatasetDir load_dataset_dir(const std::filesystem::path& dir) {
  auto read_json = [&](const std::filesystem::path& p) {
    std::ifstream in(p);
    if (!in) throw DataError("cannot open " + p.string());
    try {
      return json::parse(in);
    } catch (const json::parse_error& e) {
      throw DataError(p.string() + ": " + e.what());
    }
  };
  DatasetDir d{DatasetSchema::from_json(read_json(dir / "schema.json")),
               Vocabulary::from_json(read_json(dir / "vocab.json")), {}};
  for (const char* name : {"train", "dev", "test"}) {
    const auto p = dir / (std::string(name) + ".jsonl");
    if (std::filesystem::exists(p)) d.splits[name] = load_jsonl(p, d.schema, d.vocab);
  }
  return d;
}

}  // namespace sparsecbm
