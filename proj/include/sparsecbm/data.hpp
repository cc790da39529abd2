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

// Dataset schema, tokenization, JSONL I/O and the synthetic review generator.
#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

namespace sparsecbm {

class Vocabulary {
 public:
  static constexpr int kPad = 0;
  static constexpr int kUnk = 1;

  /// Starts with <pad> = 0 and <unk> = 1.
  Vocabulary();

  /// Returns the existing id or appends a new one.
  int add(const std::string& token);
  /// Id of a lowercased token, or kUnk.
  int lookup(std::string_view token) const;
  const std::string& token(int id) const { return id_to_token_.at(static_cast<std::size_t>(id)); }
  std::size_t size() const { return id_to_token_.size(); }

  nlohmann::json to_json() const;
  /// Ids must be dense in [0, size) with <pad>/<unk> at 0/1.
  static Vocabulary from_json(const nlohmann::json& j);

  bool operator==(const Vocabulary&) const = default;

 private:
  std::map<std::string, int, std::less<>> token_to_id_;
  std::vector<std::string> id_to_token_;
};

struct DatasetSchema {
  std::vector<std::string> concept_names;
  std::vector<std::string> concept_class_names{"Negative", "Positive", "unknown"};
  std::size_t task_class_count = 5;
  std::size_t max_len = 512;

  std::size_t num_concepts() const { return concept_names.size(); }
  std::size_t num_concept_classes() const { return concept_class_names.size(); }

  /// Throws DataError unless K >= 1, V >= 2, C >= 2, max_len >= 1.
  void validate() const;
  std::optional<std::size_t> concept_index(std::string_view name) const;
  std::optional<std::size_t> class_index(std::string_view name) const;

  nlohmann::json to_json() const;
  static DatasetSchema from_json(const nlohmann::json& j);

  bool operator==(const DatasetSchema&) const = default;
};

/// The unit of supervision: token ids, K concept classes and a task class.
struct Example {
  std::vector<int> token_ids;
  std::vector<std::size_t> concept_labels;
  std::size_t task_label = 0;
};

/// Source form of an example, kept so splits can be re-serialized.
struct Record {
  std::string text;
  std::vector<std::size_t> concepts;
  std::size_t label = 0;
  /// Generator sidecar: label shift applied by label noise (-1, 0 or +1).
  std::optional<int> noise;
};

struct Split {
  std::vector<Record> records;
  std::vector<Example> examples;

  std::size_t size() const { return examples.size(); }
};

/// Lowercases and splits on whitespace; each ASCII punctuation character is
/// its own token.
std::vector<std::string> split_words(std::string_view text);

/// Maps words to ids (UNK for unknown) and keeps the first max_len. No padding.
std::vector<int> tokenize(std::string_view text, const Vocabulary& vocab, std::size_t max_len);

/// One JSON object per line: {"text", "concepts": {name: class}, "label"}.
/// Throws DataError naming the offending line.
Split parse_jsonl(std::istream& in, const DatasetSchema& schema, const Vocabulary& vocab);
Split load_jsonl(const std::filesystem::path& path, const DatasetSchema& schema,
                 const Vocabulary& vocab);

nlohmann::json record_to_json(const Record& r, const DatasetSchema& schema);
void write_jsonl(std::ostream& out, const Split& split, const DatasetSchema& schema);
void write_jsonl(const std::filesystem::path& path, const Split& split,
                 const DatasetSchema& schema);

// --- synthetic generator ----------------------------------------------------

/// Number of built-in concept phrase banks (Food, Ambiance, Service, Noise).
inline constexpr std::size_t kMaxSynthConcepts = 4;

struct SynthSpec {
  std::uint64_t seed = 7;
  std::size_t n = 2000;
  std::size_t num_concepts = 4;
  std::size_t concept_classes = 3;
  std::size_t task_classes = 5;
  bool shift = false;
  double label_noise = 0.02;
  std::size_t max_len = 512;
};

/// Generator weights: (1.0, 0.5, 0.75, 0.25) truncated to K.
std::vector<double> synth_concept_weights(std::size_t num_concepts);
DatasetSchema synth_schema(std::size_t num_concepts, std::size_t concept_classes,
                           std::size_t task_classes, std::size_t max_len = 512);
/// Every word the generator can emit, both template pools included.
Vocabulary synth_vocabulary(std::size_t num_concepts);
/// -1 for "Negative", +1 for "Positive", 0 otherwise.
int concept_polarity(const DatasetSchema& schema, std::size_t concept_class);
/// clamp(round((C-1)/2 + sum_k w_k * polarity_k), 0, C-1).
std::size_t synth_label_rule(const DatasetSchema& schema, const std::vector<std::size_t>& concepts);

struct SynthResult {
  DatasetSchema schema;
  Vocabulary vocab;
  Split split;
};

/// Deterministic in spec.seed. Throws UsageError for n == 0 or unsupported K/V/C.
SynthResult synth_generate(const SynthSpec& spec);

// --- dataset directories ----------------------------------------------------

struct DatasetDir {
  DatasetSchema schema;
  Vocabulary vocab;
  std::map<std::string, Split> splits;  // "train", "dev", "test" when present

  const Split& split(const std::string& name) const;
};

struct GenerateOptions {
  std::uint64_t seed = 7;
  std::size_t n_train = 2000;
  std::size_t n_dev = 500;
  std::size_t n_test = 500;
  std::size_t num_concepts = 4;
  std::size_t concept_classes = 3;
  std::size_t task_classes = 5;
  /// Applies the disjoint template pool to the test split only.
  bool shift = false;
  std::size_t max_len = 512;
};

/// Splits are drawn from independent streams of one seed.
DatasetDir generate_dataset(const GenerateOptions& opts);
/// Writes train/dev/test.jsonl, vocab.json and schema.json.
void write_dataset_dir(const std::filesystem::path& dir, const DatasetDir& data);
DatasetDir load_dataset_dir(const std::filesystem::path& dir);

}  // namespace sparsecbm
