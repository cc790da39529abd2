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

// Versioned JSON checkpoint: parameters as base64 little-endian doubles in
// block-map order, masks as base64 bitsets (bit 0 = flat index 0, LSB first).
#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

#include "sparsecbm/data.hpp"
#include "sparsecbm/model.hpp"

namespace sparsecbm {

inline constexpr int kCheckpointVersion = 1;

struct Checkpoint {
  ModelParams params;
  MaskSet masks;
  DatasetSchema schema;
  Vocabulary vocab;
  /// Free-form provenance (training strategy, gamma, ...).
  nlohmann::json info = nlohmann::json::object();
};

std::string base64_encode(std::span<const std::uint8_t> bytes);
/// Throws DataError on characters outside the standard alphabet.
std::vector<std::uint8_t> base64_decode(std::string_view text);

nlohmann::json checkpoint_to_json(const Checkpoint& ckpt);
/// Throws DataError on a version mismatch or any structural problem.
Checkpoint checkpoint_from_json(const nlohmann::json& j);

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace sparsecbm
