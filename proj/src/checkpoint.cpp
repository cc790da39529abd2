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

#include "sparsecbm/checkpoint.hpp"

#include <array>
#include <bit>
#include <fstream>

#include "sparsecbm/error.hpp"

namespace sparsecbm {

using nlohmann::json;

namespace {

constexpr std::string_view kAlphabet =
    "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";

std::string encode_doubles(std::span<const double> values) {
  std::vector<std::uint8_t> bytes;
  bytes.reserve(values.size() * 8);
  for (double v : values) {
    auto bits = std::bit_cast<std::uint64_t>(v);
    for (int i = 0; i < 8; ++i) {
      bytes.push_back(static_cast<std::uint8_t>(bits & 0xFF));
      bits >>= 8;
    }
  }
  return base64_encode(bytes);
}

std::vector<double> decode_doubles(std::string_view text, std::size_t expected, const std::string& what) {
  const auto bytes = base64_decode(text);
  if (bytes.size() != expected * 8) {
    throw DataError("checkpoint: block '" + what + "' has " + std::to_string(bytes.size()) +
                    " bytes, expected " + std::to_string(expected * 8));
  }
  std::vector<double> out(expected);
  for (std::size_t i = 0; i < expected; ++i) {
    std::uint64_t bits = 0;
    for (int b = 7; b >= 0; --b) bits = (bits << 8) | bytes[i * 8 + static_cast<std::size_t>(b)];
    out[i] = std::bit_cast<double>(bits);
  }
  return out;
}

std::string encode_bits(const Mask& m) {
  std::vector<std::uint8_t> bytes((m.size() + 7) / 8, 0);
  for (std::size_t i = 0; i < m.size(); ++i) {
    if (m[i]) bytes[i / 8] |= static_cast<std::uint8_t>(1u << (i % 8));
  }
  return base64_encode(bytes);
}

Mask decode_bits(std::string_view text, std::size_t length) {
  const auto bytes = base64_decode(text);
  if (bytes.size() != (length + 7) / 8) throw DataError("checkpoint: mask has wrong length");
  Mask m(length);
  for (std::size_t i = 0; i < length; ++i) m[i] = (bytes[i / 8] >> (i % 8)) & 1u;
  return m;
}

}  // namespace

std::string base64_encode(std::span<const std::uint8_t> bytes) {
  std::string out;
  out.reserve((bytes.size() + 2) / 3 * 4);
  std::size_t i = 0;
  for (; i + 2 < bytes.size(); i += 3) {
    const std::uint32_t v = (bytes[i] << 16) | (bytes[i + 1] << 8) | bytes[i + 2];
    out += kAlphabet[(v >> 18) & 63];
    out += kAlphabet[(v >> 12) & 63];
    out += kAlphabet[(v >> 6) & 63];
    out += kAlphabet[v & 63];
  }
  const std::size_t rest = bytes.size() - i;
  if (rest == 1) {
    const std::uint32_t v = bytes[i] << 16;
    out += kAlphabet[(v >> 18) & 63];
    out += kAlphabet[(v >> 12) & 63];
    out += "==";
  } else if (rest == 2) {
    const std::uint32_t v = (bytes[i] << 16) | (bytes[i + 1] << 8);
    out += kAlphabet[(v >> 18) & 63];
    out += kAlphabet[(v >> 12) & 63];
    out += kAlphabet[(v >> 6) & 63];
    out += '=';
  }
  return out;
}

std::vector<std::uint8_t> base64_decode(std::string_view text) {
  std::array<int, 256> lookup;
  lookup.fill(-1);
  for (std::size_t i = 0; i < kAlphabet.size(); ++i) lookup[static_cast<unsigned char>(kAlphabet[i])] = static_cast<int>(i);
  if (text.size() % 4 != 0) throw DataError("base64: length not a multiple of 4");
  std::vector<std::uint8_t> out;
  out.reserve(text.size() / 4 * 3);
  for (std::size_t i = 0; i < text.size(); i += 4) {
    std::uint32_t v = 0;
    int pad = 0;
    for (std::size_t j = 0; j < 4; ++j) {
      const char c = text[i + j];
      if (c == '=' && i + 4 == text.size() && j >= 2) {
        ++pad;
        v <<= 6;
        continue;
      }
      const int d = lookup[static_cast<unsigned char>(c)];
      if (d < 0 || pad > 0) throw DataError("base64: invalid character");
      v = (v << 6) | static_cast<std::uint32_t>(d);
    }
    out.push_back(static_cast<std::uint8_t>((v >> 16) & 0xFF));
    if (pad < 2) out.push_back(static_cast<std::uint8_t>((v >> 8) & 0xFF));
    if (pad < 1) out.push_back(static_cast<std::uint8_t>(v & 0xFF));
  }
  return out;
}

json checkpoint_to_json(const Checkpoint& ckpt) {
  const auto& p = ckpt.params;
  json blocks = json::array();
  for (const auto& b : p.values().block_map()) {
    blocks.push_back(json{{"name", b.name},
                          {"rows", b.rows},
                          {"cols", b.cols},
                          {"data", encode_doubles(p.values().values().subspan(b.offset, b.size()))}});
  }
  json masks = json::array();
  for (std::size_t k = 0; k < ckpt.masks.size(); ++k) {
    masks.push_back(json{{"concept", ckpt.schema.concept_names.at(k)}, {"data", encode_bits(ckpt.masks[k])}});
  }
  json j{{"version", kCheckpointVersion}, {"config", p.config().to_json()},
         {"schema", ckpt.schema.to_json()}, {"vocab", ckpt.vocab.to_json()},
         {"info", ckpt.info},           {"blocks", blocks},
         {"masks", masks}};
  if (!p.concept_deltas.empty()) {
    json deltas = json::array();
    for (std::size_t k = 0; k < p.concept_deltas.size(); ++k) {
      deltas.push_back(json{{"concept", ckpt.schema.concept_names.at(k)},
                            {"data", encode_doubles(p.concept_deltas[k])}});
    }
    j["deltas"] = deltas;
  }
  return j;
}

Checkpoint checkpoint_from_json(const json& j) {
  try {
    if (!j.is_object() || !j.contains("version")) throw DataError("checkpoint: missing version tag");
    const int version = j.at("version").get<int>();
    if (version != kCheckpointVersion) {
      throw DataError("checkpoint: unsupported version " + std::to_string(version) + " (expected " +
                      std::to_string(kCheckpointVersion) + ")");
    }
    const auto config = ModelConfig::from_json(j.at("config"));
    auto schema = DatasetSchema::from_json(j.at("schema"));
    auto vocab = j.contains("vocab") ? Vocabulary::from_json(j.at("vocab")) : Vocabulary{};
    if (schema.num_concepts() != config.num_concepts ||
        schema.num_concept_classes() != config.concept_classes ||
        schema.task_class_count != config.task_classes) {
      throw DataError("checkpoint: schema does not match model config");
    }
    ModelParams params(config);
    const auto& layout = params.values().block_map();
    const auto& blocks = j.at("blocks");
    if (blocks.size() != layout.size()) throw DataError("checkpoint: wrong number of parameter blocks");
    for (std::size_t i = 0; i < layout.size(); ++i) {
      const auto& bj = blocks[i];
      const auto& b = layout[i];
      if (bj.at("name").get<std::string>() != b.name || bj.at("rows").get<std::size_t>() != b.rows ||
          bj.at("cols").get<std::size_t>() != b.cols) {
        throw DataError("checkpoint: block " + std::to_string(i) + " does not match layout (expected " +
                        b.name + ")");
      }
      const auto data = decode_doubles(bj.at("data").get<std::string>(), b.size(), b.name);
      std::copy(data.begin(), data.end(), params.values().values().begin() + static_cast<std::ptrdiff_t>(b.offset));
    }
    std::vector<Mask> masks;
    for (const auto& mj : j.at("masks")) {
      masks.push_back(decode_bits(mj.at("data").get<std::string>(), params.prunable_size()));
    }
    if (masks.size() != config.num_concepts) throw DataError("checkpoint: expected one mask per concept");
    if (j.contains("deltas")) {
      for (const auto& dj : j.at("deltas")) {
        params.concept_deltas.push_back(
            decode_doubles(dj.at("data").get<std::string>(), params.prunable_size(), "delta"));
      }
      if (params.concept_deltas.size() != config.num_concepts) {
        throw DataError("checkpoint: expected one delta per concept");
      }
    }
    return Checkpoint{std::move(params), MaskSet(std::move(masks)), std::move(schema), std::move(vocab),
                      j.value("info", json::object())};
  } catch (const json::exception& e) {
    throw DataError(std::string("checkpoint: ") + e.what());
  }
}

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  out << checkpoint_to_json(ckpt).dump() << '\n';
  if (!out) throw DataError("write failed: " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw DataError(path.string() + ": corrupted checkpoint: " + e.what());
  }
  return checkpoint_from_json(j);
}

}  // namespace sparsecbm
