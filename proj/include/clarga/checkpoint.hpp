#pragma once

#include <fstream>
#include <string>

#include <nlohmann/json.hpp>

#include "clarga/binary_io.hpp"
#include "clarga/config.hpp"
#include "clarga/errors.hpp"
#include "clarga/model.hpp"

namespace clarga {

// Checkpoint layout, little-endian:
//   "CLRGCK01"          8 bytes
//   u64 header_length
//   header_length bytes of JSON:
//     {"format": "clarga-checkpoint", "version": 1, "config": {...},
//      "config_hash": "<16 hex>", "tensors": [{"name", "shape"}...]}
//   f64 payloads for each tensor in header order, row-major
inline constexpr char kCheckpointMagic[8] = {'C', 'L', 'R', 'G', 'C', 'K', '0', '1'};

inline void save_checkpoint(const std::string& path, const Model& model,
                            const json& extra = json::object()) {
  json header;
  header["format"] = "clarga-checkpoint";
  header["version"] = 1;
  header["config"] = model_to_json(model.config());
  header["config_hash"] = model_config_hash(model.config());
  header["tensors"] = json::array();
  const auto params = model.named_parameters();
  for (const auto& p : params)
    header["tensors"].push_back({{"name", p.name}, {"shape", p.tensor.shape()}});
  if (!extra.empty()) header["extra"] = extra;
  const std::string text = header.dump();

  std::ofstream os(path, std::ios::binary);
  if (!os) throw CheckpointError("cannot open " + path + " for writing");
  os.write(kCheckpointMagic, 8);
  le::put_u64(os, text.size());
  os.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const auto& p : params)
    for (double v : p.tensor.data()) le::put_f64(os, v);
  if (!os) throw CheckpointError("write failed for " + path);
}

inline json read_checkpoint_header(std::istream& is, const std::string& path) {
  char magic[8];
  if (!is.read(magic, 8) || !std::equal(magic, magic + 8, kCheckpointMagic)) {
    throw CheckpointError(path + ": not a checkpoint (bad magic)");
  }
  std::uint64_t n = 0;
  try {
    n = le::get_u64(is, "header length");
  } catch (const DataError& e) {
    throw CheckpointError(path + ": " + e.what());
  }
  if (n > (1u << 26)) throw CheckpointError(path + ": implausible header length");
  std::string text(n, '\0');
  if (!is.read(text.data(), static_cast<std::streamsize>(n))) {
    throw CheckpointError(path + ": truncated header");
  }
  try {
    return json::parse(text);
  } catch (const json::exception& e) {
    throw CheckpointError(path + ": malformed header: " + e.what());
  }
}

// Rebuilds the model described by the header and fills its parameters. When
// `expected` is given, its hash must match the stored one.
inline Model load_checkpoint(const std::string& path,
                             const ModelConfig* expected = nullptr,
                             json* extra = nullptr) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw CheckpointError("cannot open checkpoint " + path);
  const json header = read_checkpoint_header(is, path);
  ModelConfig cfg;
  try {
    if (header.value("format", "") != "clarga-checkpoint" || header.value("version", 0) != 1) {
      throw CheckpointError(path + ": unsupported checkpoint format");
    }
    cfg = model_from_json(header.at("config"));
  } catch (const ConfigError& e) {
    throw CheckpointError(path + ": bad config in header: " + e.what());
  } catch (const json::exception& e) {
    throw CheckpointError(path + ": bad header: " + e.what());
  }
  const std::string stored = header.value("config_hash", "");
  if (stored != model_config_hash(cfg)) {
    throw CheckpointError(path + ": config hash does not match header config");
  }
  if (expected != nullptr && model_config_hash(*expected) != stored) {
    throw CheckpointError(path + ": checkpoint config hash " + stored +
                          " does not match requested model " +
                          model_config_hash(*expected));
  }
  Rng unused(0);
  Model model = Model::create(cfg, unused);
  auto params = model.named_parameters();
  const json& tensors = header.at("tensors");
  if (tensors.size() != params.size()) {
    throw CheckpointError(path + ": tensor count mismatch");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (tensors[i].at("name") != params[i].name ||
        tensors[i].at("shape").get<Shape>() != params[i].tensor.shape()) {
      throw CheckpointError(path + ": tensor " + params[i].name + " shape mismatch");
    }
    auto dst = params[i].tensor.mutable_data();
    try {
      for (auto& v : dst) v = le::get_f64(is, "payload");
    } catch (const DataError&) {
      throw CheckpointError(path + ": truncated payload in " + params[i].name);
    }
  }
  if (is.peek() != std::char_traits<char>::eof()) {
    throw CheckpointError(path + ": trailing bytes after payload");
  }
  if (extra != nullptr) *extra = header.value("extra", json::object());
  return model;
}

}  // namespace clarga
